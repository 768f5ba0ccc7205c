//! Tiny expression language for user-defined models.
//!
//! The grammar covers arithmetic (`+ - * / ^`, unary minus) and the calls
//! sin, cos, tan, exp, log, sqrt, pow. `^` is right-associative and binds
//! tighter than unary minus, so `-x^2` parses as `-(x^2)`. There are no
//! conditionals or loops: every expressible model is real-analytic on its
//! domain.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::odecore::{
    InitFn, InitJacFn, InputFn, IntegrationOptions, MatFn, OutputFn, Partials, RhsFn, SystemModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

// ---------------------------------------------------------------------------
// Lexer / parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| Error::Syntax {
                    pos: start,
                    msg: format!("bad number literal `{s}`"),
                })?;
                out.push((start, Tok::Num(v)));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(Error::Syntax { pos: i, msg: format!("unexpected character `{c}`") })
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let pos = self.here();
        match self.bump() {
            Some(t) if t == want => Ok(()),
            other => Err(Error::Syntax { pos, msg: format!("expected {want:?}, found {other:?}") }),
        }
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    // power := atom ('^' unary)?   (right-associative via recursion)
    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let pos = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.bump();
                    if name == "pow" {
                        let a = self.expr()?;
                        self.expect(Tok::Comma)?;
                        let b = self.expr()?;
                        self.expect(Tok::RParen)?;
                        return Ok(Expr::Pow(Box::new(a), Box::new(b)));
                    }
                    let f = match name.as_str() {
                        "sin" => Func::Sin,
                        "cos" => Func::Cos,
                        "tan" => Func::Tan,
                        "exp" => Func::Exp,
                        "log" => Func::Log,
                        "sqrt" => Func::Sqrt,
                        _ => {
                            return Err(Error::Syntax {
                                pos,
                                msg: format!("unknown function `{name}`"),
                            })
                        }
                    };
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::Call(f, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            other => Err(Error::Syntax { pos, msg: format!("unexpected {other:?}") }),
        }
    }
}

/// Parse one expression.
pub fn parse(text: &str) -> Result<Expr> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0, end: text.len() };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Syntax { pos: p.here(), msg: "trailing input".into() });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Printing (precedence-aware; print-then-parse is structurally identical)
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(..) => 3,
        Expr::Pow(..) => 4,
        Expr::Num(v) if *v < 0.0 => 3,
        _ => 5,
    }
}

fn write_expr(e: &Expr, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let p = prec(e);
    let parens = p < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Num(v) => write!(f, "{v}")?,
        Expr::Var(n) => write!(f, "{n}")?,
        Expr::Neg(a) => {
            write!(f, "-")?;
            write_expr(a, f, 3)?;
        }
        Expr::Add(a, b) => {
            write_expr(a, f, 1)?;
            write!(f, " + ")?;
            write_expr(b, f, 2)?;
        }
        Expr::Sub(a, b) => {
            write_expr(a, f, 1)?;
            write!(f, " - ")?;
            write_expr(b, f, 2)?;
        }
        Expr::Mul(a, b) => {
            write_expr(a, f, 2)?;
            write!(f, "*")?;
            write_expr(b, f, 3)?;
        }
        Expr::Div(a, b) => {
            write_expr(a, f, 2)?;
            write!(f, "/")?;
            write_expr(b, f, 3)?;
        }
        Expr::Pow(a, b) => {
            write_expr(a, f, 5)?;
            write!(f, "^")?;
            write_expr(b, f, 4)?;
        }
        Expr::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(a, f, 0)?;
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self, f, 0)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn apply_pow(a: f64, b: f64) -> Result<f64> {
    if a > 0.0 {
        return Ok(a.powf(b));
    }
    // Nonpositive base: only integer exponents are defined.
    if b.fract() == 0.0 && b.abs() < 1e15 {
        if a == 0.0 && b < 0.0 {
            return Err(Error::EvalDomain { op: "pow", arg: a });
        }
        return Ok(a.powi(b as i32));
    }
    Err(Error::EvalDomain { op: "pow", arg: a })
}

fn apply_func(f: Func, v: f64) -> Result<f64> {
    match f {
        Func::Sin => Ok(v.sin()),
        Func::Cos => Ok(v.cos()),
        Func::Tan => {
            let t = v.tan();
            if t.is_finite() {
                Ok(t)
            } else {
                Err(Error::EvalDomain { op: "tan", arg: v })
            }
        }
        Func::Exp => Ok(v.exp()),
        Func::Log => {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::EvalDomain { op: "log", arg: v })
            }
        }
        Func::Sqrt => {
            if v >= 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::EvalDomain { op: "sqrt", arg: v })
            }
        }
    }
}

/// Evaluate against a name -> value environment.
pub fn eval(expr: &Expr, env: &HashMap<String, f64>) -> Result<f64> {
    match expr {
        Expr::Num(v) => Ok(*v),
        Expr::Var(n) => env
            .get(n)
            .copied()
            .ok_or_else(|| Error::UnknownIdentifier { name: n.clone() }),
        Expr::Neg(a) => Ok(-eval(a, env)?),
        Expr::Add(a, b) => Ok(eval(a, env)? + eval(b, env)?),
        Expr::Sub(a, b) => Ok(eval(a, env)? - eval(b, env)?),
        Expr::Mul(a, b) => Ok(eval(a, env)? * eval(b, env)?),
        Expr::Div(a, b) => {
            let d = eval(b, env)?;
            if d == 0.0 {
                return Err(Error::EvalDomain { op: "div", arg: d });
            }
            Ok(eval(a, env)? / d)
        }
        Expr::Pow(a, b) => apply_pow(eval(a, env)?, eval(b, env)?),
        Expr::Call(f, a) => apply_func(*f, eval(a, env)?),
    }
}

/// Variable references resolved to slice indices for fast repeated evaluation.
#[derive(Debug, Clone)]
pub enum Bound {
    Num(f64),
    Var(usize),
    Neg(Box<Bound>),
    Add(Box<Bound>, Box<Bound>),
    Sub(Box<Bound>, Box<Bound>),
    Mul(Box<Bound>, Box<Bound>),
    Div(Box<Bound>, Box<Bound>),
    Pow(Box<Bound>, Box<Bound>),
    Call(Func, Box<Bound>),
}

impl Bound {
    pub fn eval(&self, vals: &[f64]) -> Result<f64> {
        match self {
            Bound::Num(v) => Ok(*v),
            Bound::Var(i) => Ok(vals[*i]),
            Bound::Neg(a) => Ok(-a.eval(vals)?),
            Bound::Add(a, b) => Ok(a.eval(vals)? + b.eval(vals)?),
            Bound::Sub(a, b) => Ok(a.eval(vals)? - b.eval(vals)?),
            Bound::Mul(a, b) => Ok(a.eval(vals)? * b.eval(vals)?),
            Bound::Div(a, b) => {
                let d = b.eval(vals)?;
                if d == 0.0 {
                    return Err(Error::EvalDomain { op: "div", arg: d });
                }
                Ok(a.eval(vals)? / d)
            }
            Bound::Pow(a, b) => apply_pow(a.eval(vals)?, b.eval(vals)?),
            Bound::Call(f, a) => apply_func(*f, a.eval(vals)?),
        }
    }
}

/// Resolve names against an ordered variable list.
pub fn bind(expr: &Expr, names: &[&str]) -> Result<Bound> {
    Ok(match expr {
        Expr::Num(v) => Bound::Num(*v),
        Expr::Var(n) => {
            let i = names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::UnknownIdentifier { name: n.clone() })?;
            Bound::Var(i)
        }
        Expr::Neg(a) => Bound::Neg(Box::new(bind(a, names)?)),
        Expr::Add(a, b) => Bound::Add(Box::new(bind(a, names)?), Box::new(bind(b, names)?)),
        Expr::Sub(a, b) => Bound::Sub(Box::new(bind(a, names)?), Box::new(bind(b, names)?)),
        Expr::Mul(a, b) => Bound::Mul(Box::new(bind(a, names)?), Box::new(bind(b, names)?)),
        Expr::Div(a, b) => Bound::Div(Box::new(bind(a, names)?), Box::new(bind(b, names)?)),
        Expr::Pow(a, b) => Bound::Pow(Box::new(bind(a, names)?), Box::new(bind(b, names)?)),
        Expr::Call(f, a) => Bound::Call(*f, Box::new(bind(a, names)?)),
    })
}

// ---------------------------------------------------------------------------
// Symbolic differentiation
// ---------------------------------------------------------------------------

fn const_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        Expr::Neg(a) => Some(-const_value(a)?),
        Expr::Add(a, b) => Some(const_value(a)? + const_value(b)?),
        Expr::Sub(a, b) => Some(const_value(a)? - const_value(b)?),
        Expr::Mul(a, b) => Some(const_value(a)? * const_value(b)?),
        Expr::Div(a, b) => Some(const_value(a)? / const_value(b)?),
        Expr::Pow(a, b) => apply_pow(const_value(a)?, const_value(b)?).ok(),
        Expr::Call(f, a) => apply_func(*f, const_value(a)?).ok(),
        Expr::Var(_) => None,
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 1.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        b
    } else if is_zero(&b) {
        a
    } else {
        Expr::Add(Box::new(a), Box::new(b))
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    if is_zero(&b) {
        a
    } else if is_zero(&a) {
        Expr::Neg(Box::new(b))
    } else {
        Expr::Sub(Box::new(a), Box::new(b))
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) || is_zero(&b) {
        num(0.0)
    } else if is_one(&a) {
        b
    } else if is_one(&b) {
        a
    } else {
        Expr::Mul(Box::new(a), Box::new(b))
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if is_zero(&a) {
        num(0.0)
    } else if is_one(&b) {
        a
    } else {
        Expr::Div(Box::new(a), Box::new(b))
    }
}

/// Symbolic partial derivative with respect to `var`.
///
/// `a^b` with non-constant exponent is differentiated through the rewrite
/// `exp(b*log(a))`, which restricts the base to positive values, matching the
/// Hill-term semantics.
pub fn differentiate(expr: &Expr, var: &str) -> Expr {
    match expr {
        Expr::Num(_) => num(0.0),
        Expr::Var(n) => {
            if n == var {
                num(1.0)
            } else {
                num(0.0)
            }
        }
        Expr::Neg(a) => {
            let da = differentiate(a, var);
            if is_zero(&da) {
                num(0.0)
            } else {
                Expr::Neg(Box::new(da))
            }
        }
        Expr::Add(a, b) => add(differentiate(a, var), differentiate(b, var)),
        Expr::Sub(a, b) => sub(differentiate(a, var), differentiate(b, var)),
        Expr::Mul(a, b) => add(
            mul(differentiate(a, var), (**b).clone()),
            mul((**a).clone(), differentiate(b, var)),
        ),
        Expr::Div(a, b) => {
            // (a'b - ab') / b^2
            let numer = sub(
                mul(differentiate(a, var), (**b).clone()),
                mul((**a).clone(), differentiate(b, var)),
            );
            div(numer, Expr::Pow(b.clone(), Box::new(num(2.0))))
        }
        Expr::Pow(a, b) => {
            if let Some(c) = const_value(b) {
                // c * a^(c-1) * a'
                let da = differentiate(a, var);
                mul(mul(num(c), Expr::Pow(a.clone(), Box::new(num(c - 1.0)))), da)
            } else if let Some(base) = const_value(a) {
                // base^b * ln(base) * b'
                mul(
                    mul(expr.clone(), num(base.ln())),
                    differentiate(b, var),
                )
            } else {
                // a^b = exp(b*log(a)), valid for a > 0
                let rewritten = Expr::Call(
                    Func::Exp,
                    Box::new(Expr::Mul(b.clone(), Box::new(Expr::Call(Func::Log, a.clone())))),
                );
                differentiate(&rewritten, var)
            }
        }
        Expr::Call(f, a) => {
            let da = differentiate(a, var);
            if is_zero(&da) {
                return num(0.0);
            }
            let outer = match f {
                Func::Sin => Expr::Call(Func::Cos, a.clone()),
                Func::Cos => Expr::Neg(Box::new(Expr::Call(Func::Sin, a.clone()))),
                Func::Tan => div(
                    num(1.0),
                    Expr::Pow(Box::new(Expr::Call(Func::Cos, a.clone())), Box::new(num(2.0))),
                ),
                Func::Exp => expr.clone(),
                Func::Log => div(num(1.0), (**a).clone()),
                Func::Sqrt => div(num(1.0), mul(num(2.0), expr.clone())),
            };
            mul(outer, da)
        }
    }
}

// ---------------------------------------------------------------------------
// Model specs and compilation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpec {
    pub name: String,
    /// Initial value, an expression in the parameters.
    pub init: String,
    /// Right-hand side, an expression in states, inputs and parameters.
    pub rhs: String,
    /// Optional lower bound on the state during integration (open).
    #[serde(default)]
    pub min: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub open_min: bool,
}

/// Serializable mirror of a parametrized system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub states: Vec<StateSpec>,
    pub params: Vec<VarSpec>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub experiment: Vec<VarSpec>,
    /// Output expressions in states, inputs and parameters.
    pub outputs: Vec<String>,
    /// One expression per input, in the experiment coordinates and `t`.
    #[serde(default)]
    pub input_exprs: Vec<String>,
}

fn parse_field(text: &str, field: &str, errors: &mut Vec<String>) -> Option<Expr> {
    match parse(text) {
        Ok(e) => Some(e),
        Err(err) => {
            errors.push(format!("{field}: {err}"));
            None
        }
    }
}

fn bind_field(expr: &Expr, names: &[&str], field: &str, errors: &mut Vec<String>) -> Option<Bound> {
    match bind(expr, names) {
        Ok(b) => Some(b),
        Err(err) => {
            errors.push(format!("{field}: {err}"));
            None
        }
    }
}

/// Compile a spec into a [`SystemModel`] interchangeable with the built-ins,
/// with analytic partials obtained symbolically.
pub fn compile_model(spec: &ModelSpec) -> Result<SystemModel> {
    let mut errors = Vec::new();
    let n = spec.states.len();
    let r = spec.params.len();
    let m = spec.inputs.len();
    let p = spec.outputs.len();
    let d = spec.experiment.len();

    if n == 0 {
        errors.push("at least one state required".into());
    }
    if p == 0 {
        errors.push("at least one output required".into());
    }
    if spec.input_exprs.len() != m {
        errors.push(format!(
            "{} inputs but {} input expressions",
            m,
            spec.input_exprs.len()
        ));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for name in spec
            .states
            .iter()
            .map(|s| &s.name)
            .chain(spec.params.iter().map(|v| &v.name))
            .chain(spec.inputs.iter())
            .chain(spec.experiment.iter().map(|v| &v.name))
        {
            if !seen.insert(name.clone()) {
                errors.push(format!("duplicate identifier `{name}`"));
            }
        }
        if seen.contains("t") {
            errors.push("`t` is reserved for time".into());
        }
    }
    if !errors.is_empty() {
        return Err(Error::InvalidSpec(errors.join("; ")));
    }

    let state_names: Vec<&str> = spec.states.iter().map(|s| s.name.as_str()).collect();
    let param_names: Vec<&str> = spec.params.iter().map(|v| v.name.as_str()).collect();
    let input_names: Vec<&str> = spec.inputs.iter().map(|s| s.as_str()).collect();
    let exp_names: Vec<&str> = spec.experiment.iter().map(|v| v.name.as_str()).collect();

    // rhs/output environment: states, inputs, params (in that order)
    let zup: Vec<&str> = state_names
        .iter()
        .chain(input_names.iter())
        .chain(param_names.iter())
        .copied()
        .collect();
    // input generator environment: experiment coordinates, then t
    let lam_t: Vec<&str> = exp_names.iter().copied().chain(std::iter::once("t")).collect();

    let mut rhs_ast = Vec::new();
    let mut init_ast = Vec::new();
    let mut out_ast = Vec::new();
    let mut inp_ast = Vec::new();
    for s in &spec.states {
        if let Some(e) = parse_field(&s.rhs, &format!("rhs of {}", s.name), &mut errors) {
            rhs_ast.push(e);
        }
        if let Some(e) = parse_field(&s.init, &format!("init of {}", s.name), &mut errors) {
            init_ast.push(e);
        }
    }
    for (i, o) in spec.outputs.iter().enumerate() {
        if let Some(e) = parse_field(o, &format!("output {i}"), &mut errors) {
            out_ast.push(e);
        }
    }
    for (i, e) in spec.input_exprs.iter().enumerate() {
        if let Some(e) = parse_field(e, &format!("input expression {i}"), &mut errors) {
            inp_ast.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(Error::InvalidSpec(errors.join("; ")));
    }

    let bind_all = |asts: &[Expr], names: &[&str], what: &str, errors: &mut Vec<String>| {
        asts.iter()
            .enumerate()
            .filter_map(|(i, e)| bind_field(e, names, &format!("{what} {i}"), errors))
            .collect::<Vec<_>>()
    };
    let rhs_b = bind_all(&rhs_ast, &zup, "rhs", &mut errors);
    let init_b = bind_all(&init_ast, &param_names, "init", &mut errors);
    let out_b = bind_all(&out_ast, &zup, "output", &mut errors);
    let inp_b = bind_all(&inp_ast, &lam_t, "input expression", &mut errors);

    // Partial derivative tables, bound in the same environments.
    let diff_table = |asts: &[Expr], vars: &[&str], names: &[&str], what: &str, errors: &mut Vec<String>| {
        asts.iter()
            .map(|e| {
                vars.iter()
                    .filter_map(|v| {
                        bind_field(&differentiate(e, v), names, &format!("{what} d/d{v}"), errors)
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let dfdz_b = diff_table(&rhs_ast, &state_names, &zup, "rhs", &mut errors);
    let dfdx_b = diff_table(&rhs_ast, &param_names, &zup, "rhs", &mut errors);
    let dchidx_b = diff_table(&init_ast, &param_names, &param_names, "init", &mut errors);
    let dhdz_b = diff_table(&out_ast, &state_names, &zup, "output", &mut errors);
    let dhdx_b = diff_table(&out_ast, &param_names, &zup, "output", &mut errors);
    if !errors.is_empty() {
        return Err(Error::InvalidSpec(errors.join("; ")));
    }

    fn fill_env(z: &[f64], u: &[f64], x: &[f64]) -> Vec<f64> {
        let mut env = Vec::with_capacity(z.len() + u.len() + x.len());
        env.extend_from_slice(z);
        env.extend_from_slice(u);
        env.extend_from_slice(x);
        env
    }

    let rhs: Arc<RhsFn> = {
        let rhs_b = rhs_b.clone();
        Arc::new(move |z, u, x, out| {
            let env = fill_env(z, u, x);
            for (i, b) in rhs_b.iter().enumerate() {
                out[i] = b.eval(&env)?;
            }
            Ok(())
        })
    };
    let init: Arc<InitFn> = {
        let init_b = init_b.clone();
        Arc::new(move |x, out| {
            for (i, b) in init_b.iter().enumerate() {
                out[i] = b.eval(x)?;
            }
            Ok(())
        })
    };
    let output: Arc<OutputFn> = {
        let out_b = out_b.clone();
        Arc::new(move |z, u, x, out| {
            let env = fill_env(z, u, x);
            for (i, b) in out_b.iter().enumerate() {
                out[i] = b.eval(&env)?;
            }
            Ok(())
        })
    };
    let input_gen: Arc<InputFn> = {
        let inp_b = inp_b.clone();
        Arc::new(move |lam, t, out| {
            let mut env = Vec::with_capacity(lam.len() + 1);
            env.extend_from_slice(lam);
            env.push(t);
            for (i, b) in inp_b.iter().enumerate() {
                out[i] = b.eval(&env)?;
            }
            Ok(())
        })
    };

    let mat_closure = |table: Vec<Vec<Bound>>| -> Arc<MatFn> {
        Arc::new(move |z, u, x, out| {
            let env = fill_env(z, u, x);
            for (i, row) in table.iter().enumerate() {
                for (j, b) in row.iter().enumerate() {
                    out[(i, j)] = b.eval(&env)?;
                }
            }
            Ok(())
        })
    };
    let dchidx: Arc<InitJacFn> = {
        let table = dchidx_b;
        Arc::new(move |x, out: &mut DMatrix<f64>| {
            for (i, row) in table.iter().enumerate() {
                for (j, b) in row.iter().enumerate() {
                    out[(i, j)] = b.eval(x)?;
                }
            }
            Ok(())
        })
    };
    let partials = Partials {
        dfdz: mat_closure(dfdz_b),
        dfdx: mat_closure(dfdx_b),
        dchidx,
        dhdz: mat_closure(dhdz_b),
        dhdx: mat_closure(dhdx_b),
    };

    let state_box = if spec.states.iter().any(|s| s.min.is_some()) {
        Some(Domain {
            lo: spec.states.iter().map(|s| s.min.unwrap_or(f64::NEG_INFINITY)).collect(),
            hi: vec![f64::INFINITY; n],
            open_lo: vec![true; n],
        })
    } else {
        None
    };

    Ok(SystemModel {
        n_states: n,
        r_params: r,
        m_inputs: m,
        p_outputs: p,
        d_experiment: d,
        rhs,
        init,
        output,
        input_gen,
        partials: Some(partials),
        state_box,
        param_domain: Domain {
            lo: spec.params.iter().map(|v| v.min).collect(),
            hi: spec.params.iter().map(|v| v.max).collect(),
            open_lo: spec.params.iter().map(|v| v.open_min).collect(),
        },
        experiment_domain: Domain {
            lo: spec.experiment.iter().map(|v| v.min).collect(),
            hi: spec.experiment.iter().map(|v| v.max).collect(),
            open_lo: spec.experiment.iter().map(|v| v.open_min).collect(),
        },
        default_opts: IntegrationOptions::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_hill_production_term() {
        let e = parse("E^m/(1+E^m) - a*M").unwrap();
        // top level is a subtraction of a quotient and a product
        match &e {
            Expr::Sub(lhs, rhs) => {
                assert!(matches!(**lhs, Expr::Div(..)));
                assert!(matches!(**rhs, Expr::Mul(..)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
        let v = eval(&e, &env(&[("E", 1.0), ("m", 2.0), ("a", 0.5), ("M", 1.0)])).unwrap();
        assert!((v - 0.0).abs() < 1e-15);
    }

    #[test]
    fn unary_minus_binds_looser_than_pow() {
        let e = parse("-x^2").unwrap();
        assert!(matches!(e, Expr::Neg(ref inner) if matches!(**inner, Expr::Pow(..))));
        assert_eq!(eval(&e, &env(&[("x", 3.0)])).unwrap(), -9.0);
    }

    #[test]
    fn parses_input_operon_rhs() {
        let e = parse("M - b*E - u*E").unwrap();
        let v = eval(&e, &env(&[("M", 1.0), ("b", 0.5), ("E", 2.0), ("u", 0.25)])).unwrap();
        assert!((v - (1.0 - 1.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn constant_power_and_inverse_pair() {
        assert_eq!(eval(&parse("2^3").unwrap(), &env(&[])).unwrap(), 8.0);
        let v = eval(&parse("exp(log(x))").unwrap(), &env(&[("x", 3.7)])).unwrap();
        assert!((v - 3.7).abs() < 1e-15);
    }

    #[test]
    fn pow_right_associative() {
        assert_eq!(eval(&parse("2^3^2").unwrap(), &env(&[])).unwrap(), 512.0);
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse("1 + @") {
            Err(Error::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        assert!(matches!(
            eval(&parse("log(x)").unwrap(), &env(&[("x", -1.0)])),
            Err(Error::EvalDomain { op: "log", .. })
        ));
    }

    #[test]
    fn hill_derivative_matches_hand_quotient_rule() {
        let e = parse("E^m/(1+E^m)").unwrap();
        let d = differentiate(&e, "E");
        let v = eval(&d, &env(&[("E", 1.0), ("m", 2.0)])).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        assert_eq!(differentiate(&parse("3.5").unwrap(), "x"), Expr::Num(0.0));
        assert_eq!(differentiate(&parse("sin(4)").unwrap(), "x"), Expr::Num(0.0));
    }

    #[test]
    fn variable_power_uses_log_rewrite() {
        // d/dm E^m = E^m log E
        let d = differentiate(&parse("E^m").unwrap(), "m");
        let v = eval(&d, &env(&[("E", 2.0), ("m", 3.0)])).unwrap();
        assert!((v - 8.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn print_parse_round_trip() {
        for s in [
            "E^m/(1+E^m) - a*M",
            "-x^2",
            "a - (b - c)",
            "a/(b*c)",
            "2^3^2",
            "sin(x)*cos(y) - tan(z)/exp(w)",
            "-(a + b)",
            "sqrt(x + 1e-3)",
            "pow(x, 2) + x^-1",
        ] {
            let e = parse(s).unwrap();
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            assert_eq!(e, reparsed, "round trip failed for `{s}` -> `{printed}`");
        }
    }

    #[test]
    fn compile_rejects_empty_outputs() {
        let spec = ModelSpec {
            name: "bad".into(),
            states: vec![StateSpec { name: "z".into(), init: "1".into(), rhs: "-z".into(), min: None }],
            params: vec![],
            inputs: vec![],
            experiment: vec![],
            outputs: vec![],
            input_exprs: vec![],
        };
        assert!(matches!(compile_model(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn compile_rejects_undeclared_identifier() {
        let spec = ModelSpec {
            name: "bad".into(),
            states: vec![StateSpec { name: "z".into(), init: "1".into(), rhs: "-k*z".into(), min: None }],
            params: vec![],
            inputs: vec![],
            experiment: vec![],
            outputs: vec!["z".into()],
            input_exprs: vec![],
        };
        match compile_model(&spec) {
            Err(Error::InvalidSpec(msg)) => assert!(msg.contains('k'), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
