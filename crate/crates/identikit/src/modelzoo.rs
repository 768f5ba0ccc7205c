//! Built-in systems and responses with analytic derivative support and,
//! where available, closed-form oracles.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::odecore::{
    reparametrize_time, InitFn, InitJacFn, InputFn, IntegrationOptions, MatFn, OutputFn, Partials,
    RhsFn, SystemModel,
};
use crate::response::{AbstractResponse, Response};

pub type ClosedForm = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A named model: the response used by the analysis modules, the underlying
/// ODE system when there is one, and an optional closed-form oracle.
#[derive(Clone)]
pub struct ModelDescriptor {
    pub name: String,
    pub response: Arc<dyn Response>,
    pub system: Option<Arc<SystemModel>>,
    pub closed_form: Option<Arc<ClosedForm>>,
    pub notes: String,
}

impl ModelDescriptor {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.response.r_params(), self.response.d_experiment(), self.response.p_outputs())
    }
}

// ---------------------------------------------------------------------------
// Operon family (mRNA / enzyme feedback with Hill repression)
// ---------------------------------------------------------------------------

/// E^m on E > 0, computed through exp(m log E) so non-integer Hill constants
/// are well-defined.
fn hill_pow(e: f64, m: f64) -> Result<f64> {
    if e <= 0.0 {
        return Err(Error::EvalDomain { op: "pow", arg: e });
    }
    Ok((m * e.ln()).exp())
}

#[derive(Clone, Copy, PartialEq)]
enum OperonInput {
    None,
    Constant,
    Linear,
}

/// Operon system before time reparametrization. Parameters are
/// (M0, E0, m, a, b); the optional input enters as an extra enzyme
/// degradation term.
fn operon_base(kind: OperonInput) -> SystemModel {
    let m_inputs = if kind == OperonInput::None { 0 } else { 1 };

    let rhs: Arc<RhsFn> = Arc::new(move |z, u, x, out| {
        let (mm, e) = (z[0], z[1]);
        let (m, a, b) = (x[2], x[3], x[4]);
        let em = hill_pow(e, m)?;
        let u0 = if u.is_empty() { 0.0 } else { u[0] };
        out[0] = em / (1.0 + em) - a * mm;
        out[1] = mm - b * e - u0 * e;
        Ok(())
    });
    let init: Arc<InitFn> = Arc::new(|x, out| {
        out[0] = x[0];
        out[1] = x[1];
        Ok(())
    });
    let output: Arc<OutputFn> = Arc::new(|z, _u, _x, out| {
        out[0] = z[0];
        Ok(())
    });
    let input_gen: Arc<InputFn> = match kind {
        OperonInput::None => Arc::new(|_lam, _t, _out| Ok(())),
        // nonnegative constant input, parametrized as v^2 over the whole line
        OperonInput::Constant => Arc::new(|lam, _t, out| {
            out[0] = lam[0] * lam[0];
            Ok(())
        }),
        OperonInput::Linear => Arc::new(|lam, t, out| {
            out[0] = lam[0] * lam[0] + lam[1] * lam[1] * t;
            Ok(())
        }),
    };

    let dfdz: Arc<MatFn> = Arc::new(|z, u, x, out| {
        let e = z[1];
        let (m, a, b) = (x[2], x[3], x[4]);
        let em = hill_pow(e, m)?;
        let denom = (1.0 + em) * (1.0 + em);
        let u0 = if u.is_empty() { 0.0 } else { u[0] };
        out[(0, 0)] = -a;
        out[(0, 1)] = m * (em / e) / denom;
        out[(1, 0)] = 1.0;
        out[(1, 1)] = -b - u0;
        Ok(())
    });
    let dfdx: Arc<MatFn> = Arc::new(|z, _u, x, out| {
        let (mm, e) = (z[0], z[1]);
        let m = x[2];
        let em = hill_pow(e, m)?;
        let denom = (1.0 + em) * (1.0 + em);
        out.fill(0.0);
        out[(0, 2)] = em * e.ln() / denom;
        out[(0, 3)] = -mm;
        out[(1, 4)] = -e;
        Ok(())
    });
    let dchidx: Arc<InitJacFn> = Arc::new(|_x, out| {
        out.fill(0.0);
        out[(0, 0)] = 1.0;
        out[(1, 1)] = 1.0;
        Ok(())
    });
    let dhdz: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out[(0, 0)] = 1.0;
        out[(0, 1)] = 0.0;
        Ok(())
    });
    let dhdx: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        Ok(())
    });

    let d_experiment = match kind {
        OperonInput::None => 0,
        OperonInput::Constant => 1,
        OperonInput::Linear => 2,
    };
    let experiment_domain = match kind {
        OperonInput::None => Domain::empty(),
        OperonInput::Constant => Domain::closed(vec![-3.0], vec![3.0]),
        OperonInput::Linear => Domain::closed(vec![-3.0; 2], vec![3.0; 2]),
    };

    SystemModel {
        n_states: 2,
        r_params: 5,
        m_inputs,
        p_outputs: 1,
        d_experiment,
        rhs,
        init,
        output,
        input_gen,
        partials: Some(Partials { dfdz, dfdx, dchidx, dhdz, dhdx }),
        // enzyme concentration must stay positive for the Hill term
        state_box: Some(Domain {
            lo: vec![f64::NEG_INFINITY, 0.0],
            hi: vec![f64::INFINITY, f64::INFINITY],
            open_lo: vec![true, true],
        }),
        param_domain: Domain::open_below(vec![0.0; 5], vec![3.0, 3.0, 4.0, 2.0, 2.0]),
        experiment_domain,
        default_opts: IntegrationOptions::default(),
    }
}

/// Operon base system with a constant input, before folding the final time
/// into the experiment space (experiment = input amplitude only).
pub fn operon_input_base() -> SystemModel {
    operon_base(OperonInput::Constant)
}

/// Free-running operon: experiments are measurement durations T.
pub fn operon_free() -> ModelDescriptor {
    let sys = Arc::new(reparametrize_time(&operon_base(OperonInput::None), 0.0, 10.0));
    ModelDescriptor {
        name: "operon-free".into(),
        response: sys.clone(),
        system: Some(sys),
        closed_form: None,
        notes: "mRNA/enzyme feedback with Hill repression, no input; measure M(T)".into(),
    }
}

/// Operon with a constant neutralizing input; experiments are (v, T) with
/// u = v^2.
pub fn operon_input() -> ModelDescriptor {
    let sys = Arc::new(reparametrize_time(&operon_base(OperonInput::Constant), 0.0, 5.0));
    ModelDescriptor {
        name: "operon-input".into(),
        response: sys.clone(),
        system: Some(sys),
        closed_form: None,
        notes: "operon with constant enzyme-neutralizing input u = v^2; measure M(T)".into(),
    }
}

/// Operon with a linearly increasing input u(t) = v0^2 + v1^2 t; experiments
/// are (v0, v1, T).
pub fn operon_linear_input() -> ModelDescriptor {
    let sys = Arc::new(reparametrize_time(&operon_base(OperonInput::Linear), 0.0, 5.0));
    ModelDescriptor {
        name: "operon-linear-input".into(),
        response: sys.clone(),
        system: Some(sys),
        closed_form: None,
        notes: "operon with linearly increasing input u = v0^2 + v1^2 t; measure M(T)".into(),
    }
}

/// The parameter family on which the free operon output is identically 1.
pub fn operon_indistinguishable_family(k: f64, l: f64) -> Vec<f64> {
    assert!(k > 0.0 && l > 0.0);
    let kl = k.powf(l);
    vec![1.0, k, l, kl / (1.0 + kl), 1.0 / k]
}

// ---------------------------------------------------------------------------
// Nine-state polynomial system with closed-form solution
// ---------------------------------------------------------------------------

/// Closed-form response of the nine-state system.
pub fn nine_state_closed_form(a: f64, lam: f64) -> f64 {
    a.cos() + lam * a.sin() + lam * lam * a.exp() * (2.0 * a).sin()
}

fn nine_state_system() -> SystemModel {
    let rhs: Arc<RhsFn> = Arc::new(|z, u, _x, out| {
        let u = u[0];
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = u * z[1];
        out[3] = 2.0 * u * z[2];
        out[4] = -z[0] * z[5];
        out[5] = z[0] * z[4];
        out[6] = -2.0 * z[0] * z[7];
        out[7] = 2.0 * z[0] * z[6];
        out[8] = z[0] * z[8];
        Ok(())
    });
    let init: Arc<InitFn> = Arc::new(|x, out| {
        out.copy_from_slice(&[x[0], 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        Ok(())
    });
    let output: Arc<OutputFn> = Arc::new(|z, _u, _x, out| {
        out[0] = z[1] * z[4] + z[2] * z[5] + z[3] * z[7] * z[8];
        Ok(())
    });
    let input_gen: Arc<InputFn> = Arc::new(|lam, _t, out| {
        out[0] = lam[0];
        Ok(())
    });

    let dfdz: Arc<MatFn> = Arc::new(|z, u, _x, out| {
        let u = u[0];
        out.fill(0.0);
        out[(2, 1)] = u;
        out[(3, 2)] = 2.0 * u;
        out[(4, 0)] = -z[5];
        out[(4, 5)] = -z[0];
        out[(5, 0)] = z[4];
        out[(5, 4)] = z[0];
        out[(6, 0)] = -2.0 * z[7];
        out[(6, 7)] = -2.0 * z[0];
        out[(7, 0)] = 2.0 * z[6];
        out[(7, 6)] = 2.0 * z[0];
        out[(8, 0)] = z[8];
        out[(8, 8)] = z[0];
        Ok(())
    });
    let dfdx: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        Ok(())
    });
    let dchidx: Arc<InitJacFn> = Arc::new(|_x, out| {
        out.fill(0.0);
        out[(0, 0)] = 1.0;
        Ok(())
    });
    let dhdz: Arc<MatFn> = Arc::new(|z, _u, _x, out| {
        out.fill(0.0);
        out[(0, 1)] = z[4];
        out[(0, 2)] = z[5];
        out[(0, 3)] = z[7] * z[8];
        out[(0, 4)] = z[1];
        out[(0, 5)] = z[2];
        out[(0, 7)] = z[3] * z[8];
        out[(0, 8)] = z[3] * z[7];
        Ok(())
    });
    let dhdx: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        Ok(())
    });

    SystemModel {
        n_states: 9,
        r_params: 1,
        m_inputs: 1,
        p_outputs: 1,
        d_experiment: 1,
        rhs,
        init,
        output,
        input_gen,
        partials: Some(Partials { dfdz, dfdx, dchidx, dhdz, dhdx }),
        state_box: None,
        param_domain: Domain::open_below(vec![0.0], vec![50.0]),
        experiment_domain: Domain::closed(vec![-10.0], vec![10.0]),
        default_opts: IntegrationOptions::default(),
    }
}

/// Nine polynomial states, one parameter a > 0, constant scalar input.
/// The response has the closed form cos a + u sin a + u^2 e^a sin 2a.
pub fn nine_state() -> ModelDescriptor {
    let sys = Arc::new(nine_state_system());
    ModelDescriptor {
        name: "nine-state".into(),
        response: sys.clone(),
        system: Some(sys),
        closed_form: Some(Arc::new(|x, lam| vec![nine_state_closed_form(x[0], lam[0])])),
        notes: "polynomial system whose response is an oscillatory degree-2 polynomial in the input".into(),
    }
}

/// Ten-state variant with a linear output: the extra state accumulates the
/// nine-state output integrand and h(z) = z10.
pub fn nine_state_linear_h() -> ModelDescriptor {
    let base = nine_state_system();
    let inner_rhs = base.rhs.clone();
    let rhs: Arc<RhsFn> = Arc::new(move |z, u, x, out| {
        inner_rhs(&z[..9], u, x, &mut out[..9])?;
        out[9] = z[1] * z[4] + z[2] * z[5] + z[3] * z[7] * z[8];
        Ok(())
    });
    let inner_init = base.init.clone();
    let init: Arc<InitFn> = Arc::new(move |x, out| {
        inner_init(x, &mut out[..9])?;
        out[9] = 0.0;
        Ok(())
    });
    let output: Arc<OutputFn> = Arc::new(|z, _u, _x, out| {
        out[0] = z[9];
        Ok(())
    });

    let base_p = base.partials.clone().unwrap();
    let dfdz: Arc<MatFn> = {
        let inner = base_p.dfdz.clone();
        Arc::new(move |z, u, x, out| {
            out.fill(0.0);
            let mut sub = DMatrix::zeros(9, 9);
            inner(&z[..9], u, x, &mut sub)?;
            out.view_mut((0, 0), (9, 9)).copy_from(&sub);
            out[(9, 1)] = z[4];
            out[(9, 2)] = z[5];
            out[(9, 3)] = z[7] * z[8];
            out[(9, 4)] = z[1];
            out[(9, 5)] = z[2];
            out[(9, 7)] = z[3] * z[8];
            out[(9, 8)] = z[3] * z[7];
            Ok(())
        })
    };
    let dfdx: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        Ok(())
    });
    let dchidx: Arc<InitJacFn> = Arc::new(|_x, out| {
        out.fill(0.0);
        out[(0, 0)] = 1.0;
        Ok(())
    });
    let dhdz: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        out[(0, 9)] = 1.0;
        Ok(())
    });
    let dhdx: Arc<MatFn> = Arc::new(|_z, _u, _x, out| {
        out.fill(0.0);
        Ok(())
    });

    let sys = Arc::new(SystemModel {
        n_states: 10,
        p_outputs: 1,
        rhs,
        init,
        output,
        partials: Some(Partials { dfdz, dfdx, dchidx, dhdz, dhdx }),
        ..base
    });
    ModelDescriptor {
        name: "nine-state-linear-h".into(),
        response: sys.clone(),
        system: Some(sys),
        closed_form: None,
        notes: "nine-state system with an integrated output state, h(z) = z10".into(),
    }
}

// ---------------------------------------------------------------------------
// Responses linear in inputs (secant-set geometry)
// ---------------------------------------------------------------------------

/// Curve point f(x) in R^{2r+1}: spiral pairs at the squared leading
/// coordinates, then (cos t, sin t, e^t sin 2t) at the last.
pub fn linear_curve_point(r: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), r);
    let mut out = Vec::with_capacity(2 * r + 1);
    for &xi in &x[..r - 1] {
        let s = xi * xi;
        out.push(s * s.cos());
        out.push(s * s.sin());
    }
    let t = x[r - 1];
    out.push(t.cos());
    out.push(t.sin());
    out.push(t.exp() * (2.0 * t).sin());
    out
}

fn linear_curve_jacobian(r: usize, x: &[f64]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(2 * r + 1, r);
    for (i, &xi) in x[..r - 1].iter().enumerate() {
        let s = xi * xi;
        // d/dxi of (s cos s, s sin s) with s = xi^2
        jac[(2 * i, i)] = 2.0 * xi * (s.cos() - s * s.sin());
        jac[(2 * i + 1, i)] = 2.0 * xi * (s.sin() + s * s.cos());
    }
    let t = x[r - 1];
    jac[(2 * r - 2, r - 1)] = -t.sin();
    jac[(2 * r - 1, r - 1)] = t.cos();
    jac[(2 * r, r - 1)] = t.exp() * ((2.0 * t).sin() + 2.0 * (2.0 * t).cos());
    jac
}

fn linear_param_domain(r: usize) -> Domain {
    let mut lo = vec![-20.0; r - 1];
    let mut hi = vec![20.0; r - 1];
    let mut open = vec![false; r - 1];
    lo.push(0.0);
    hi.push(100.0);
    open.push(true);
    Domain { lo, hi, open_lo: open }
}

/// Response beta(x, u) = f(x) . u with vector inputs u in R^{2r+1}.
pub fn linear_response(r: usize) -> ModelDescriptor {
    assert!(r >= 1);
    let map = Arc::new(move |x: &[f64], u: &[f64]| {
        let f = linear_curve_point(r, x);
        Ok(vec![f.iter().zip(u).map(|(a, b)| a * b).sum()])
    });
    let jac = Arc::new(move |x: &[f64], u: &[f64]| {
        let jf = linear_curve_jacobian(r, x);
        let urow = DMatrix::from_row_slice(1, 2 * r + 1, u);
        Ok(urow * jf)
    });
    let resp = Arc::new(AbstractResponse {
        r_params: r,
        d_experiment: 2 * r + 1,
        p_outputs: 1,
        param_domain: linear_param_domain(r),
        experiment_domain: Domain::closed(vec![-3.0; 2 * r + 1], vec![3.0; 2 * r + 1]),
        map,
        jacobian: Some(jac),
    });
    ModelDescriptor {
        name: format!("linear-response-{r}"),
        response: resp,
        system: None,
        closed_form: None,
        notes: "inner-product response along a spiral-times-growing-oscillation curve".into(),
    }
}

/// Moment vector (1, u, u^2, ..., u^{2r}).
pub fn psi(u: f64, r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * r + 1);
    let mut p = 1.0;
    for _ in 0..=2 * r {
        out.push(p);
        p *= u;
    }
    out
}

/// Scalar-input variant: beta(x, u) = f(x) . psi(u).
pub fn scalar_linear_response(r: usize) -> ModelDescriptor {
    assert!(r >= 1);
    let map = Arc::new(move |x: &[f64], u: &[f64]| {
        let f = linear_curve_point(r, x);
        let pv = psi(u[0], r);
        Ok(vec![f.iter().zip(&pv).map(|(a, b)| a * b).sum()])
    });
    let jac = Arc::new(move |x: &[f64], u: &[f64]| {
        let jf = linear_curve_jacobian(r, x);
        let pv = psi(u[0], r);
        let urow = DMatrix::from_row_slice(1, 2 * r + 1, &pv);
        Ok(urow * jf)
    });
    let resp = Arc::new(AbstractResponse {
        r_params: r,
        d_experiment: 1,
        p_outputs: 1,
        param_domain: linear_param_domain(r),
        experiment_domain: Domain::closed(vec![-3.0], vec![3.0]),
        map,
        jacobian: Some(jac),
    });
    ModelDescriptor {
        name: format!("scalar-linear-{r}"),
        response: resp,
        system: None,
        closed_form: None,
        notes: "scalar-input version of the linear response through the moment curve".into(),
    }
}

// ---------------------------------------------------------------------------
// Smooth (non-analytic) counterexample and demo fixtures
// ---------------------------------------------------------------------------

/// The flat bump factor: exp(1/s) on s < 0, zero on s >= 0. Smooth but not
/// analytic at 0.
pub fn gamma_bump(s: f64) -> f64 {
    if s < 0.0 {
        (1.0 / s).exp()
    } else {
        0.0
    }
}

/// Smooth response beta(x, u) = gamma(x - u) on the positive half-line.
/// Every distinct pair is distinguishable yet no finite set is universal.
pub fn smooth_counterexample() -> ModelDescriptor {
    let map = Arc::new(|x: &[f64], u: &[f64]| Ok(vec![gamma_bump(x[0] - u[0])]));
    let jac = Arc::new(|x: &[f64], u: &[f64]| {
        let s = x[0] - u[0];
        let d = if s < 0.0 { gamma_bump(s) * (-1.0 / (s * s)) } else { 0.0 };
        Ok(DMatrix::from_element(1, 1, d))
    });
    let resp = Arc::new(AbstractResponse {
        r_params: 1,
        d_experiment: 1,
        p_outputs: 1,
        param_domain: Domain::open_below(vec![0.0], vec![20.0]),
        experiment_domain: Domain::open_below(vec![0.0], vec![20.0]),
        map,
        jacobian: Some(jac),
    });
    ModelDescriptor {
        name: "smooth-counterexample".into(),
        response: resp,
        system: None,
        closed_form: Some(Arc::new(|x, u| vec![gamma_bump(x[0] - u[0])])),
        notes: "smooth-but-not-analytic response with no finite universal distinguishing set".into(),
    }
}

/// Demo fixture: inner-product response along a figure-8 curve
/// f(x) = (sin 2x, sin x). Parameters across the self-crossing cannot be
/// separated by any single input; illustrative only.
pub fn figure8_demo() -> ModelDescriptor {
    let map = Arc::new(|x: &[f64], u: &[f64]| {
        let t = x[0];
        Ok(vec![(2.0 * t).sin() * u[0] + t.sin() * u[1]])
    });
    let jac = Arc::new(|x: &[f64], u: &[f64]| {
        let t = x[0];
        Ok(DMatrix::from_element(1, 1, 2.0 * (2.0 * t).cos() * u[0] + t.cos() * u[1]))
    });
    let resp = Arc::new(AbstractResponse {
        r_params: 1,
        d_experiment: 2,
        p_outputs: 1,
        param_domain: Domain::closed(vec![-PI], vec![PI]),
        experiment_domain: Domain::closed(vec![-2.0; 2], vec![2.0; 2]),
        map,
        jacobian: Some(jac),
    });
    ModelDescriptor {
        name: "figure8".into(),
        response: resp,
        system: None,
        closed_form: None,
        notes: "figure-8 linear response; singular at the self-crossing parameter".into(),
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// All fixed-name models (parametric families listed at small sizes).
pub fn all_models() -> Vec<ModelDescriptor> {
    vec![
        operon_free(),
        operon_input(),
        operon_linear_input(),
        nine_state(),
        nine_state_linear_h(),
        linear_response(1),
        linear_response(2),
        scalar_linear_response(1),
        scalar_linear_response(2),
        smooth_counterexample(),
        figure8_demo(),
    ]
}

/// Look up a model by name; `linear-response-N` and `scalar-linear-N`
/// accept any positive N.
pub fn lookup(name: &str) -> Option<ModelDescriptor> {
    if let Some(n) = name.strip_prefix("linear-response-") {
        return n.parse::<usize>().ok().filter(|&r| r >= 1).map(linear_response);
    }
    if let Some(n) = name.strip_prefix("scalar-linear-") {
        return n.parse::<usize>().ok().filter(|&r| r >= 1).map(scalar_linear_response);
    }
    match name {
        "operon-free" => Some(operon_free()),
        "operon-input" => Some(operon_input()),
        "operon-linear-input" => Some(operon_linear_input()),
        "nine-state" => Some(nine_state()),
        "nine-state-linear-h" => Some(nine_state_linear_h()),
        "smooth-counterexample" => Some(smooth_counterexample()),
        "figure8" => Some(figure8_demo()),
        _ => None,
    }
}
