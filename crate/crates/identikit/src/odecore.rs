//! Parametrized ODE systems, response maps and forward sensitivities.
//!
//! A system couples a right-hand side `f(z, u, x)`, an initial map `chi(x)`,
//! an output map `h(z, u, x)` and an input generator `mu(lambda, t)`. Its
//! response is the output at time 1 under the input generated by an
//! experiment; varying final times are folded into the experiment space by
//! [`reparametrize_time`].

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::domain::Domain;
use crate::error::{Error, Result};

pub type RhsFn = dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync;
pub type InitFn = dyn Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync;
pub type OutputFn = dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) -> Result<()> + Send + Sync;
pub type InputFn = dyn Fn(&[f64], f64, &mut [f64]) -> Result<()> + Send + Sync;
pub type MatFn = dyn Fn(&[f64], &[f64], &[f64], &mut DMatrix<f64>) -> Result<()> + Send + Sync;
pub type InitJacFn = dyn Fn(&[f64], &mut DMatrix<f64>) -> Result<()> + Send + Sync;

/// Analytic partial derivatives backing the variational equations.
#[derive(Clone)]
pub struct Partials {
    /// d f / d z, n x n
    pub dfdz: Arc<MatFn>,
    /// d f / d x, n x r
    pub dfdx: Arc<MatFn>,
    /// d chi / d x, n x r
    pub dchidx: Arc<InitJacFn>,
    /// d h / d z, p x n
    pub dhdz: Arc<MatFn>,
    /// d h / d x, p x r
    pub dhdx: Arc<MatFn>,
}

/// An analytically parametrized system realized over boxes.
#[derive(Clone)]
pub struct SystemModel {
    pub n_states: usize,
    pub r_params: usize,
    pub m_inputs: usize,
    pub p_outputs: usize,
    pub d_experiment: usize,
    pub rhs: Arc<RhsFn>,
    pub init: Arc<InitFn>,
    pub output: Arc<OutputFn>,
    pub input_gen: Arc<InputFn>,
    pub partials: Option<Partials>,
    /// Optional state box; leaving it raises `DomainExit` during integration.
    pub state_box: Option<Domain>,
    pub param_domain: Domain,
    pub experiment_domain: Domain,
    pub default_opts: IntegrationOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegrationOptions {
    /// Fixed-step count over the integration interval.
    pub steps: usize,
    /// Step-doubling refinement with local error control.
    pub adaptive: bool,
    /// Infinity-norm bound above which the completeness assumption is
    /// declared violated.
    pub blowup_bound: f64,
    /// Local error tolerance per unit time, adaptive mode only.
    pub local_tol: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        IntegrationOptions { steps: 2000, adaptive: false, blowup_bound: 1e12, local_tol: 1e-10 }
    }
}

/// Time grid, states and optional n x r sensitivity matrices per node.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub sensitivities: Option<Vec<DMatrix<f64>>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_sensitivity(&self) -> Option<&DMatrix<f64>> {
        self.sensitivities.as_ref().map(|s| s.last().expect("trajectory is never empty"))
    }

    /// Linearly interpolated state; queries outside the stored span are errors.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        if t < t0 || t > t1 {
            return Err(Error::Validation(format!("time {t} outside trajectory span [{t0}, {t1}]")));
        }
        let k = match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return Ok(self.states[i].clone()),
            Err(i) => i,
        };
        let (ta, tb) = (self.times[k - 1], self.times[k]);
        let w = (t - ta) / (tb - ta);
        Ok(self.states[k - 1]
            .iter()
            .zip(&self.states[k])
            .map(|(a, b)| a + w * (b - a))
            .collect())
    }
}

fn inf_norm(z: &[f64]) -> f64 {
    z.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// State plus sensitivity columns flattened into one vector for stepping.
struct Augmented<'a> {
    model: &'a SystemModel,
    lam: &'a [f64],
    x: &'a [f64],
    with_sens: bool,
    u_buf: Vec<f64>,
}

impl<'a> Augmented<'a> {
    fn n(&self) -> usize {
        self.model.n_states
    }

    fn dim(&self) -> usize {
        let n = self.n();
        if self.with_sens {
            n * (1 + self.model.r_params)
        } else {
            n
        }
    }

    fn deriv(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.n();
        (self.model.input_gen)(self.lam, t, &mut self.u_buf)?;
        (self.model.rhs)(&y[..n], &self.u_buf, self.x, &mut dy[..n])?;
        if self.with_sens {
            let r = self.model.r_params;
            let p = self.model.partials.as_ref().ok_or(Error::MissingPartials)?;
            let mut dfdz = DMatrix::zeros(n, n);
            let mut dfdx = DMatrix::zeros(n, r);
            (p.dfdz)(&y[..n], &self.u_buf, self.x, &mut dfdz)?;
            (p.dfdx)(&y[..n], &self.u_buf, self.x, &mut dfdx)?;
            let s = DMatrix::from_column_slice(n, r, &y[n..]);
            let ds = &dfdz * s + dfdx;
            dy[n..].copy_from_slice(ds.as_slice());
        }
        Ok(())
    }
}

fn rk4_step(aug: &mut Augmented, t: f64, h: f64, y: &[f64], out: &mut Vec<f64>) -> Result<()> {
    let dim = y.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    aug.deriv(t, y, &mut k1)?;
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    aug.deriv(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    aug.deriv(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..dim {
        tmp[i] = y[i] + h * k3[i];
    }
    aug.deriv(t + h, &tmp, &mut k4)?;
    out.clear();
    out.extend((0..dim).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])));
    Ok(())
}

fn guard_state(model: &SystemModel, t: f64, z: &[f64], bound: f64) -> Result<()> {
    let norm = inf_norm(z);
    if !norm.is_finite() || norm > bound {
        return Err(Error::BlowUp { t, norm, bound });
    }
    if let Some(sb) = &model.state_box {
        for (i, &v) in z.iter().enumerate() {
            let lower_ok = if sb.open_lo[i] { v > sb.lo[i] } else { v >= sb.lo[i] };
            if !lower_ok || v > sb.hi[i] {
                return Err(Error::DomainExit { t, index: i });
            }
        }
    }
    Ok(())
}

fn integrate_impl(
    model: &SystemModel,
    x: &[f64],
    lam: &[f64],
    horizon: f64,
    opts: &IntegrationOptions,
    with_sens: bool,
) -> Result<Trajectory> {
    model.param_domain.check(x)?;
    model.experiment_domain.check(lam)?;
    if !(horizon > 0.0) {
        return Err(Error::Validation(format!("duration must be positive, got {horizon}")));
    }
    if with_sens && model.partials.is_none() {
        return Err(Error::MissingPartials);
    }

    let n = model.n_states;
    let r = model.r_params;
    let mut y = vec![0.0; if with_sens { n * (1 + r) } else { n }];
    (model.init)(x, &mut y[..n])?;
    if with_sens {
        let p = model.partials.as_ref().unwrap();
        let mut dchi = DMatrix::zeros(n, r);
        (p.dchidx)(x, &mut dchi)?;
        y[n..].copy_from_slice(dchi.as_slice());
    }
    guard_state(model, 0.0, &y[..n], opts.blowup_bound)?;

    let mut aug =
        Augmented { model, lam, x, with_sens, u_buf: vec![0.0; model.m_inputs] };

    let mut times = vec![0.0];
    let mut states = vec![y[..n].to_vec()];
    let mut sens: Option<Vec<DMatrix<f64>>> = if with_sens {
        Some(vec![DMatrix::from_column_slice(n, r, &y[n..])])
    } else {
        None
    };

    let mut push = |t: f64,
                    y: &[f64],
                    times: &mut Vec<f64>,
                    states: &mut Vec<Vec<f64>>,
                    sens: &mut Option<Vec<DMatrix<f64>>>| {
        times.push(t);
        states.push(y[..n].to_vec());
        if let Some(s) = sens {
            s.push(DMatrix::from_column_slice(n, r, &y[n..]));
        }
    };

    if !opts.adaptive {
        let nsteps = opts.steps.max(1);
        let h = horizon / nsteps as f64;
        let mut next = Vec::new();
        for k in 0..nsteps {
            let t = horizon * k as f64 / nsteps as f64;
            rk4_step(&mut aug, t, h, &y, &mut next)?;
            std::mem::swap(&mut y, &mut next);
            let t1 = if k + 1 == nsteps { horizon } else { t + h };
            guard_state(model, t1, &y[..n], opts.blowup_bound)?;
            push(t1, &y, &mut times, &mut states, &mut sens);
        }
    } else {
        let mut t = 0.0;
        let mut h = horizon / opts.steps.max(1) as f64;
        let mut full = Vec::new();
        let mut half = Vec::new();
        let mut two = Vec::new();
        while t < horizon {
            if h < 1e-14 {
                return Err(Error::StepUnderflow { t });
            }
            let hh = h.min(horizon - t);
            rk4_step(&mut aug, t, hh, &y, &mut full)?;
            rk4_step(&mut aug, t, 0.5 * hh, &y, &mut half)?;
            rk4_step(&mut aug, t + 0.5 * hh, 0.5 * hh, &half, &mut two)?;
            let err = full[..n]
                .iter()
                .zip(&two[..n])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                / 15.0;
            let allowed = opts.local_tol * hh / horizon;
            if err <= allowed || hh < 4e-14 {
                t += hh;
                y.copy_from_slice(&two);
                guard_state(model, t, &y[..n], opts.blowup_bound)?;
                push(t, &y, &mut times, &mut states, &mut sens);
                if err < 0.1 * allowed {
                    h = hh * 2.0;
                }
            } else {
                h = hh * 0.5;
            }
        }
        *times.last_mut().unwrap() = horizon;
    }

    Ok(Trajectory { times, states, sensitivities: sens })
}

/// Integrate the system under the input generated by `lam` over `[0, horizon]`.
pub fn integrate(
    model: &SystemModel,
    x: &[f64],
    lam: &[f64],
    horizon: f64,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    integrate_impl(model, x, lam, horizon, opts, false)
}

/// Same as [`integrate`] but co-integrating the variational equations
/// dS/dt = (df/dz) S + df/dx, S(0) = dchi/dx.
pub fn integrate_with_sensitivities(
    model: &SystemModel,
    x: &[f64],
    lam: &[f64],
    horizon: f64,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    integrate_impl(model, x, lam, horizon, opts, true)
}

/// Response at the normalized final time 1.
pub fn response(model: &SystemModel, x: &[f64], lam: &[f64], opts: &IntegrationOptions) -> Result<Vec<f64>> {
    response_at(model, x, lam, 1.0, opts)
}

/// Response at an arbitrary final time.
pub fn response_at(
    model: &SystemModel,
    x: &[f64],
    lam: &[f64],
    horizon: f64,
    opts: &IntegrationOptions,
) -> Result<Vec<f64>> {
    let traj = integrate(model, x, lam, horizon, opts)?;
    let mut u = vec![0.0; model.m_inputs];
    (model.input_gen)(lam, horizon, &mut u)?;
    let mut out = vec![0.0; model.p_outputs];
    (model.output)(traj.final_state(), &u, x, &mut out)?;
    Ok(out)
}

/// Parameter Jacobian of the response at time 1, p x r, via sensitivities.
pub fn response_jacobian(
    model: &SystemModel,
    x: &[f64],
    lam: &[f64],
    opts: &IntegrationOptions,
) -> Result<DMatrix<f64>> {
    let traj = integrate_with_sensitivities(model, x, lam, 1.0, opts)?;
    let s = traj.final_sensitivity().unwrap();
    let z = traj.final_state();
    let mut u = vec![0.0; model.m_inputs];
    (model.input_gen)(lam, 1.0, &mut u)?;
    let p = model.partials.as_ref().ok_or(Error::MissingPartials)?;
    let (np, nn, nr) = (model.p_outputs, model.n_states, model.r_params);
    let mut dhdz = DMatrix::zeros(np, nn);
    let mut dhdx = DMatrix::zeros(np, nr);
    (p.dhdz)(z, &u, x, &mut dhdz)?;
    (p.dhdx)(z, &u, x, &mut dhdx)?;
    Ok(dhdz * s + dhdx)
}

/// Fold final times into the experiment space: the returned system has one
/// extra experiment coordinate T and satisfies
/// `response(model', x, (lam, T)) = response_at(model, x, lam, T)`.
/// Realized by feeding T through an extra input slot and scaling the vector
/// field, `f'(z, (u0, u), x) = u0 f(z, u, x)`.
pub fn reparametrize_time(model: &SystemModel, t_lo: f64, t_hi: f64) -> SystemModel {
    let n = model.n_states;
    let m = model.m_inputs;

    let inner_rhs = model.rhs.clone();
    let rhs: Arc<RhsFn> = Arc::new(move |z, u, x, out| {
        inner_rhs(z, &u[1..], x, out)?;
        for v in out.iter_mut() {
            *v *= u[0];
        }
        Ok(())
    });

    let inner_input = model.input_gen.clone();
    let input_gen: Arc<InputFn> = Arc::new(move |lam, t, out| {
        let (lam_inner, t_final) = lam.split_at(lam.len() - 1);
        out[0] = t_final[0];
        inner_input(lam_inner, t_final[0] * t, &mut out[1..])
    });

    let inner_output = model.output.clone();
    let output: Arc<OutputFn> = Arc::new(move |z, u, x, out| inner_output(z, &u[1..], x, out));

    let partials = model.partials.as_ref().map(|p| {
        let (dfdz_in, dfdx_in) = (p.dfdz.clone(), p.dfdx.clone());
        let dfdz: Arc<MatFn> = Arc::new(move |z, u, x, out| {
            dfdz_in(z, &u[1..], x, out)?;
            *out *= u[0];
            Ok(())
        });
        let dfdx: Arc<MatFn> = Arc::new(move |z, u, x, out| {
            dfdx_in(z, &u[1..], x, out)?;
            *out *= u[0];
            Ok(())
        });
        let dhdz_in = p.dhdz.clone();
        let dhdz: Arc<MatFn> = Arc::new(move |z, u, x, out| dhdz_in(z, &u[1..], x, out));
        let dhdx_in = p.dhdx.clone();
        let dhdx: Arc<MatFn> = Arc::new(move |z, u, x, out| dhdx_in(z, &u[1..], x, out));
        Partials { dfdz, dfdx, dchidx: p.dchidx.clone(), dhdz, dhdx }
    });

    SystemModel {
        n_states: n,
        r_params: model.r_params,
        m_inputs: m + 1,
        p_outputs: model.p_outputs,
        d_experiment: model.d_experiment + 1,
        rhs,
        init: model.init.clone(),
        output,
        input_gen,
        partials,
        state_box: model.state_box.clone(),
        param_domain: model.param_domain.clone(),
        experiment_domain: model.experiment_domain.append(t_lo, t_hi, t_lo == 0.0),
        default_opts: model.default_opts,
    }
}
