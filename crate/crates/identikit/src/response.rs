//! Uniform response interface shared by ODE systems and the abstract
//! (non-ODE) responses: a map from parameter x experiment to R^p with an
//! optional parameter Jacobian.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::odecore::{self, SystemModel};

pub trait Response: Send + Sync {
    fn r_params(&self) -> usize;
    fn d_experiment(&self) -> usize;
    fn p_outputs(&self) -> usize;
    fn param_domain(&self) -> &Domain;
    fn experiment_domain(&self) -> &Domain;

    /// beta(x, lambda), a length-p vector.
    fn response(&self, x: &[f64], lam: &[f64]) -> Result<Vec<f64>>;

    /// d beta / d x, p x r. Models without derivative support report
    /// `MissingPartials`.
    fn response_jacobian(&self, _x: &[f64], _lam: &[f64]) -> Result<DMatrix<f64>> {
        Err(Error::MissingPartials)
    }
}

impl Response for SystemModel {
    fn r_params(&self) -> usize {
        self.r_params
    }
    fn d_experiment(&self) -> usize {
        self.d_experiment
    }
    fn p_outputs(&self) -> usize {
        self.p_outputs
    }
    fn param_domain(&self) -> &Domain {
        &self.param_domain
    }
    fn experiment_domain(&self) -> &Domain {
        &self.experiment_domain
    }
    fn response(&self, x: &[f64], lam: &[f64]) -> Result<Vec<f64>> {
        odecore::response(self, x, lam, &self.default_opts)
    }
    fn response_jacobian(&self, x: &[f64], lam: &[f64]) -> Result<DMatrix<f64>> {
        odecore::response_jacobian(self, x, lam, &self.default_opts)
    }
}

pub type ScalarMap = dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync;
pub type JacMap = dyn Fn(&[f64], &[f64]) -> Result<DMatrix<f64>> + Send + Sync;

/// A response given directly as a closed-form map, no integration involved.
#[derive(Clone)]
pub struct AbstractResponse {
    pub r_params: usize,
    pub d_experiment: usize,
    pub p_outputs: usize,
    pub param_domain: Domain,
    pub experiment_domain: Domain,
    pub map: Arc<ScalarMap>,
    pub jacobian: Option<Arc<JacMap>>,
}

impl Response for AbstractResponse {
    fn r_params(&self) -> usize {
        self.r_params
    }
    fn d_experiment(&self) -> usize {
        self.d_experiment
    }
    fn p_outputs(&self) -> usize {
        self.p_outputs
    }
    fn param_domain(&self) -> &Domain {
        &self.param_domain
    }
    fn experiment_domain(&self) -> &Domain {
        &self.experiment_domain
    }
    fn response(&self, x: &[f64], lam: &[f64]) -> Result<Vec<f64>> {
        self.param_domain.check(x)?;
        self.experiment_domain.check(lam)?;
        (self.map)(x, lam)
    }
    fn response_jacobian(&self, x: &[f64], lam: &[f64]) -> Result<DMatrix<f64>> {
        self.param_domain.check(x)?;
        self.experiment_domain.check(lam)?;
        match &self.jacobian {
            Some(j) => j(x, lam),
            None => Err(Error::MissingPartials),
        }
    }
}
