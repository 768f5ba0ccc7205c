//! identikit decides whether experiments can tell parameters of an
//! analytically parametrized ODE system apart.
//!
//! The toolkit simulates parametrized systems, compares their responses on
//! experiment sets, estimates how many experiments are needed for
//! identification, builds local distinguishing sets from sensitivity ranks,
//! and constructs explicit witnesses showing that fewer experiments are not
//! enough.

pub mod distinguish;
pub mod domain;
pub mod dsl;
pub mod error;
pub mod localrank;
pub mod modelzoo;
pub mod odecore;
pub mod optim;
pub mod recover;
pub mod report;
pub mod response;
pub mod secant;

pub use domain::Domain;
pub use error::{Error, Result};
pub use odecore::{IntegrationOptions, SystemModel, Trajectory};
pub use response::Response;
