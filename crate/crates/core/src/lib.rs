//! Hybrid likelihood estimation: a balance between a parametric likelihood and
//! an empirical likelihood built on chosen control parameters.

pub mod alt_hl;
pub mod asymptotics;
pub mod controls;
pub mod el;
pub mod error;
pub mod focus;
pub mod focused;
pub mod hl;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod quadrature;
pub mod special;

pub use error::{HybridError, Result};
