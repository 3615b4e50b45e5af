//! Conditional normalizing flow over unconstrained parameters and the
//! softplus bijection to physical parameters.

mod bijection;
mod maf;

pub use bijection::{
    from_physical, from_physical_scalar, log_det_jacobian, log_sigmoid, softplus, to_physical, to_physical_scalar,
    EPS_SOFTPLUS,
};
pub use maf::{FlowConfig, FlowMasks, Maf};
