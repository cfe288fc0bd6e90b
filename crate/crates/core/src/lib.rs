//! Forward-backward sweep (method of successive approximations) for
//! box-constrained optimal control, with convergence certificates for
//! contracting dynamics and numerical checks of every bound.

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod error;
pub mod msa;
pub mod norms;
pub mod oracle;
pub mod problem;
pub mod sampling;
pub mod signals;
pub mod sweep;
pub mod verify;
