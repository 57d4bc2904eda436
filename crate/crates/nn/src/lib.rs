//! Dense-matrix reverse-mode autodiff used by the policy and inverse-dynamics
//! models.
//!
//! Everything is `f64` and single-threaded so that training runs are
//! bit-reproducible and gradients can be checked against finite differences.

pub mod mat;
pub mod optim;
pub mod params;
pub mod tape;

pub use mat::{AttnShape, ConvGeom, Mat, RopeTable};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tape::{Tape, Target, Var};
