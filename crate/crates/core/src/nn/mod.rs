//! Minimal neural-network toolkit: dense layers, the temporal encoder and a
//! finite-difference gradient checker. All compute is f64.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod transformer;

pub use gradcheck::{gradient_check, FnTarget, GradCheckReport, GradCheckTarget, ParamTarget};
pub use ops::{Affine, LayerNorm, Linear};
pub use params::Parameters;
pub use transformer::{EncoderCache, EncoderParams, ModalityRepr, TransformerConfig};
