//! Standard-codec-in-the-loop training for tri-plane radiance fields.

pub mod autodiff;
pub mod cache;
pub mod field;
pub mod metrics;
pub mod codec;
pub mod quantpack;
pub mod surrogate;
pub mod trainer;
pub mod harness;
