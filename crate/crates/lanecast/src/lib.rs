//! Goal-conditioned multimodal trajectory prediction and open-loop planning
//! on vectorized driving scenes.
//!
//! The pipeline: synthetic scenarios ([`scenario`]) are normalized to an
//! agent frame and encoded as polyline tokens fused by a local-attention
//! scene encoder ([`encoder`]); a command-conditioned motion decoder
//! ([`decoder`]) refines motion query pairs into Gaussian-mixture
//! trajectories; training ([`harness`]) combines imitation losses with
//! differentiable collision and dynamics constraints ([`losses`]) under a
//! curriculum and a teacher-student command-masking schedule; evaluation
//! ([`metrics`]) covers both prediction and open-loop planning.

pub mod commands;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod scenario;
pub mod selection;
pub mod tensor;

pub use error::Error;
