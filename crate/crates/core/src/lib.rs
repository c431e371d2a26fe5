//! Reasoning-supervised vision-language-action policy learning on a toy tabletop.
//!
//! The crate covers the whole loop:
//!
//! ```text
//! sim (scripted expert) -> data (episodes, JSON-Lines)
//!     -> teacher (step-wise reasoning traces) -> tokenizer (image/text/action tokens)
//!     -> model + objective + trainer (action + lambda_r * reasoning loss, frozen prefix)
//!     -> attention (top-k fused attention maps) / sim::rollout (closed-loop success)
//! ```
//!
//! Numeric code in [`model`], [`objective`] and [`attention`] is generic over
//! [`Scalar`]; the aliases below fix the precision used by the CLI (`f32`) and
//! by the gradient checks (`f64`).

pub mod attention;
pub mod data;
pub mod model;
pub mod objective;
pub mod policy;
pub mod scalar;
pub mod sim;
pub mod teacher;
pub mod tokenizer;
pub mod trainer;

pub use scalar::Scalar;


/// Policy model in training precision.
pub type PolicyModel = model::Model<f32>;
/// Policy model in double precision, used for finite-difference checks.
pub type PolicyModel64 = model::Model<f64>;
/// Attention record produced by [`PolicyModel`].
pub type AttentionRecord = model::AttentionRecord<f32>;
