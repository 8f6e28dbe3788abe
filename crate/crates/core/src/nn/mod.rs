//! Minimal CPU layers with explicit backward passes.
//!
//! Layers are stateless apart from their parameters: `forward` takes `&self`
//! so frozen networks are reentrant, and `backward` receives the same input
//! that was fed forward, accumulating parameter gradients into [`Param::grad`].

mod conv;
mod layers;
mod norm;
mod param;

pub use conv::{Conv2d, Padding};
pub use layers::{pixel_shuffle2, pixel_unshuffle2, silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Linear};
pub use norm::GroupNorm;
pub use param::{Adam, AdamConfig, Module, Param};
