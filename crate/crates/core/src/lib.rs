//! Bi-modal (RGB + depth) latent diffusion for 360° panorama outpainting.
//!
//! The crate is organised bottom-up:
//!
//! * [`pano`]: equirectangular types, circular shifts and mask generators
//! * [`synth`]: procedural RGB-D rooms and dataset persistence
//! * [`nn`]: small CPU layers with explicit backward passes
//! * [`autoencoder`]: VQ autoencoders for RGB and depth (factor 4)
//! * [`diffusion`]: noise schedule, forward process, ε-prediction U-Net and training
//! * [`outpaint`]: masked latent sampling with two-end alignment rotation
//! * [`refine`]: wraparound-aware 2x upscaler
//! * [`metrics`]: LRCE, depth metrics, Fréchet feature distance, density/coverage
//! * [`pipeline`]: configuration and end-to-end commands used by the CLI

pub mod autoencoder;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod outpaint;
pub mod pipeline;
pub mod pano;
pub mod refine;
pub mod synth;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
