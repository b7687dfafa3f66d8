//! Absorbing-state discrete diffusion over REMI music tokens with a hybrid
//! selective-SSM / attention denoiser.

pub mod complexity;
pub mod diffusion;
pub mod eval;
pub mod model;
pub mod remi;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod util;
