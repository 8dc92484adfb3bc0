pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod control_branch;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod mc_attn;
pub mod motion_repr;
pub mod params;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
