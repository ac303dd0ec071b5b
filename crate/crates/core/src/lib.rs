pub mod autograd;
pub mod container;
pub mod curation_match;
pub mod dual_tower;
pub mod error;
pub mod flow;
pub mod identity_binding;
pub mod latents;
pub mod rng;
pub mod synthetic_world;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
