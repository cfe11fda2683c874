//! Biomechanical face-head-neck simulation and a learned mapping from
//! facial action units to muscle activations.

pub mod aubridge;
pub mod bundled;
pub mod datagen;
pub mod error;
pub mod multibody;
pub mod muscle;
pub mod neurocontrol;
pub mod nn;
pub mod pipeline;
pub mod skin;

pub use error::{Error, ErrorKind, Result};
