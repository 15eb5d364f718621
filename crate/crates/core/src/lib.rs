pub mod autograd;
pub mod datagen;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod frame;
pub mod mcm;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rootcause;

pub use error::{Error, Result};
