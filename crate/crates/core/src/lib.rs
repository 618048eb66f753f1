//! Multilingual encoder-decoder translation laboratory.

pub mod error;
pub mod evaluation;
pub mod assignment;
pub mod data;
pub mod decoding;
pub mod model;
pub mod numerics;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
