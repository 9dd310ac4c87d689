//! Trainable image steganography: an encoder hides bit planes in a cover
//! image, a decoder recovers them and a steganalysis critic scores how
//! detectable the result is.

pub mod blocks;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod payload;
pub mod trainer;

pub use error::{Error, Result};
