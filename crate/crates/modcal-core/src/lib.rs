//! Compose a target-modality object detector as [calibrator | source detector] and
//! train it without target-modality annotations.
//!
//! The pipeline: generate a synthetic paired-modality benchmark ([`synthdata`]), train a
//! small anchor-free detector on the source modality ([`detector`]), synthesize foreground
//! semantics by inverting the frozen detector ([`inversion`]), pretrain a VQ reconstructor
//! on them and transfer its codebook/decoder into the calibrator ([`fsr`]), then run the
//! calibration training loop with decayed semantic supervision and skipped inverted
//! attention ([`mactrain`]). Everything is seeded and bit-reproducible on CPU.

pub mod autograd;
pub mod calibrator;
pub mod config;
pub mod detector;
pub mod error;
pub mod fsr;
pub mod inversion;
pub mod io;
pub mod mactrain;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
