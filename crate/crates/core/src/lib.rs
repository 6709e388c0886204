//! Pseudo-healthy synthesis by pathology disentanglement.
//!
//! A Generator removes lesions, a Segmentor extracts them and a Reconstructor
//! puts them back; two adversarial cycles tie the three together. The crate
//! also ships a brain-phantom simulator, the evaluation metrics and the
//! statistics used for human-rating studies.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod losses;
pub mod nets;
pub mod data;
pub mod phantom;
pub mod study;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageSlice, Label, PathologyMask};
