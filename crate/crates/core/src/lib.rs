//! Vehicle re-identification with a convolutional appearance encoder, a
//! semantic image encoder and grouped adaptive enhancement of the semantic
//! features, trained with label-smoothed cross-entropy plus supervised
//! contrastive loss and evaluated with CMC / mAP retrieval metrics.

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamSet, Tensor};
