//! Cross-entropy fused with label-aware contrastive learning and hard-negative
//! mining (CLCE), plus a desk-scale workbench around it: a small MLP encoder
//! trained by hand-derived backpropagation, two-view data assembly, episodic
//! few-shot evaluation and embedding-geometry diagnostics.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
