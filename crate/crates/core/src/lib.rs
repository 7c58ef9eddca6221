//! Subtype-aware dynamic unsupervised domain adaptation on synthetic data.
//!
//! A labelled source domain and an unlabelled target domain are encoded by a
//! small MLP. Training combines prototype cross-entropy on the source, class
//! centroid matching and a weighted subtype compactness term computed over a
//! queue of recent batches.

pub mod clustering;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod prototypes;
pub mod rng;
pub mod subtype;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
