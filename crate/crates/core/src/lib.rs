//! Document image representations: run-length histograms, Fisher-Vectors over
//! dense SIFT, hybrid MLP activation features, and the retrieval / clustering /
//! nearest-class-mean transfer evaluation used to compare them.
//!
//! The crate is organized bottom-up:
//!
//! * [`imaging`] loads, converts, rescales and binarizes pages.
//! * [`runlength`] computes the pyramid run-length descriptor.
//! * [`patchdesc`] extracts dense multi-scale SIFT and the 80-dim local features.
//! * [`linalg`] holds PCA and vector normalizations.
//! * [`gmm`] fits the diagonal GMM vocabulary by EM.
//! * [`fisher`] encodes local descriptors into (grid) Fisher-Vectors.
//! * [`mlp`] trains the fully connected part of the hybrid model.
//! * [`predict`] has the linear SVM and NCM classifiers.
//! * [`evalsuite`] implements the transfer tasks and their metrics.
//! * [`pipeline`] wires everything together: file formats, manifests,
//!   synthetic corpora, extraction recipes, and the CLI.

pub mod error;
pub mod evalsuite;
pub mod fisher;
pub mod gmm;
pub mod imaging;
pub mod linalg;
pub mod mlp;
pub mod patchdesc;
pub mod pipeline;
pub mod predict;
pub mod runlength;

pub use error::{Error, Result};
