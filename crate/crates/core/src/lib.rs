//! Gene-guided cross-modal representation alignment.
//!
//! Pairs of gene-expression profiles and image feature vectors, one pair per
//! tissue spot, are mapped into a shared embedding space by small MLP
//! encoders. Training combines three objectives: a gene-image contrastive
//! loss, a cross-modal ranking consistency loss with a cyclic triplet
//! sampler, and an intra-modal teacher-student distillation loss with an EMA
//! teacher. The crate also ships the spatial-expression preprocessing
//! pipeline, a synthetic paired-data generator, and the evaluation metric
//! suite (PCC/MAE/MSE, rank accuracy, distance-correlation R², K-means +
//! v-score).

pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod preprocess;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
