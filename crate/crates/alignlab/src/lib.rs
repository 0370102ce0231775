//! Desk-scale laboratory for multilingual audio-text contrastive training.
//!
//! The crate trains small dual encoders (an audio head and a shared
//! multilingual text head) on synthetic paired corpora under three
//! objectives: random-language contrastive training (the ML-CLAP baseline),
//! 1-to-K contrastive learning (KCL), and audio-English co-anchor
//! contrastive learning (CACL). Alongside training it verifies the
//! weight-error bound for twin SGD runs under the full and sampled pair
//! distributions, the Adam first-order momentum error bound, and computes
//! retrieval-consistency metrics (R@k, mAP10, embedding gap/distance, MRV).

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
