//! Desk-scale laboratory for unlearning uplink interference out of an SNR
//! classifier: simulate interfered IQ blocks, build the SIIQ corpus, train
//! the classifier, cleanse it by fine-tuning on the retain set, verify the
//! cleansing via membership inference, and evaluate closed-form unlearning
//! costs against a Monte Carlo oracle.

pub mod cost;
pub mod dataset;
pub mod error;
pub mod mia;
pub mod nn;
pub mod phy;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
