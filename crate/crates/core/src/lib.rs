//! Concept discovery and TCAV scoring for cardiac MRI segmentation models.
//!
//! Images are fragmented into superpixel patches, the patches are embedded in
//! a middle layer of the model, latent clusters become candidate concepts,
//! and each concept is scored per pathology class by the sign of directional
//! derivatives along its Concept Activation Vectors.

pub mod adapter;
pub mod cav;
pub mod concept;
pub mod dataset;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod npy;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod superpixel;
pub mod synth;
pub mod tcav;

pub use error::{Error, Result};
