//! G-CAME: saliency maps for object detectors built from gradient-weighted
//! feature maps, each masked by a Gaussian centered on the detected object.
//!
//! The crate bundles a deterministic toy detector with an analytic backward
//! pass, a reader and writer for captures exported from real models, and the
//! localization, faithfulness and sanity metrics used to judge explanations.

pub mod capture;
pub mod detector;
pub mod error;
pub mod gcame;
pub mod metrics;
pub mod numerics;
pub mod sanity;
pub mod selftest;

pub use detector::{
    build_blob_detector, Detection, Detector, DetectorConfig, ScoreTarget, SourceCell, ToySource,
};
pub use error::{Error, Result};
pub use gcame::{
    explain, CenterMode, FeatureMapStack, GaussianMask, GcameOptions, GradientMap, LayerSource,
    SaliencyMap,
};
pub use metrics::BoundingBox;
pub use numerics::{ImageRgb, Tensor};
