//! Building blocks for turning 3D brain MRI volumes into three-class
//! (background / gray matter / white matter) 2D slice datasets, scoring
//! predictions with Dice and IoU, and rendering qualitative panels.
//!
//! The model itself lives in `brainseg-model`; this crate only knows about
//! it through the [`metrics::Segmenter`] trait.

pub mod dataset;
pub mod metrics;
pub mod resample;
pub mod synthetic;
pub mod viz;
pub mod volume;

mod font;

pub use dataset::{BuildConfig, DatasetManifest, ManifestEntry, Plane, SlicePair, Split};
pub use metrics::{Aggregation, MetricsReport, Prediction, PromptSpec, Segmenter};
pub use volume::{MapSource, ProbabilityMaps, ToolConfig, Volume3D};

/// Label value for background pixels.
pub const BACKGROUND: u8 = 0;
/// Label value for gray matter.
pub const GRAY_MATTER: u8 = 1;
/// Label value for white matter.
pub const WHITE_MATTER: u8 = 2;
/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 3;
