//! Model-agnostic explanations for fundus image classifiers.
//!
//! The pipeline follows LIME for images: split the image into superpixels
//! ([`segmentation`]), query the black-box model on randomly masked copies ([`perturb`]),
//! fit a locality-weighted ridge surrogate over the mask bits ([`surrogate`]) and paint the
//! strongest segments over the image ([`overlay`]). [`adapters`] holds the model boundary
//! (analytic oracles, a small CNN forward pass, external processes and HTTP endpoints) and
//! [`evaluate`] the classification and explanation metrics.
//!
//! ```no_run
//! use fundus_lime::prelude::*;
//!
//! # fn main() -> fundus_lime::Result<()> {
//! let image = load_image("eye.png")?;
//! let map = segment_slic(&image, &SegmentationParams::default())?;
//! let model = TinyCnnAdapter::new("head", TinyCnnSpec::load("head.json")?);
//! let batch = build_batch(&image, &map, &BatchConfig::default(), &model)?;
//! let target = predicted_class(&batch)?;
//! let explanation = explain(&batch, &target, &RidgeConfig::default(), model.id())?;
//! let overlay = render_overlay(&image, &map, &explanation, 5)?;
//! save_png(&overlay, "overlay.png")?;
//! # Ok(())
//! # }
//! ```

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod io;
pub mod overlay;
pub mod perturb;
pub mod segmentation;
pub mod surrogate;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::adapters::{
        ModelAdapter, ModelSpec, MonotoneOracle, PlantedOracle, PlantedOracleSpec, ProcessAdapter, TinyCnnAdapter,
        TinyCnnSpec,
    };
    pub use crate::dataset::{scan_dataset, DatasetManifest};
    pub use crate::error::{Error, Result};
    pub use crate::evaluate::{
        deletion_curve, misclassification_report, pointing_game, MetricsReport, PointingResult, PredictionRecord, Split,
    };
    pub use crate::image::{load_image, save_png, ClassLabel, ProbabilityVector, RasterImage};
    pub use crate::overlay::render_overlay;
    pub use crate::perturb::{apply_mask, build_batch, BatchConfig, FusionPolicy, MaskVector, PerturbationBatch};
    pub use crate::segmentation::{segment_grid, segment_slic, SegmentMap, SegmentationParams};
    pub use crate::surrogate::{explain, predicted_class, Explanation, RidgeConfig};
}
