//! The black-box boundary: anything that maps images to class probabilities.

mod cnn;
mod external;
pub mod nn;
mod oracle;

use std::path::PathBuf;
use std::time::Duration;

pub use cnn::{BlobRef, Layer, LayerManifest, Manifest, TinyCnnAdapter, TinyCnnSpec};
pub use external::{
    timeout_from_env, HttpAdapter, PredictRequest, ProcessAdapter, DEFAULT_TIMEOUT, RESPONSE_SUM_TOLERANCE, TIMEOUT_ENV,
};
pub use oracle::{MonotoneOracle, PlantedOracle, PlantedOracleSpec, INTACT_TOLERANCE};

use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage};
use crate::segmentation::SegmentMap;

/// A classifier queried only through its predictions.
///
/// `predict` returns one probability vector per input image, in input order.
pub trait ModelAdapter: Send + Sync {
    fn id(&self) -> &str;

    fn class_names(&self) -> &[String];

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>>;

    fn predict_one(&self, image: &RasterImage) -> Result<ProbabilityVector> {
        let mut out = self.predict(std::slice::from_ref(image))?;
        out.pop().ok_or_else(|| Error::contract("model returned no prediction"))
    }
}

pub(crate) fn default_class_names() -> Vec<String> {
    vec!["non-glaucoma".into(), "glaucoma".into()]
}

/// Parsed model spec string.
///
/// * `oracle:<map-file>:<segment-id>`: planted oracle over a segment map JSON file
/// * `tinycnn:<spec-file>`: weights manifest for [`TinyCnnSpec`]
/// * `proc:<command line>`: child process speaking the NDJSON protocol
/// * `http:<url>` (or a bare `http://` URL): same protocol over HTTP POST
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Oracle { map: PathBuf, segment: usize },
    TinyCnn(PathBuf),
    Process(String),
    Http(String),
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Spec(format!("{msg}: {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected <kind>:<target>"))?;
        match kind {
            "oracle" => {
                let (map, seg) = rest
                    .rsplit_once(':')
                    .ok_or_else(|| bad("expected oracle:<map-file>:<segment-id>"))?;
                let segment = seg.parse().map_err(|_| bad("segment id is not an integer"))?;
                if map.is_empty() {
                    return Err(bad("empty map path"));
                }
                Ok(ModelSpec::Oracle {
                    map: map.into(),
                    segment,
                })
            }
            "tinycnn" if !rest.is_empty() => Ok(ModelSpec::TinyCnn(rest.into())),
            "proc" if !rest.trim().is_empty() => Ok(ModelSpec::Process(rest.to_string())),
            "http" | "https" if rest.starts_with("//") => Ok(ModelSpec::Http(s.to_string())),
            "http" if !rest.is_empty() => Ok(ModelSpec::Http(rest.to_string())),
            _ => Err(bad("unknown or empty model spec")),
        }
    }
}

impl ModelSpec {
    /// Instantiates the adapter. `reference` is the image under explanation; the planted
    /// oracle compares its key segment against it.
    pub fn build(&self, reference: &RasterImage, timeout: Duration) -> Result<Box<dyn ModelAdapter>> {
        Ok(match self {
            ModelSpec::Oracle { map, segment } => {
                let map = SegmentMap::load_json(map)?;
                let spec = PlantedOracleSpec::new(map, *segment)?;
                Box::new(PlantedOracle::new(spec, reference.clone())?)
            }
            ModelSpec::TinyCnn(path) => {
                let spec = TinyCnnSpec::load(path)?;
                Box::new(TinyCnnAdapter::new(format!("tinycnn:{}", path.display()), spec))
            }
            ModelSpec::Process(cmd) => Box::new(ProcessAdapter::spawn(cmd, timeout)?),
            ModelSpec::Http(url) => Box::new(HttpAdapter::new(url.clone(), timeout)),
        })
    }
}
