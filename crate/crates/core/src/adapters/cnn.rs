//! Small convolutional classifiers evaluated from a weights file.
//!
//! A weights file is a JSON manifest listing the layers plus a little-endian `f32` blob.
//! Each parameter array in the manifest is `{"offset": <byte offset>, "len": <f32 count>}`
//! into the blob, which lives next to the manifest (`weights_file`, relative path).
//!
//! The dense head built by [`TinyCnnSpec::glaucoma_head`] uses three hidden layers of 100
//! units, each followed by batch normalization, ReLU and dropout(0.5); dropout is the
//! identity at inference.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, BatchNorm, ConvKernel, Tensor3};
use super::ModelAdapter;
use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage, CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { kernel: ConvKernel, stride: usize },
    Relu,
    BatchNorm(BatchNorm),
    Flatten,
    Dense { weights: Vec<f64>, bias: Vec<f64> },
    Dropout { rate: f64 },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    fn features(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }
}

/// A validated layer stack over a fixed `height x width x 3` input.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnnSpec {
    height: usize,
    width: usize,
    layers: Vec<Layer>,
}

impl TinyCnnSpec {
    /// Checks that layer shapes compose and that the stack ends in a 2-class softmax.
    pub fn new(height: usize, width: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = Shape::Spatial {
            h: height,
            w: width,
            c: CHANNELS,
        };
        let last = layers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Spec("empty layer list".into()))?;
        for (i, layer) in layers.iter().enumerate() {
            let err = |msg: String| Error::Spec(format!("layer {i}: {msg}"));
            shape = match (layer, shape) {
                (Layer::Conv { kernel, stride }, Shape::Spatial { h, w, c }) => {
                    if kernel.in_channels != c {
                        return Err(err(format!(
                            "conv expects {} channels, input has {c}",
                            kernel.in_channels
                        )));
                    }
                    match (
                        nn::conv_output_len(h, kernel.size, *stride),
                        nn::conv_output_len(w, kernel.size, *stride),
                    ) {
                        (Some(h), Some(w)) => Shape::Spatial {
                            h,
                            w,
                            c: kernel.out_channels,
                        },
                        _ => {
                            return Err(err(format!(
                                "kernel {} stride {stride} does not fit {h}x{w}",
                                kernel.size
                            )))
                        }
                    }
                }
                (Layer::Conv { .. }, Shape::Flat(_)) => return Err(err("conv after flatten".into())),
                (Layer::Relu, s) => s,
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(err(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    s
                }
                (Layer::BatchNorm(bn), s) => {
                    if bn.channels() != s.features() {
                        return Err(err(format!(
                            "batchnorm over {} channels, input has {}",
                            bn.channels(),
                            s.features()
                        )));
                    }
                    s
                }
                (Layer::Flatten, Shape::Spatial { h, w, c }) => Shape::Flat(h * w * c),
                (Layer::Flatten, s) => s,
                (Layer::Dense { weights, bias }, Shape::Flat(n)) => {
                    if weights.len() != bias.len() * n || bias.is_empty() {
                        return Err(err(format!(
                            "dense has {} weights for {} outputs over {n} inputs",
                            weights.len(),
                            bias.len()
                        )));
                    }
                    Shape::Flat(bias.len())
                }
                (Layer::Dense { .. }, Shape::Spatial { .. }) => return Err(err("dense needs a flatten first".into())),
                (Layer::Softmax, s) => {
                    if i != last {
                        return Err(err("softmax must be the final layer".into()));
                    }
                    s
                }
            };
        }
        if layers[last] != Layer::Softmax || shape != Shape::Flat(2) {
            return Err(Error::Spec("the final layer must be a softmax over 2 classes".into()));
        }
        Ok(Self { height, width, layers })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, image: &RasterImage) -> Result<ProbabilityVector> {
        if (image.width(), image.height()) != (self.width, self.height) {
            return Err(Error::contract(format!(
                "network expects {}x{} images, got {}x{}",
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        let mut tensor = Tensor3::from(image);
        let mut flat: Option<Vec<f64>> = None;
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernel, stride } => tensor = nn::conv2d(&tensor, kernel, *stride)?,
                Layer::Relu => nn::relu(flat.as_mut().unwrap_or(&mut tensor.data)),
                Layer::BatchNorm(bn) => nn::batchnorm_infer(flat.as_mut().unwrap_or(&mut tensor.data), bn)?,
                Layer::Flatten => {
                    if flat.is_none() {
                        flat = Some(std::mem::take(&mut tensor.data));
                    }
                }
                Layer::Dense { weights, bias } => {
                    let x = flat.as_deref().expect("validated: dense follows flatten");
                    flat = Some(nn::dense(x, weights, bias)?);
                }
                Layer::Dropout { .. } => {}
                Layer::Softmax => {
                    let x = flat.as_deref().expect("validated: softmax over a vector");
                    return nn::softmax(x);
                }
            }
        }
        unreachable!("validated: stack ends in softmax")
    }

    /// Conv stem plus a dense head with randomly initialized (Glorot-uniform) weights.
    pub fn glaucoma_head(height: usize, width: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let (k, stride, filters) = (3, 2, 4);
        let oh = nn::conv_output_len(height, k, stride)
            .ok_or_else(|| Error::Spec(format!("input {width}x{height} too small for the conv stem")))?;
        let ow = nn::conv_output_len(width, k, stride)
            .ok_or_else(|| Error::Spec(format!("input {width}x{height} too small for the conv stem")))?;
        let conv_w = glorot(k * k * CHANNELS, k * k * filters, k * k * CHANNELS * filters);
        let mut layers = vec![
            Layer::Conv {
                kernel: ConvKernel::new(k, CHANNELS, filters, conv_w, Some(vec![0.0; filters]))?,
                stride,
            },
            Layer::Relu,
            Layer::Flatten,
        ];
        let mut fan_in = oh * ow * filters;
        for &units in hidden {
            layers.push(Layer::Dense {
                weights: glorot(fan_in, units, fan_in * units),
                bias: vec![0.0; units],
            });
            layers.push(Layer::BatchNorm(BatchNorm::identity(units)));
            layers.push(Layer::Relu);
            layers.push(Layer::Dropout { rate: 0.5 });
            fan_in = units;
        }
        layers.push(Layer::Dense {
            weights: glorot(fan_in, 2, fan_in * 2),
            bias: vec![0.0; 2],
        });
        layers.push(Layer::Softmax);
        Self::new(height, width, layers)
    }

    /// Writes the manifest to `path` and the blob to `path` with a `.bin` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob_path = path.with_extension("bin");
        let mut blob = BlobWriter::default();
        let layers = self.layers.iter().map(|l| blob.layer(l)).collect();
        let manifest = Manifest {
            input: [self.height, self.width, CHANNELS],
            weights_file: PathBuf::from(blob_path.file_name().expect("file name")),
            layers,
        };
        crate::io::write_atomic(&blob_path, &blob.bytes)?;
        crate::io::write_json(path, &manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest =
            crate::io::read_json(path).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        if manifest.input[2] != CHANNELS {
            return Err(Error::Spec(format!("input must have {CHANNELS} channels")));
        }
        let blob_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.weights_file);
        let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let blob = Blob(&bytes);
        let layers = manifest
            .layers
            .into_iter()
            .map(|l| blob.layer(l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.input[0], manifest.input[1], layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerManifest {
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        weights: BlobRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<BlobRef>,
    },
    Relu,
    Batchnorm {
        gamma: BlobRef,
        beta: BlobRef,
        mean: BlobRef,
        var: BlobRef,
        eps: f64,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        weights: BlobRef,
        bias: BlobRef,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `[height, width, channels]`
    pub input: [usize; 3],
    pub weights_file: PathBuf,
    pub layers: Vec<LayerManifest>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, values: &[f64]) -> BlobRef {
        let offset = self.bytes.len();
        for &v in values {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        BlobRef {
            offset,
            len: values.len(),
        }
    }

    fn layer(&mut self, layer: &Layer) -> LayerManifest {
        match layer {
            Layer::Conv { kernel, stride } => LayerManifest::Conv {
                kernel: kernel.size,
                stride: *stride,
                in_channels: kernel.in_channels,
                out_channels: kernel.out_channels,
                weights: self.push(&kernel.weights),
                bias: kernel.bias.as_ref().map(|b| self.push(b)),
            },
            Layer::Relu => LayerManifest::Relu,
            Layer::BatchNorm(bn) => LayerManifest::Batchnorm {
                gamma: self.push(&bn.gamma),
                beta: self.push(&bn.beta),
                mean: self.push(&bn.mean),
                var: self.push(&bn.var),
                eps: bn.eps,
            },
            Layer::Flatten => LayerManifest::Flatten,
            Layer::Dense { weights, bias } => LayerManifest::Dense {
                inputs: weights.len() / bias.len(),
                outputs: bias.len(),
                weights: self.push(weights),
                bias: self.push(bias),
            },
            Layer::Dropout { rate } => LayerManifest::Dropout { rate: *rate },
            Layer::Softmax => LayerManifest::Softmax,
        }
    }
}

struct Blob<'a>(&'a [u8]);

impl Blob<'_> {
    fn read(&self, r: BlobRef) -> Result<Vec<f64>> {
        let end = r.len.checked_mul(4).and_then(|n| n.checked_add(r.offset));
        let bytes = end
            .and_then(|end| self.0.get(r.offset..end))
            .ok_or_else(|| Error::Spec(format!("blob range {r:?} outside {} bytes", self.0.len())))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }

    fn layer(&self, m: LayerManifest) -> Result<Layer> {
        Ok(match m {
            LayerManifest::Conv {
                kernel,
                stride,
                in_channels,
                out_channels,
                weights,
                bias,
            } => {
                let bias = bias.map(|b| self.read(b)).transpose()?;
                let kernel = ConvKernel::new(kernel, in_channels, out_channels, self.read(weights)?, bias)
                    .map_err(|e| Error::Spec(e.to_string()))?;
                Layer::Conv { kernel, stride }
            }
            LayerManifest::Relu => Layer::Relu,
            LayerManifest::Batchnorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => Layer::BatchNorm(
                BatchNorm::new(
                    self.read(gamma)?,
                    self.read(beta)?,
                    self.read(mean)?,
                    self.read(var)?,
                    eps,
                )
                .map_err(|e| Error::Spec(e.to_string()))?,
            ),
            LayerManifest::Flatten => Layer::Flatten,
            LayerManifest::Dense {
                inputs,
                outputs,
                weights,
                bias,
            } => {
                let (weights, bias) = (self.read(weights)?, self.read(bias)?);
                if weights.len() != inputs * outputs || bias.len() != outputs {
                    return Err(Error::Spec(format!(
                        "dense {inputs}->{outputs} has {} weights and {} biases",
                        weights.len(),
                        bias.len()
                    )));
                }
                Layer::Dense { weights, bias }
            }
            LayerManifest::Dropout { rate } => Layer::Dropout { rate },
            LayerManifest::Softmax => Layer::Softmax,
        })
    }
}

/// [`ModelAdapter`] over a [`TinyCnnSpec`].
pub struct TinyCnnAdapter {
    id: String,
    class_names: Vec<String>,
    spec: TinyCnnSpec,
}

impl TinyCnnAdapter {
    pub fn new(id: impl Into<String>, spec: TinyCnnSpec) -> Self {
        Self {
            id: id.into(),
            class_names: super::default_class_names(),
            spec,
        }
    }

    pub fn spec(&self) -> &TinyCnnSpec {
        &self.spec
    }
}

impl ModelAdapter for TinyCnnAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &[RasterImage]) -> Result<Vec<ProbabilityVector>> {
        images.iter().map(|img| self.spec.forward(img)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_image(w: usize, h: usize) -> RasterImage {
        RasterImage::from_fn(w, h, |x, y| [(x as f64) / (w as f64), (y as f64) / (h as f64), 0.5]).unwrap()
    }

    #[test]
    fn zero_dense_gives_uniform() {
        let spec = TinyCnnSpec::new(
            4,
            4,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights: vec![0.0; 2 * 48],
                    bias: vec![0.0, 0.0],
                },
                Layer::Softmax,
            ],
        )
        .unwrap();
        assert_eq!(spec.forward(&any_image(4, 4)).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn bias_only_path() {
        let spec = TinyCnnSpec::new(
            3,
            2,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights: vec![0.0; 2 * 18],
                    bias: vec![1f64.ln(), 3f64.ln()],
                },
                Layer::Softmax,
            ],
        )
        .unwrap();
        let p = spec.forward(&any_image(2, 3)).unwrap();
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_at_construction() {
        // dense without flatten
        assert!(TinyCnnSpec::new(
            2,
            2,
            vec![
                Layer::Dense {
                    weights: vec![0.0; 24],
                    bias: vec![0.0; 2]
                },
                Layer::Softmax
            ]
        )
        .is_err());
        // three output classes
        assert!(TinyCnnSpec::new(
            2,
            2,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights: vec![0.0; 36],
                    bias: vec![0.0; 3]
                },
                Layer::Softmax
            ]
        )
        .is_err());
        // no softmax
        assert!(TinyCnnSpec::new(2, 2, vec![Layer::Flatten]).is_err());
        // kernel larger than the input
        let k = ConvKernel::new(5, 3, 1, vec![0.0; 75], None).unwrap();
        assert!(TinyCnnSpec::new(4, 4, vec![Layer::Conv { kernel: k, stride: 1 }, Layer::Softmax]).is_err());
    }

    #[test]
    fn head_has_three_hidden_layers_and_round_trips() {
        let spec = TinyCnnSpec::glaucoma_head(12, 10, &[100, 100, 100], 5).unwrap();
        let dense = spec
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .count();
        assert_eq!(dense, 4);
        let img = any_image(10, 12);
        let p = spec.forward(&img).unwrap();
        assert_eq!(p.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        spec.save(&path).unwrap();
        let loaded = TinyCnnSpec::load(&path).unwrap();
        // weights pass through f32 on disk
        let q = loaded.forward(&img).unwrap();
        assert!((p.as_slice()[1] - q.as_slice()[1]).abs() < 1e-5);
    }

    #[test]
    fn wrong_image_size() {
        let spec = TinyCnnSpec::glaucoma_head(8, 8, &[4], 1).unwrap();
        assert!(spec.forward(&any_image(9, 8)).is_err());
    }

    #[test]
    fn truncated_blob_is_spec_error() {
        let spec = TinyCnnSpec::glaucoma_head(8, 8, &[4], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        spec.save(&path).unwrap();
        std::fs::write(dir.path().join("m.bin"), [0u8; 10]).unwrap();
        assert!(matches!(TinyCnnSpec::load(&path), Err(Error::Spec(_))));
    }
}
