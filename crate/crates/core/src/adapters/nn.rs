//! Inference-only tensor operations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ProbabilityVector, RasterImage, CHANNELS};

/// Height x width x channels tensor, channel-interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "tensor data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

impl From<&RasterImage> for Tensor3 {
    fn from(img: &RasterImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: CHANNELS,
            data: img.data().to_vec(),
        }
    }
}

/// A `k x k x in_channels x out_channels` filter bank, stored in that index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(
        size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if size == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::contract("convolution dimensions must be positive"));
        }
        if weights.len() != size * size * in_channels * out_channels {
            return Err(Error::contract(format!(
                "kernel has {} weights, expected {size}x{size}x{in_channels}x{out_channels}",
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_channels) {
            return Err(Error::contract("conv bias length must equal out_channels"));
        }
        Ok(Self {
            size,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn weight(&self, ky: usize, kx: usize, c: usize, f: usize) -> f64 {
        self.weights[((ky * self.size + kx) * self.in_channels + c) * self.out_channels + f]
    }
}

/// Output side length of a valid-padding convolution.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel <= input && stride > 0).then(|| (input - kernel) / stride + 1)
}

/// Valid-padding cross-correlation (no kernel flip).
pub fn conv2d(input: &Tensor3, kernel: &ConvKernel, stride: usize) -> Result<Tensor3> {
    if input.channels != kernel.in_channels {
        return Err(Error::contract(format!(
            "input has {} channels, kernel expects {}",
            input.channels, kernel.in_channels
        )));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_len(input.height, kernel.size, stride),
        conv_output_len(input.width, kernel.size, stride),
    ) else {
        return Err(Error::contract(format!(
            "kernel {} with stride {stride} does not fit a {}x{} input",
            kernel.size, input.height, input.width
        )));
    };
    let k = kernel.size;
    let f_n = kernel.out_channels;
    let mut out = Tensor3::zeros(oh, ow, f_n);
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out.data[(oy * ow + ox) * f_n..(oy * ow + ox + 1) * f_n];
            if let Some(b) = &kernel.bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                    let px = &input.data[(iy * input.width + ix) * input.channels..][..input.channels];
                    for (c, &v) in px.iter().enumerate() {
                        let w = &kernel.weights[((ky * k + kx) * kernel.in_channels + c) * f_n..][..f_n];
                        for (a, &wf) in acc.iter_mut().zip(w) {
                            *a += v * wf;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Per-channel inference batch normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> Result<Self> {
        let c = gamma.len();
        if c == 0 || beta.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::contract(
                "batchnorm parameter vectors must share a non-zero length",
            ));
        }
        if var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("batchnorm variance must be non-negative"));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("batchnorm epsilon must be positive"));
        }
        Ok(Self {
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// `gamma (x - mean) / sqrt(var + eps) + beta`, channel = index modulo channel count.
pub fn batchnorm_infer(x: &mut [f64], bn: &BatchNorm) -> Result<()> {
    let c = bn.channels();
    if !x.len().is_multiple_of(c) {
        return Err(Error::contract(format!(
            "{} values cannot be split into {c} channels",
            x.len()
        )));
    }
    let scale: Vec<f64> = (0..c).map(|i| bn.gamma[i] / (bn.var[i] + bn.eps).sqrt()).collect();
    for chunk in x.chunks_mut(c) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = scale[i] * (*v - bn.mean[i]) + bn.beta[i];
        }
    }
    Ok(())
}

/// `out = weights . x + bias` with `weights` stored `[out][in]` row-major.
pub fn dense(x: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let out_n = bias.len();
    if weights.len() != out_n * x.len() {
        return Err(Error::contract(format!(
            "dense weights have {} entries, expected {}x{}",
            weights.len(),
            out_n,
            x.len()
        )));
    }
    Ok(weights
        .chunks(x.len().max(1))
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    if logits.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector::new(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut x = [-1.0, 0.0, 2.5];
        relu(&mut x);
        assert_eq!(x, [0.0, 0.0, 2.5]);
    }

    #[test]
    fn identity_1x1_conv() {
        let input = Tensor3::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        let k = ConvKernel::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], None).unwrap();
        assert_eq!(conv2d(&input, &k, 1).unwrap(), input);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let c = 0.37;
        let input = Tensor3::new(5, 5, 1, vec![c; 25]).unwrap();
        let k = ConvKernel::new(3, 1, 1, vec![1.0; 9], None).unwrap();
        let out = conv2d(&input, &k, 1).unwrap();
        assert_eq!((out.height, out.width), (3, 3));
        for v in out.data {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let input = Tensor3::zeros(2, 2, 1);
        let k = ConvKernel::new(3, 1, 1, vec![1.0; 9], None).unwrap();
        assert!(conv2d(&input, &k, 1).is_err());
        let k = ConvKernel::new(1, 2, 1, vec![1.0; 2], None).unwrap();
        assert!(conv2d(&input, &k, 1).is_err());
    }

    #[test]
    fn batchnorm_cases() {
        let eps = DEFAULT_BN_EPS;
        let bn = BatchNorm::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0 - eps], eps).unwrap();
        let mut x = [0.3, -2.0, 7.5];
        batchnorm_infer(&mut x, &bn).unwrap();
        assert_eq!(x, [0.3, -2.0, 7.5]);

        let bn = BatchNorm::new(vec![2.0], vec![1.0], vec![3.0], vec![4.0], eps).unwrap();
        let mut x = [3.0, 5.0];
        batchnorm_infer(&mut x, &bn).unwrap();
        assert_eq!(x[0], 1.0);
        assert!((x[1] - (4.0 / 4.00001f64.sqrt() + 1.0)).abs() < 1e-12);
        assert!((x[1] - 2.99999).abs() < 1e-5);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1.0, 2.0]).unwrap();
        assert!((p.as_slice()[0] - 0.26894).abs() < 1e-5);
        assert!((p.as_slice()[1] - 0.73106).abs() < 1e-5);
        let p = softmax(&[1000.0, -1000.0]).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn dense_bias_only() {
        assert_eq!(dense(&[5.0, 6.0], &[0.0; 4], &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            dense(&[1.0, 2.0], &[1.0, 1.0, 0.0, 2.0], &[0.0, 0.0]).unwrap(),
            vec![3.0, 4.0]
        );
    }
}
