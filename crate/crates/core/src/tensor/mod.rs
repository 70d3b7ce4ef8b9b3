//! Dense tensors, the fixed set of numeric kernels the solver and the
//! unfolded network need, and a reverse-mode tape over those kernels.
//!
//! Images are rank-3 tensors in row-major `height × width × channels`
//! layout. Convolution kernels are rank-4 `kh × kw × cin × cout`. Scalars
//! are rank-0.

mod kernels;
mod mask;
mod tape;

pub use kernels::{
    avg_pool2, channel_mean, channel_sum, clamp, concat_channels, conv2d, elementwise,
    reflect_index, sigmoid, smooth_sign, softplus, upsample_to, Elementwise, Operand, EPS_DIV,
};
pub use mask::MaskMap;
pub use tape::{Gradients, Tape, Var};

use crate::error::{invalid, Result};

/// An image-valued tensor (`C`, `B`, `Ĉ`, feature maps).
pub type ImageTensor = Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-3 image constructor; rejects non-finite values and channel
    /// counts other than 1 or 3.
    pub fn image(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid(format!(
                "images carry 1 or 3 channels, got {channels}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image contains non-finite values"));
        }
        Self::new(&[height, width, channels], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.dim3().0
    }

    pub fn width(&self) -> usize {
        self.dim3().1
    }

    pub fn channels(&self) -> usize {
        self.dim3().2
    }

    /// `(height, width, channels)` of a rank-3 tensor.
    ///
    /// # Panics
    /// If the tensor is not rank 3.
    pub fn dim3(&self) -> (usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            3,
            "expected a rank-3 tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = self.dim3();
        self.data[(y * w + x) * ch + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(invalid(format!(
                "tensor of shape {:?} is not a scalar",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
