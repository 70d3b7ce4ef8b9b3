use super::Tensor;
use crate::error::{invalid, Result};

/// Single-channel per-pixel map (`M`, `M̂`, `M̃`, `w`, edge maps, ground truth).
///
/// `clamped` is true when every value is known to lie in `[0, 1]`. Raw
/// closed-form outputs are stored with `clamped == false` and may leave
/// the unit interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    clamped: bool,
}

impl MaskMap {
    /// A unit-range mask. Rejects values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            clamped: true,
        })
    }

    /// An unclamped map; values need only be finite.
    pub fn raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!(
                "{height}×{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("map contains non-finite values"));
        }
        let clamped = data.iter().all(|v| (0.0..=1.0).contains(v));
        Ok(Self {
            height,
            width,
            data,
            clamped,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
            clamped: (0.0..=1.0).contains(&value),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_clamped(&self) -> bool {
        self.clamped
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn clamp01(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            clamped: true,
        }
    }

    /// `1.0` where the value is at least `threshold`, else `0.0`.
    pub fn threshold(&self, threshold: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            clamped: true,
        }
    }

    pub fn same_size(&self, other: &MaskMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 1], self.data.clone()).expect("shape")
    }

    /// Converts an `h×w×1` tensor; the clamp flag is derived from the values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.channels() != 1 {
            return Err(invalid(format!(
                "mask needs an h×w×1 tensor, got {:?}",
                t.shape()
            )));
        }
        Self::raw(t.height(), t.width(), t.data().to_vec())
    }

    pub fn max_abs_diff(&self, other: &MaskMap) -> f64 {
        assert!(self.same_size(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
