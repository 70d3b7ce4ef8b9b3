use crate::error::{invalid, Result};
use crate::tensor::{reflect_index, ImageTensor, Tensor};

/// Channels of [`FeatureBank`]: three intensity channels, gradient
/// magnitude at scales 1 and 2, and 5×5 local variance.
pub const FEATURE_CHANNELS: usize = 6;

const GRADIENT_GAIN: f64 = 2.0;
const VARIANCE_GAIN: f64 = 10.0;

/// Fixed, deterministic feature stack derived from the input image. It
/// plays the role of the encoder features fed to the mask refiner.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Tensor,
}

impl FeatureBank {
    pub fn new(c: &ImageTensor) -> Result<Self> {
        if c.rank() != 3 || !(c.channels() == 1 || c.channels() == 3) {
            return Err(invalid("feature bank needs an h×w×1 or h×w×3 image"));
        }
        let (h, w, ch) = c.dim3();
        let luma: Vec<f64> = c
            .data()
            .chunks(ch)
            .map(|p| p.iter().sum::<f64>() / ch as f64)
            .collect();
        let at =
            |img: &[f64], y: isize, x: isize| img[reflect_index(y, h) * w + reflect_index(x, w)];

        let grad = |img: &[f64], step: isize| -> Vec<f64> {
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let gx = (at(img, y, x + step) - at(img, y, x - step)) / (2 * step) as f64;
                    let gy = (at(img, y + step, x) - at(img, y - step, x)) / (2 * step) as f64;
                    out.push(GRADIENT_GAIN * (gx * gx + gy * gy).sqrt());
                }
            }
            out
        };
        let box_mean = |img: &[f64], radius: isize| -> Vec<f64> {
            let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = 0.0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            s += at(img, y + dy, x + dx);
                        }
                    }
                    out.push(s / n);
                }
            }
            out
        };

        let smooth = {
            let taps = [1.0, 2.0, 1.0];
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = 0.0;
                    for (dy, ty) in taps.iter().enumerate() {
                        for (dx, tx) in taps.iter().enumerate() {
                            s += ty * tx * at(&luma, y + dy as isize - 1, x + dx as isize - 1);
                        }
                    }
                    out.push(s / 16.0);
                }
            }
            out
        };
        let g1 = grad(&luma, 1);
        let g2 = grad(&smooth, 2);
        let mean = box_mean(&luma, 2);
        let sq: Vec<f64> = luma.iter().map(|v| v * v).collect();
        let mean_sq = box_mean(&sq, 2);

        let mut data = Vec::with_capacity(h * w * FEATURE_CHANNELS);
        for px in 0..h * w {
            for k in 0..3 {
                data.push(c.data()[px * ch + if ch == 1 { 0 } else { k }]);
            }
            data.push(g1[px]);
            data.push(g2[px]);
            data.push(VARIANCE_GAIN * (mean_sq[px] - mean[px] * mean[px]).max(0.0));
        }
        Ok(Self {
            features: Tensor::new(&[h, w, FEATURE_CHANNELS], data)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_flat_features() {
        let c = Tensor::full(&[7, 9, 3], 0.3);
        let f = FeatureBank::new(&c).unwrap();
        assert_eq!(f.tensor().shape(), &[7, 9, FEATURE_CHANNELS]);
        for px in f.tensor().data().chunks(FEATURE_CHANNELS) {
            assert_eq!(&px[..3], &[0.3, 0.3, 0.3]);
            assert!(px[3..].iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn gray_is_replicated_and_deterministic() {
        let c = Tensor::image(4, 4, 1, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let a = FeatureBank::new(&c).unwrap();
        let b = FeatureBank::new(&c).unwrap();
        assert_eq!(a, b);
        let i = (4 + 1) * FEATURE_CHANNELS;
        let px = &a.tensor().data()[i..i + FEATURE_CHANNELS];
        assert_eq!(px[0], px[1]);
        assert_eq!(px[1], px[2]);
        assert!(px[3] > 0.0);
    }
}
