use super::Tensor;
use crate::error::{invalid, Result};

/// Denominator floor for [`Elementwise::SafeDiv`].
pub const EPS_DIV: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    /// `a / max(|b|, EPS_DIV)`
    SafeDiv,
    /// `a · b` where `b` must be a scalar operand.
    Scale,
    /// Unary, `b` ignored.
    Clamp01,
    /// Unary, `b` ignored.
    Square,
}

#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

/// How an operand is indexed when it is broadcast to the output shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Full,
    Scalar,
    /// Single-channel `h×w×1` map spread across `channels`.
    Pixel {
        channels: usize,
    },
    /// Rank-1 per-channel vector (a bias) spread across pixels.
    Channel {
        channels: usize,
    },
}

impl Bcast {
    #[inline]
    pub(crate) fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Scalar => 0,
            Bcast::Pixel { channels } => i / channels,
            Bcast::Channel { channels } => i % channels,
        }
    }

    /// Sums an output-shaped gradient back to the operand's shape.
    pub(crate) fn reduce(self, grad: &[f64], operand_len: usize) -> Vec<f64> {
        match self {
            Bcast::Full => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; operand_len];
                for (i, g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// Resolves the output shape of a binary op and how each side is indexed.
pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Full));
    }
    if numel(b) == 1 {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if numel(a) == 1 {
        return Ok((b.to_vec(), Bcast::Scalar, Bcast::Full));
    }
    if a.len() == 3 && b.len() == 3 && a[..2] == b[..2] {
        if b[2] == 1 {
            return Ok((a.to_vec(), Bcast::Full, Bcast::Pixel { channels: a[2] }));
        }
        if a[2] == 1 {
            return Ok((b.to_vec(), Bcast::Pixel { channels: b[2] }, Bcast::Full));
        }
    }
    if a.len() == 3 && b.len() == 1 && b[0] == a[2] {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Channel { channels: a[2] }));
    }
    if b.len() == 3 && a.len() == 1 && a[0] == b[2] {
        return Ok((b.to_vec(), Bcast::Channel { channels: b[2] }, Bcast::Full));
    }
    Err(invalid(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (shape, ba, bb) = broadcast(a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| f(ad[ba.index(i)], bd[bb.index(i)]))
        .collect();
    Tensor::new(&shape, data)
}

#[inline]
pub(crate) fn safe_div_scalar(a: f64, b: f64) -> f64 {
    a / b.abs().max(EPS_DIV)
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    let scalar_b;
    let b = match b {
        Operand::Tensor(t) => t,
        Operand::Scalar(s) => {
            scalar_b = Tensor::scalar(s);
            &scalar_b
        }
    };
    match op {
        Elementwise::Add => zip_broadcast(a, b, |x, y| x + y),
        Elementwise::Sub => zip_broadcast(a, b, |x, y| x - y),
        Elementwise::Mul => zip_broadcast(a, b, |x, y| x * y),
        Elementwise::SafeDiv => zip_broadcast(a, b, safe_div_scalar),
        Elementwise::Scale => {
            let s = b
                .item()
                .map_err(|_| invalid("scale expects a scalar operand"))?;
            Ok(a.map(|x| x * s))
        }
        Elementwise::Clamp01 => Ok(clamp(a, 0.0, 1.0)),
        Elementwise::Square => Ok(a.map(|x| x * x)),
    }
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    a.map(|x| x.clamp(lo, hi))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Smoothed sign `x / sqrt(x² + eps²)`; exact sign (with `sign(0) = 0`)
/// when `eps == 0`.
#[inline]
pub fn smooth_sign(x: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        x / (x * x + eps * eps).sqrt()
    }
}

/// Mirror index for reflect padding (edge sample not repeated).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub(crate) fn reflect_table(n: usize, k: usize) -> Vec<usize> {
    let pad = (k / 2) as isize;
    (0..n + k - 1)
        .map(|i| reflect_index(i as isize - pad, n))
        .collect()
}

fn check_conv(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(invalid(format!(
            "conv2d expects an h×w×c input and kh×kw×cin×cout kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let (h, w, cin) = x.dim3();
    let ks = kernel.shape();
    let (kh, kw) = (ks[0], ks[1]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(invalid(format!(
            "conv2d kernel sides must be odd, got {kh}×{kw}"
        )));
    }
    if ks[2] != cin {
        return Err(invalid(format!(
            "kernel expects {} input channels, input has {cin}",
            ks[2]
        )));
    }
    Ok((h, w, cin, kh, kw, ks[3]))
}

/// 2-D cross-correlation with reflect padding; output keeps the input's
/// spatial size. Each output value is accumulated in `(dy, dx, cin)` order.
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, cin, kh, kw, cout) = check_conv(x, kernel)?;
    let rows = reflect_table(h, kh);
    let cols = reflect_table(w, kw);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xo in 0..w {
            let o = &mut out[(y * w + xo) * cout..][..cout];
            for dy in 0..kh {
                let sy = rows[y + dy];
                for dx in 0..kw {
                    let sx = cols[xo + dx];
                    let xin = &xd[(sy * w + sx) * cin..][..cin];
                    let ktap = &kd[(dy * kw + dx) * cin * cout..][..cin * cout];
                    for (ci, &v) in xin.iter().enumerate() {
                        let krow = &ktap[ci * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, cin) = x.dim3();
    let ks = kernel.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let rows = reflect_table(h, kh);
    let cols = reflect_table(w, kw);
    let xd = x.data();
    let kd = kernel.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for y in 0..h {
        for xo in 0..w {
            let go = &grad_out[(y * w + xo) * cout..][..cout];
            for dy in 0..kh {
                let sy = rows[y + dy];
                for dx in 0..kw {
                    let sx = cols[xo + dx];
                    let base = (sy * w + sx) * cin;
                    let tap = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = xd[base + ci];
                        let krow = &kd[tap + ci * cout..][..cout];
                        let gkrow = &mut gk[tap + ci * cout..][..cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += go[co] * krow[co];
                            gkrow[co] += go[co] * v;
                        }
                        gx[base + ci] += acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

pub fn channel_sum(x: &Tensor) -> Tensor {
    let (h, w, c) = x.dim3();
    let data = x.data().chunks(c).map(|px| px.iter().sum()).collect();
    Tensor::new(&[h, w, 1], data).expect("shape")
}

pub fn channel_mean(x: &Tensor) -> Tensor {
    let c = x.channels() as f64;
    channel_sum(x).map(|v| v / c)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat of zero tensors"))?;
    let (h, w, _) = first.dim3();
    for p in parts {
        if p.rank() != 3 || p.height() != h || p.width() != w {
            return Err(invalid("concat needs equal spatial sizes"));
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for p in parts {
            let c = p.channels();
            data.extend_from_slice(&p.data()[px * c..][..c]);
        }
    }
    Tensor::new(&[h, w, total], data)
}

/// 2×2 average pooling; odd trailing rows/columns pool over the pixels
/// that exist, so the output is `ceil(h/2) × ceil(w/2)`.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w, c) = x.dim3();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * c];
    let xd = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let o = &mut out[(oy * ow + ox) * c..][..c];
            for y in ys {
                for xx in xs.clone() {
                    for (acc, v) in o.iter_mut().zip(&xd[(y * w + xx) * c..][..c]) {
                        *acc += v;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v /= count);
        }
    }
    Tensor::new(&[oh, ow, c], out).expect("shape")
}

/// Nearest-neighbour ×2 upsampling cropped to `height × width`.
pub fn upsample_to(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = x.dim3();
    if height.div_ceil(2) != h || width.div_ceil(2) != w {
        return Err(invalid(format!(
            "cannot upsample {h}×{w} to {height}×{width}"
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        for xx in 0..width {
            out.extend_from_slice(&xd[((y / 2) * w + xx / 2) * c..][..c]);
        }
    }
    Tensor::new(&[height, width, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mul_elementwise() {
        let out = elementwise(
            Elementwise::Mul,
            &t(&[0.5, 1.0]),
            Operand::Tensor(&t(&[0.2, 0.3])),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.1, 0.3]);
    }

    #[test]
    fn safe_div_guards_zero() {
        let out = elementwise(
            Elementwise::SafeDiv,
            &t(&[1.0]),
            Operand::Tensor(&t(&[0.0])),
        )
        .unwrap();
        assert_eq!(out.data(), &[1e6]);
        assert!(out.is_finite());
    }

    #[test]
    fn clamp01_boundaries() {
        let out =
            elementwise(Elementwise::Clamp01, &t(&[-0.2, 1.3]), Operand::Scalar(0.0)).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = elementwise(
            Elementwise::Add,
            &t(&[1.0, 2.0]),
            Operand::Tensor(&t(&[1.0, 2.0, 3.0])),
        );
        assert!(matches!(err, Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn scale_and_square() {
        let a = t(&[1.0, -2.0]);
        assert_eq!(
            elementwise(Elementwise::Scale, &a, Operand::Scalar(3.0))
                .unwrap()
                .data(),
            &[3.0, -6.0]
        );
        assert_eq!(
            elementwise(Elementwise::Square, &a, Operand::Scalar(0.0))
                .unwrap()
                .data(),
            &[1.0, 4.0]
        );
    }

    #[test]
    fn mask_broadcasts_over_channels() {
        let img = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = Tensor::new(&[1, 2, 1], vec![0.5, 2.0]).unwrap();
        let out = elementwise(Elementwise::Mul, &img, Operand::Tensor(&m)).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0, 1.5, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[4, 5, 2], (0..40).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut k = Tensor::zeros(&[3, 3, 2, 2]);
        // center tap, identity over channels
        let center = 4 * 4;
        k.data_mut()[center] = 1.0;
        k.data_mut()[center + 3] = 1.0;
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_box_on_constant() {
        let x = Tensor::full(&[6, 6, 1], 0.37);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0);
        let y = conv2d(&x, &k).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let x = Tensor::zeros(&[4, 4, 1]);
        let k = Tensor::zeros(&[2, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &k),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pool_and_upsample_odd_sizes() {
        let x = Tensor::new(&[3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let p = avg_pool2(&x);
        assert_eq!(p.shape(), &[2, 2, 1]);
        assert_eq!(p.data(), &[3.0, 4.5, 7.5, 9.0]);
        let u = upsample_to(&p, 3, 3).unwrap();
        assert_eq!(u.data(), &[3.0, 3.0, 4.5, 3.0, 3.0, 4.5, 7.5, 7.5, 9.0]);
    }

    #[test]
    fn softplus_and_sigmoid_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
