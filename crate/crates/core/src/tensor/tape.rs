//! Reverse-mode gradient tape over the kernel set in [`super::kernels`].
//!
//! Every operation evaluates its forward value with the same kernel
//! whether or not the tape is recording; recording only adds the
//! bookkeeping needed by [`Tape::backward`].

use super::kernels::{
    self, avg_pool2, broadcast, channel_sum, conv2d, conv2d_backward, safe_div_scalar, sigmoid,
    smooth_sign, softplus, upsample_to, zip_broadcast, Bcast, EPS_DIV,
};
use super::Tensor;
use crate::error::{invalid, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    SafeDiv(Var, Var, Bcast, Bcast),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SmoothSign(Var, f64),
    Select(Var, Vec<bool>),
    ChannelSum(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Conv2d(Var, Var),
    AvgPool2(Var),
    Upsample(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] is unavailable.
    pub fn untaped() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a named parameter; [`Gradients::param`] reports its gradient.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Bcast, Bcast) -> Op,
    ) -> Result<Var> {
        let (_, ba, bb) = broadcast(self.shape(a), self.shape(b))?;
        let value = zip_broadcast(self.value(a), self.value(b), f)?;
        Ok(self.push(value, op(a, b, ba, bb)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// `a / max(|b|, EPS_DIV)`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, safe_div_scalar, Op::SafeDiv)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, 1.0)
    }

    pub fn smooth_sign(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| smooth_sign(x, eps), Op::SmoothSign(a, eps))
    }

    /// Keeps `a` where `keep` is set and takes `fill` elsewhere; gradient
    /// flows only through kept entries.
    pub fn select(&mut self, a: Var, keep: Vec<bool>, fill: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.numel() || fill.shape() != av.shape() {
            return Err(invalid("select: mask and fill must match the operand"));
        }
        let data = av
            .data()
            .iter()
            .zip(&keep)
            .zip(fill.data())
            .map(|((&x, &k), &f)| if k { x } else { f })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Select(a, keep)))
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 3 {
            return Err(invalid("channel_sum expects a rank-3 tensor"));
        }
        let value = channel_sum(self.value(a));
        Ok(self.push(value, Op::ChannelSum(a)))
    }

    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).channels() as f64;
        let s = self.channel_sum(a)?;
        Ok(self.scale(s, 1.0 / c))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_channels(&refs)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = conv2d(self.value(x), self.value(kernel))?;
        Ok(self.push(value, Op::Conv2d(x, kernel)))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 3 {
            return Err(invalid("avg_pool2 expects a rank-3 tensor"));
        }
        let value = avg_pool2(self.value(a));
        Ok(self.push(value, Op::AvgPool2(a)))
    }

    pub fn upsample_to(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let value = upsample_to(self.value(a), height, width)?;
        Ok(self.push(value, Op::Upsample(a)))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(invalid("backward on a tape that is not recording"));
        }
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "loss must be a scalar node, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b, ba, bb) => {
                    self.accumulate(&mut grads, *a, ba.reduce(&g, self.value(*a).numel()));
                    self.accumulate(&mut grads, *b, bb.reduce(&g, self.value(*b).numel()));
                }
                Op::Sub(a, b, ba, bb) => {
                    self.accumulate(&mut grads, *a, ba.reduce(&g, self.value(*a).numel()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *b, bb.reduce(&neg, self.value(*b).numel()));
                }
                Op::Mul(a, b, ba, bb) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| gj * bd[bb.index(j)])
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| gj * ad[ba.index(j)])
                        .collect();
                    self.accumulate(&mut grads, *a, ba.reduce(&ga, ad.len()));
                    self.accumulate(&mut grads, *b, bb.reduce(&gb, bd.len()));
                }
                Op::SafeDiv(a, b, ba, bb) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = Vec::with_capacity(g.len());
                    let mut gb = Vec::with_capacity(g.len());
                    for (j, gj) in g.iter().enumerate() {
                        let (x, y) = (ad[ba.index(j)], bd[bb.index(j)]);
                        let d = y.abs().max(EPS_DIV);
                        ga.push(gj / d);
                        gb.push(if y.abs() > EPS_DIV {
                            -gj * x * y.signum() / (d * d)
                        } else {
                            0.0
                        });
                    }
                    self.accumulate(&mut grads, *a, ba.reduce(&ga, ad.len()));
                    self.accumulate(&mut grads, *b, bb.reduce(&gb, bd.len()));
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Offset(a) => self.accumulate(&mut grads, *a, g.clone()),
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, zip(&g, x, |gj, xj| 2.0 * xj * gj));
                }
                Op::Sigmoid(a) => {
                    self.accumulate(&mut grads, *a, zip(&g, out, |gj, y| gj * y * (1.0 - y)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, zip(&g, x, |gj, xj| gj * sigmoid(xj)));
                }
                Op::Tanh(a) => {
                    self.accumulate(&mut grads, *a, zip(&g, out, |gj, y| gj * (1.0 - y * y)));
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    self.accumulate(&mut grads, *a, zip(&g, x, |gj, xj| gj / xj));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    let pass = |gj: f64, xj: f64| if xj >= *lo && xj <= *hi { gj } else { 0.0 };
                    self.accumulate(&mut grads, *a, zip(&g, x, pass));
                }
                Op::SmoothSign(a, eps) => {
                    let x = self.value(*a).data();
                    let e2 = eps * eps;
                    let d = |gj: f64, xj: f64| {
                        if e2 == 0.0 {
                            0.0
                        } else {
                            gj * e2 / (xj * xj + e2).powf(1.5)
                        }
                    };
                    self.accumulate(&mut grads, *a, zip(&g, x, d));
                }
                Op::Select(a, keep) => {
                    let ga = g
                        .iter()
                        .zip(keep)
                        .map(|(gj, &k)| if k { *gj } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ChannelSum(a) => {
                    let c = self.value(*a).channels();
                    let ga = (0..g.len() * c).map(|j| g[j / c]).collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let total = node.value.channels();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).channels();
                        let pixels = g.len() / total;
                        let mut gp = Vec::with_capacity(pixels * c);
                        for px in 0..pixels {
                            gp.extend_from_slice(&g[px * total + offset..][..c]);
                        }
                        self.accumulate(&mut grads, *p, gp);
                        offset += c;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    self.accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    self.accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Conv2d(x, k) => {
                    let (gx, gk) = conv2d_backward(self.value(*x), self.value(*k), &g);
                    self.accumulate(&mut grads, *x, gx);
                    self.accumulate(&mut grads, *k, gk);
                }
                Op::AvgPool2(a) => {
                    let (h, w, c) = self.value(*a).dim3();
                    let ow = w.div_ceil(2);
                    let mut ga = vec![0.0; h * w * c];
                    for y in 0..h {
                        let rows = if 2 * (y / 2) + 1 < h { 2 } else { 1 };
                        for x in 0..w {
                            let cols = if 2 * (x / 2) + 1 < w { 2 } else { 1 };
                            let count = (rows * cols) as f64;
                            let src = &g[((y / 2) * ow + x / 2) * c..][..c];
                            for (dst, s) in ga[(y * w + x) * c..][..c].iter_mut().zip(src) {
                                *dst = s / count;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Upsample(a) => {
                    let (_, iw, c) = self.value(*a).dim3();
                    let (h, w, _) = node.value.dim3();
                    let mut ga = vec![0.0; self.value(*a).numel()];
                    for y in 0..h {
                        for x in 0..w {
                            let dst = ((y / 2) * iw + x / 2) * c;
                            for ch in 0..c {
                                ga[dst + ch] += g[(y * w + x) * c + ch];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn zip(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to any node; zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.wrt(*v))
    }

    /// `(name, gradient)` for every registered parameter, in registration order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), self.wrt(*v)))
            .collect()
    }
}
