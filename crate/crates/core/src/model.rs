//! The segmentation energy
//!
//! ```text
//! L(M, B) = ½‖C − C·M − B‖² + μψ(M) + λφ(B) + α‖w·(M − M̃)‖₁
//! ```
//!
//! together with the uncertainty-removal map that produces `M̃` and `w`,
//! the smoothed ℓ1 gradient, and the per-update sub-objectives the solver
//! minimises in closed form. The mask `M` is single-channel and broadcast
//! across image channels, so every data term sums over channels.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::tensor::{smooth_sign, ImageTensor, MaskMap};

/// Explicit stand-in for the mask prior's proximal map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskProx {
    #[default]
    Clamp,
    /// Clamp followed by one anisotropic TV sweep.
    ClampTv,
}

/// Explicit stand-in for the background prior's proximal map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackgroundProx {
    #[default]
    Clamp,
    /// 3×3 binomial blur, then clamp.
    Gaussian,
}

impl fmt::Display for MaskProx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskProx::Clamp => "clamp",
            MaskProx::ClampTv => "clamp+tv",
        })
    }
}

impl FromStr for MaskProx {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clamp" => Ok(MaskProx::Clamp),
            "clamp+tv" => Ok(MaskProx::ClampTv),
            _ => Err(format!("unknown mask prox `{s}`")),
        }
    }
}

impl fmt::Display for BackgroundProx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackgroundProx::Clamp => "clamp",
            BackgroundProx::Gaussian => "gaussian",
        })
    }
}

impl FromStr for BackgroundProx {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clamp" => Ok(BackgroundProx::Clamp),
            "gaussian" => Ok(BackgroundProx::Gaussian),
            _ => Err(format!("unknown background prox `{s}`")),
        }
    }
}

/// Scalar hyperparameters of the energy and the iteration schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Weight of the residual sparsity term.
    pub alpha: f64,
    /// Mask proximal weight.
    pub mu: f64,
    /// Background proximal weight.
    pub lambda: f64,
    /// Curvature of the quadratic surrogate replacing the ℓ1 term.
    pub lipschitz: f64,
    /// Smoothing of the ℓ1 gradient; `0` gives the exact sign.
    pub eps_l1: f64,
    pub stages: usize,
    /// Use `Q_a = ΣC² + L·w² + μ` instead of the stationary `ΣC² + αL·w² + μ`.
    pub paper_literal_qa: bool,
    pub mask_prox: MaskProx,
    pub background_prox: BackgroundProx,
    /// Step of the TV sweep in [`MaskProx::ClampTv`].
    pub tv_weight: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mu: 1.0,
            lambda: 1.0,
            lipschitz: 1.0,
            eps_l1: 1e-3,
            stages: 4,
            paper_literal_qa: false,
            mask_prox: MaskProx::Clamp,
            background_prox: BackgroundProx::Clamp,
            tv_weight: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.mu,
            self.lambda,
            self.lipschitz,
            self.eps_l1,
            self.tv_weight,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("solver weights must be finite"));
        }
        if self.alpha < 0.0 {
            return Err(invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.mu <= 0.0 {
            return Err(invalid(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.lambda < 0.0 {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lipschitz <= 0.0 {
            return Err(invalid(format!(
                "lipschitz must be > 0, got {}",
                self.lipschitz
            )));
        }
        if self.eps_l1 < 0.0 {
            return Err(invalid(format!("eps_l1 must be >= 0, got {}", self.eps_l1)));
        }
        if self.tv_weight < 0.0 {
            return Err(invalid(format!(
                "tv_weight must be >= 0, got {}",
                self.tv_weight
            )));
        }
        if self.stages == 0 {
            return Err(invalid("stages must be >= 1"));
        }
        Ok(())
    }
}

/// Snapped target and attention weight for one mask value.
///
/// `[0.1, 0.4) → 0.1`, `(0.6, 0.9] → 0.9`, anything else passes through;
/// the weight is `0` on `[0.4, 0.6]` and `1` elsewhere.
#[inline]
pub fn uncertainty_removal_value(m: f64) -> (f64, f64) {
    let tilde = if (0.1..0.4).contains(&m) {
        0.1
    } else if m > 0.6 && m <= 0.9 {
        0.9
    } else {
        m
    };
    let w = if (0.4..=0.6).contains(&m) { 0.0 } else { 1.0 };
    (tilde, w)
}

/// True where `M̃` equals `M` (gradient passes through the mapping).
#[inline]
pub(crate) fn uncertainty_passes_through(m: f64) -> bool {
    !((0.1..0.4).contains(&m) || (m > 0.6 && m <= 0.9))
}

/// Returns `(M̃, w)`.
pub fn uncertainty_removal(m: &MaskMap) -> Result<(MaskMap, MaskMap)> {
    if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!(
            "uncertainty removal needs values in [0, 1], got {v}"
        )));
    }
    let (tilde, w): (Vec<f64>, Vec<f64>) = m
        .data()
        .iter()
        .map(|&v| uncertainty_removal_value(v))
        .unzip();
    Ok((
        MaskMap::new(m.height(), m.width(), tilde)?,
        MaskMap::new(m.height(), m.width(), w)?,
    ))
}

/// Everything the mask update needs from the two previous iterates.
///
/// `m_tilde`, `w` come from `M_{k-1}`; `r_prev = w_{k-1}·(M_{k-1} − M̃_{k-1})`
/// and `q_d = w_{k-1}·M̃_{k-1}` use the map built from `M_{k-2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualContext {
    pub m_tilde: MaskMap,
    pub w: MaskMap,
    pub m_prev: MaskMap,
    pub r_prev: MaskMap,
    pub q_d: MaskMap,
    /// `w_{k-1}`, kept for `Q_b`.
    pub w_prev: MaskMap,
}

impl ResidualContext {
    pub fn new(m_prev: &MaskMap, m_prev2: &MaskMap) -> Result<Self> {
        if !m_prev.same_size(m_prev2) {
            return Err(invalid("previous masks differ in size"));
        }
        let (m_tilde, w) = uncertainty_removal(m_prev)?;
        let (tilde_prev, w_prev) = uncertainty_removal(m_prev2)?;
        let q_d: Vec<f64> = w_prev
            .data()
            .iter()
            .zip(tilde_prev.data())
            .map(|(w, t)| w * t)
            .collect();
        let r_prev: Vec<f64> = w_prev
            .data()
            .iter()
            .zip(m_prev.data())
            .zip(&q_d)
            .map(|((w, m), q)| w * m - q)
            .collect();
        let (h, wd) = (m_prev.height(), m_prev.width());
        Ok(Self {
            m_tilde,
            w,
            m_prev: m_prev.clone(),
            r_prev: MaskMap::raw(h, wd, r_prev)?,
            q_d: MaskMap::raw(h, wd, q_d)?,
            w_prev,
        })
    }

    fn check(&self, m: &MaskMap) -> Result<()> {
        if !self.m_prev.same_size(m) {
            return Err(invalid("mask and residual context differ in size"));
        }
        Ok(())
    }
}

/// Smoothed gradient of the ℓ1 norm, `r / sqrt(r² + ε²)`; `sign(r)` at `ε = 0`.
pub fn l1_grad(r: &MaskMap, eps_l1: f64) -> MaskMap {
    let data = r.data().iter().map(|&v| smooth_sign(v, eps_l1)).collect();
    MaskMap::raw(r.height(), r.width(), data).expect("finite by construction")
}

pub(crate) fn check_image_mask(c: &ImageTensor, m: &MaskMap) -> Result<()> {
    if c.rank() != 3 || c.height() != m.height() || c.width() != m.width() {
        return Err(invalid(format!(
            "image {:?} and {}×{} mask are incompatible",
            c.shape(),
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

pub(crate) fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-pixel `Σ_c C_c²` and `Σ_c C_c·B_c`.
pub(crate) fn channel_products(c: &ImageTensor, b: &ImageTensor) -> (Vec<f64>, Vec<f64>) {
    let ch = c.channels();
    c.data()
        .chunks(ch)
        .zip(b.data().chunks(ch))
        .map(|(cp, bp)| {
            let mut csq = 0.0;
            let mut cb = 0.0;
            for (cv, bv) in cp.iter().zip(bp) {
                csq += cv * cv;
                cb += cv * bv;
            }
            (csq, cb)
        })
        .unzip()
}

/// `½ Σ (C − C·M − B)²` over pixels and channels.
pub fn data_energy(c: &ImageTensor, m: &MaskMap, b: &ImageTensor) -> Result<f64> {
    check_image_mask(c, m)?;
    check_same(c, b)?;
    let ch = c.channels();
    let mut e = 0.0;
    for (px, (cp, bp)) in c.data().chunks(ch).zip(b.data().chunks(ch)).enumerate() {
        let mv = m.data()[px];
        for (cv, bv) in cp.iter().zip(bp) {
            let r = cv - cv * mv - bv;
            e += r * r;
        }
    }
    Ok(0.5 * e)
}

/// Exact `α Σ |w·(M − M̃)|`.
pub fn sparsity_energy(m: &MaskMap, ctx: &ResidualContext, alpha: f64) -> Result<f64> {
    ctx.check(m)?;
    let s: f64 = m
        .data()
        .iter()
        .zip(ctx.w.data())
        .zip(ctx.m_tilde.data())
        .map(|((mv, w), t)| (w * (mv - t)).abs())
        .sum();
    Ok(alpha * s)
}

/// The quadratic the mask closed form minimises:
///
/// ```text
/// ½‖C − C·M̂ − B_{k-1}‖² + μ/2 ‖M̂ − M_{k-1}‖²
///   + αL/2 ‖w·(M̂ − M̃) − R_{k-1} + ∇S(R_{k-1})/L‖²
/// ```
pub fn surrogate_mask_energy(
    m_hat: &MaskMap,
    c: &ImageTensor,
    b_prev: &ImageTensor,
    ctx: &ResidualContext,
    cfg: &SolverConfig,
) -> Result<f64> {
    ctx.check(m_hat)?;
    let data = data_energy(c, m_hat, b_prev)?;
    let (a, mu, l) = (cfg.alpha, cfg.mu, cfg.lipschitz);
    let mut prox = 0.0;
    let mut taylor = 0.0;
    for i in 0..m_hat.len() {
        let m = m_hat.data()[i];
        let d = m - ctx.m_prev.data()[i];
        prox += d * d;
        let rp = ctx.r_prev.data()[i];
        let t =
            ctx.w.data()[i] * (m - ctx.m_tilde.data()[i]) - rp + smooth_sign(rp, cfg.eps_l1) / l;
        taylor += t * t;
    }
    Ok(data + 0.5 * mu * prox + 0.5 * a * l * taylor)
}

/// Analytic derivative of [`surrogate_mask_energy`] with respect to `M̂`.
pub fn surrogate_mask_gradient(
    m_hat: &MaskMap,
    c: &ImageTensor,
    b_prev: &ImageTensor,
    ctx: &ResidualContext,
    cfg: &SolverConfig,
) -> Result<MaskMap> {
    ctx.check(m_hat)?;
    check_image_mask(c, m_hat)?;
    check_same(c, b_prev)?;
    let (csq, cb) = channel_products(c, b_prev);
    let (a, mu, l) = (cfg.alpha, cfg.mu, cfg.lipschitz);
    let data = (0..m_hat.len())
        .map(|i| {
            let m = m_hat.data()[i];
            let w = ctx.w.data()[i];
            let rp = ctx.r_prev.data()[i];
            // d/dM ½Σ(C − CM − B)² = M·ΣC² − ΣC² + ΣCB
            let data_term = m * csq[i] - csq[i] + cb[i];
            let prox = mu * (m - ctx.m_prev.data()[i]);
            let t = w * (m - ctx.m_tilde.data()[i]) - rp + smooth_sign(rp, cfg.eps_l1) / l;
            data_term + prox + a * l * w * t
        })
        .collect();
    MaskMap::raw(m_hat.height(), m_hat.width(), data)
}

/// The background sub-objective `½‖C − C·M − B‖² + λ/2 ‖B − B_{k-1}‖²`.
pub fn background_energy(
    c: &ImageTensor,
    m: &MaskMap,
    b: &ImageTensor,
    b_prev: &ImageTensor,
    lambda: f64,
) -> Result<f64> {
    check_same(b, b_prev)?;
    let data = data_energy(c, m, b)?;
    let prox: f64 = b
        .data()
        .iter()
        .zip(b_prev.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(data + 0.5 * lambda * prox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(v: f64) -> MaskMap {
        MaskMap::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn uncertainty_removal_branches() {
        assert_eq!(uncertainty_removal_value(0.2), (0.1, 1.0));
        assert_eq!(uncertainty_removal_value(0.5), (0.5, 0.0));
        assert_eq!(uncertainty_removal_value(0.95), (0.95, 1.0));
        assert_eq!(uncertainty_removal_value(0.4), (0.4, 0.0));
        assert_eq!(uncertainty_removal_value(0.6), (0.6, 0.0));
        assert_eq!(uncertainty_removal_value(0.1), (0.1, 1.0));
        assert_eq!(uncertainty_removal_value(0.9), (0.9, 1.0));
        assert_eq!(uncertainty_removal_value(0.05), (0.05, 1.0));
        assert_eq!(uncertainty_removal_value(0.7), (0.9, 1.0));
    }

    #[test]
    fn uncertainty_removal_rejects_out_of_range() {
        let m = MaskMap::raw(1, 2, vec![0.5, 1.2]).unwrap();
        assert!(uncertainty_removal(&m).is_err());
    }

    #[test]
    fn uncertainty_removal_idempotent_on_confident_pixels() {
        let m = MaskMap::new(1, 6, vec![0.0, 0.15, 0.3, 0.7, 0.85, 1.0]).unwrap();
        let (t1, w1) = uncertainty_removal(&m).unwrap();
        let (t2, w2) = uncertainty_removal(&t1).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn l1_grad_values() {
        assert_eq!(l1_grad(&single(0.0), 1e-3).data(), &[0.0]);
        assert_eq!(l1_grad(&single(0.0), 0.0).data(), &[0.0]);
        assert_eq!(l1_grad(&single(1.0), 0.0).data(), &[1.0]);
        let g = l1_grad(&single(0.3), 0.1).data()[0];
        assert!((g - 0.3 / 0.1f64.sqrt()).abs() < 1e-12);
        assert!((g - 0.948_683).abs() < 1e-6);
    }

    #[test]
    fn data_energy_hand_cases() {
        let c = Tensor::image(1, 1, 1, vec![1.0]).unwrap();
        let b = Tensor::image(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(data_energy(&c, &single(0.0), &b).unwrap(), 0.5);

        let c = Tensor::image(1, 2, 3, vec![0.2, 0.4, 0.6, 0.9, 0.1, 0.5]).unwrap();
        let m = MaskMap::new(1, 2, vec![0.25, 0.75]).unwrap();
        let b = c.map(|v| v);
        let mut b = b;
        for px in 0..2 {
            for ch in 0..3 {
                let i = px * 3 + ch;
                b.data_mut()[i] = c.data()[i] * (1.0 - m.data()[px]);
            }
        }
        assert!(data_energy(&c, &m, &b).unwrap().abs() < 1e-30);
    }

    #[test]
    fn data_energy_shape_mismatch() {
        let c = Tensor::image(2, 2, 1, vec![0.0; 4]).unwrap();
        let b = Tensor::image(2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(data_energy(&c, &MaskMap::zeros(2, 2), &b).is_err());
        assert!(data_energy(&c, &MaskMap::zeros(1, 2), &c).is_err());
    }

    #[test]
    fn sparsity_energy_hand_cases() {
        let m = MaskMap::new(2, 2, vec![0.3; 4]).unwrap();
        let mut ctx = ResidualContext::new(&m, &m).unwrap();
        ctx.m_tilde = MaskMap::new(2, 2, vec![0.1; 4]).unwrap();
        ctx.w = MaskMap::new(2, 2, vec![1.0; 4]).unwrap();
        let e = sparsity_energy(&m, &ctx, 0.5).unwrap();
        assert!((e - 0.4).abs() < 1e-12);

        ctx.w = MaskMap::zeros(2, 2);
        assert_eq!(sparsity_energy(&m, &ctx, 0.5).unwrap(), 0.0);

        let ctx = ResidualContext::new(&m, &m).unwrap();
        let same = ctx.m_tilde.clone();
        let mut ctx2 = ctx.clone();
        ctx2.m_tilde = same.clone();
        assert_eq!(sparsity_energy(&same, &ctx2, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn surrogate_reduces_to_data_energy() {
        let c = Tensor::image(2, 2, 1, vec![0.3, 0.6, 0.9, 0.1]).unwrap();
        let b = Tensor::image(2, 2, 1, vec![0.2, 0.1, 0.4, 0.0]).unwrap();
        let m = MaskMap::new(2, 2, vec![0.2, 0.5, 0.8, 0.45]).unwrap();
        let prev = MaskMap::new(2, 2, vec![0.1, 0.7, 0.3, 0.95]).unwrap();
        let ctx = ResidualContext::new(&prev, &prev).unwrap();
        let cfg = SolverConfig {
            alpha: 0.0,
            mu: 0.0,
            ..SolverConfig::default()
        };
        let s = surrogate_mask_energy(&m, &c, &b, &ctx, &cfg).unwrap();
        assert!((s - data_energy(&c, &m, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            mu: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            stages: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            alpha: f64::NAN,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
