//! Model-based alternating solver.
//!
//! Each stage computes the exact minimiser `M̂_k` of the mask surrogate,
//! projects it with an explicit proximal map, then does the same for the
//! background: `B̂_k` in closed form followed by its proximal map. Both
//! closed forms are pixel-separable.

use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::model::{
    channel_products, check_image_mask, check_same, data_energy, sparsity_energy,
    surrogate_mask_energy, BackgroundProx, MaskProx, ResidualContext, SolverConfig,
};
use crate::tensor::{conv2d, smooth_sign, ImageTensor, MaskMap, Tensor};

/// Threshold turning a soft mask into a binary prediction.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Per-stage iterates. `c_hat` and `e` are only produced by the unfolded model.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    /// 1-based stage index.
    pub k: usize,
    pub m_hat: MaskMap,
    pub m: MaskMap,
    pub b_hat: ImageTensor,
    pub b: ImageTensor,
    pub c_hat: Option<ImageTensor>,
    pub e: Option<MaskMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub stage: usize,
    /// `½‖C − C·M_k − B_k‖²`
    pub data_energy: f64,
    /// Exact `α‖w·(M_k − M̃)‖₁` with the stage's context.
    pub sparsity_energy: f64,
    /// Mask surrogate at `M_{k-1}`.
    pub surrogate_before: f64,
    /// Mask surrogate at `M̂_k`.
    pub surrogate_after: f64,
    pub mae: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub stages: Vec<StageState>,
    pub trace: Vec<StageTrace>,
}

impl SolveResult {
    pub fn final_mask(&self) -> &MaskMap {
        &self.stages.last().expect("at least one stage").m
    }
}

/// Exact stationary point of [`surrogate_mask_energy`]:
///
/// ```text
/// M̂ = (Q_b·M_{k-1} + ΣC² − ΣC·B_{k-1} + Q_c) / Q_a
/// Q_a = ΣC² + αL·w² + μ          (L·w² with `paper_literal_qa`)
/// Q_b = αL·w·w_{k-1} + μ
/// Q_c = αL·w·(w·M̃ − Q_d) − α·w·∇S(w_{k-1}·M_{k-1} − Q_d)
/// ```
pub fn mask_closed_form(
    c: &ImageTensor,
    b_prev: &ImageTensor,
    ctx: &ResidualContext,
    cfg: &SolverConfig,
) -> Result<MaskMap> {
    check_image_mask(c, &ctx.m_prev)?;
    check_same(c, b_prev)?;
    let (csq, cb) = channel_products(c, b_prev);
    let (a, mu, l) = (cfg.alpha, cfg.mu, cfg.lipschitz);
    let al = a * l;
    let qa_weight = if cfg.paper_literal_qa { l } else { al };
    let mut out = Vec::with_capacity(csq.len());
    for i in 0..csq.len() {
        let w = ctx.w.data()[i];
        let w_prev = ctx.w_prev.data()[i];
        let qd = ctx.q_d.data()[i];
        let qa = csq[i] + qa_weight * w * w + mu;
        if qa.is_nan() || qa <= 0.0 {
            return Err(Error::Degenerate(format!("Q_a = {qa} at pixel {i}")));
        }
        let qb = al * w * w_prev + mu;
        let qc = al * w * (w * ctx.m_tilde.data()[i] - qd)
            - a * w * smooth_sign(ctx.r_prev.data()[i], cfg.eps_l1);
        out.push((qb * ctx.m_prev.data()[i] + csq[i] - cb[i] + qc) / qa);
    }
    MaskMap::raw(c.height(), c.width(), out)
}

/// `B̂ = (λ·B_{k-1} + C − C·M) / (1 + λ)`, per pixel and channel.
pub fn background_closed_form(
    c: &ImageTensor,
    b_prev: &ImageTensor,
    m: &MaskMap,
    lambda: f64,
) -> Result<ImageTensor> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    check_image_mask(c, m)?;
    check_same(c, b_prev)?;
    let ch = c.channels();
    let data = c
        .data()
        .iter()
        .zip(b_prev.data())
        .enumerate()
        .map(|(i, (cv, bv))| (lambda * bv + cv - cv * m.data()[i / ch]) / (1.0 + lambda))
        .collect();
    Tensor::new(c.shape(), data)
}

/// Explicit stand-in for `prox_ψ`: clamp to `[0, 1]`, optionally followed
/// by one anisotropic TV sweep.
pub fn prox_mask_explicit(m_hat: &MaskMap, cfg: &SolverConfig) -> MaskMap {
    let clamped = m_hat.clamp01();
    match cfg.mask_prox {
        MaskProx::Clamp => clamped,
        MaskProx::ClampTv => tv_sweep(&clamped, cfg.tv_weight).clamp01(),
    }
}

/// One explicit step on anisotropic TV over the 4-neighbourhood: each pixel
/// moves by `τ` times the mean sign of its neighbour differences.
fn tv_sweep(m: &MaskMap, tau: f64) -> MaskMap {
    let (h, w) = (m.height(), m.width());
    let mut out = Vec::with_capacity(m.len());
    for y in 0..h {
        for x in 0..w {
            let v = m.get(y, x);
            let mut acc = 0.0;
            let mut n = 0usize;
            let mut visit = |ny: usize, nx: usize| {
                acc += smooth_sign(m.get(ny, nx) - v, 0.0);
                n += 1;
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
            out.push(if n == 0 { v } else { v + tau * acc / n as f64 });
        }
    }
    MaskMap::raw(h, w, out).expect("finite")
}

/// Explicit stand-in for `prox_φ`: clamp, optionally followed by a 3×3
/// binomial blur.
pub fn prox_background_explicit(b_hat: &ImageTensor, cfg: &SolverConfig) -> ImageTensor {
    let clamped = b_hat.map(|v| v.clamp(0.0, 1.0));
    match cfg.background_prox {
        BackgroundProx::Clamp => clamped,
        BackgroundProx::Gaussian => binomial_blur(&clamped),
    }
}

fn binomial_blur(x: &ImageTensor) -> ImageTensor {
    let ch = x.channels();
    let taps = [1.0, 2.0, 1.0];
    let mut k = Tensor::zeros(&[3, 3, ch, ch]);
    for dy in 0..3 {
        for dx in 0..3 {
            for c in 0..ch {
                k.data_mut()[((dy * 3 + dx) * ch + c) * ch + c] = taps[dy] * taps[dx] / 16.0;
            }
        }
    }
    conv2d(x, &k).expect("valid blur kernel")
}

/// Runs the alternating solver from `M_0 = 0`, `B_0 = 0`.
pub fn solve(c: &ImageTensor, cfg: &SolverConfig) -> Result<SolveResult> {
    solve_with(c, cfg, None, None)
}

/// Runs the solver with an optional initial mask `M_0` (e.g. another
/// method's prediction) and optional ground truth for the trace metrics.
/// At stage 1 the missing `M_{-1}` is taken equal to `M_0`.
pub fn solve_with(
    c: &ImageTensor,
    cfg: &SolverConfig,
    init_mask: Option<&MaskMap>,
    gt: Option<&MaskMap>,
) -> Result<SolveResult> {
    cfg.validate()?;
    if c.rank() != 3 || !c.is_unit_range() {
        return Err(invalid(
            "solver input must be an h×w×c image with values in [0, 1]",
        ));
    }
    let (h, w) = (c.height(), c.width());
    let m0 = match init_mask {
        Some(m) => {
            if m.height() != h || m.width() != w {
                return Err(invalid("initial mask size differs from the image"));
            }
            m.clamp01()
        }
        None => MaskMap::zeros(h, w),
    };
    if let Some(g) = gt {
        check_image_mask(c, g)?;
    }

    let mut m_prev = m0.clone();
    let mut m_prev2 = m0;
    let mut b_prev = c.zeros_like();
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut trace = Vec::with_capacity(cfg.stages);

    for k in 1..=cfg.stages {
        let ctx = ResidualContext::new(&m_prev, &m_prev2)?;
        let m_hat = mask_closed_form(c, &b_prev, &ctx, cfg)?;
        let m = prox_mask_explicit(&m_hat, cfg);
        let b_hat = background_closed_form(c, &b_prev, &m, cfg.lambda)?;
        let b = prox_background_explicit(&b_hat, cfg);

        trace.push(StageTrace {
            stage: k,
            data_energy: data_energy(c, &m, &b)?,
            sparsity_energy: sparsity_energy(&m, &ctx, cfg.alpha)?,
            surrogate_before: surrogate_mask_energy(&m_prev, c, &b_prev, &ctx, cfg)?,
            surrogate_after: surrogate_mask_energy(&m_hat, c, &b_prev, &ctx, cfg)?,
            mae: gt.map(|g| metrics::mae(&m, g)).transpose()?,
            iou: gt
                .map(|g| metrics::iou(&m.threshold(MASK_THRESHOLD), g))
                .transpose()?,
        });

        m_prev2 = std::mem::replace(&mut m_prev, m.clone());
        b_prev = b.clone();
        stages.push(StageState {
            k,
            m_hat,
            m,
            b_hat,
            b,
            c_hat: None,
            e: None,
        });
    }
    Ok(SolveResult { stages, trace })
}
