//! Unfolded multistage network.
//!
//! Every stage mirrors one solver iteration. The foreground step (SOFS)
//! evaluates the mask closed form with learnable scalars and a learnable
//! ℓ1-gradient slope, then refines it with two convolutional branches of
//! different receptive field: a small 3×3 stack fed with `E(C)·M̂ + E(C)`
//! and a separable 11×11 stack fed with `E(C)·(B/C) + E(C)`. Their sum
//! feeds a mask head and an edge head. The background step (ROBE)
//! evaluates the background closed form with a learnable `λ` and refines
//! it with a three-level encoder/decoder that also emits the
//! reconstruction `Ĉ`.
//!
//! The refined mask is `clamp((1 − g)·clamp(M̂) + g·σ(head))` with a
//! learnable gate `g`; the refined background is `clamp(B̂ + head)` and
//! the reconstruction `C·M + B + head`. With `g = 0` and zero heads a
//! stage is exactly one solver iteration.

mod checkpoint;
mod features;
mod loss;
mod params;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use features::{FeatureBank, FEATURE_CHANNELS};
pub use loss::{
    combine_stage_losses, dice_loss, edge_ground_truth, loss_weights, stage_weights,
    weighted_loss_terms, EPS_P, SMOOTH, WEIGHT_GAIN, WEIGHT_POOL,
};
pub use params::{
    softplus_inverse, ParamSet, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_LIPSCHITZ,
    DEFAULT_MASK_GATE, DEFAULT_MU,
};
pub use train::{
    evaluate_iou, evaluate_reconstruction, train, LossRecord, TrainConfig, TrainReport,
};

pub use params::{Conv, StageVars};

use crate::error::{invalid, Result};
use crate::model::{uncertainty_passes_through, uncertainty_removal_value};
use crate::solver::StageState;
use crate::tensor::{channel_sum, ImageTensor, MaskMap, Tape, Tensor, Var};
use loss::{stage_loss, LossTargets, StageLossVars};

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedConfig {
    pub stages: usize,
    /// Width of every hidden refinement layer.
    pub hidden: usize,
    /// Smoothing of the ℓ1 gradient inside each stage.
    pub eps_l1: f64,
    pub paper_literal_qa: bool,
}

impl Default for UnfoldedConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            hidden: 4,
            eps_l1: 1e-3,
            paper_literal_qa: false,
        }
    }
}

/// A training or evaluation example with everything derived from it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageTensor,
    pub gt: MaskMap,
    pub gt_edge: MaskMap,
    pub features: FeatureBank,
}

impl Sample {
    pub fn new(image: ImageTensor, gt: MaskMap) -> Result<Self> {
        if image.rank() != 3 || image.height() != gt.height() || image.width() != gt.width() {
            return Err(invalid("image and ground truth differ in size"));
        }
        let image = to_rgb(&image)?;
        Ok(Self {
            gt_edge: edge_ground_truth(&gt),
            features: FeatureBank::new(&image)?,
            image,
            gt,
        })
    }
}

/// The network always sees three channels; gray inputs are replicated.
pub fn to_rgb(c: &ImageTensor) -> Result<ImageTensor> {
    match c.channels() {
        3 => Ok(c.clone()),
        1 => Tensor::new(
            &[c.height(), c.width(), 3],
            c.data().iter().flat_map(|&v| [v, v, v]).collect(),
        ),
        n => Err(invalid(format!("unsupported channel count {n}"))),
    }
}

pub struct SofsInputs {
    pub c: Var,
    /// `Σ_c C²` per pixel.
    pub c_sq: Var,
    pub features: Var,
    pub b_prev: Var,
    pub m_prev: Var,
    pub m_prev2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SofsOutput {
    pub m_hat: Var,
    pub m: Var,
    pub e: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RobeOutput {
    pub b_hat: Var,
    pub b: Var,
    pub c_hat: Var,
}

/// `(M̃, w)` of a mask on the tape; `w` is piecewise constant and kept
/// as a plain tensor.
fn tape_uncertainty(tape: &mut Tape, m: Var) -> Result<(Var, Tensor)> {
    let mv = tape.value(m);
    if let Some(v) = mv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("mask value {v} outside [0, 1]")));
    }
    let keep: Vec<bool> = mv
        .data()
        .iter()
        .map(|&v| uncertainty_passes_through(v))
        .collect();
    let fill = mv.map(|v| uncertainty_removal_value(v).0);
    let w = mv.map(|v| uncertainty_removal_value(v).1);
    let tilde = tape.select(m, keep, &fill)?;
    Ok((tilde, w))
}

fn conv(tape: &mut Tape, x: Var, c: Conv) -> Result<Var> {
    let y = tape.conv2d(x, c.weight)?;
    tape.add(y, c.bias)
}

fn conv_tanh(tape: &mut Tape, x: Var, c: Conv) -> Result<Var> {
    let y = conv(tape, x, c)?;
    Ok(tape.tanh(y))
}

/// Closed-form mask with learnable scalars followed by dual-field refinement.
pub fn sofs_stage(
    tape: &mut Tape,
    inp: &SofsInputs,
    p: &StageVars,
    cfg: &UnfoldedConfig,
) -> Result<SofsOutput> {
    let shape = tape.shape(inp.m_prev).to_vec();
    if tape.shape(inp.m_prev2) != shape.as_slice() || tape.shape(inp.c_sq) != shape.as_slice() {
        return Err(invalid("stage inputs differ in size"));
    }
    let alpha = tape.softplus(p.alpha);
    let mu = tape.softplus(p.mu);
    let lip = tape.softplus(p.lipschitz);
    let al = tape.mul(alpha, lip)?;

    let (tilde, w) = tape_uncertainty(tape, inp.m_prev)?;
    let (tilde_prev, w_prev) = tape_uncertainty(tape, inp.m_prev2)?;
    let w_sq = tape.constant(w.map(|v| v * v));
    let w_cross = tape.constant(Tensor::new(
        w.shape(),
        w.data()
            .iter()
            .zip(w_prev.data())
            .map(|(a, b)| a * b)
            .collect(),
    )?);
    let w = tape.constant(w);
    let w_prev = tape.constant(w_prev);

    // Q_a = ΣC² + αL·w² + μ
    let qa_weight = if cfg.paper_literal_qa { lip } else { al };
    let qa = tape.mul(qa_weight, w_sq)?;
    let qa = tape.add(inp.c_sq, qa)?;
    let qa = tape.add(qa, mu)?;

    // Q_d = w_{k-1}·M̃_{k-1},  R_{k-1} = w_{k-1}·M_{k-1} − Q_d
    let qd = tape.mul(w_prev, tilde_prev)?;
    let wm = tape.mul(w_prev, inp.m_prev)?;
    let r_prev = tape.sub(wm, qd)?;

    // Q_b = αL·w·w_{k-1} + μ
    let qb = tape.mul(al, w_cross)?;
    let qb = tape.add(qb, mu)?;

    // Q_c = αL·w·(w·M̃ − Q_d) − α·w·∇S(R_{k-1})
    let wt = tape.mul(w, tilde)?;
    let inner = tape.sub(wt, qd)?;
    let inner = tape.mul(w, inner)?;
    let t1 = tape.mul(al, inner)?;
    let grad = tape.smooth_sign(r_prev, cfg.eps_l1);
    let grad = tape.mul(p.grad_slope, grad)?;
    let wg = tape.mul(w, grad)?;
    let t2 = tape.mul(alpha, wg)?;
    let qc = tape.sub(t1, t2)?;

    let cb = tape.mul(inp.c, inp.b_prev)?;
    let cb = tape.channel_sum(cb)?;
    let num = tape.mul(qb, inp.m_prev)?;
    let num = tape.add(num, inp.c_sq)?;
    let num = tape.sub(num, cb)?;
    let num = tape.add(num, qc)?;
    let m_hat = tape.safe_div(num, qa)?;

    // small field: E(C)·M̂ + E(C)
    let fm = tape.mul(inp.features, m_hat)?;
    let fs = tape.add(fm, inp.features)?;
    let s = conv_tanh(tape, fs, p.small1)?;
    let s = conv_tanh(tape, s, p.small2)?;

    // large field: E(C)·(B/C) + E(C)
    let ratio = tape.safe_div(inp.b_prev, inp.c)?;
    let ratio = tape.channel_mean(ratio)?;
    let fr = tape.mul(inp.features, ratio)?;
    let fl = tape.add(fr, inp.features)?;
    let l = conv_tanh(tape, fl, p.large_v)?;
    let l = conv_tanh(tape, l, p.large_h)?;

    let fused = tape.add(s, l)?;
    let mask_logit = conv(tape, fused, p.mask_head)?;
    let edge_logit = conv(tape, fused, p.edge_head)?;
    let head = tape.sigmoid(mask_logit);
    let e = tape.sigmoid(edge_logit);

    let base = tape.clamp01(m_hat);
    let delta = tape.sub(head, base)?;
    let delta = tape.mul(p.mask_gate, delta)?;
    let blend = tape.add(base, delta)?;
    let m = tape.clamp01(blend);
    Ok(SofsOutput { m_hat, m, e })
}

/// Closed-form background with learnable `λ`, refined by a three-level
/// encoder/decoder that also produces the reconstruction.
pub fn robe_stage(
    tape: &mut Tape,
    c: Var,
    b_prev: Var,
    m: Var,
    p: &StageVars,
) -> Result<RobeOutput> {
    let lambda = tape.softplus(p.lambda);
    b_hat_and_refine(tape, c, b_prev, m, lambda, p)
}

pub(crate) fn b_hat_and_refine(
    tape: &mut Tape,
    c: Var,
    b_prev: Var,
    m: Var,
    lambda: Var,
    p: &StageVars,
) -> Result<RobeOutput> {
    // B̂ = (λ·B_{k-1} + C − C·M) / (1 + λ)
    let lb = tape.mul(lambda, b_prev)?;
    let cm = tape.mul(c, m)?;
    let rev = tape.sub(c, cm)?;
    let num = tape.add(lb, rev)?;
    let den = tape.add_scalar(lambda, 1.0);
    let b_hat = tape.safe_div(num, den)?;

    let (h, w, _) = tape.value(b_hat).dim3();
    let x = tape.concat_channels(&[b_hat, m])?;
    let e1 = conv_tanh(tape, x, p.enc1)?;
    let p1 = tape.avg_pool2(e1)?;
    let e2 = conv_tanh(tape, p1, p.enc2)?;
    let (h2, w2, _) = tape.value(e2).dim3();
    let p2 = tape.avg_pool2(e2)?;
    let e3 = conv_tanh(tape, p2, p.enc3)?;
    let u2 = tape.upsample_to(e3, h2, w2)?;
    let s2 = tape.add(u2, e2)?;
    let d2 = conv_tanh(tape, s2, p.dec2)?;
    let u1 = tape.upsample_to(d2, h, w)?;
    let s1 = tape.add(u1, e1)?;
    let d1 = conv_tanh(tape, s1, p.dec1)?;

    let bg_delta = conv(tape, d1, p.bg_head)?;
    let b = tape.add(b_hat, bg_delta)?;
    let b = tape.clamp01(b);

    let recon_delta = conv(tape, d1, p.recon_head)?;
    let c_hat = tape.add(cm, b)?;
    let c_hat = tape.add(c_hat, recon_delta)?;
    Ok(RobeOutput { b_hat, b, c_hat })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StageNodes {
    pub sofs: SofsOutput,
    pub robe: RobeOutput,
}

pub(crate) struct Graph {
    pub stages: Vec<StageNodes>,
    pub stage_losses: Vec<StageLossVars>,
    pub loss: Option<Var>,
}

/// Builds the whole K-stage graph on `tape`.
pub(crate) fn build_graph(
    tape: &mut Tape,
    image: &ImageTensor,
    features: &FeatureBank,
    targets: Option<&LossTargets>,
    init_mask: Option<&MaskMap>,
    params: &ParamSet,
    cfg: &UnfoldedConfig,
) -> Result<Graph> {
    if params.stages() != cfg.stages || params.hidden() != cfg.hidden {
        return Err(invalid(format!(
            "parameters hold {} stages of width {}, config asks for {} of width {}",
            params.stages(),
            params.hidden(),
            cfg.stages,
            cfg.hidden
        )));
    }
    let (h, w, ch) = image.dim3();
    if ch != 3 {
        return Err(invalid("unfolded model expects a 3-channel image"));
    }
    let vars = params.register(tape);
    let c_sq = channel_sum(&image.map(|v| v * v));
    let c = tape.constant(image.clone());
    let c_sq = tape.constant(c_sq);
    let feats = tape.constant(features.tensor().clone());
    let m0 = match init_mask {
        Some(m) if m.height() == h && m.width() == w => m.clamp01().to_tensor(),
        Some(_) => return Err(invalid("initial mask size differs from the image")),
        None => Tensor::zeros(&[h, w, 1]),
    };
    let mut m_prev = tape.constant(m0);
    let mut m_prev2 = m_prev;
    let mut b_prev = tape.constant(Tensor::zeros(&[h, w, 3]));

    let mut stages = Vec::with_capacity(cfg.stages);
    let mut stage_losses = Vec::new();
    for p in &vars {
        let inputs = SofsInputs {
            c,
            c_sq,
            features: feats,
            b_prev,
            m_prev,
            m_prev2,
        };
        let sofs = sofs_stage(tape, &inputs, p, cfg)?;
        let robe = robe_stage(tape, c, b_prev, sofs.m, p)?;
        if let Some(t) = targets {
            stage_losses.push(stage_loss(tape, sofs.m, sofs.e, robe.c_hat, c, t)?);
        }
        stages.push(StageNodes { sofs, robe });
        m_prev2 = m_prev;
        m_prev = sofs.m;
        b_prev = robe.b;
    }
    let loss = if targets.is_some() {
        let totals: Vec<Var> = stage_losses.iter().map(|s| s.total).collect();
        Some(combine_stage_losses(tape, &totals)?)
    } else {
        None
    };
    Ok(Graph {
        stages,
        stage_losses,
        loss,
    })
}

/// Stage-weighted loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub iou: f64,
    pub dice: f64,
    pub mse: f64,
}

impl LossBreakdown {
    pub(crate) fn from_graph(tape: &Tape, graph: &Graph) -> Option<Self> {
        let total = tape.value(graph.loss?).data()[0];
        let weights = stage_weights(graph.stage_losses.len());
        let weighted = |f: fn(&StageLossVars) -> Var| -> f64 {
            graph
                .stage_losses
                .iter()
                .zip(&weights)
                .map(|(s, w)| w * tape.value(f(s)).data()[0])
                .sum()
        };
        Some(Self {
            total,
            bce: weighted(|s| s.bce),
            iou: weighted(|s| s.iou),
            dice: weighted(|s| s.dice),
            mse: weighted(|s| s.mse),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub stages: Vec<StageState>,
    pub loss: Option<LossBreakdown>,
}

impl ForwardOutput {
    pub fn final_mask(&self) -> &MaskMap {
        &self.stages.last().expect("at least one stage").m
    }
}

/// Runs all stages without recording gradients. The loss is computed when
/// `want_loss` is set, which requires ground truth.
pub fn forward(
    c: &ImageTensor,
    gt: Option<&MaskMap>,
    params: &ParamSet,
    cfg: &UnfoldedConfig,
    want_loss: bool,
) -> Result<ForwardOutput> {
    forward_from(c, gt, None, params, cfg, want_loss)
}

/// [`forward`] with an external initial mask `M_0`.
pub fn forward_from(
    c: &ImageTensor,
    gt: Option<&MaskMap>,
    init_mask: Option<&MaskMap>,
    params: &ParamSet,
    cfg: &UnfoldedConfig,
    want_loss: bool,
) -> Result<ForwardOutput> {
    if want_loss && gt.is_none() {
        return Err(invalid("loss requested without ground truth"));
    }
    if c.rank() != 3 || !c.is_unit_range() {
        return Err(invalid(
            "input must be an h×w×c image with values in [0, 1]",
        ));
    }
    let image = to_rgb(c)?;
    let features = FeatureBank::new(&image)?;
    let targets = match (want_loss, gt) {
        (true, Some(g)) => {
            if g.height() != image.height() || g.width() != image.width() {
                return Err(invalid("ground truth size differs from the image"));
            }
            Some(LossTargets::new(g, &edge_ground_truth(g)))
        }
        _ => None,
    };
    let mut tape = Tape::untaped();
    let graph = build_graph(
        &mut tape,
        &image,
        &features,
        targets.as_ref(),
        init_mask,
        params,
        cfg,
    )?;
    let stages = graph
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(StageState {
                k: i + 1,
                m_hat: MaskMap::from_tensor(tape.value(s.sofs.m_hat))?,
                m: MaskMap::from_tensor(tape.value(s.sofs.m))?,
                b_hat: tape.value(s.robe.b_hat).clone(),
                b: tape.value(s.robe.b).clone(),
                c_hat: Some(tape.value(s.robe.c_hat).clone()),
                e: Some(MaskMap::from_tensor(tape.value(s.sofs.e))?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        stages,
        loss: LossBreakdown::from_graph(&tape, &graph),
    })
}

/// Loss of one sample and its gradient for every parameter, in
/// [`ParamSet::entries`] order.
pub fn loss_and_gradients(
    sample: &Sample,
    params: &ParamSet,
    cfg: &UnfoldedConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let targets = LossTargets::new(&sample.gt, &sample.gt_edge);
    let mut tape = Tape::new();
    let graph = build_graph(
        &mut tape,
        &sample.image,
        &sample.features,
        Some(&targets),
        None,
        params,
        cfg,
    )?;
    let loss_var = graph.loss.expect("loss requested");
    let grads = tape.backward(loss_var)?;
    let breakdown = LossBreakdown::from_graph(&tape, &graph).expect("loss present");
    Ok((
        breakdown,
        grads.params().into_iter().map(|(_, g)| g).collect(),
    ))
}

/// Total loss of one sample without recording gradients.
pub fn sample_loss(
    sample: &Sample,
    params: &ParamSet,
    cfg: &UnfoldedConfig,
) -> Result<LossBreakdown> {
    let targets = LossTargets::new(&sample.gt, &sample.gt_edge);
    let mut tape = Tape::untaped();
    let graph = build_graph(
        &mut tape,
        &sample.image,
        &sample.features,
        Some(&targets),
        None,
        params,
        cfg,
    )?;
    Ok(LossBreakdown::from_graph(&tape, &graph).expect("loss present"))
}
