use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::FEATURE_CHANNELS;
use crate::error::{invalid, Result};
use crate::tensor::{softplus, Tape, Tensor, Var};

/// Default effective values of the per-stage scalars, matching the
/// model-based solver's defaults.
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_LIPSCHITZ: f64 = 1.0;
/// Initial blend between the clamped closed form and the learned mask head.
pub const DEFAULT_MASK_GATE: f64 = 0.5;

/// Inverse of softplus, `ln(eᵛ − 1)`.
pub fn softplus_inverse(v: f64) -> f64 {
    v.exp_m1().ln()
}

/// Channels entering the background refiner: `B̂` (3) and `M` (1).
const ROBE_INPUT: usize = 4;

#[derive(Clone, Copy)]
enum Slot {
    Scalar,
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    },
}

fn layout(hidden: usize) -> Vec<(&'static str, Slot)> {
    let h = hidden;
    let f = FEATURE_CHANNELS;
    let conv = |kh, kw, cin, cout| Slot::Conv { kh, kw, cin, cout };
    vec![
        ("alpha", Slot::Scalar),
        ("mu", Slot::Scalar),
        ("lambda", Slot::Scalar),
        ("lipschitz", Slot::Scalar),
        ("grad_slope", Slot::Scalar),
        ("mask_gate", Slot::Scalar),
        ("sofs.small1", conv(3, 3, f, h)),
        ("sofs.small2", conv(3, 3, h, h)),
        ("sofs.large_v", conv(11, 1, f, h)),
        ("sofs.large_h", conv(1, 11, h, h)),
        ("sofs.mask_head", conv(3, 3, h, 1)),
        ("sofs.edge_head", conv(3, 3, h, 1)),
        ("robe.enc1", conv(3, 3, ROBE_INPUT, h)),
        ("robe.enc2", conv(3, 3, h, h)),
        ("robe.enc3", conv(3, 3, h, h)),
        ("robe.dec2", conv(3, 3, h, h)),
        ("robe.dec1", conv(3, 3, h, h)),
        ("robe.bg_head", conv(3, 3, h, 3)),
        ("robe.recon_head", conv(3, 3, h, 3)),
    ]
}

/// Learnable parameters of the unfolded network, one block per stage.
///
/// Scalars `alpha`, `mu`, `lambda`, `lipschitz` are stored raw and used
/// through softplus, so their effective values stay positive. Every
/// convolution `X` is stored as `X.weight` (`kh×kw×cin×cout`) and
/// `X.bias` (`cout`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    stages: usize,
    hidden: usize,
    entries: Vec<(String, Tensor)>,
}

fn name(stage: usize, slot: &str) -> String {
    format!("stage{stage}.{slot}")
}

impl ParamSet {
    /// Random refinement kernels (uniform, variance `1/fan_in`), zero
    /// biases, default scalars.
    pub fn init(stages: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(stages, hidden, |slot, shape| match slot {
            "grad_slope" => Tensor::scalar(1.0),
            "mask_gate" => Tensor::scalar(DEFAULT_MASK_GATE),
            _ if shape.len() == 4 => {
                let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                let bound = (3.0 / fan_in).sqrt();
                let n = shape.iter().product();
                Tensor::new(
                    shape,
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .expect("shape")
            }
            _ => Tensor::zeros(shape),
        })
    }

    /// Parameters under which each stage reproduces one iteration of the
    /// model-based solver with its default weights: the mask gate is closed,
    /// every output head is zero and the hidden stacks carry identity
    /// center taps.
    pub fn pass_through(stages: usize, hidden: usize) -> Result<Self> {
        Self::build(stages, hidden, |slot, shape| match slot {
            "grad_slope" => Tensor::scalar(1.0),
            "mask_gate" => Tensor::scalar(0.0),
            s if s.ends_with("_head.weight") => Tensor::zeros(shape),
            s if s.ends_with(".weight") => identity_center(shape),
            _ => Tensor::zeros(shape),
        })
    }

    fn build(
        stages: usize,
        hidden: usize,
        mut make: impl FnMut(&str, &[usize]) -> Tensor,
    ) -> Result<Self> {
        if stages == 0 || hidden == 0 {
            return Err(invalid("stages and hidden width must be positive"));
        }
        let mut entries = Vec::new();
        for k in 1..=stages {
            for (slot, kind) in layout(hidden) {
                match kind {
                    Slot::Scalar => {
                        let t = match slot {
                            "alpha" => Tensor::scalar(softplus_inverse(DEFAULT_ALPHA)),
                            "mu" => Tensor::scalar(softplus_inverse(DEFAULT_MU)),
                            "lambda" => Tensor::scalar(softplus_inverse(DEFAULT_LAMBDA)),
                            "lipschitz" => Tensor::scalar(softplus_inverse(DEFAULT_LIPSCHITZ)),
                            _ => make(slot, &[]),
                        };
                        entries.push((name(k, slot), t));
                    }
                    Slot::Conv { kh, kw, cin, cout } => {
                        let w = format!("{slot}.weight");
                        let b = format!("{slot}.bias");
                        let wt = make(&w, &[kh, kw, cin, cout]);
                        let bt = make(&b, &[cout]);
                        entries.push((name(k, &w), wt));
                        entries.push((name(k, &b), bt));
                    }
                }
            }
        }
        Ok(Self {
            stages,
            hidden,
            entries,
        })
    }

    /// Rebuilds a set from named tensors, checking names and shapes
    /// against the layout for `stages` and `hidden`.
    pub fn from_entries(
        stages: usize,
        hidden: usize,
        entries: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let template = Self::build(stages, hidden, |_, shape| Tensor::zeros(shape))?;
        if template.entries.len() != entries.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                template.entries.len(),
                entries.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.entries.iter().zip(&entries) {
            if tn != n || tt.shape() != t.shape() {
                return Err(invalid(format!(
                    "parameter `{n}` {:?} does not match expected `{tn}` {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self {
            stages,
            hidden,
            entries,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set_scalar(&mut self, stage: usize, slot: &str, raw: f64) -> Result<()> {
        let t = self
            .get_mut(&name(stage, slot))
            .ok_or_else(|| invalid(format!("no scalar `{slot}` at stage {stage}")))?;
        *t = Tensor::scalar(raw);
        Ok(())
    }

    /// Effective (post-softplus) `(α, μ, λ, L)` of a stage.
    pub fn effective_scalars(&self, stage: usize) -> Option<[f64; 4]> {
        let mut out = [0.0; 4];
        for (o, slot) in out.iter_mut().zip(["alpha", "mu", "lambda", "lipschitz"]) {
            *o = softplus(self.get(&name(stage, slot))?.data()[0]);
        }
        Some(out)
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    /// Registers every parameter on the tape and returns typed handles.
    pub fn register(&self, tape: &mut Tape) -> Vec<StageVars> {
        let mut vars: Vec<Var> = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            vars.push(tape.param(n.clone(), t.clone()));
        }
        let per_stage = vars.len() / self.stages;
        vars.chunks(per_stage).map(StageVars::from_slice).collect()
    }
}

fn identity_center(shape: &[usize]) -> Tensor {
    let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
    let mut t = Tensor::zeros(shape);
    let center = (kh / 2) * kw + kw / 2;
    for c in 0..cin.min(cout) {
        t.data_mut()[(center * cin + c) * cout + c] = 1.0;
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for one stage, in [`layout`] order.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub alpha: Var,
    pub mu: Var,
    pub lambda: Var,
    pub lipschitz: Var,
    pub grad_slope: Var,
    pub mask_gate: Var,
    pub small1: Conv,
    pub small2: Conv,
    pub large_v: Conv,
    pub large_h: Conv,
    pub mask_head: Conv,
    pub edge_head: Conv,
    pub enc1: Conv,
    pub enc2: Conv,
    pub enc3: Conv,
    pub dec2: Conv,
    pub dec1: Conv,
    pub bg_head: Conv,
    pub recon_head: Conv,
}

impl StageVars {
    fn from_slice(v: &[Var]) -> Self {
        let conv = |i: usize| Conv {
            weight: v[i],
            bias: v[i + 1],
        };
        Self {
            alpha: v[0],
            mu: v[1],
            lambda: v[2],
            lipschitz: v[3],
            grad_slope: v[4],
            mask_gate: v[5],
            small1: conv(6),
            small2: conv(8),
            large_v: conv(10),
            large_h: conv(12),
            mask_head: conv(14),
            edge_head: conv(16),
            enc1: conv(18),
            enc2: conv(20),
            enc3: conv(22),
            dec2: conv(24),
            dec1: conv(26),
            bg_head: conv(28),
            recon_head: conv(30),
        }
    }
}
