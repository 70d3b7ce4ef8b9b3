use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward, loss_and_gradients, ParamSet, Sample, UnfoldedConfig};
use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::solver::MASK_THRESHOLD;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch_size: 4,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!(
                "learning rate {} must be finite and nonnegative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(invalid(
                "Adam moments must lie in [0, 1) and eps must be positive",
            ));
        }
        Ok(())
    }
}

/// Batch-mean loss components before the update at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub iou_loss: f64,
    pub dice: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParamSet,
    pub curve: Vec<LossRecord>,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| t.zeros_like())
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (_, p)) in params.entries_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Adam training on mini-batches drawn by reshuffling the dataset every
/// epoch with a seeded generator.
pub fn train(
    dataset: &[Sample],
    init: ParamSet,
    model: &UnfoldedConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.min(dataset.len());

    for step in 0..cfg.steps {
        let mut grads: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| t.zeros_like())
            .collect();
        let mut rec = LossRecord {
            step,
            loss: 0.0,
            bce: 0.0,
            iou_loss: 0.0,
            dice: 0.0,
            mse: 0.0,
        };
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &dataset[order[cursor]];
            cursor += 1;
            let (l, g) = loss_and_gradients(sample, &params, model)?;
            rec.loss += l.total;
            rec.bce += l.bce;
            rec.iou_loss += l.iou;
            rec.dice += l.dice;
            rec.mse += l.mse;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
        }
        let n = batch as f64;
        for acc in &mut grads {
            acc.data_mut().iter_mut().for_each(|a| *a /= n);
            if !acc.is_finite() {
                return Err(Error::Degenerate(format!(
                    "non-finite gradient at step {step}"
                )));
            }
        }
        rec.loss /= n;
        rec.bce /= n;
        rec.iou_loss /= n;
        rec.dice /= n;
        rec.mse /= n;
        curve.push(rec);
        if cfg.lr > 0.0 {
            adam.step(&mut params, &grads, cfg);
        }
    }
    Ok(TrainReport { params, curve })
}

/// Mean IoU of thresholded final-stage masks.
pub fn evaluate_iou(samples: &[Sample], params: &ParamSet, model: &UnfoldedConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let out = forward(&s.image, None, params, model, false)?;
        total += metrics::iou(&out.final_mask().threshold(MASK_THRESHOLD), &s.gt)?;
    }
    Ok(total / samples.len() as f64)
}

/// Mean final-stage reconstruction MSE `mean((Ĉ_K − C)²)`.
pub fn evaluate_reconstruction(
    samples: &[Sample],
    params: &ParamSet,
    model: &UnfoldedConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let out = forward(&s.image, None, params, model, false)?;
        let c_hat = out
            .stages
            .last()
            .and_then(|st| st.c_hat.as_ref())
            .expect("unfolded stages carry Ĉ");
        let se: f64 = c_hat
            .data()
            .iter()
            .zip(s.image.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += se / c_hat.numel() as f64;
    }
    Ok(total / samples.len() as f64)
}
