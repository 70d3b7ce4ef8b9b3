use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runseg::model::SolverConfig;
use runseg::solver::solve;
use runseg::synth::{generate, suite, Difficulty, SceneSpec, Shape, Texture};
use runseg::tensor::Tape;
use runseg::unfolded::{
    combine_stage_losses, dice_loss, evaluate_reconstruction, forward, forward_from,
    load_checkpoint, loss_and_gradients, sample_loss, save_checkpoint, stage_weights, train,
    weighted_loss_terms, ParamSet, Sample, TrainConfig, UnfoldedConfig, EPS_P, SMOOTH, WEIGHT_GAIN,
    WEIGHT_POOL,
};
use runseg::{Error, MaskMap, Tensor};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::image(h, w, 3, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn scene(seed: u64, size: usize) -> (Tensor, MaskMap) {
    generate(&SceneSpec {
        seed,
        size,
        shape: Shape::Ellipse,
        texture: Texture::ValueNoise,
        delta: 0.2,
        sigma: 0.03,
        scale: 0.45,
    })
    .unwrap()
}

fn snap(m: f64) -> (f64, f64) {
    let t = if (0.1..0.4).contains(&m) {
        0.1
    } else if 0.6 < m && m <= 0.9 {
        0.9
    } else {
        m
    };
    (t, if (0.4..=0.6).contains(&m) { 0.0 } else { 1.0 })
}

#[test]
fn pass_through_reproduces_the_solver() {
    let scenes = suite(3, Difficulty::Medium, 11, 24).unwrap();
    let params = ParamSet::pass_through(4, 4).unwrap();
    for (c, _) in &scenes {
        let want = solve(c, &SolverConfig::default()).unwrap();
        let got = forward(c, None, &params, &UnfoldedConfig::default(), false).unwrap();
        assert_eq!(got.stages.len(), want.stages.len());
        for (g, s) in got.stages.iter().zip(&want.stages) {
            assert!(g.m_hat.max_abs_diff(&s.m_hat) < 1e-10);
            assert!(g.m.max_abs_diff(&s.m) < 1e-10);
            assert!(g.b_hat.max_abs_diff(&s.b_hat) < 1e-10);
            assert!(g.b.max_abs_diff(&s.b) < 1e-10);
        }
    }
}

#[test]
fn zero_image_leaves_only_the_prior_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (5, 6);
    let c = Tensor::zeros(&[h, w, 3]);
    let m0 = MaskMap::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let params = ParamSet::init(1, 4, 3).unwrap();
    let cfg = UnfoldedConfig {
        stages: 1,
        ..UnfoldedConfig::default()
    };
    let [alpha, mu, _, lip] = params.effective_scalars(1).unwrap();
    let out = forward_from(&c, None, Some(&m0), &params, &cfg, false).unwrap();
    let m_hat = &out.stages[0].m_hat;
    for (i, &m) in m0.data().iter().enumerate() {
        let (t, wt) = snap(m);
        let r = wt * m - wt * t;
        let grad = r / (r * r + cfg.eps_l1 * cfg.eps_l1).sqrt();
        let qa = alpha * lip * wt * wt + mu;
        let qb = alpha * lip * wt * wt + mu;
        let qc = -alpha * wt * grad;
        let want = (qb * m + qc) / qa;
        assert!(
            (m_hat.data()[i] - want).abs() < 1e-14,
            "pixel {i}: {} vs {want}",
            m_hat.data()[i]
        );
        if wt == 0.0 {
            assert_eq!(m_hat.data()[i], m);
        }
    }
}

#[test]
fn zero_lambda_pass_through_background_is_the_residual() {
    let (c, _) = scene(5, 16);
    let mut params = ParamSet::pass_through(2, 4).unwrap();
    for k in 1..=2 {
        params.set_scalar(k, "lambda", -800.0).unwrap();
    }
    assert_eq!(params.effective_scalars(1).unwrap()[2], 0.0);
    let cfg = UnfoldedConfig {
        stages: 2,
        ..UnfoldedConfig::default()
    };
    let out = forward(&c, None, &params, &cfg, false).unwrap();
    for s in &out.stages {
        let residual = Tensor::image(
            16,
            16,
            3,
            c.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v - v * s.m.data()[i / 3])
                .collect(),
        )
        .unwrap();
        assert!(s.b_hat.max_abs_diff(&residual) < 1e-15);
        assert!(s.b.max_abs_diff(&residual.map(|v| v.clamp(0.0, 1.0))) < 1e-15);
        // C·M + (C − C·M) recomposes C
        assert!(s.c_hat.as_ref().unwrap().max_abs_diff(&c) < 1e-15);
    }
}

#[test]
fn stage_weights_follow_unit_loss_injection() {
    for k in 1..=6 {
        let mut tape = Tape::new();
        let ones: Vec<_> = (0..k)
            .map(|i| tape.param(format!("l{i}"), Tensor::scalar(1.0)))
            .collect();
        let total = combine_stage_losses(&mut tape, &ones).unwrap();
        let g = tape.backward(total).unwrap();
        let weights = stage_weights(k);
        for (i, v) in ones.iter().enumerate() {
            let want = 1.0 / 2f64.powi((k - 1 - i) as i32);
            assert!((g.wrt(*v).data()[0] - want).abs() < 1e-12);
            assert_eq!(weights[i], want);
        }
        let sum: f64 = weights.iter().sum();
        assert!((tape.value(total).data()[0] - sum).abs() < 1e-12);
    }
}

/// Reflect-101 indexing written out for the oracle.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n as isize - 1);
    let r = i.rem_euclid(p);
    (if r >= n as isize { p - r } else { r }) as usize
}

#[test]
fn weighted_terms_match_a_scalar_oracle() {
    let gt = MaskMap::new(3, 3, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let m = MaskMap::new(3, 3, vec![0.1, 0.8, 0.6, 0.3, 0.9, 0.2, 0.0, 0.4, 1.0]).unwrap();
    let r = (WEIGHT_POOL / 2) as isize;
    let (mut wsum, mut bce, mut inter, mut union) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..3isize {
        for x in 0..3isize {
            let mut pool = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    pool += gt.get(mirror(y + dy, 3), mirror(x + dx, 3));
                }
            }
            pool /= (WEIGHT_POOL * WEIGHT_POOL) as f64;
            let g = gt.get(y as usize, x as usize);
            let w = 1.0 + WEIGHT_GAIN * (pool - g).abs();
            let p = m.get(y as usize, x as usize).clamp(EPS_P, 1.0 - EPS_P);
            wsum += w;
            bce -= w * (g * p.ln() + (1.0 - g) * (1.0 - p).ln());
            inter += w * p * g;
            union += w * (p + g - p * g);
        }
    }
    let (got_bce, got_iou) = weighted_loss_terms(&m, &gt).unwrap();
    assert!((got_bce - bce / wsum).abs() < 1e-12);
    assert!((got_iou - (1.0 - (inter + SMOOTH) / (union + SMOOTH))).abs() < 1e-12);
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let (_, gt) = scene(2, 16);
    let (bce, iou_loss) = weighted_loss_terms(&gt, &gt).unwrap();
    assert!(bce < 1e-5);
    assert!(iou_loss < 1e-5);
    assert_eq!(dice_loss(&gt, &gt).unwrap(), 0.0);
    let inv = MaskMap::new(16, 16, gt.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(weighted_loss_terms(&inv, &gt).unwrap().0 > 10.0);
}

#[test]
fn forward_rejects_bad_requests() {
    let (c, gt) = scene(3, 12);
    let params = ParamSet::init(2, 4, 1).unwrap();
    let cfg = UnfoldedConfig {
        stages: 2,
        ..UnfoldedConfig::default()
    };
    assert!(matches!(
        forward(&c, None, &params, &cfg, true),
        Err(Error::InvalidArgument(_))
    ));
    let bright = c.map(|v| v + 1.0);
    assert!(forward(&bright, Some(&gt), &params, &cfg, true).is_err());
    assert!(forward(&c, Some(&gt), &params, &UnfoldedConfig::default(), true).is_err());
    assert!(forward(&c, Some(&MaskMap::zeros(4, 4)), &params, &cfg, true).is_err());
    let out = forward(&c, Some(&gt), &params, &cfg, true).unwrap();
    let loss = out.loss.clone().unwrap();
    assert!(loss.total > 0.0 && loss.total.is_finite());
    assert!(out.final_mask().is_clamped());
}

#[test]
fn gradients_match_finite_differences_on_scalars_and_heads() {
    let (c, gt) = scene(4, 8);
    let sample = Sample::new(c, gt).unwrap();
    let cfg = UnfoldedConfig {
        stages: 2,
        ..UnfoldedConfig::default()
    };
    let params = ParamSet::init(2, 4, 9).unwrap();
    let (_, grads) = loss_and_gradients(&sample, &params, &cfg).unwrap();
    let h = 1e-5;
    for (idx, (name, t)) in params.entries().iter().enumerate() {
        if !(t.numel() == 1 || name.contains("head")) {
            continue;
        }
        for j in 0..t.numel().min(6) {
            let bump = |d: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[j] += d;
                sample_loss(&sample, &p, &cfg).unwrap().total
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = grads[idx].data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{j}]: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_exact() {
    let (c, gt) = scene(6, 12);
    let data = vec![Sample::new(c, gt).unwrap()];
    let cfg = UnfoldedConfig {
        stages: 1,
        ..UnfoldedConfig::default()
    };
    let init = ParamSet::init(1, 4, 7).unwrap();
    let tc = TrainConfig {
        steps: 5,
        lr: 0.0,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let report = train(&data, init.clone(), &cfg, &tc).unwrap();
    assert_eq!(report.params, init);
    assert_eq!(report.curve.len(), 5);
    assert!(report.curve.windows(2).all(|w| w[0].loss == w[1].loss));
    assert!(matches!(
        train(&[], init, &cfg, &tc),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn single_sample_overfits() {
    let (c, gt) = scene(3, 16);
    let data = vec![Sample::new(c, gt).unwrap()];
    let cfg = UnfoldedConfig {
        stages: 2,
        ..UnfoldedConfig::default()
    };
    let tc = TrainConfig {
        steps: 500,
        lr: 5e-3,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let report = train(&data, ParamSet::init(2, 4, 7).unwrap(), &cfg, &tc).unwrap();
    let after = sample_loss(&data[0], &report.params, &cfg).unwrap().total;
    assert!(
        after < 0.2 * report.curve[0].loss,
        "{after} vs {}",
        report.curve[0].loss
    );
}

#[test]
fn reconstruction_error_falls_with_training() {
    let data: Vec<Sample> = suite(4, Difficulty::Medium, 31, 16)
        .unwrap()
        .into_iter()
        .map(|(c, gt)| Sample::new(c, gt).unwrap())
        .collect();
    let cfg = UnfoldedConfig {
        stages: 2,
        ..UnfoldedConfig::default()
    };
    let init = ParamSet::init(2, 4, 7).unwrap();
    let before = evaluate_reconstruction(&data, &init, &cfg).unwrap();
    let tc = TrainConfig {
        steps: 200,
        lr: 5e-3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let report = train(&data, init, &cfg, &tc).unwrap();
    let after = evaluate_reconstruction(&data, &report.params, &cfg).unwrap();
    assert!(after < before, "{after} vs {before}");
    let again = train(&data, ParamSet::init(2, 4, 7).unwrap(), &cfg, &tc).unwrap();
    assert_eq!(again.params, report.params);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let params = ParamSet::init(2, 3, 21).unwrap();
    save_checkpoint(&path, &params).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    let cfg = UnfoldedConfig {
        stages: 2,
        hidden: 3,
        ..UnfoldedConfig::default()
    };
    let (c, _) = scene(8, 12);
    let a = forward(&c, None, &params, &cfg, false).unwrap();
    let b = forward(&c, None, &back, &cfg, false).unwrap();
    assert_eq!(a.final_mask(), b.final_mask());
}

#[test]
fn grayscale_input_is_broadcast_to_rgb() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rgb = random_image(&mut rng, 6, 6);
    let gray = Tensor::image(6, 6, 1, rgb.data().iter().step_by(3).copied().collect()).unwrap();
    let s = Sample::new(gray, MaskMap::zeros(6, 6)).unwrap();
    assert_eq!(s.image.channels(), 3);
    let px = &s.image.data()[..3];
    assert!(px[0] == px[1] && px[1] == px[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn effective_scalars_stay_positive(raw in prop::collection::vec(-30.0f64..30.0, 4)) {
        let mut p = ParamSet::init(1, 2, 0).unwrap();
        for (slot, v) in ["alpha", "mu", "lambda", "lipschitz"].iter().zip(&raw) {
            p.set_scalar(1, slot, *v).unwrap();
        }
        let eff = p.effective_scalars(1).unwrap();
        prop_assert!(eff.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn forward_masks_are_in_unit_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_image(&mut rng, 6, 6);
        let cfg = UnfoldedConfig { stages: 2, hidden: 2, ..UnfoldedConfig::default() };
        let out = forward(&c, None, &ParamSet::init(2, 2, seed).unwrap(), &cfg, false).unwrap();
        for s in &out.stages {
            prop_assert!(s.m.is_clamped());
            prop_assert!(s.b.is_unit_range());
            prop_assert!(s.e.as_ref().unwrap().is_clamped());
        }
    }
}
