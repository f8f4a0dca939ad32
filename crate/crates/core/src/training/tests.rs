#![allow(clippy::needless_range_loop)]

use super::regularization::{is_regularized, l2_penalty};
use super::*;
use crate::data::{FeatureSequence, PreparedEvent};
use crate::model::{forward_logprob, ForwardMode};
use crate::numerics::{ParamKind, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store(values: &[(&str, Vec<f64>, ParamKind)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v, k) in values {
        s.insert(*n, Tensor::vector(v.clone()), *k);
    }
    s
}

fn grads(values: &[(&str, Vec<f64>)]) -> GradientSet {
    let mut g = GradientSet::default();
    for (n, v) in values {
        g.insert(n.to_string(), Tensor::vector(v.clone()));
    }
    g
}

// ---------------------------------------------------------------------------
// loss

#[test]
fn one_hot_distributions_give_zero_loss() {
    let d = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
    assert_eq!(nll_loss(&d, &[1, 0]).unwrap(), (0.0, 0));
}

#[test]
fn uniform_loss_closed_form() {
    let d = vec![vec![0.1; 10]; 5];
    let (loss, _) = nll_loss(&d, &[0, 3, 9, 2, 2]).unwrap();
    assert!((loss - 5.0 * 10f64.ln()).abs() < 1e-12);
    assert!((loss - 11.5129).abs() < 1e-4);
}

#[test]
fn random_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d: Vec<Vec<f64>> = (0..7)
        .map(|_| {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|r| r / z).collect()
        })
        .collect();
    let t: Vec<usize> = (0..7).map(|_| rng.gen_range(0..6)).collect();
    let mut direct = 0.0;
    for i in 0..7 {
        direct += -(d[i][t[i]]).ln();
    }
    assert!((nll_loss(&d, &t).unwrap().0 - direct).abs() < 1e-12);
}

#[test]
fn zero_probability_is_floored_and_counted() {
    let d = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
    let (loss, clamped) = nll_loss(&d, &[1, 0]).unwrap();
    assert_eq!(clamped, 1);
    assert!((loss - (-(1e-12f64).ln() + 2f64.ln())).abs() < 1e-9);
    assert!(nll_loss(&d, &[1]).is_err());
    assert!(nll_loss(&d, &[1, 5]).is_err());
}

// ---------------------------------------------------------------------------
// clipping

#[test]
fn clipping_examples() {
    let mut g = grads(&[("a", vec![3.0]), ("b", vec![0.0])]);
    let before = g.clone();
    assert_eq!(clip_gradients(&mut g, 10.0), 3.0);
    assert_eq!(g, before);

    let mut g = grads(&[("a", vec![20.0])]);
    assert_eq!(clip_gradients(&mut g, 10.0), 20.0);
    assert_eq!(g.get("a").unwrap().data(), &[10.0]);

    let mut g = grads(&[("a", vec![0.0, 0.0])]);
    clip_gradients(&mut g, 10.0);
    assert_eq!(g.get("a").unwrap().data(), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        a in prop::collection::vec(-50.0f64..50.0, 1..6),
        b in prop::collection::vec(-50.0f64..50.0, 1..6),
        max_norm in 0.1f64..20.0,
    ) {
        let mut g = grads(&[("a", a.clone()), ("b", b.clone())]);
        let before = g.global_norm();
        clip_gradients(&mut g, max_norm);
        let after = g.global_norm();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= max_norm + 1e-9);
        let k = if before > max_norm { max_norm / before } else { 1.0 };
        for (orig, new) in a.iter().chain(&b).zip(g.get("a").unwrap().data().iter().chain(g.get("b").unwrap().data())) {
            prop_assert!((orig * k - new).abs() <= 1e-12 * orig.abs().max(1.0));
        }
    }
}

// ---------------------------------------------------------------------------
// optimisers

fn adadelta_cfg() -> TrainingConfig {
    TrainingConfig::default()
}

#[test]
fn adadelta_zero_gradient_only_decays_accumulators() {
    let cfg = adadelta_cfg();
    let mut p = store(&[("w", vec![0.5, -1.0], ParamKind::Weight)]);
    let mut s = AdadeltaState {
        eg2: grads(&[("w", vec![2.0, 4.0])]),
        edx2: grads(&[("w", vec![1.0, 3.0])]),
    };
    adadelta_step(&mut p, &grads(&[("w", vec![0.0, 0.0])]), &mut s, &cfg).unwrap();
    assert_eq!(p.tensor("w").unwrap().data(), &[0.5, -1.0]);
    assert_eq!(s.eg2.get("w").unwrap().data(), &[0.95 * 2.0, 0.95 * 4.0]);
    assert_eq!(s.edx2.get("w").unwrap().data(), &[0.95 * 1.0, 0.95 * 3.0]);
}

#[test]
fn adadelta_two_steps_follow_the_recurrence() {
    let cfg = adadelta_cfg();
    let (rho, eps): (f64, f64) = (0.95, 1e-6);
    let g0 = [0.3, -2.0, 1e-3];
    let w0 = [1.0, 2.0, 3.0];
    let mut p = store(&[("w", w0.to_vec(), ParamKind::Weight)]);
    let mut s = match OptimizerState::new(Optimizer::Adadelta, &p) {
        OptimizerState::Adadelta(s) => s,
        _ => unreachable!(),
    };
    let g = grads(&[("w", g0.to_vec())]);
    adadelta_step(&mut p, &g, &mut s, &cfg).unwrap();
    let mut first = [0.0; 3];
    for i in 0..3 {
        // first step: -sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g
        first[i] = -eps.sqrt() / ((1.0 - rho) * g0[i] * g0[i] + eps).sqrt() * g0[i];
        assert!((p.tensor("w").unwrap().data()[i] - (w0[i] + first[i])).abs() < 1e-15);
    }
    adadelta_step(&mut p, &g, &mut s, &cfg).unwrap();
    for i in 0..3 {
        let eg2 = rho * (1.0 - rho) * g0[i] * g0[i] + (1.0 - rho) * g0[i] * g0[i];
        let edx2 = (1.0 - rho) * first[i] * first[i];
        let second = -((edx2 + eps).sqrt() / (eg2 + eps).sqrt()) * g0[i];
        assert!((p.tensor("w").unwrap().data()[i] - (w0[i] + first[i] + second)).abs() < 1e-14);
        assert!(second.abs() != first[i].abs());
    }
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let cfg = TrainingConfig {
        optimizer: Optimizer::Adam,
        ..TrainingConfig::default()
    };
    let g0 = [0.3, -2.0, 5e-4, 0.0];
    let mut p = store(&[("w", vec![0.0; 4], ParamKind::Weight)]);
    let mut s = match OptimizerState::new(Optimizer::Adam, &p) {
        OptimizerState::Adam(s) => s,
        _ => unreachable!(),
    };
    adam_step(&mut p, &grads(&[("w", g0.to_vec())]), &mut s, 0.001, &cfg).unwrap();
    for i in 0..4 {
        let expected = -0.001 * g0[i] / (g0[i].abs() + 1e-8);
        assert!((p.tensor("w").unwrap().data()[i] - expected).abs() < 1e-15);
        assert!(
            (p.tensor("w").unwrap().data()[i]
                + 0.001 * g0[i].signum() * (g0[i] != 0.0) as u8 as f64)
                .abs()
                < 1e-7
        );
    }
    assert_eq!(s.t, 1);
}

#[test]
fn adam_zero_gradient_does_not_move() {
    let cfg = TrainingConfig::default();
    let mut p = store(&[("w", vec![0.7, -0.2], ParamKind::Weight)]);
    let mut state = OptimizerState::new(Optimizer::Adam, &p);
    for epoch in 0..3 {
        state
            .step(&mut p, &grads(&[("w", vec![0.0, 0.0])]), &cfg, epoch)
            .unwrap();
    }
    assert_eq!(p.tensor("w").unwrap().data(), &[0.7, -0.2]);
}

#[test]
fn adam_schedule() {
    let cfg = TrainingConfig::default();
    assert_eq!(cfg.adam_lr_at(0), 0.001);
    assert!((cfg.adam_lr_at(2) - 0.001 * 0.995 * 0.995).abs() < 1e-18);
}

#[test]
fn optimizer_rejects_mismatched_shapes() {
    let cfg = TrainingConfig::default();
    let mut p = store(&[("w", vec![0.7, -0.2], ParamKind::Weight)]);
    for opt in [Optimizer::Adam, Optimizer::Adadelta] {
        let mut state = OptimizerState::new(opt, &p);
        assert!(state
            .step(&mut p, &grads(&[("w", vec![1.0])]), &cfg, 0)
            .is_err());
        assert!(state
            .step(&mut p, &grads(&[("v", vec![1.0, 1.0])]), &cfg, 0)
            .is_err());
    }
}

proptest! {
    #[test]
    fn one_step_decreases_a_quadratic(w0 in -5.0f64..5.0, c in -5.0f64..5.0, k in 0.1f64..4.0) {
        prop_assume!((w0 - c).abs() > 1e-3);
        let loss = |w: f64| k * (w - c) * (w - c);
        for opt in [Optimizer::Adam, Optimizer::Adadelta] {
            let cfg = TrainingConfig { optimizer: opt, ..TrainingConfig::default() };
            let mut p = store(&[("w", vec![w0], ParamKind::Weight)]);
            let mut state = OptimizerState::new(opt, &p);
            let g = grads(&[("w", vec![2.0 * k * (w0 - c)])]);
            state.step(&mut p, &g, &cfg, 0).unwrap();
            let w1 = p.tensor("w").unwrap().data()[0];
            prop_assert!(loss(w1) < loss(w0), "{opt}: {w0} -> {w1}");
        }
    }
}

// ---------------------------------------------------------------------------
// regularisation

#[test]
fn only_non_recurrent_weights_are_penalised() {
    assert!(is_regularized(ParamKind::Weight));
    assert!(!is_regularized(ParamKind::Recurrent));
    assert!(!is_regularized(ParamKind::Bias));
    let mut p = store(&[
        ("a", vec![1.0, 2.0], ParamKind::Weight),
        ("b", vec![3.0], ParamKind::Recurrent),
        ("c", vec![4.0], ParamKind::Bias),
        ("d", vec![5.0], ParamKind::Weight),
    ]);
    p.set_trainable("d", false).unwrap();
    assert!((l2_penalty(&p, 1e-4) - 1e-4 * 5.0).abs() < 1e-18);
    assert_eq!(l2_penalty(&p, 0.0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy = perturb_weights(&p, 0.01, &mut rng);
    assert_ne!(noisy.tensor("a").unwrap(), p.tensor("a").unwrap());
    for n in ["b", "c", "d"] {
        assert_eq!(noisy.tensor(n).unwrap(), p.tensor(n).unwrap());
    }
    assert_eq!(perturb_weights(&p, 0.0, &mut rng), p);
}

#[test]
fn weight_decay_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = store(&[
        ("w", w.clone(), ParamKind::Weight),
        ("u", vec![0.3], ParamKind::Recurrent),
    ]);
    let mut g = GradientSet::zeros_like(&p);
    add_l2_gradient(&p, 1e-4, &mut g);
    let eps = 1e-6;
    for i in 0..5 {
        let mut plus = p.clone();
        plus.tensor_mut("w").unwrap().data_mut()[i] += eps;
        let mut minus = p.clone();
        minus.tensor_mut("w").unwrap().data_mut()[i] -= eps;
        let numeric = (l2_penalty(&plus, 1e-4) - l2_penalty(&minus, 1e-4)) / (2.0 * eps);
        let analytic = g.get("w").unwrap().data()[i];
        assert!((analytic - 2.0 * 1e-4 * w[i]).abs() < 1e-18);
        assert!(
            (analytic - numeric).abs() < 1e-10,
            "{analytic} vs {numeric}"
        );
    }
    assert_eq!(g.get("u").unwrap().data(), &[0.0]);
}

#[test]
fn dropout_mask_is_inverted_and_absent_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(Dropout::new(0.0, &mut rng).mask(10).is_none());
    let mask = Dropout::new(0.5, &mut rng).mask(4000).unwrap();
    assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    let mean = mask.iter().sum::<f64>() / 4000.0;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn penalised_loss_is_never_lower(seed in 0u64..500, wd in 0.0f64..1e-2) {
        let variant = ModelVariant::ALL[seed as usize % 4];
        let model = build_model(variant, ModelDims::uniform(3, 4), 7, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cur = FeatureSequence::new(2, 3, (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let prev = make_empty_event(variant, 3);
        let target = [4, 5, crate::data::EOS];
        let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
        let train = forward_logprob(&model, &cur, &prev, &target, ForwardMode::Train { dropout_p: 0.0, noise_sigma: 0.0, rng: &mut train_rng }).unwrap();
        let eval = forward_logprob(&model, &cur, &prev, &target, ForwardMode::Eval).unwrap();
        prop_assert_eq!(train.total_logprob, eval.total_logprob);
        let plain = -eval.total_logprob;
        prop_assert!(plain + l2_penalty(&model.params, wd) >= plain);
    }
}

// ---------------------------------------------------------------------------
// configuration

#[test]
fn defaults_follow_the_recipe() {
    let c = TrainingConfig::default();
    assert_eq!(c.optimizer, Optimizer::Adadelta);
    assert_eq!(
        (c.adadelta_lr, c.adam_lr, c.adam_decay_per_epoch),
        (1.0, 0.001, 0.995)
    );
    assert_eq!(
        (c.clip_norm, c.dropout_p, c.weight_decay, c.noise_sigma),
        (10.0, 0.5, 1e-4, 1e-2)
    );
    assert_eq!(
        (c.batch_size, c.patience, c.eval_every_updates, c.beam_size),
        (64, 20, 50, 10)
    );
    c.validate().unwrap();
}

#[test]
fn set_overrides_and_validates() {
    let mut c = TrainingConfig::default();
    c.set("batch_size", "8").unwrap();
    c.set("optimizer", "adam").unwrap();
    c.set("dropout_p", "0").unwrap();
    c.set("hidden_size", "16").unwrap();
    c.set("max_updates", "null").unwrap();
    assert_eq!(
        (c.batch_size, c.optimizer, c.dropout_p, c.hidden_size),
        (8, Optimizer::Adam, 0.0, Some(16))
    );
    let snapshot = c.clone();
    assert!(matches!(c.set("nonsense", "1"), Err(Error::Config(_))));
    assert!(c.set("batch_size", "lots").is_err());
    assert_eq!(c, snapshot);
    assert!(c.set("batch_size", "0").is_err());
    assert!(c.set("optimizer", "sgd").is_err());
    let parsed: TrainingConfig = serde_json::from_str(r#"{"patience": 3}"#).unwrap();
    assert_eq!(parsed.patience, 3);
    assert_eq!(parsed.batch_size, 64);
    assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
}

// ---------------------------------------------------------------------------
// loop

fn event(rng: &mut ChaCha8Rng, id: usize, caption: &str) -> PreparedEvent {
    let mut data: Vec<f32> = (0..2 * 3).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
    data[id % 3] += 1.0;
    PreparedEvent {
        id: format!("e{id}"),
        features: FeatureSequence::new(2, 3, data).unwrap(),
        captions: vec![crate::data::tokenize(caption)],
    }
}

fn toy_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut days = Vec::new();
    for (d, split) in [Split::Train, Split::Train, Split::Val]
        .into_iter()
        .enumerate()
    {
        days.push(PreparedDay {
            id: format!("d{d}"),
            split,
            events: vec![
                event(&mut rng, 0, "a red cup"),
                event(&mut rng, 1, "a blue door"),
                event(&mut rng, 2, "green tree"),
            ],
        });
    }
    Dataset {
        feature_dim: 3,
        days,
    }
}

fn fast_cfg() -> TrainingConfig {
    TrainingConfig {
        optimizer: Optimizer::Adam,
        adam_lr: 0.02,
        batch_size: 2,
        eval_every_updates: 3,
        max_epochs: 4,
        hidden_size: Some(4),
        beam_size: 2,
        max_length: 5,
        seed: 9,
        ..TrainingConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_history() {
    let data = toy_dataset();
    for variant in [ModelVariant::PrevVideoCaption, ModelVariant::Baseline] {
        let a = train_loop(&data, variant, &fast_cfg()).unwrap();
        let b = train_loop(&data, variant, &fast_cfg()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.updates, 12);
        assert_eq!(a.history.len(), 4);
        let mut best = f64::NEG_INFINITY;
        for (k, h) in a.history.iter().enumerate() {
            assert_eq!(h.update, 3 * (k + 1));
            assert!(h.train_loss.is_finite() && h.train_loss > 0.0);
            best = best.max(h.val_bleu4);
            assert_eq!(h.best_so_far, best);
        }
    }
}

#[test]
fn patience_zero_stops_at_first_non_improving_check() {
    let data = toy_dataset();
    let cfg = TrainingConfig {
        patience: 0,
        eval_every_updates: 1,
        max_epochs: 50,
        adam_lr: 1e-9,
        ..fast_cfg()
    };
    let out = train_loop(&data, ModelVariant::Baseline, &cfg).unwrap();
    assert!(out.stopped_early);
    let last = out.history.last().unwrap();
    let prev = &out.history[out.history.len() - 2];
    assert!(last.val_bleu4 <= prev.best_so_far);
    // every earlier check improved
    for w in out.history[..out.history.len() - 1].windows(2) {
        assert!(w[1].val_bleu4 >= w[0].best_so_far);
    }
}

#[test]
fn max_updates_caps_training_and_runs_a_final_check() {
    let data = toy_dataset();
    let cfg = TrainingConfig {
        max_updates: Some(4),
        ..fast_cfg()
    };
    let out = train_loop(&data, ModelVariant::PrevCaption, &cfg).unwrap();
    assert_eq!(out.updates, 4);
    assert_eq!(
        out.history.iter().map(|h| h.update).collect::<Vec<_>>(),
        vec![3, 4]
    );
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = toy_dataset();
    data.days[0].events[1].features = FeatureSequence::new(1, 3, vec![f32::NAN, 0.0, 0.0]).unwrap();
    let err = train_loop(&data, ModelVariant::Baseline, &fast_cfg()).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn empty_validation_split_is_rejected() {
    let mut data = toy_dataset();
    data.days.pop();
    assert!(matches!(
        train_loop(&data, ModelVariant::Baseline, &fast_cfg()),
        Err(Error::Config(_))
    ));
}
