use super::*;
use crate::datasets::{generate_in_memory, Recipe};
use crate::encoders::Fingerprint;
use crate::EncoderDims;

fn tiny_tuples(per_family: usize, n_views: usize) -> Vec<TrainTuple> {
    let recipe = Recipe {
        per_family,
        n_points: 96,
        n_views,
        ..Recipe::default_with_seed(3)
    };
    generate_in_memory(&recipe).unwrap().1
}

fn small_dims() -> EncoderDims {
    EncoderDims {
        hidden: 16,
        embed: 8,
        view: 256,
    }
}

fn one_slot_step(cfg: &OptimizerConfig, w: f64, g: f64, state: &mut OptimizerState) -> f64 {
    let mut weights = [w];
    let grads = [g];
    let mut slots = [Slot {
        weights: &mut weights,
        grads: &grads,
        trainable: true,
        decay: true,
    }];
    optimizer_step(&mut slots, state, cfg).unwrap();
    weights[0]
}

#[test]
fn sgd_single_step_matches_formula() {
    let mut state = OptimizerState::default();
    let w = one_slot_step(&OptimizerConfig::sgd(0.1), 1.0, 1.0, &mut state);
    assert!((w - 0.9).abs() < 1e-15);
    assert!((state.first[0][0] + 0.1).abs() < 1e-15);
    // Second step: v = 0.9 * -0.1 - 0.1 = -0.19.
    let w = one_slot_step(&OptimizerConfig::sgd(0.1), w, 1.0, &mut state);
    assert!((w - 0.71).abs() < 1e-12);
}

#[test]
fn adaptive_single_step_matches_hand_value() {
    let cfg = OptimizerConfig::adamw(0.01);
    let mut state = OptimizerState::default();
    let (w0, g) = (2.0, -0.3);
    let w = one_slot_step(&cfg, w0, g, &mut state);
    // Fresh state: m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
    // after decoupled decay of lr * lambda * w.
    let decayed = w0 - 0.01 * 0.01 * w0;
    let expected = decayed - 0.01 * g / (g.abs() + 1e-8);
    assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
    assert!((state.first[0][0] - 0.1 * g).abs() < 1e-15);
    assert!((state.second[0][0] - 0.001 * g * g).abs() < 1e-15);
}

#[test]
fn zero_gradients_leave_weights_unchanged() {
    let mut sgd_state = OptimizerState::default();
    assert_eq!(one_slot_step(&OptimizerConfig::sgd(0.1), 1.5, 0.0, &mut sgd_state), 1.5);
    let no_decay = OptimizerConfig {
        weight_decay: 0.0,
        ..OptimizerConfig::adamw(0.1)
    };
    let mut adam_state = OptimizerState::default();
    assert_eq!(one_slot_step(&no_decay, 1.5, 0.0, &mut adam_state), 1.5);
}

#[test]
fn frozen_and_non_decayed_slots() {
    let cfg = OptimizerConfig::adamw(0.1);
    let mut a = [1.0];
    let mut b = [1.0];
    let g = [0.0];
    let mut state = OptimizerState::default();
    let mut slots = [
        Slot {
            weights: &mut a,
            grads: &g,
            trainable: false,
            decay: true,
        },
        Slot {
            weights: &mut b,
            grads: &g,
            trainable: true,
            decay: false,
        },
    ];
    optimizer_step(&mut slots, &mut state, &cfg).unwrap();
    assert_eq!((a[0], b[0]), (1.0, 1.0));
}

#[test]
fn optimizer_rejects_bad_grads_and_shapes() {
    let cfg = OptimizerConfig::sgd(0.1);
    let mut w = [1.0, 2.0];
    let nan = [f64::NAN, 0.0];
    let mut state = OptimizerState::default();
    let mut slots = [Slot {
        weights: &mut w,
        grads: &nan,
        trainable: true,
        decay: true,
    }];
    assert!(matches!(optimizer_step(&mut slots, &mut state, &cfg), Err(Error::Numeric { .. })));
    let short = [0.0];
    let mut slots = [Slot {
        weights: &mut w,
        grads: &short,
        trainable: true,
        decay: true,
    }];
    assert!(matches!(optimizer_step(&mut slots, &mut state, &cfg), Err(Error::Usage(_))));
}

#[test]
fn batches_are_deterministic_and_distinct() {
    let tuples = tiny_tuples(4, 3);
    let cfg = AugmentConfig::default();
    let a = make_batch(&tuples, 6, &cfg, 2, 1, 11).unwrap();
    let b = make_batch(&tuples, 6, &cfg, 2, 1, 11).unwrap();
    assert_eq!(a, b);
    let c = make_batch(&tuples, 6, &cfg, 3, 1, 11).unwrap();
    assert_ne!(a.indices, c.indices);
    let mut seen = a.indices.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 6);
}

#[test]
fn epoch_covers_every_shape_and_tops_up_last_batch() {
    let tuples = tiny_tuples(5, 2);
    let cfg = AugmentConfig::identity();
    let steps = steps_per_epoch(tuples.len(), 6);
    assert_eq!(steps, 4);
    let mut covered = Vec::new();
    for step in 0..steps {
        let b = make_batch(&tuples, 6, &cfg, 0, step, 1).unwrap();
        assert_eq!(b.indices.len(), 6);
        let mut d = b.indices.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 6);
        covered.extend(b.indices);
    }
    covered.sort_unstable();
    covered.dedup();
    assert_eq!(covered.len(), tuples.len());
    assert!(matches!(make_batch(&tuples, 6, &cfg, 0, steps, 1), Err(Error::Parameter(_))));
}

#[test]
fn batch_larger_than_dataset_rejected() {
    let tuples = tiny_tuples(1, 2);
    assert!(matches!(
        make_batch(&tuples, 5, &AugmentConfig::default(), 0, 0, 1),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn single_view_always_selected() {
    let tuples = tiny_tuples(2, 1);
    for step in 0..4 {
        let b = make_batch(&tuples, 2, &AugmentConfig::identity(), step, 0, 5).unwrap();
        assert!(b.views.iter().all(|&v| v == 0));
    }
}

#[test]
fn view_selection_is_uniform() {
    let mut tuples = tiny_tuples(1, 12);
    tuples.truncate(1);
    let mut counts = [0usize; 12];
    let draws = 10_000;
    for epoch in 0..draws {
        let b = make_batch(&tuples, 1, &AugmentConfig::identity(), epoch, 0, 17).unwrap();
        counts[b.views[0]] += 1;
    }
    for c in counts {
        let freq = c as f64 / draws as f64;
        assert!((freq - 1.0 / 12.0).abs() <= 0.012, "{counts:?}");
    }
}

#[test]
fn augmentation_seed_depends_on_shape() {
    let tuples = tiny_tuples(2, 2);
    let cfg = AugmentConfig::default();
    let b = make_batch(&tuples, tuples.len(), &cfg, 0, 0, 3).unwrap();
    for (cloud, &i) in b.clouds.iter().zip(&b.indices) {
        assert_ne!(cloud, &tuples[i].cloud);
        assert_eq!(cloud.shape_id, tuples[i].shape_id);
    }
}

#[test]
fn cache_matches_fresh_encoding() {
    let tuples = tiny_tuples(2, 3);
    let mut params = EncoderParams::init(small_dims(), 4);
    assert!(matches!(
        precompute_image_embeddings(&params, &tuples),
        Err(Error::Precondition(_))
    ));
    params.image_trainable = false;
    let cache = precompute_image_embeddings(&params, &tuples).unwrap();
    assert_eq!(cache.len(), tuples.len() * 3);
    let fp = params.image.fingerprint();
    for t in &tuples {
        for v in &t.views {
            let cached = cache.get(&fp, &t.shape_id, v.view_index).unwrap();
            assert_eq!(cached, &encode_image(&params, v).unwrap());
        }
    }
    assert!(matches!(cache.get(&fp, "missing", 0), Err(Error::Usage(_))));
    params.image.proj.bias[0] += 1e-3;
    let stale = params.image.fingerprint();
    assert!(matches!(cache.get(&stale, &tuples[0].shape_id, 0), Err(Error::StaleCache)));
    assert!(matches!(
        cache.get(&Fingerprint::default(), &tuples[0].shape_id, 0),
        Err(Error::StaleCache)
    ));
}

fn quick_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup_epochs: 1,
        mode,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_params_bitwise() {
    let tuples = tiny_tuples(2, 3);
    let initial = EncoderParams::init(small_dims(), 1);
    for kind in [OptimizerKind::SgdMomentum, OptimizerKind::AdaptiveMoments] {
        let mut cfg = quick_config(TrainMode::PreAlign);
        cfg.optimizer = OptimizerConfig {
            kind,
            ..OptimizerConfig::adamw(0.0)
        };
        let out = train(&cfg, &tuples, &initial).unwrap();
        assert_eq!(out.params.shape, initial.shape);
        assert_eq!(out.params.image, initial.image);
        assert_eq!(out.log_tau, TAU_INIT.ln());
    }
}

#[test]
fn fine_tune_never_touches_image_branch() {
    let tuples = tiny_tuples(2, 3);
    let initial = EncoderParams::init(small_dims(), 2);
    let out = train(&quick_config(TrainMode::FineTune), &tuples, &initial).unwrap();
    assert_eq!(out.params.image, initial.image);
    assert_ne!(out.params.shape, initial.shape);
    assert!(!out.params.image_trainable);
}

#[test]
fn pre_align_moves_image_branch_during_warmup_only() {
    let tuples = tiny_tuples(2, 3);
    let initial = EncoderParams::init(small_dims(), 2);
    let warm = train(
        &TrainConfig {
            epochs: 1,
            ..quick_config(TrainMode::PreAlign)
        },
        &tuples,
        &initial,
    )
    .unwrap();
    let full = train(&quick_config(TrainMode::PreAlign), &tuples, &initial).unwrap();
    assert_ne!(warm.params.image, initial.image);
    assert_eq!(full.params.image, warm.params.image);
}

#[test]
fn log_has_one_record_per_step() {
    let tuples = tiny_tuples(2, 3);
    let cfg = TrainConfig {
        loss: LossKind::Hcl,
        epochs: 5,
        ..quick_config(TrainMode::FineTune)
    };
    let out = train(&cfg, &tuples, &EncoderParams::init(small_dims(), 3)).unwrap();
    assert_eq!(out.steps.len(), 5 * steps_per_epoch(tuples.len(), 4));
    assert!(out.steps.iter().all(|r| r.loss.is_finite() && r.tau > 0.0));
    let betas: Vec<f64> = out.epochs.iter().map(|e| e.beta).collect();
    assert_eq!(betas, vec![0.5, 0.4, 0.3, 0.2, 0.1]);
    assert_eq!(out.steps_jsonl().lines().count(), out.steps.len());
}

#[test]
fn training_is_bitwise_reproducible_and_cache_transparent() {
    let tuples = tiny_tuples(2, 3);
    let initial = EncoderParams::init(small_dims(), 5);
    let cfg = quick_config(TrainMode::PreAlign);
    let a = train(&cfg, &tuples, &initial).unwrap();
    let b = train(&cfg, &tuples, &initial).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.params, b.params);
    let uncached = train(
        &TrainConfig {
            use_cache: false,
            ..cfg
        },
        &tuples,
        &initial,
    )
    .unwrap();
    assert_eq!(a.steps, uncached.steps);
    assert_eq!(a.params, uncached.params);
}

/// Fastest single fine-tune epoch, timed between epoch callbacks so the
/// one-off cache precompute is not counted.
fn fastest_epoch(cfg: &TrainConfig, tuples: &[TrainTuple], initial: &EncoderParams) -> std::time::Duration {
    let mut last = None;
    let mut best = std::time::Duration::MAX;
    train_with(cfg, tuples, initial, None, &mut |_| {
        let now = std::time::Instant::now();
        if let Some(prev) = last.replace(now) {
            best = best.min(now - prev);
        }
    })
    .unwrap();
    best
}

#[test]
fn cached_fine_tune_epochs_are_faster() {
    // Tiny clouds and a narrow hidden layer, so the skipped image forward
    // is a visible share of each step.
    let recipe = Recipe {
        n_points: 8,
        ..Recipe::default_with_seed(8)
    };
    let tuples = generate_in_memory(&recipe).unwrap().1;
    assert_eq!((tuples.len(), tuples[0].views.len()), (64, 12));
    let initial = EncoderParams::init(small_dims(), 8);
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 32,
        ..quick_config(TrainMode::FineTune)
    };
    let uncached_cfg = TrainConfig {
        use_cache: false,
        ..cfg.clone()
    };
    let (mut cached, mut uncached) = (std::time::Duration::MAX, std::time::Duration::MAX);
    for _ in 0..3 {
        cached = cached.min(fastest_epoch(&cfg, &tuples, &initial));
        uncached = uncached.min(fastest_epoch(&uncached_cfg, &tuples, &initial));
    }
    assert!(cached < uncached, "cached {cached:?} vs uncached {uncached:?}");
}

#[test]
fn invalid_configs_rejected() {
    let tuples = tiny_tuples(2, 3);
    let p = EncoderParams::init(small_dims(), 6);
    let bad = [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 1,
            loss: LossKind::Hcl,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 100,
            ..TrainConfig::default()
        },
        TrainConfig {
            optimizer: OptimizerConfig::adamw(-1.0),
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(train(&cfg, &tuples, &p), Err(Error::Parameter(_))), "{cfg:?}");
    }
    assert!(matches!(train(&TrainConfig::default(), &[], &p), Err(Error::Precondition(_))));
}

#[test]
fn overflowing_weights_abort() {
    let tuples = tiny_tuples(2, 3);
    let mut p = EncoderParams::init(small_dims(), 7);
    p.shape.point1.weight.fill(1e300);
    p.shape.point2.weight.fill(1e300);
    let err = train(&quick_config(TrainMode::FineTune), &tuples, &p).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. } | Error::Aborted { .. }), "{err:?}");
}
