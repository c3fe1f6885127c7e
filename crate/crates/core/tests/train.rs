use emix_core::config::RunConfig;
use emix_core::data::{default_benchmark, make_cohort, Sample};
use emix_core::em::{EmConfig, EmVariant};
use emix_core::net::{EncoderConfig, Param, ParamKind, ParameterSet};
use emix_core::train::{fit, lr_at_epoch, sgd_step, weighted_cross_entropy, FitOutput, TrainConfig};
use proptest::prelude::*;

fn tiny_net() -> EncoderConfig {
    EncoderConfig {
        block_channels: vec![4, 4],
        hidden: 8,
        ..EncoderConfig::default()
    }
}

fn cohorts(seed: u64, source: &[usize]) -> (Vec<Sample>, Vec<(String, Vec<Sample>)>) {
    let b = default_benchmark(seed, 8, source, &[2, 2, 2]);
    let targets = b
        .targets
        .iter()
        .map(|t| (t.name.clone(), make_cohort(t).unwrap()))
        .collect();
    (make_cohort(&b.source).unwrap(), targets)
}

fn run(source: &[usize], cfg: &TrainConfig, em: Option<&EmConfig>) -> FitOutput {
    let (src, targets) = cohorts(cfg.seed, source);
    fit(&src, &targets, &tiny_net(), em, cfg, 2, "test").unwrap()
}

fn em1() -> EmConfig {
    EmConfig {
        layers: [1].into(),
        ..EmConfig::for_variant(EmVariant::Em1)
    }
}

#[test]
fn eight_training_samples_in_groups_of_four_take_two_steps() {
    let cfg = TrainConfig {
        epochs: 1,
        physical_batch: 2,
        effective_batch: 4,
        ..TrainConfig::default()
    };
    // 4/4/2 per class with a 20% hold-out keeps 3/3/2 for training
    let out = run(&[4, 4, 2], &cfg, None);
    assert_eq!(out.record.train_samples, 8);
    assert_eq!(out.record.val_samples, 2);
    assert_eq!(out.record.optimizer_steps, 2);
}

#[test]
fn trailing_partial_group_still_steps() {
    let cfg = TrainConfig {
        epochs: 3,
        physical_batch: 2,
        effective_batch: 4,
        ..TrainConfig::default()
    };
    let out = run(&[5, 5, 3], &cfg, None);
    assert_eq!(out.record.train_samples, 10);
    assert_eq!(out.record.optimizer_steps, 3 * 3);
}

#[test]
fn same_seed_gives_identical_records() {
    let cfg = TrainConfig {
        epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let em = em1();
    let a = run(&[6, 5, 5], &cfg, Some(&em));
    let b = run(&[6, 5, 5], &cfg, Some(&em));
    assert_eq!(a.record, b.record);
    assert_eq!(a.best, b.best);
    let (mut ja, mut jb) = (Vec::new(), Vec::new());
    a.record.write_json(&mut ja).unwrap();
    b.record.write_json(&mut jb).unwrap();
    assert_eq!(ja, jb);

    let other = run(&[6, 5, 5], &TrainConfig { seed: 6, ..cfg }, Some(&em));
    assert_ne!(other.record, a.record);
}

#[test]
fn record_shape_and_checkpoint_choice() {
    let cfg = TrainConfig {
        epochs: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = run(&[6, 5, 5], &cfg, Some(&em1()));
    let r = &out.record;
    assert_eq!(r.epochs.len(), 4);
    for (i, e) in r.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert_eq!(e.lr, lr_at_epoch(i, &cfg));
        assert!(e.train_loss.is_finite() && e.val_loss.is_finite());
    }
    assert!(r.epochs.windows(2).all(|w| w[1].lr < w[0].lr));
    let best = r.epochs.iter().map(|e| e.val_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_f1, best);
    let first_best = r.epochs.iter().position(|e| e.val_f1 == best).unwrap();
    assert_eq!(r.best_epoch, first_best);
    let names: Vec<&str> = r.targets.iter().map(|t| t.cohort.as_str()).collect();
    assert_eq!(names, ["tgt_lognormal", "tgt_student", "tgt_warp"]);
    for t in &r.targets {
        assert_eq!(t.samples, 6);
        assert_eq!(t.positive_vs_rest.positive, 2);
        for v in [t.acc, t.sen, t.spe, t.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn overlapping_source_and_target_is_rejected() {
    let (src, _) = cohorts(1, &[3, 3, 3]);
    let leaked = vec![("leak".to_string(), src[..3].to_vec())];
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(fit(&src, &leaked, &tiny_net(), None, &cfg, 2, "x").is_err());
}

#[test]
fn two_momentum_steps_with_constant_gradient() {
    let cfg = TrainConfig {
        momentum: 0.9,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let g = 0.3;
    let mut p = ParameterSet {
        tensors: vec![Param::new("w", ParamKind::Weight, vec![1], vec![2.0])],
    };
    let grads = ParameterSet {
        tensors: vec![Param::new("w", ParamKind::Weight, vec![1], vec![g])],
    };
    let mut v = p.zeros_like();
    sgd_step(&mut p, &grads, &mut v, 1.0, &cfg).unwrap();
    sgd_step(&mut p, &grads, &mut v, 1.0, &cfg).unwrap();
    assert!((p.tensors[0].data[0] - (2.0 - (g + 1.9 * g))).abs() < 1e-15);
}

#[test]
fn uniform_weights_reduce_to_plain_cross_entropy() {
    let logits: [f64; 9] = [0.4, -1.2, 2.0, 0.0, 0.5, -0.5, 1.0, 1.0, 1.0];
    let labels = [2, 0, 1];
    let plain: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let row = &logits[b * 3..b * 3 + 3];
            row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y]
        })
        .sum::<f64>()
        / 3.0;
    let weighted = weighted_cross_entropy(&logits, 3, &labels, &[1.0; 3]).unwrap();
    assert!((weighted - plain).abs() < 1e-15);
}

fn configs() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        prop::sample::select(vec!["none", "em1", "em2"]),
        0.01f64..5.0,
        0.0f64..=1.0,
        prop::sample::subsequence(vec![1usize, 2, 3, 4], 1..=4),
        1usize..50,
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..=4,
        1e-4f64..0.5,
    )
        .prop_map(|(seed, variant, alpha, p, layers, epochs, phys, mult, lr)| {
            let mut cfg = RunConfig::with_seed(seed);
            cfg.set("em.variant", variant).unwrap();
            cfg.em.alpha = alpha;
            cfg.em.p = p;
            cfg.em.layers = layers.into_iter().collect();
            cfg.train.epochs = epochs;
            cfg.train.physical_batch = phys;
            cfg.train.effective_batch = phys * mult;
            cfg.train.lr0 = lr;
            cfg
        })
}

proptest! {
    #[test]
    fn config_text_round_trips(cfg in configs()) {
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn learning_rate_is_geometric(lr0 in 1e-5f64..1.0, epoch in 1usize..200) {
        let cfg = TrainConfig { lr0, ..TrainConfig::default() };
        let ratio = lr_at_epoch(epoch, &cfg) / lr_at_epoch(epoch - 1, &cfg);
        prop_assert!((ratio - 0.95).abs() < 1e-12);
    }
}
