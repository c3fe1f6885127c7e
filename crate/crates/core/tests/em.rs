mod common;

use common::{em2_elementwise, max_rel_err, random_batch, random_plan};
use emix_core::em::*;
use emix_core::moments::compute_channel_stats;
use emix_core::{FeatureBatch, Shape5};
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64, shape: Shape5) -> (FeatureBatch, MixPlan, emix_core::moments::ChannelStats, MixedStats) {
    let mut rng = emix_core::rng::seeded(seed);
    let x = random_batch(&mut rng, shape);
    let plan = random_plan(&mut rng, shape.batch);
    let own = compute_channel_stats(&x, 1e-6).unwrap();
    let mixed = mix_stats(&own, &plan).unwrap();
    (x, plan, own, mixed)
}

fn stats_table(own: &emix_core::moments::ChannelStats) -> Vec<Vec<(f64, f64, f64, f64)>> {
    (0..own.batch)
        .map(|b| {
            (0..own.channels)
                .map(|c| {
                    let k = own.index(b, c);
                    (own.mu[k], own.sigma[k], own.gamma[k], own.kappa[k])
                })
                .collect()
        })
        .collect()
}

fn random_case(seed: u64) -> (Shape5, f64, f64) {
    let mut rng = emix_core::rng::seeded(10_000 + seed);
    let shape = Shape5::new(rng.random_range(1..=4), rng.random_range(1..=3), 2, 3, rng.random_range(2..=5));
    (shape, rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
}

#[test]
fn higher_order_rule_matches_elementwise_evaluation() {
    let mut worst: f64 = 0.0;
    for seed in 0..300 {
        let (shape, bs, bk) = random_case(seed);
        let (x, plan, own, mixed) = setup(seed, shape);
        let fast = apply_em2(&x, &own, &mixed, bs, bk).unwrap();
        let slow = common::em2_from_stats(&x, &stats_table(&own), &plan, bs, bk);
        worst = worst.max(max_rel_err(fast.data(), &slow, 1.0));
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn higher_order_rule_with_independently_measured_moments() {
    let mut worst: f64 = 0.0;
    for seed in 0..300 {
        let (shape, bs, bk) = random_case(seed);
        let (x, plan, own, mixed) = setup(seed, shape);
        let fast = apply_em2(&x, &own, &mixed, bs, bk).unwrap();
        let slow = em2_elementwise(&x, &plan, 1e-6, bs, bk);
        worst = worst.max(max_rel_err(fast.data(), &slow, 1.0));
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn reduction_identities_hold_exactly() {
    for seed in 0..100 {
        let (x, _, own, mixed) = setup(seed, Shape5::new(3, 2, 1, 2, 5));
        let em1 = apply_em1(&x, &own, &mixed, 0.3).unwrap();
        assert_eq!(apply_em2(&x, &own, &mixed, 0.3, 0.0).unwrap(), em1);
        let ms = apply_mixstyle(&x, &own, &mixed).unwrap();
        assert_eq!(apply_em1(&x, &own, &mixed, 0.0).unwrap(), ms);
        assert_eq!(apply_em2(&x, &own, &mixed, 0.0, 0.0).unwrap(), ms);
    }
}

#[test]
fn variant_config_ignores_unused_betas() {
    let (x, plan, own, mixed) = setup(5, Shape5::new(2, 2, 1, 1, 6));
    let r = EmRealization { plan, own: own.clone(), mixed: mixed.clone() };
    let mut cfg = EmConfig::for_variant(EmVariant::MixStyle);
    cfg.beta_skew = 0.9;
    cfg.beta_kurt = 0.9;
    assert_eq!(apply_realization(&x, &cfg, &r).unwrap(), apply_mixstyle(&x, &own, &mixed).unwrap());
    cfg.variant = EmVariant::Em1;
    assert_eq!(apply_realization(&x, &cfg, &r).unwrap(), apply_em1(&x, &own, &mixed, 0.9).unwrap());
}

#[test]
fn unit_lambda_mixstyle_is_identity() {
    for seed in 0..100 {
        let mut rng = emix_core::rng::seeded(seed);
        let x = random_batch(&mut rng, Shape5::new(3, 2, 2, 2, 4));
        let own = compute_channel_stats(&x, 1e-6).unwrap();
        let plan = MixPlan::new(true, vec![2, 0, 1], vec![1.0; 3]).unwrap();
        let mixed = mix_stats(&own, &plan).unwrap();
        let y = apply_mixstyle(&x, &own, &mixed).unwrap();
        let err = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn eval_mode_is_a_bitwise_pass_through() {
    let mut rng = emix_core::rng::seeded(9);
    let x = random_batch(&mut rng, Shape5::new(4, 3, 2, 2, 2));
    for variant in [EmVariant::MixStyle, EmVariant::Em1, EmVariant::Em2] {
        let cfg = EmConfig {
            p: 1.0,
            ..EmConfig::for_variant(variant)
        };
        let y = em_forward(&x, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn inactive_plan_leaves_features_untouched() {
    let mut rng = emix_core::rng::seeded(10);
    let x = random_batch(&mut rng, Shape5::new(4, 2, 1, 2, 3));
    let cfg = EmConfig {
        p: 0.0,
        ..EmConfig::for_variant(EmVariant::Em2)
    };
    for _ in 0..20 {
        assert_eq!(em_forward(&x, &cfg, Mode::Train, &mut rng).unwrap().data(), x.data());
    }
}

#[test]
fn local_derivative_matches_central_differences() {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = emix_core::rng::seeded(500 + seed);
        let shape = Shape5::new(rng.random_range(1..=3), rng.random_range(1..=3), 1, 2, rng.random_range(2..=4));
        let (x, _, own, mixed) = setup(seed + 1000, shape);
        let cfg = EmConfig {
            beta_skew: rng.random_range(0.0..0.5),
            beta_kurt: rng.random_range(0.0..0.5),
            ..EmConfig::for_variant(EmVariant::Em2)
        };
        let (bs, bk) = cfg.effective_betas();
        let analytic = em_backward_local(&x, &own, &mixed, &cfg).unwrap();
        let n = shape.spatial();
        for i in 0..x.data().len() {
            // step in units of the channel's own spread
            let scale = own.sigma[i / n];
            let mut plus = x.clone();
            plus.data_mut()[i] += h * scale;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h * scale;
            let yp = apply_em2(&plus, &own, &mixed, bs, bk).unwrap().data()[i];
            let ym = apply_em2(&minus, &own, &mixed, bs, bk).unwrap().data()[i];
            let fd = (yp - ym) / (2.0 * h * scale);
            worst = worst.max(common::rel_err(analytic[i], fd, 1e-3));
            // no cross-element terms
            let j = (i + 1) % x.data().len();
            if j != i {
                let other_p = apply_em2(&plus, &own, &mixed, bs, bk).unwrap().data()[j];
                assert_eq!(other_p, apply_em2(&x, &own, &mixed, bs, bk).unwrap().data()[j]);
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn hand_worked_swap() {
    let x = FeatureBatch::from_channels(2, 1, vec![0.0, 2.0, 2.0, 6.0]).unwrap();
    let own = compute_channel_stats(&x, 0.0).unwrap();
    let plan = MixPlan::new(true, vec![1, 0], vec![0.5, 0.5]).unwrap();
    let mixed = mix_stats(&own, &plan).unwrap();
    let y = apply_mixstyle(&x, &own, &mixed).unwrap();
    assert_eq!(y.data(), &[1.0, 4.0, 1.0, 4.0]);
}

#[test]
fn mix_plans_have_the_configured_statistics() {
    let mut rng = emix_core::rng::seeded(77);
    let cfg = EmConfig {
        alpha: 0.5,
        p: 0.7,
        ..EmConfig::for_variant(EmVariant::Em2)
    };
    let (mut active, mut lambdas, mut fixed) = (0usize, Vec::new(), 0usize);
    let trials = 20_000;
    for _ in 0..trials {
        let plan = sample_mix_plan(4, &cfg, &mut rng);
        assert!(MixPlan::new(plan.active, plan.perm.clone(), plan.lambda.clone()).is_ok());
        active += plan.active as usize;
        fixed += plan.perm.iter().enumerate().filter(|(i, p)| i == *p).count();
        lambdas.extend(plan.lambda);
    }
    let rate = active as f64 / trials as f64;
    assert!((rate - 0.7).abs() < 0.015, "{rate}");
    let n = lambdas.len() as f64;
    let mean = lambdas.iter().sum::<f64>() / n;
    let var = lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    // Beta(a, a): mean 1/2, variance 1 / (4 (2a + 1))
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
    assert!((var - 1.0 / 8.0).abs() < 0.005, "{var}");
    // a uniform permutation has one fixed point on average
    let per_plan = fixed as f64 / trials as f64;
    assert!((per_plan - 1.0).abs() < 0.05, "{per_plan}");
}

#[test]
fn plans_are_reproducible_per_seed() {
    let cfg = EmConfig::for_variant(EmVariant::Em1);
    let a: Vec<MixPlan> = {
        let mut r = emix_core::rng::seeded(4);
        (0..10).map(|_| sample_mix_plan(6, &cfg, &mut r)).collect()
    };
    let b: Vec<MixPlan> = {
        let mut r = emix_core::rng::seeded(4);
        (0..10).map(|_| sample_mix_plan(6, &cfg, &mut r)).collect()
    };
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn mixed_moments_stay_between_the_pair(seed in any::<u64>()) {
        let (_, plan, own, mixed) = setup(seed, Shape5::new(4, 2, 1, 1, 8));
        for b in 0..4 {
            for c in 0..2 {
                let k = own.index(b, c);
                let j = own.index(plan.perm[b], c);
                for (m, mix) in [(&own.mu, &mixed.mu_mix), (&own.sigma, &mixed.sigma_mix), (&own.gamma, &mixed.gamma_mix), (&own.kappa, &mixed.kappa_mix)] {
                    let (lo, hi) = (m[k].min(m[j]), m[k].max(m[j]));
                    let tol = 1e-12 * hi.abs().max(1.0);
                    prop_assert!(mix[k] >= lo - tol && mix[k] <= hi + tol);
                }
            }
        }
    }

    #[test]
    fn mixstyle_output_carries_the_mixed_mean_and_scale(seed in any::<u64>()) {
        let (x, _, own, mixed) = setup(seed, Shape5::new(3, 2, 1, 2, 6));
        let y = apply_mixstyle(&x, &own, &mixed).unwrap();
        let out = compute_channel_stats(&y, 0.0).unwrap();
        for k in 0..out.len() {
            let expect_sigma = mixed.sigma_mix[k] * (own.sigma[k].powi(2) - 1e-6).max(0.0).sqrt() / own.sigma[k];
            prop_assert!(common::rel_err(out.mu[k], mixed.mu_mix[k], 1.0) < 1e-9);
            prop_assert!(common::rel_err(out.sigma[k], expect_sigma, 1.0) < 1e-7);
            prop_assert!(common::rel_err(out.gamma[k], own.gamma[k] * own.sigma[k].powi(3) / (own.sigma[k].powi(2) - 1e-6).max(1e-300).powf(1.5), 1.0) < 1e-6);
        }
    }
}
