mod common;

use common::{jittered_params, max_rel_err, network_fd_check, random_batch, FdReport};
use emix_core::em::{EmConfig, EmVariant, Mode};
use emix_core::net::{EmSource, EncoderConfig, Network, NormSource, Pass};
use emix_core::{FeatureBatch, Shape5};

/// Runs `instances` accepted random instances starting at seed `first`.
fn fd_sweep(first: u64, instances: usize, norm: NormSource) -> FdReport {
    let mut total = FdReport {
        worst: 0.0,
        worst_tensor: 0.0,
        compared: 0,
        skipped: 0,
    };
    let (mut accepted, mut rejected, mut seed) = (0, 0, first);
    while accepted < instances {
        match network_fd_check(seed, norm, 1e-3, 1e-3) {
            Some(r) => {
                total.worst = total.worst.max(r.worst);
                total.worst_tensor = total.worst_tensor.max(r.worst_tensor);
                total.compared += r.compared;
                total.skipped += r.skipped;
                accepted += 1;
            }
            None => rejected += 1,
        }
        seed += 1;
    }
    println!(
        "{norm:?}: worst tensor relative error {:.3e}, elementwise {:.3e}, over {} coordinates of {accepted} instances \
         ({} kink crossings skipped, {rejected} ill-conditioned instances redrawn)",
        total.worst_tensor, total.worst, total.compared, total.skipped
    );
    total
}

#[test]
fn loss_gradients_match_central_differences_with_batch_norm_statistics() {
    let r = fd_sweep(100, 20, NormSource::Batch);
    assert!(r.worst_tensor < 1e-3, "{}", r.worst_tensor);
    assert!(r.skipped * 20 < r.compared, "too many kink crossings: {}", r.skipped);
}

#[test]
fn loss_gradients_match_central_differences_with_running_statistics() {
    let r = fd_sweep(200, 20, NormSource::Running);
    assert!(r.worst_tensor < 1e-3, "{}", r.worst_tensor);
    assert!(r.skipped * 20 < r.compared, "too many kink crossings: {}", r.skipped);
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        block_channels: vec![3, 4],
        hidden: 5,
        ..EncoderConfig::default()
    }
}

#[test]
fn accumulated_micro_batches_equal_the_full_batch() {
    let mut rng = emix_core::rng::seeded(7);
    let net = Network::new(small_encoder()).unwrap();
    let params = jittered_params(&net, &mut rng, 3);
    let x = random_batch(&mut rng, Shape5::new(16, 1, 8, 8, 8));
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let weights = [0.8, 1.3, 1.1];
    let running = || Pass {
        mode: Mode::Train,
        norm: NormSource::Running,
        em: EmSource::Off,
    };
    let full = net.loss_and_grads(&x, &labels, &weights, &params, running()).unwrap();
    let mut acc = params.zeros_like();
    let mut loss = 0.0;
    for m in 0..8 {
        let idx = [2 * m, 2 * m + 1];
        let micro = x.select(&idx);
        let out = net.loss_and_grads(&micro, &labels[2 * m..2 * m + 2], &weights, &params, running()).unwrap();
        acc.add_scaled(&out.grads, 2.0 / 16.0).unwrap();
        loss += out.loss * 2.0 / 16.0;
    }
    let diff = acc.max_rel_diff(&full.grads, 1e-12).unwrap();
    assert!(diff < 1e-10, "{diff}");
    assert!((loss - full.loss).abs() < 1e-12);
}

#[test]
fn eval_forward_is_permutation_equivariant_and_pure() {
    let mut rng = emix_core::rng::seeded(11);
    let net = Network::new(small_encoder()).unwrap();
    let params = jittered_params(&net, &mut rng, 5);
    let x = random_batch(&mut rng, Shape5::new(4, 1, 8, 8, 8));
    let a = net.forward(&x, &params, Pass::eval()).unwrap().output;
    let again = net.forward(&x, &params, Pass::eval()).unwrap().output;
    assert_eq!(a.logits, again.logits);

    let perm = [2, 0, 3, 1];
    let b = net.forward(&x.select(&perm), &params, Pass::eval()).unwrap().output;
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.logits_of(i), a.logits_of(p));
    }

    let doubled = x.select(&[0, 1, 2, 3, 0, 1, 2, 3]);
    let d = net.forward(&doubled, &params, Pass::eval()).unwrap().output;
    for i in 0..4 {
        assert_eq!(d.logits_of(i), d.logits_of(i + 4));
        assert_eq!(d.logits_of(i), a.logits_of(i));
    }
}

#[test]
fn train_mode_without_mixing_is_permutation_equivariant() {
    let mut rng = emix_core::rng::seeded(12);
    let net = Network::new(small_encoder()).unwrap();
    let params = jittered_params(&net, &mut rng, 6);
    let x = random_batch(&mut rng, Shape5::new(3, 1, 8, 8, 8));
    let em = EmConfig {
        p: 0.0,
        ..EmConfig::for_variant(EmVariant::Em1)
    };
    let mut r = emix_core::rng::seeded(0);
    let a = net.forward(&x, &params, Pass::train(Some(&em), &mut r)).unwrap().output;
    let perm = [1, 2, 0];
    let b = net.forward(&x.select(&perm), &params, Pass::train(None, &mut r)).unwrap().output;
    for (i, &p) in perm.iter().enumerate() {
        let err = max_rel_err(b.logits_of(i), a.logits_of(p), 1.0);
        assert!(err < 1e-12, "{err}");
    }
}

#[test]
fn batch_and_running_modes_agree_when_running_statistics_match() {
    let mut rng = emix_core::rng::seeded(13);
    let net = Network::new(EncoderConfig {
        block_channels: vec![2],
        hidden: 3,
        ..EncoderConfig::default()
    })
    .unwrap();
    let mut params = jittered_params(&net, &mut rng, 8);
    let x = random_batch(&mut rng, Shape5::new(2, 1, 4, 4, 4));
    let mut r = emix_core::rng::seeded(0);
    let trace = net.forward(&x, &params, Pass::train(None, &mut r)).unwrap();
    // copy the biased batch variance into the running slots
    // both units see 2 samples of 2³ voxels
    let n = 16.0;
    for (unit, which) in [(0usize, "a"), (1, "b")] {
        let m = trace.norm_moments[unit].as_ref().unwrap();
        params.get_mut(&format!("block1.{which}.norm.running_mean")).unwrap().data = m.mean.clone();
        params.get_mut(&format!("block1.{which}.norm.running_var")).unwrap().data =
            m.var_unbiased.iter().map(|v| v * (n - 1.0) / n).collect();
    }
    let running = net
        .forward(
            &x,
            &params,
            Pass {
                mode: Mode::Train,
                norm: NormSource::Running,
                em: EmSource::Off,
            },
        )
        .unwrap()
        .output;
    let err = max_rel_err(&running.logits, &trace.output.logits, 1.0);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn wrong_input_shapes_are_rejected_with_the_layer_named() {
    let net = Network::new(EncoderConfig::default()).unwrap();
    let params = net.init_params(0);
    let two_channel = FeatureBatch::zeros(Shape5::cube(1, 2, 32));
    let err = net.forward(&two_channel, &params, Pass::eval()).err().unwrap().to_string();
    assert!(err.contains("block1"), "{err}");
    let odd = FeatureBatch::zeros(Shape5::cube(1, 1, 24));
    let err = net.forward(&odd, &params, Pass::eval()).err().unwrap().to_string();
    assert!(err.contains("block"), "{err}");
}
