//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use emix_core::em::{EmConfig, EmRealization, EmVariant, MixPlan};
use emix_core::net::{EmSource, EncoderConfig, Network, NormSource, ParamKind, ParameterSet, Pass};
use emix_core::train::weighted_cross_entropy;
use emix_core::{FeatureBatch, Shape5};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};

/// Textbook population moments: plain two-pass sums, no compensation.
pub fn naive_moments(values: &[f64], eps: f64) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = (var + eps).sqrt();
    let gamma = values.iter().map(|v| ((v - mu) / sigma).powi(3)).sum::<f64>() / n;
    let kappa = values.iter().map(|v| ((v - mu) / sigma).powi(4)).sum::<f64>() / n - 3.0;
    (mu, sigma, gamma, kappa)
}

/// Element-by-element evaluation of the full higher-order mixing rule:
/// `z = (x - mu)/sigma`, `out = z s' + m' + bs g' z^3 s' + bk k' z^4 s'`
/// with every primed statistic interpolated towards the partner sample.
/// `stats[b][c]` holds `(mu, sigma, gamma, kappa)`.
pub fn em2_from_stats(
    x: &FeatureBatch,
    stats: &[Vec<(f64, f64, f64, f64)>],
    plan: &MixPlan,
    beta_skew: f64,
    beta_kurt: f64,
) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.len());
    for b in 0..s.batch {
        let lam = plan.lambda[b];
        let j = plan.perm[b];
        for c in 0..s.channels {
            let (m1, s1, g1, k1) = stats[b][c];
            let (m2, s2, g2, k2) = stats[j][c];
            let mu_mix = lam * m1 + (1.0 - lam) * m2;
            let sigma_mix = lam * s1 + (1.0 - lam) * s2;
            let gamma_mix = lam * g1 + (1.0 - lam) * g2;
            let kappa_mix = lam * k1 + (1.0 - lam) * k2;
            for &v in x.channel(b, c) {
                let z = (v - m1) / s1;
                out.push(
                    z * sigma_mix
                        + mu_mix
                        + beta_skew * gamma_mix * z.powi(3) * sigma_mix
                        + beta_kurt * kappa_mix * z.powi(4) * sigma_mix,
                );
            }
        }
    }
    out
}

/// [`em2_from_stats`] with textbook moments.
pub fn em2_elementwise(x: &FeatureBatch, plan: &MixPlan, eps: f64, beta_skew: f64, beta_kurt: f64) -> Vec<f64> {
    let s = x.shape();
    let stats: Vec<Vec<(f64, f64, f64, f64)>> = (0..s.batch)
        .map(|b| (0..s.channels).map(|c| naive_moments(x.channel(b, c), eps)).collect())
        .collect();
    em2_from_stats(x, &stats, plan, beta_skew, beta_kurt)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

/// A batch whose channels follow a mix of shapes: Gaussian, lognormal,
/// heavy-tailed, offset and rescaled.
pub fn random_batch<R: Rng>(rng: &mut R, shape: Shape5) -> FeatureBatch {
    let n = shape.spatial();
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.batch * shape.channels {
        let offset = rng.random_range(-50.0..50.0);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let kind = rng.random_range(0..4);
        for _ in 0..n {
            let v: f64 = match kind {
                0 => Normal::new(0.0, 1.0).unwrap().sample(rng),
                1 => LogNormal::new(0.0, 0.7).unwrap().sample(rng),
                2 => StudentT::new(5.0).unwrap().sample(rng),
                _ => rng.random_range(-1.0..1.0),
            };
            data.push(offset + scale * v);
        }
    }
    FeatureBatch::new(shape, data).unwrap()
}

pub fn random_plan<R: Rng>(rng: &mut R, batch: usize) -> MixPlan {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    let lambda = (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect();
    MixPlan::new(true, perm, lambda).unwrap()
}

/// The 1-block encoder used for finite-difference checks.
pub fn tiny_encoder(channels: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        block_channels: vec![channels],
        hidden: 4,
        classes: 3,
        ..EncoderConfig::default()
    }
}

/// Fresh parameters with every tensor moved away from its initial
/// convention so no gradient is trivially zero.
pub fn jittered_params<R: Rng>(net: &Network, rng: &mut R, seed: u64) -> ParameterSet {
    let mut params = net.init_params(seed);
    for p in params.tensors.iter_mut() {
        for v in p.data.iter_mut() {
            match p.kind {
                ParamKind::Weight => {}
                ParamKind::Bias | ParamKind::Shift => *v += rng.random_range(-0.05..0.2),
                ParamKind::RunningMean => *v += rng.random_range(-0.3..0.3),
                ParamKind::Scale => *v = rng.random_range(0.5..1.5),
                ParamKind::RunningVar => *v = rng.random_range(0.3..2.0),
            }
        }
    }
    params
}

pub fn em2_config(layers: &[usize]) -> EmConfig {
    EmConfig {
        p: 1.0,
        layers: layers.iter().copied().collect(),
        ..EmConfig::for_variant(EmVariant::Em2)
    }
}

/// Loss and ReLU pattern under a fixed norm mode and replayed mixing.
#[allow(clippy::too_many_arguments)]
pub fn replay_loss(
    net: &Network,
    x: &FeatureBatch,
    labels: &[usize],
    weights: &[f64],
    params: &ParameterSet,
    norm: NormSource,
    em: &EmConfig,
    slots: &[Option<EmRealization>],
) -> (f64, Vec<bool>) {
    let pass = Pass {
        mode: emix_core::em::Mode::Train,
        norm,
        em: EmSource::Replay(em, slots),
    };
    let trace = net.forward(x, params, pass).unwrap();
    let loss = weighted_cross_entropy(&trace.output.logits, net.config().classes, labels, weights).unwrap();
    (loss, trace.activation_pattern())
}

pub struct FdReport {
    /// Worst elementwise relative error over the compared coordinates.
    pub worst: f64,
    /// Worst per-tensor `|g - fd|_2 / max(|g|_2, |fd|_2)` over compared coordinates.
    pub worst_tensor: f64,
    pub compared: usize,
    /// Coordinates whose +h or -h evaluation switched a ReLU.
    pub skipped: usize,
}

/// Smallest own standard deviation at the mixing layer for which a step of
/// `1e-3` is still small: the truncation error grows like `(h / sigma)^2`.
pub const MIN_FD_SIGMA: f64 = 0.05;

/// Central-difference gradient of every trainable parameter of a random
/// tiny instance, compared with the reverse pass. Coordinates whose step
/// crosses a ReLU kink are not differentiable there and are skipped.
/// Returns `None` for instances with a nearly constant mixed channel.
pub fn network_fd_check(seed: u64, norm: NormSource, h: f64, floor: f64) -> Option<FdReport> {
    let mut rng = emix_core::rng::seeded(seed);
    let channels = rng.random_range(2..=3);
    let net = Network::new(tiny_encoder(channels)).unwrap();
    let params = jittered_params(&net, &mut rng, seed);
    let shape = Shape5::new(2, 1, 4, 4, 4);
    let x = FeatureBatch::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    let em = EmConfig {
        beta_skew: rng.random_range(0.0..0.4),
        beta_kurt: rng.random_range(0.0..0.2),
        ..em2_config(&[1])
    };

    // draw one realization, then freeze it
    let mut em_rng = emix_core::rng::seeded(seed ^ 0x5eed);
    let sampled = net
        .forward(
            &x,
            &params,
            Pass {
                mode: emix_core::em::Mode::Train,
                norm,
                em: EmSource::Sample(&em, &mut em_rng),
            },
        )
        .unwrap();
    let slots = sampled.em.clone();
    assert!(slots[0].is_some(), "p = 1 always mixes");
    let min_sigma = slots[0].as_ref().unwrap().own.sigma.iter().copied().fold(f64::INFINITY, f64::min);
    if min_sigma < MIN_FD_SIGMA {
        return None;
    }

    let pass = Pass {
        mode: emix_core::em::Mode::Train,
        norm,
        em: EmSource::Replay(&em, &slots),
    };
    let analytic = net.loss_and_grads(&x, &labels, &weights, &params, pass).unwrap();
    let pattern = analytic.trace.activation_pattern();
    let analytic = analytic.grads;

    let mut report = FdReport {
        worst: 0.0,
        worst_tensor: 0.0,
        compared: 0,
        skipped: 0,
    };
    for (t, p) in params.tensors.iter().enumerate() {
        if !p.kind.trainable() {
            continue;
        }
        let (mut diff2, mut g2, mut fd2) = (0.0, 0.0, 0.0);
        for i in 0..p.data.len() {
            let mut plus = params.clone();
            plus.tensors[t].data[i] += h;
            let mut minus = params.clone();
            minus.tensors[t].data[i] -= h;
            let (lp, pp) = replay_loss(&net, &x, &labels, &weights, &plus, norm, &em, &slots);
            let (lm, pm) = replay_loss(&net, &x, &labels, &weights, &minus, norm, &em, &slots);
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let g = analytic.tensors[t].data[i];
            report.worst = report.worst.max(rel_err(g, fd, floor));
            diff2 += (g - fd) * (g - fd);
            g2 += g * g;
            fd2 += fd * fd;
            report.compared += 1;
        }
        let denom = f64::max(g2, fd2).sqrt().max(floor);
        report.worst_tensor = report.worst_tensor.max(diff2.sqrt() / denom);
    }
    Some(report)
}
