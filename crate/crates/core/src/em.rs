//! Feature-statistics mixing: MixStyle and its skewness (EM1) and
//! skewness + kurtosis (EM2) extensions.
//!
//! Each sample is normalised with its own channel statistics and rescaled
//! with statistics interpolated towards a randomly paired sample:
//!
//! ```text
//! x_norm   = (x - mu) / sigma
//! mixstyle = x_norm * sigma_mix + mu_mix
//! em1      = mixstyle + beta_skew * gamma_mix * x_norm^3 * sigma_mix
//! em2      = em1      + beta_kurt * kappa_mix * x_norm^4 * sigma_mix
//! ```
//!
//! with `m_mix = lambda_b * m_b + (1 - lambda_b) * m_perm(b)` for every moment.
//! All statistics are treated as constants when differentiating.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{compute_channel_stats, ChannelStats, DEFAULT_EPS};
use crate::tensor::FeatureBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmVariant {
    MixStyle,
    Em1,
    Em2,
}

impl EmVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmVariant::MixStyle => "mixstyle",
            EmVariant::Em1 => "em1",
            EmVariant::Em2 => "em2",
        }
    }
}

impl fmt::Display for EmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mixstyle" => Ok(EmVariant::MixStyle),
            "em1" => Ok(EmVariant::Em1),
            "em2" => Ok(EmVariant::Em2),
            other => Err(Error::Invalid(format!("unknown variant `{other}`"))),
        }
    }
}

/// Train applies augmentation and batch statistics; eval is a pass-through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const MAX_INSERTION_LAYER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub variant: EmVariant,
    /// Beta(alpha, alpha) concentration for the mixing weights.
    pub alpha: f64,
    /// Probability that a batch is mixed at all.
    pub p: f64,
    pub beta_skew: f64,
    pub beta_kurt: f64,
    pub eps: f64,
    /// 1-based encoder block indices whose outputs are perturbed.
    pub layers: BTreeSet<usize>,
}

impl EmConfig {
    /// Operating point per variant: block 2, p = 0.9, beta_skew = 0.3,
    /// beta_kurt = 0.1; alpha is 0.7 for EM1, 0.5 for EM2 and 0.1 for
    /// plain MixStyle (with p = 0.5).
    pub fn for_variant(variant: EmVariant) -> Self {
        let (alpha, p) = match variant {
            EmVariant::MixStyle => (0.1, 0.5),
            EmVariant::Em1 => (0.7, 0.9),
            EmVariant::Em2 => (0.5, 0.9),
        };
        EmConfig {
            variant,
            alpha,
            p,
            beta_skew: 0.3,
            beta_kurt: 0.1,
            eps: DEFAULT_EPS,
            layers: BTreeSet::from([2]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("em.alpha", "must be a finite positive number"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("em.p", "must lie in [0, 1]"));
        }
        if !(self.beta_skew >= 0.0) || !self.beta_skew.is_finite() {
            return Err(Error::config("em.beta_skew", "must be finite and non-negative"));
        }
        if !(self.beta_kurt >= 0.0) || !self.beta_kurt.is_finite() {
            return Err(Error::config("em.beta_kurt", "must be finite and non-negative"));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::config("em.eps", "must be finite and non-negative"));
        }
        if self.layers.iter().any(|&l| l == 0 || l > MAX_INSERTION_LAYER) {
            return Err(Error::config("em.layers", "block indices must lie in 1..=4"));
        }
        Ok(())
    }

    /// `(beta_skew, beta_kurt)` after the variant has zeroed what it ignores.
    pub fn effective_betas(&self) -> (f64, f64) {
        match self.variant {
            EmVariant::MixStyle => (0.0, 0.0),
            EmVariant::Em1 => (self.beta_skew, 0.0),
            EmVariant::Em2 => (self.beta_skew, self.beta_kurt),
        }
    }
}

/// One augmentation decision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub active: bool,
    pub perm: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl MixPlan {
    pub fn new(active: bool, perm: Vec<usize>, lambda: Vec<f64>) -> Result<Self> {
        if perm.len() != lambda.len() {
            return Err(Error::Shape(format!(
                "permutation of {} entries with {} mixing weights",
                perm.len(),
                lambda.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &j in &perm {
            if j >= perm.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Invalid(format!("{perm:?} is not a permutation")));
            }
        }
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Invalid("mixing weights must lie in [0, 1]".into()));
        }
        Ok(MixPlan { active, perm, lambda })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Beta(alpha, alpha) through the ratio of two Gamma(alpha, 1) draws.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let a = gamma.sample(rng);
    let b = gamma.sample(rng);
    let total = a + b;
    if total > 0.0 {
        (a / total).clamp(0.0, 1.0)
    } else {
        // both draws underflowed; the two are exchangeable
        0.5
    }
}

/// Draws the activation flag, then a uniform permutation (fixed points
/// allowed), then one mixing weight per sample. The permutation and weights
/// are drawn even for inactive plans so the stream length does not depend on
/// the coin.
pub fn sample_mix_plan<R: Rng + ?Sized>(batch: usize, cfg: &EmConfig, rng: &mut R) -> MixPlan {
    let active = rng.random_bool(cfg.p.clamp(0.0, 1.0));
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    let lambda = (0..batch).map(|_| sample_beta(cfg.alpha, rng)).collect();
    MixPlan { active, perm, lambda }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedStats {
    pub batch: usize,
    pub channels: usize,
    pub mu_mix: Vec<f64>,
    pub sigma_mix: Vec<f64>,
    pub gamma_mix: Vec<f64>,
    pub kappa_mix: Vec<f64>,
}

impl MixedStats {
    /// The unmixed statistics, i.e. the `lambda = 1` endpoint.
    pub fn from_own(own: &ChannelStats) -> Self {
        MixedStats {
            batch: own.batch,
            channels: own.channels,
            mu_mix: own.mu.clone(),
            sigma_mix: own.sigma.clone(),
            gamma_mix: own.gamma.clone(),
            kappa_mix: own.kappa.clone(),
        }
    }
}

pub fn mix_stats(own: &ChannelStats, plan: &MixPlan) -> Result<MixedStats> {
    if plan.len() != own.batch {
        return Err(Error::Shape(format!(
            "plan for {} samples applied to statistics of {}",
            plan.len(),
            own.batch
        )));
    }
    let c = own.channels;
    let mix = |m: &[f64]| {
        let mut out = Vec::with_capacity(m.len());
        for (b, (&partner, &lam)) in plan.perm.iter().zip(&plan.lambda).enumerate() {
            for ch in 0..c {
                out.push(lam * m[b * c + ch] + (1.0 - lam) * m[partner * c + ch]);
            }
        }
        out
    };
    Ok(MixedStats {
        batch: own.batch,
        channels: c,
        mu_mix: mix(&own.mu),
        sigma_mix: mix(&own.sigma),
        gamma_mix: mix(&own.gamma),
        kappa_mix: mix(&own.kappa),
    })
}

fn check_shapes(x: &FeatureBatch, own: &ChannelStats, mixed: &MixedStats) -> Result<()> {
    let s = x.shape();
    if own.batch != s.batch || own.channels != s.channels {
        return Err(Error::Shape(format!(
            "statistics for {}x{} applied to batch {s}",
            own.batch, own.channels
        )));
    }
    if mixed.batch != s.batch || mixed.channels != s.channels {
        return Err(Error::Shape(format!(
            "mixed statistics for {}x{} applied to batch {s}",
            mixed.batch, mixed.channels
        )));
    }
    Ok(())
}

fn perturb(x: &FeatureBatch, own: &ChannelStats, mixed: &MixedStats, beta_skew: f64, beta_kurt: f64) -> Result<FeatureBatch> {
    check_shapes(x, own, mixed)?;
    let s = x.shape();
    let mut out = x.clone();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let k = own.index(b, c);
            let (mu, sigma) = (own.mu[k], own.sigma[k]);
            let (mu_mix, sigma_mix) = (mixed.mu_mix[k], mixed.sigma_mix[k]);
            let skew = beta_skew * mixed.gamma_mix[k] * sigma_mix;
            let kurt = beta_kurt * mixed.kappa_mix[k] * sigma_mix;
            for v in out.channel_mut(b, c) {
                let z = (*v - mu) / sigma;
                let mut y = z * sigma_mix + mu_mix;
                if beta_skew != 0.0 {
                    y += skew * z * z * z;
                }
                if beta_kurt != 0.0 {
                    y += kurt * (z * z) * (z * z);
                }
                *v = y;
            }
        }
    }
    Ok(out)
}

pub fn apply_mixstyle(x: &FeatureBatch, own: &ChannelStats, mixed: &MixedStats) -> Result<FeatureBatch> {
    perturb(x, own, mixed, 0.0, 0.0)
}

pub fn apply_em1(x: &FeatureBatch, own: &ChannelStats, mixed: &MixedStats, beta_skew: f64) -> Result<FeatureBatch> {
    perturb(x, own, mixed, beta_skew, 0.0)
}

pub fn apply_em2(
    x: &FeatureBatch,
    own: &ChannelStats,
    mixed: &MixedStats,
    beta_skew: f64,
    beta_kurt: f64,
) -> Result<FeatureBatch> {
    perturb(x, own, mixed, beta_skew, beta_kurt)
}

/// Everything drawn or measured for one application, so the same
/// perturbation can be replayed or differentiated later.
#[derive(Clone, Debug, PartialEq)]
pub struct EmRealization {
    pub plan: MixPlan,
    pub own: ChannelStats,
    pub mixed: MixedStats,
}

/// Applies a recorded realization to `x` without recomputing statistics.
pub fn apply_realization(x: &FeatureBatch, cfg: &EmConfig, r: &EmRealization) -> Result<FeatureBatch> {
    let (bs, bk) = cfg.effective_betas();
    perturb(x, &r.own, &r.mixed, bs, bk)
}

pub fn em_forward<R: Rng + ?Sized>(x: &FeatureBatch, cfg: &EmConfig, mode: Mode, rng: &mut R) -> Result<FeatureBatch> {
    em_forward_traced(x, cfg, mode, rng).map(|(y, _)| y)
}

/// Like [`em_forward`], also returning the realization when one was applied.
pub fn em_forward_traced<R: Rng + ?Sized>(
    x: &FeatureBatch,
    cfg: &EmConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(FeatureBatch, Option<EmRealization>)> {
    if mode == Mode::Eval {
        return Ok((x.clone(), None));
    }
    let plan = sample_mix_plan(x.shape().batch, cfg, rng);
    if !plan.active {
        return Ok((x.clone(), None));
    }
    let own = compute_channel_stats(x, cfg.eps)?;
    let mixed = mix_stats(&own, &plan)?;
    let r = EmRealization { plan, own, mixed };
    let y = apply_realization(x, cfg, &r)?;
    Ok((y, Some(r)))
}

/// Elementwise derivative of the perturbed output with respect to its input
/// with every statistic held constant. There are no cross-element terms.
pub fn em_backward_local(x: &FeatureBatch, own: &ChannelStats, mixed: &MixedStats, cfg: &EmConfig) -> Result<Vec<f64>> {
    check_shapes(x, own, mixed)?;
    let (bs, bk) = cfg.effective_betas();
    let s = x.shape();
    let mut out = Vec::with_capacity(s.len());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let k = own.index(b, c);
            let (mu, sigma) = (own.mu[k], own.sigma[k]);
            let scale = mixed.sigma_mix[k] / sigma;
            let skew = 3.0 * bs * mixed.gamma_mix[k];
            let kurt = 4.0 * bk * mixed.kappa_mix[k];
            out.extend(x.channel(b, c).iter().map(|v| {
                let z = (v - mu) / sigma;
                scale * (1.0 + skew * z * z + kurt * z * z * z)
            }));
        }
    }
    Ok(out)
}
