//! Per-sample, per-channel spatial moments.
//!
//! For every `(b, c)` pair of a [`FeatureBatch`] the spatial mean, the
//! epsilon-stabilised standard deviation, the skewness and the excess
//! kurtosis are computed with population (divide-by-`N`) normalisation:
//!
//! ```text
//! mu    = 1/N sum x_i
//! sigma = sqrt(1/N sum (x_i - mu)^2 + eps)
//! gamma = 1/N sum ((x_i - mu) / sigma)^3
//! kappa = 1/N sum ((x_i - mu) / sigma)^4 - 3
//! ```
//!
//! `eps` only enters `sigma`; the standardised moments reuse that `sigma`.

mod oracle;
mod summary;

pub use oracle::oracle_channel_stats;
pub use summary::{summarize_cohort_moments, write_summary_csv, CohortMomentSummary, SUMMARY_CSV_HEADER};

use crate::error::{Error, Result};
use crate::tensor::FeatureBatch;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Moments of every `(sample, channel)` pair, stored `B × C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub batch: usize,
    pub channels: usize,
    pub eps: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl ChannelStats {
    pub fn index(&self, b: usize, c: usize) -> usize {
        b * self.channels + c
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Channel-mean skewness of sample `b`.
    pub fn sample_skewness(&self, b: usize) -> f64 {
        let row = &self.gamma[b * self.channels..(b + 1) * self.channels];
        row.iter().sum::<f64>() / self.channels as f64
    }

    /// Channel-mean excess kurtosis of sample `b`.
    pub fn sample_kurtosis(&self, b: usize) -> f64 {
        let row = &self.kappa[b * self.channels..(b + 1) * self.channels];
        row.iter().sum::<f64>() / self.channels as f64
    }

    /// Restricts to the listed samples, in order.
    pub fn select(&self, indices: &[usize]) -> ChannelStats {
        let pick = |v: &[f64]| {
            indices
                .iter()
                .flat_map(|&b| v[b * self.channels..(b + 1) * self.channels].iter().copied())
                .collect::<Vec<_>>()
        };
        ChannelStats {
            batch: indices.len(),
            channels: self.channels,
            eps: self.eps,
            mu: pick(&self.mu),
            sigma: pick(&self.sigma),
            gamma: pick(&self.gamma),
            kappa: pick(&self.kappa),
        }
    }
}

pub(crate) fn check_input(x: &FeatureBatch, eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Invalid(format!("eps must be finite and non-negative, got {eps}")));
    }
    let n = x.shape().spatial();
    if n < 2 {
        return Err(Error::TooFewElements(n));
    }
    if let Some((batch, channel)) = x.first_non_finite() {
        return Err(Error::NonFinite { batch, channel });
    }
    Ok(())
}

/// Single pass over each channel using the pairwise-stable central-moment
/// update (Welford extended to third and fourth order).
pub fn compute_channel_stats(x: &FeatureBatch, eps: f64) -> Result<ChannelStats> {
    check_input(x, eps)?;
    let shape = x.shape();
    let len = shape.batch * shape.channels;
    let mut stats = ChannelStats {
        batch: shape.batch,
        channels: shape.channels,
        eps,
        mu: Vec::with_capacity(len),
        sigma: Vec::with_capacity(len),
        gamma: Vec::with_capacity(len),
        kappa: Vec::with_capacity(len),
    };
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            let acc = x.channel(b, c).iter().fold(Central::default(), |acc, &v| acc.push(v));
            let (mu, sigma, gamma, kappa) = acc.finish(eps).ok_or(Error::ZeroVariance { batch: b, channel: c })?;
            stats.mu.push(mu);
            stats.sigma.push(sigma);
            stats.gamma.push(gamma);
            stats.kappa.push(kappa);
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, Default)]
struct Central {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Central {
    fn push(self, x: f64) -> Self {
        let n1 = self.n;
        let n = n1 + 1.0;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        Central {
            n,
            mean: self.mean + dn,
            m4: self.m4 + term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3,
            m3: self.m3 + term1 * dn * (n - 2.0) - 3.0 * dn * self.m2,
            m2: self.m2 + term1,
        }
    }

    fn finish(self, eps: f64) -> Option<(f64, f64, f64, f64)> {
        let var = (self.m2 / self.n).max(0.0);
        let sigma = (var + eps).sqrt();
        if sigma == 0.0 {
            return None;
        }
        let s2 = sigma * sigma;
        let gamma = self.m3 / self.n / (s2 * sigma);
        let kappa = self.m4 / self.n / (s2 * s2) - 3.0;
        Some((self.mean, sigma, gamma, kappa))
    }
}
