//! Reference moments: two passes, materialised deviations, compensated sums.
//! Shares no arithmetic with the streaming path in the parent module.

use super::{check_input, ChannelStats};
use crate::error::{Error, Result};
use crate::tensor::FeatureBatch;

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn compensated<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = KahanSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn oracle_channel_stats(x: &FeatureBatch, eps: f64) -> Result<ChannelStats> {
    check_input(x, eps)?;
    let shape = x.shape();
    let n = shape.spatial() as f64;
    let mut out = ChannelStats {
        batch: shape.batch,
        channels: shape.channels,
        eps,
        mu: vec![],
        sigma: vec![],
        gamma: vec![],
        kappa: vec![],
    };
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            let values = x.channel(b, c);
            let mean0 = compensated(values.iter().copied()) / n;
            // second pass removes the residual error of the first mean
            let mu = mean0 + compensated(values.iter().map(|v| v - mean0)) / n;
            let dev: Vec<f64> = values.iter().map(|v| v - mu).collect();
            let var = compensated(dev.iter().map(|d| d * d)) / n;
            let sigma = (var + eps).sqrt();
            if sigma == 0.0 {
                return Err(Error::ZeroVariance { batch: b, channel: c });
            }
            let z: Vec<f64> = dev.iter().map(|d| d / sigma).collect();
            let gamma = compensated(z.iter().map(|z| z * z * z)) / n;
            let kappa = compensated(z.iter().map(|z| (z * z) * (z * z))) / n - 3.0;
            out.mu.push(mu);
            out.sigma.push(sigma);
            out.gamma.push(gamma);
            out.kappa.push(kappa);
        }
    }
    Ok(out)
}
