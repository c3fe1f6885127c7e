//! Per-channel batch normalisation over batch and spatial axes.

use crate::tensor::FeatureBatch;

/// Where the normalising mean and variance come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSource {
    /// Current batch statistics; differentiated through.
    Batch,
    /// Stored running statistics; constants.
    Running,
}

pub struct NormCache {
    pub xhat: FeatureBatch,
    pub inv_std: Vec<f64>,
    pub source: NormSource,
}

/// Batch mean and unbiased variance per channel, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

fn channel_iter(x: &FeatureBatch, c: usize) -> impl Iterator<Item = &f64> {
    (0..x.shape().batch).flat_map(move |b| x.channel(b, c).iter())
}

pub fn forward(
    x: &FeatureBatch,
    scale: &[f64],
    shift: &[f64],
    running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> (FeatureBatch, NormCache, Option<BatchMoments>) {
    let s = x.shape();
    let m = (s.batch * s.spatial()) as f64;
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(s.channels);
    let mut moments = BatchMoments {
        mean: vec![],
        var_unbiased: vec![],
    };
    for c in 0..s.channels {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mean = channel_iter(x, c).sum::<f64>() / m;
                let var = channel_iter(x, c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                moments.mean.push(mean);
                moments.var_unbiased.push(if m > 1.0 { var * m / (m - 1.0) } else { var });
                (mean, var)
            }
        };
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for b in 0..s.batch {
            for (h, o) in xhat.channel_mut(b, c).iter_mut().zip(out.channel_mut(b, c)) {
                *h = (*h - mean) * is;
                *o = *h * scale[c] + shift[c];
            }
        }
    }
    let source = if running.is_some() { NormSource::Running } else { NormSource::Batch };
    let moments = (source == NormSource::Batch).then_some(moments);
    (out, NormCache { xhat, inv_std, source }, moments)
}

/// Returns `(d input, d scale, d shift)`.
pub fn backward(cache: &NormCache, scale: &[f64], grad_out: &FeatureBatch) -> (FeatureBatch, Vec<f64>, Vec<f64>) {
    let s = grad_out.shape();
    let m = (s.batch * s.spatial()) as f64;
    let mut dx = grad_out.clone();
    let mut dscale = vec![0.0; s.channels];
    let mut dshift = vec![0.0; s.channels];
    for c in 0..s.channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..s.batch {
            for (dy, xh) in grad_out.channel(b, c).iter().zip(cache.xhat.channel(b, c)) {
                sum_dy += dy;
                sum_dy_xhat += dy * xh;
            }
        }
        dscale[c] = sum_dy_xhat;
        dshift[c] = sum_dy;
        let g = scale[c] * cache.inv_std[c];
        for b in 0..s.batch {
            let xh = cache.xhat.channel(b, c);
            for (d, x) in dx.channel_mut(b, c).iter_mut().zip(xh) {
                *d = match cache.source {
                    NormSource::Running => *d * g,
                    NormSource::Batch => g * (*d - sum_dy / m - x * sum_dy_xhat / m),
                };
            }
        }
    }
    (dx, dscale, dshift)
}
