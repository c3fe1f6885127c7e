//! Cohort-level reduction of per-sample moments with normal-approximation
//! 95% confidence intervals.

use std::io::Write;

use serde::Serialize;

use super::ChannelStats;
use crate::error::{Error, Result};

pub const SUMMARY_CSV_HEADER: &str = "cohort,mean_skew,ci_skew,mean_kurt,ci_kurt,n";

const Z_95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortMomentSummary {
    pub cohort: String,
    pub mean_skew: f64,
    pub ci_skew: f64,
    pub mean_kurt: f64,
    pub ci_kurt: f64,
    pub n: usize,
}

impl CohortMomentSummary {
    pub fn skew_interval(&self) -> (f64, f64) {
        (self.mean_skew - self.ci_skew, self.mean_skew + self.ci_skew)
    }

    pub fn kurt_interval(&self) -> (f64, f64) {
        (self.mean_kurt - self.ci_kurt, self.mean_kurt + self.ci_kurt)
    }

    /// Whether the skewness or the kurtosis intervals of the two cohorts are disjoint.
    pub fn separated_from(&self, other: &CohortMomentSummary) -> bool {
        disjoint(self.skew_interval(), other.skew_interval()) || disjoint(self.kurt_interval(), other.kurt_interval())
    }
}

fn disjoint(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z_95 * var.sqrt() / n.sqrt())
}

/// Groups `(cohort, stats)` entries by cohort id. Every sample of every
/// `ChannelStats` counts once, reduced to a scalar by averaging its channels.
/// Rows come out in order of first appearance.
pub fn summarize_cohort_moments<S: AsRef<str>>(entries: &[(S, ChannelStats)]) -> Result<Vec<CohortMomentSummary>> {
    let mut order: Vec<String> = Vec::new();
    let mut skew: Vec<Vec<f64>> = Vec::new();
    let mut kurt: Vec<Vec<f64>> = Vec::new();
    for (cohort, stats) in entries {
        let cohort = cohort.as_ref();
        let slot = match order.iter().position(|c| c == cohort) {
            Some(i) => i,
            None => {
                order.push(cohort.to_string());
                skew.push(vec![]);
                kurt.push(vec![]);
                order.len() - 1
            }
        };
        for b in 0..stats.batch {
            skew[slot].push(stats.sample_skewness(b));
            kurt[slot].push(stats.sample_kurtosis(b));
        }
    }
    order
        .into_iter()
        .zip(skew.into_iter().zip(kurt))
        .map(|(cohort, (s, k))| {
            if s.len() < 2 {
                return Err(Error::SingletonCohort(cohort));
            }
            let (mean_skew, ci_skew) = mean_ci(&s);
            let (mean_kurt, ci_kurt) = mean_ci(&k);
            Ok(CohortMomentSummary {
                cohort,
                mean_skew,
                ci_skew,
                mean_kurt,
                ci_kurt,
                n: s.len(),
            })
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[CohortMomentSummary]) -> Result<()> {
    writeln!(w, "{SUMMARY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.cohort, r.mean_skew, r.ci_skew, r.mean_kurt, r.ci_kurt, r.n
        )?;
    }
    Ok(())
}
