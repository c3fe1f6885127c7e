//! Single-source training: weighted cross-entropy, SGD with momentum and
//! coupled L2 decay, per-epoch exponential learning-rate decay, gradient
//! accumulation and checkpoint selection on a held-out source split.

pub mod loss;

use std::io::Write;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::data::{batch_of, Sample};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::eval::{confusion, macro_metrics, one_vs_all, BinaryMetrics, MetricsReport};
use crate::net::{EncoderConfig, Network, ParameterSet, Pass};
use crate::rng;

pub use loss::{inverse_frequency_weights, weighted_cross_entropy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractional learning-rate reduction applied after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub physical_batch: usize,
    pub effective_batch: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay: 0.05,
            epochs: 30,
            physical_batch: 2,
            effective_batch: 16,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::config("train.lr_decay", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.physical_batch == 0 || !self.effective_batch.is_multiple_of(self.physical_batch) || self.effective_batch == 0 {
            return Err(Error::config(
                "train.effective_batch",
                "must be a positive multiple of train.physical_batch",
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("train.val_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (1.0 - cfg.lr_decay).powi(epoch as i32)
}

/// `v ← momentum·v + g + wd·θ; θ ← θ − lr·v` on trainable tensors.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, velocity: &mut ParameterSet, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for ((p, g), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut velocity.tensors) {
        if !p.kind.trainable() {
            continue;
        }
        if p.shape != g.shape || p.shape != v.shape {
            return Err(Error::Shape(format!("`{}` has mismatched gradient or velocity", p.name)));
        }
        for ((theta, grad), vel) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
            *vel = cfg.momentum * *vel + grad + cfg.weight_decay * *theta;
            *theta -= lr * *vel;
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { tensor: p.name.clone() });
        }
    }
    Ok(())
}

/// Per-class shuffled 80/20 (by default) partition of `labels`; returns
/// `(train, validation)` indices.
pub fn stratified_split(labels: &[usize], classes: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::seeded(rng::derive_str(seed, "split"));
    let (mut train, mut val) = (vec![], vec![]);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut r);
        let n_val = ((idx.len() as f64) * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_sen: f64,
    pub val_spe: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub cohort: String,
    pub samples: usize,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    /// Positive class against the rest.
    pub positive_vs_rest: BinaryMetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetricsRecord {
    pub positive: usize,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
}

impl From<&BinaryMetrics> for BinaryMetricsRecord {
    fn from(m: &BinaryMetrics) -> Self {
        BinaryMetricsRecord {
            positive: m.positive,
            acc: m.accuracy,
            sen: m.sensitivity,
            spe: m.specificity,
            f1: m.f1,
        }
    }
}

/// Serialised as `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: String,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub class_weights: Vec<f64>,
    pub optimizer_steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub targets: Vec<TargetRecord>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,train_loss,val_loss,val_acc,val_sen,val_spe,val_f1";

impl RunRecord {
    pub fn write_epoch_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{EPOCH_CSV_HEADER}")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.8},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.val_acc, e.val_sen, e.val_spe, e.val_f1
            )?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn mean_target_f1(&self) -> f64 {
        self.targets.iter().map(|t| t.f1).sum::<f64>() / self.targets.len().max(1) as f64
    }
}

pub struct FitOutput {
    pub record: RunRecord,
    /// Parameters of the selected epoch.
    pub best: ParameterSet,
}

/// Predictions and loss of `params` in eval mode.
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss: f64,
    pub metrics: MetricsReport,
}

const EVAL_CHUNK: usize = 8;

pub fn evaluate(net: &Network, params: &ParameterSet, samples: &[&Sample], class_weights: &[f64]) -> Result<Evaluation> {
    let k = net.config().classes;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = batch_of(chunk)?;
        let out = net.forward(&x, params, Pass::eval())?.output;
        let y: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        loss += weighted_cross_entropy(&out.logits, k, &y, class_weights)? * chunk.len() as f64;
        predictions.extend(out.predictions());
        labels.extend(y);
    }
    let cm = confusion(&labels, &predictions, k)?;
    Ok(Evaluation {
        metrics: macro_metrics(&cm),
        predictions,
        labels,
        loss: loss / samples.len() as f64,
    })
}

/// Trains on `source` only; `targets` are read once, after the epoch loop,
/// with the selected parameters. `positive` picks the class of the
/// one-vs-rest target metrics.
pub fn fit(
    source: &[Sample],
    targets: &[(String, Vec<Sample>)],
    net_cfg: &EncoderConfig,
    em_cfg: Option<&EmConfig>,
    cfg: &TrainConfig,
    positive: usize,
    setting: &str,
) -> Result<FitOutput> {
    cfg.validate()?;
    if let Some(em) = em_cfg {
        em.validate()?;
    }
    let net = Network::new(net_cfg.clone())?;
    let k = net_cfg.classes;
    if let Some(s) = source.iter().find(|s| targets.iter().any(|(_, t)| t.iter().any(|x| x.id == s.id))) {
        return Err(Error::Invalid(format!("sample `{}` appears in both source and target", s.id)));
    }

    let labels: Vec<usize> = source.iter().map(|s| s.label).collect();
    let (train_idx, val_idx) = stratified_split(&labels, k, cfg.val_fraction, cfg.seed);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let weights = inverse_frequency_weights(&train_labels, k)?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &source[i]).collect();

    let mut params = net.init_params(rng::derive_str(cfg.seed, "init"));
    let mut velocity = params.zeros_like();
    let mut accum = params.zeros_like();
    let mut em_rng = rng::seeded(rng::derive_str(cfg.seed, "em"));
    let mut order = train_idx.clone();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut best: Option<(usize, f64, ParameterSet)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        order.shuffle(&mut rng::stream(rng::derive_str(cfg.seed, "shuffle"), epoch as u64));
        let mut pending = 0usize;
        let mut loss_sum = 0.0;
        let n_micro = order.len().div_ceil(cfg.physical_batch);
        for (m, micro) in order.chunks(cfg.physical_batch).enumerate() {
            let batch: Vec<&Sample> = micro.iter().map(|&i| &source[i]).collect();
            let x = batch_of(&batch)?;
            let y: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let out = net
                .loss_and_grads(&x, &y, &weights, &params, Pass::train(em_cfg, &mut em_rng))
                .map_err(|e| diverged(e, epoch))?;
            if out.trace.em.iter().any(Option::is_some) {
                let clean = net.forward(&x, &params, Pass::train(None, &mut em_rng)).map_err(|e| diverged(e, epoch))?;
                net.update_running_stats(&mut params, &clean);
            } else {
                net.update_running_stats(&mut params, &out.trace);
            }
            loss_sum += out.loss * micro.len() as f64;
            accum.add_scaled(&out.grads, micro.len() as f64 / cfg.effective_batch as f64)?;
            pending += micro.len();
            if pending >= cfg.effective_batch || m + 1 == n_micro {
                sgd_step(&mut params, &accum, &mut velocity, lr, cfg).map_err(|e| diverged(e, epoch))?;
                accum.fill(0.0);
                pending = 0;
                steps += 1;
            }
        }
        let v = evaluate(&net, &params, &val, &weights).map_err(|e| diverged(e, epoch))?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            val_loss: v.loss,
            val_acc: v.metrics.accuracy,
            val_sen: v.metrics.sensitivity,
            val_spe: v.metrics.specificity,
            val_f1: v.metrics.f1,
        };
        if !rec.train_loss.is_finite() || !rec.val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                tensor: "loss".into(),
            });
        }
        if best.as_ref().is_none_or(|(_, f1, _)| rec.val_f1 > *f1) {
            best = Some((epoch, rec.val_f1, params.clone()));
        }
        epochs.push(rec);
    }

    let (best_epoch, best_val_f1, best_params) = best.expect("at least one epoch");
    let mut target_records = Vec::with_capacity(targets.len());
    for (name, samples) in targets {
        let refs: Vec<&Sample> = samples.iter().collect();
        let ev = evaluate(&net, &best_params, &refs, &weights)?;
        let cm = confusion(&ev.labels, &ev.predictions, k)?;
        let ova = one_vs_all(&cm, positive)?;
        target_records.push(TargetRecord {
            cohort: name.clone(),
            samples: samples.len(),
            acc: ev.metrics.accuracy,
            sen: ev.metrics.sensitivity,
            spe: ev.metrics.specificity,
            f1: ev.metrics.f1,
            positive_vs_rest: (&ova).into(),
        });
    }

    Ok(FitOutput {
        record: RunRecord {
            setting: setting.to_string(),
            seed: cfg.seed,
            train_samples: train_idx.len(),
            val_samples: val_idx.len(),
            class_weights: weights,
            optimizer_steps: steps,
            epochs,
            best_epoch,
            best_val_f1,
            targets: target_records,
        },
        best: best_params,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical { tensor } => Error::Diverged { epoch, tensor },
        other => other,
    }
}
