//! Volumetric encoder-classifier with optional feature mixing after any of
//! its blocks, plus hand-written reverse-mode gradients.
//!
//! Each block is `conv(stride 2) → norm → ReLU → conv → norm → ReLU`; the
//! head is global average pooling, a hidden fully connected layer with ReLU
//! and the class logits.

mod checkpoint;
pub mod conv;
pub mod norm;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use norm::{BatchMoments, NormSource};
pub use params::{Param, ParamKind, ParameterSet};

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::em::{apply_realization, em_backward_local, sample_mix_plan, mix_stats, EmConfig, EmRealization, Mode};
use crate::error::{Error, Result};
use crate::moments::compute_channel_stats;
use crate::rng;
use crate::tensor::FeatureBatch;
use crate::train::loss::weighted_cross_entropy_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
    /// Running-statistics update weight given to each new batch.
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            block_channels: vec![8, 16, 32, 64],
            hidden: 32,
            classes: 3,
            norm_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.len() > 4 {
            return Err(Error::config("net.blocks", "between 1 and 4 blocks are supported"));
        }
        if self.block_channels.contains(&0) || self.in_channels == 0 || self.hidden == 0 {
            return Err(Error::config("net.blocks", "channel counts must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("net.classes", "need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::config("net.norm_momentum", "must lie in [0, 1]"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("net.norm_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Logits and pooled features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub batch: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub embedding_dim: usize,
    pub embedding: Vec<f64>,
}

impl ForwardOutput {
    pub fn logits_of(&self, b: usize) -> &[f64] {
        &self.logits[b * self.classes..(b + 1) * self.classes]
    }

    pub fn embedding_of(&self, b: usize) -> &[f64] {
        &self.embedding[b * self.embedding_dim..(b + 1) * self.embedding_dim]
    }

    /// Arg-max class per sample; ties go to the lower index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| {
                let row = self.logits_of(b);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// How mixing is applied during a pass.
pub enum EmSource<'a> {
    Off,
    /// Draw fresh plans (train mode only).
    Sample(&'a EmConfig, &'a mut dyn RngCore),
    /// Re-apply recorded realizations, one slot per block, statistics frozen.
    Replay(&'a EmConfig, &'a [Option<EmRealization>]),
}

pub struct Pass<'a> {
    pub mode: Mode,
    pub norm: NormSource,
    pub em: EmSource<'a>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Pass {
            mode: Mode::Eval,
            norm: NormSource::Running,
            em: EmSource::Off,
        }
    }

    pub fn train(em: Option<&'a EmConfig>, rng: &'a mut dyn RngCore) -> Self {
        Pass {
            mode: Mode::Train,
            norm: NormSource::Batch,
            em: match em {
                Some(cfg) => EmSource::Sample(cfg, rng),
                None => EmSource::Off,
            },
        }
    }
}

struct UnitTrace {
    input: FeatureBatch,
    norm: norm::NormCache,
    out: FeatureBatch,
}

struct BlockTrace {
    a: UnitTrace,
    b: UnitTrace,
}

/// Everything the backward pass needs from a forward pass.
pub struct Trace {
    blocks: Vec<BlockTrace>,
    pooled_from: crate::tensor::Shape5,
    hidden: Vec<f64>,
    betas: (f64, f64),
    pub output: ForwardOutput,
    /// Realization applied after each block, if any.
    pub em: Vec<Option<EmRealization>>,
    /// Batch moments of every norm layer (batch-statistics passes only).
    pub norm_moments: Vec<Option<BatchMoments>>,
}

impl Trace {
    /// On/off state of every ReLU in the pass, conv units first, then the
    /// hidden layer. Two passes with equal patterns lie on the same smooth
    /// piece of the loss.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.a.out, &b.b.out])
            .flat_map(|t| t.data().iter())
            .chain(&self.hidden)
            .map(|v| *v > 0.0)
            .collect()
    }
}

pub struct LossAndGrads {
    pub loss: f64,
    pub grads: ParameterSet,
    pub trace: Trace,
}

#[derive(Clone, Copy)]
struct UnitIdx {
    weight: usize,
    bias: usize,
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

const UNIT_LEN: usize = 6;
const UNIT_NAMES: [&str; 2] = ["a", "b"];

#[derive(Clone, Debug)]
pub struct Network {
    cfg: EncoderConfig,
}

impl Network {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Network { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn unit(&self, block: usize, which: usize) -> UnitIdx {
        let base = (2 * block + which) * UNIT_LEN;
        UnitIdx {
            weight: base,
            bias: base + 1,
            scale: base + 2,
            shift: base + 3,
            mean: base + 4,
            var: base + 5,
        }
    }

    fn head(&self) -> usize {
        2 * self.cfg.blocks() * UNIT_LEN
    }

    fn unit_io(&self, block: usize, which: usize) -> (usize, usize) {
        let out = self.cfg.block_channels[block];
        let input = match (block, which) {
            (0, 0) => self.cfg.in_channels,
            (_, 0) => self.cfg.block_channels[block - 1],
            _ => out,
        };
        (input, out)
    }

    /// Parameter tensors in canonical order with the given fill for weights.
    fn layout(&self, mut weights: impl FnMut(usize, usize) -> Vec<f64>) -> ParameterSet {
        let mut tensors = Vec::new();
        for block in 0..self.cfg.blocks() {
            for which in 0..2 {
                let (cin, cout) = self.unit_io(block, which);
                let prefix = format!("block{}.{}", block + 1, UNIT_NAMES[which]);
                tensors.push(Param::new(
                    format!("{prefix}.conv.weight"),
                    ParamKind::Weight,
                    vec![cout, cin, 3, 3, 3],
                    weights(cout * cin * conv::TAPS, cin * conv::TAPS),
                ));
                tensors.push(Param::new(format!("{prefix}.conv.bias"), ParamKind::Bias, vec![cout], vec![0.0; cout]));
                tensors.push(Param::new(format!("{prefix}.norm.scale"), ParamKind::Scale, vec![cout], vec![1.0; cout]));
                tensors.push(Param::new(format!("{prefix}.norm.shift"), ParamKind::Shift, vec![cout], vec![0.0; cout]));
                tensors.push(Param::new(
                    format!("{prefix}.norm.running_mean"),
                    ParamKind::RunningMean,
                    vec![cout],
                    vec![0.0; cout],
                ));
                tensors.push(Param::new(
                    format!("{prefix}.norm.running_var"),
                    ParamKind::RunningVar,
                    vec![cout],
                    vec![1.0; cout],
                ));
            }
        }
        let (e, h, k) = (self.cfg.embedding_dim(), self.cfg.hidden, self.cfg.classes);
        tensors.push(Param::new("head.fc1.weight", ParamKind::Weight, vec![h, e], weights(h * e, e)));
        tensors.push(Param::new("head.fc1.bias", ParamKind::Bias, vec![h], vec![0.0; h]));
        tensors.push(Param::new("head.fc2.weight", ParamKind::Weight, vec![k, h], weights(k * h, h)));
        tensors.push(Param::new("head.fc2.bias", ParamKind::Bias, vec![k], vec![0.0; k]));
        ParameterSet { tensors }
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases, unit norm
    /// scales and running variances.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = rng::seeded(seed);
        self.layout(|n, fan_in| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        })
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.layout(|n, _| vec![0.0; n]);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(params.iter()) {
            if e.name != p.name || e.shape != p.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name, p.shape, e.name, e.shape
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &FeatureBatch) -> Result<()> {
        let s = x.shape();
        if s.channels != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "block1.a.conv expects {} input channels, got {}",
                self.cfg.in_channels, s.channels
            )));
        }
        let mut extents = [s.depth, s.height, s.width];
        for block in 0..self.cfg.blocks() {
            if extents.iter().any(|e| e % 2 != 0 || *e == 0) {
                return Err(Error::Shape(format!(
                    "block{}.a.conv cannot halve spatial extents {:?} of input {s}",
                    block + 1,
                    extents
                )));
            }
            extents.iter_mut().for_each(|e| *e /= 2);
        }
        if x.first_non_finite().is_some() {
            return Err(Error::Numerical { tensor: "input".into() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureBatch, params: &ParameterSet, pass: Pass<'_>) -> Result<Trace> {
        self.check_params(params)?;
        self.check_input(x)?;
        let Pass { mode, norm, mut em } = pass;
        let betas = match &em {
            EmSource::Sample(cfg, _) | EmSource::Replay(cfg, _) => {
                cfg.validate()?;
                if let Some(&l) = cfg.layers.iter().find(|&&l| l > self.cfg.blocks()) {
                    return Err(Error::config(
                        "em.layers",
                        format!("block {l} does not exist in a {}-block encoder", self.cfg.blocks()),
                    ));
                }
                cfg.effective_betas()
            }
            EmSource::Off => (0.0, 0.0),
        };
        if let EmSource::Replay(_, slots) = &em {
            if slots.len() != self.cfg.blocks() {
                return Err(Error::Shape(format!(
                    "{} replay slots for {} blocks",
                    slots.len(),
                    self.cfg.blocks()
                )));
            }
        }
        let t = &params.tensors;
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.cfg.blocks());
        let mut em_used = Vec::with_capacity(self.cfg.blocks());
        let mut norm_moments = Vec::with_capacity(2 * self.cfg.blocks());
        for block in 0..self.cfg.blocks() {
            let mut units = Vec::with_capacity(2);
            for which in 0..2 {
                let idx = self.unit(block, which);
                let (_, cout) = self.unit_io(block, which);
                let stride = if which == 0 { 2 } else { 1 };
                let pre = conv::forward(&h, &t[idx.weight].data, &t[idx.bias].data, cout, stride);
                let running = (norm == NormSource::Running).then(|| (t[idx.mean].data.as_slice(), t[idx.var].data.as_slice()));
                let (mut y, cache, moments) =
                    norm::forward(&pre, &t[idx.scale].data, &t[idx.shift].data, running, self.cfg.norm_eps);
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                norm_moments.push(moments);
                let input = std::mem::replace(&mut h, y.clone());
                units.push(UnitTrace {
                    input,
                    norm: cache,
                    out: y,
                });
            }
            let b = units.pop().expect("two units");
            let a = units.pop().expect("two units");
            blocks.push(BlockTrace { a, b });

            let realization = match (&mut em, mode) {
                (EmSource::Sample(cfg, rng), Mode::Train) if cfg.layers.contains(&(block + 1)) => {
                    let plan = sample_mix_plan(h.shape().batch, cfg, &mut **rng);
                    if plan.active {
                        let own = compute_channel_stats(&h, cfg.eps)?;
                        let mixed = mix_stats(&own, &plan)?;
                        Some(EmRealization { plan, own, mixed })
                    } else {
                        None
                    }
                }
                (EmSource::Replay(_, slots), Mode::Train) => slots[block].clone(),
                _ => None,
            };
            if let Some(r) = &realization {
                let cfg = match &em {
                    EmSource::Sample(cfg, _) | EmSource::Replay(cfg, _) => *cfg,
                    EmSource::Off => unreachable!("realization without a config"),
                };
                h = apply_realization(&h, cfg, r)?;
            }
            em_used.push(realization);
        }

        // global average pooling
        let s = h.shape();
        let (bsz, e, p) = (s.batch, s.channels, s.spatial());
        let embedding: Vec<f64> = (0..bsz)
            .flat_map(|b| (0..e).map(move |c| (b, c)))
            .map(|(b, c)| h.channel(b, c).iter().sum::<f64>() / p as f64)
            .collect();
        let head = self.head();
        let (hd, k) = (self.cfg.hidden, self.cfg.classes);
        let hidden = dense(&embedding, bsz, e, &t[head].data, &t[head + 1].data, hd, true);
        let logits = dense(&hidden, bsz, hd, &t[head + 2].data, &t[head + 3].data, k, false);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { tensor: "logits".into() });
        }
        Ok(Trace {
            blocks,
            pooled_from: s,
            hidden,
            betas,
            output: ForwardOutput {
                batch: bsz,
                classes: k,
                logits,
                embedding_dim: e,
                embedding,
            },
            em: em_used,
            norm_moments,
        })
    }

    /// Reverse pass from `d loss / d logits` to every trainable parameter.
    /// Mixing statistics are constants: only the explicit input of the
    /// normalisation carries gradient through a perturbed block.
    pub fn backward(&self, trace: &Trace, params: &ParameterSet, dlogits: &[f64]) -> Result<ParameterSet> {
        let t = &params.tensors;
        let mut grads = params.zeros_like();
        let out = &trace.output;
        let (bsz, e, hd, k) = (out.batch, out.embedding_dim, self.cfg.hidden, self.cfg.classes);
        let head = self.head();

        let dhidden = dense_backward(dlogits, &trace.hidden, bsz, hd, k, &t[head + 2].data, &mut grads.tensors, head + 2);
        let dhidden: Vec<f64> = dhidden
            .iter()
            .zip(&trace.hidden)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let demb = dense_backward(&dhidden, &out.embedding, bsz, e, hd, &t[head].data, &mut grads.tensors, head);

        let s = trace.pooled_from;
        let p = s.spatial() as f64;
        let mut g = FeatureBatch::zeros(s);
        for b in 0..bsz {
            for c in 0..e {
                g.channel_mut(b, c).fill(demb[b * e + c] / p);
            }
        }

        let (bs, bk) = trace.betas;
        for block in (0..self.cfg.blocks()).rev() {
            let bt = &trace.blocks[block];
            if let Some(r) = &trace.em[block] {
                let sens = local_sensitivity(&bt.b.out, r, bs, bk)?;
                g.data_mut().iter_mut().zip(&sens).for_each(|(d, s)| *d *= s);
            }
            for which in (0..2).rev() {
                let unit = if which == 0 { &bt.a } else { &bt.b };
                let idx = self.unit(block, which);
                for (d, y) in g.data_mut().iter_mut().zip(unit.out.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                let (dpre, dscale, dshift) = norm::backward(&unit.norm, &t[idx.scale].data, &g);
                grads.tensors[idx.scale].data = dscale;
                grads.tensors[idx.shift].data = dshift;
                let stride = if which == 0 { 2 } else { 1 };
                let need_input = !(block == 0 && which == 0);
                let cg = conv::backward(&unit.input, &t[idx.weight].data, &dpre, stride, need_input);
                grads.tensors[idx.weight].data = cg.weight;
                grads.tensors[idx.bias].data = cg.bias;
                g = cg.input;
            }
        }
        Ok(grads)
    }

    pub fn loss_and_grads(
        &self,
        x: &FeatureBatch,
        labels: &[usize],
        class_weights: &[f64],
        params: &ParameterSet,
        pass: Pass<'_>,
    ) -> Result<LossAndGrads> {
        let trace = self.forward(x, params, pass)?;
        let (loss, dlogits) = weighted_cross_entropy_grad(&trace.output.logits, self.cfg.classes, labels, class_weights)?;
        if !loss.is_finite() {
            return Err(Error::Numerical { tensor: "loss".into() });
        }
        let grads = self.backward(&trace, params, &dlogits)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Numerical {
                tensor: format!("grad:{name}"),
            });
        }
        Ok(LossAndGrads { loss, grads, trace })
    }

    /// Exponential moving average of the batch moments recorded in `trace`.
    pub fn update_running_stats(&self, params: &mut ParameterSet, trace: &Trace) {
        let m = self.cfg.norm_momentum;
        for block in 0..self.cfg.blocks() {
            for which in 0..2 {
                let Some(moments) = &trace.norm_moments[2 * block + which] else {
                    continue;
                };
                let idx = self.unit(block, which);
                for (r, v) in params.tensors[idx.mean].data.iter_mut().zip(&moments.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in params.tensors[idx.var].data.iter_mut().zip(&moments.var_unbiased) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }

    /// Activations after block `layer` (1-based) in eval mode.
    pub fn block_features(&self, x: &FeatureBatch, params: &ParameterSet, layer: usize) -> Result<FeatureBatch> {
        if layer == 0 || layer > self.cfg.blocks() {
            return Err(Error::config(
                "eval.stats_layer",
                format!("layer {layer} outside 1..={}", self.cfg.blocks()),
            ));
        }
        let trace = self.forward(x, params, Pass::eval())?;
        Ok(trace.blocks[layer - 1].b.out.clone())
    }
}

fn local_sensitivity(x: &FeatureBatch, r: &EmRealization, beta_skew: f64, beta_kurt: f64) -> Result<Vec<f64>> {
    let mut cfg = EmConfig::for_variant(crate::em::EmVariant::Em2);
    cfg.beta_skew = beta_skew;
    cfg.beta_kurt = beta_kurt;
    em_backward_local(x, &r.own, &r.mixed, &cfg)
}

/// `y[b] = W x[b] + bias`, `W` stored `out × in`.
fn dense(x: &[f64], batch: usize, inp: usize, w: &[f64], bias: &[f64], out: usize, relu: bool) -> Vec<f64> {
    let mut y = Vec::with_capacity(batch * out);
    for b in 0..batch {
        let xb = &x[b * inp..(b + 1) * inp];
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            let v = bias[o] + row.iter().zip(xb).map(|(a, c)| a * c).sum::<f64>();
            y.push(if relu { v.max(0.0) } else { v });
        }
    }
    y
}

/// Accumulates weight/bias gradients into `grads[w_idx]`, `grads[w_idx + 1]`
/// and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    inp: usize,
    out: usize,
    w: &[f64],
    grads: &mut [Param],
    w_idx: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * inp];
    for b in 0..batch {
        let xb = &x[b * inp..(b + 1) * inp];
        for o in 0..out {
            let d = dy[b * out + o];
            grads[w_idx + 1].data[o] += d;
            let gw = &mut grads[w_idx].data[o * inp..(o + 1) * inp];
            for (g, xv) in gw.iter_mut().zip(xb) {
                *g += d * xv;
            }
            for (dxv, wv) in dx[b * inp..(b + 1) * inp].iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *dxv += d * wv;
            }
        }
    }
    dx
}

/// Forward pass with train-mode semantics (batch statistics, sampled mixing)
/// or eval-mode semantics (running statistics, no mixing).
pub fn encoder_forward(
    batch: &FeatureBatch,
    params: &ParameterSet,
    cfg: &EncoderConfig,
    em_cfg: Option<&EmConfig>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput> {
    let net = Network::new(cfg.clone())?;
    let pass = match mode {
        Mode::Train => Pass::train(em_cfg, rng),
        Mode::Eval => Pass::eval(),
    };
    Ok(net.forward(batch, params, pass)?.output)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    batch: &FeatureBatch,
    labels: &[usize],
    class_weights: &[f64],
    params: &ParameterSet,
    cfg: &EncoderConfig,
    em_cfg: Option<&EmConfig>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParameterSet)> {
    let net = Network::new(cfg.clone())?;
    let pass = match mode {
        Mode::Train => Pass::train(em_cfg, rng),
        Mode::Eval => Pass::eval(),
    };
    let out = net.loss_and_grads(batch, labels, class_weights, params, pass)?;
    Ok((out.loss, out.grads))
}

pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    Ok(Network::new(cfg.clone())?.init_params(seed))
}
