//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown or repeated keys
//! are rejected and `seed` is mandatory. [`RunConfig::to_text`] writes every
//! key in canonical order, and parsing that text yields an identical config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{default_benchmark, Benchmark, SOURCE_NAME, TARGET_NAMES};
use crate::em::{EmConfig, EmVariant};
use crate::error::{Error, Result};
use crate::net::EncoderConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub volume_size: usize,
    pub source_per_class: Vec<usize>,
    pub target_per_class: Vec<usize>,
    /// Per-class sample counts used by the moment report.
    pub stats_per_class: Vec<usize>,
    /// Cohorts to use, source first.
    pub cohorts: Vec<String>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            volume_size: 32,
            source_per_class: vec![50, 25, 20],
            target_per_class: vec![30, 30, 30],
            stats_per_class: vec![67, 67, 66],
            cohorts: std::iter::once(SOURCE_NAME).chain(TARGET_NAMES).map(String::from).collect(),
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Class treated as positive in one-vs-all reports.
    pub positive_class: usize,
    /// Block whose activations feed the moment report.
    pub stats_layer: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            positive_class: 2,
            stats_layer: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub run_id: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: PathBuf::from("runs"),
            run_id: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `None` trains the plain encoder.
    pub variant: Option<EmVariant>,
    /// Mixing hyper-parameters; kept even when `variant` is `None`.
    pub em: EmConfig,
    pub net: EncoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

pub const KEYS: &[&str] = &[
    "seed",
    "em.variant",
    "em.alpha",
    "em.p",
    "em.beta_skew",
    "em.beta_kurt",
    "em.eps",
    "em.layers",
    "net.in_channels",
    "net.blocks",
    "net.hidden",
    "net.classes",
    "net.norm_momentum",
    "net.norm_eps",
    "data.volume_size",
    "data.source_per_class",
    "data.target_per_class",
    "data.stats_per_class",
    "data.cohorts",
    "data.cache_dir",
    "train.lr0",
    "train.momentum",
    "train.weight_decay",
    "train.lr_decay",
    "train.epochs",
    "train.physical_batch",
    "train.effective_batch",
    "train.val_fraction",
    "eval.positive_class",
    "eval.stats_layer",
    "io.out_dir",
    "io.run_id",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn variant_name(v: Option<EmVariant>) -> &'static str {
    v.map_or("none", |v| v.as_str())
}

pub fn parse_variant(key: &str, v: &str) -> Result<Option<EmVariant>> {
    if v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| Error::config(key, format!("unknown variant `{v}`")))
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            variant: Some(EmVariant::Em1),
            em: EmConfig::for_variant(EmVariant::Em1),
            net: EncoderConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::config(k, "unknown key"));
            }
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(Error::config(k, "given more than once"));
            }
            pairs.push((k, v));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let seed: u64 = parse_num("seed", get("seed").ok_or_else(|| Error::config("seed", "missing mandatory key"))?)?;
        let mut cfg = RunConfig::with_seed(seed);
        if let Some(v) = get("em.variant") {
            cfg.variant = parse_variant("em.variant", v)?;
            cfg.em = EmConfig::for_variant(cfg.variant.unwrap_or(EmVariant::Em1));
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key, e.g. from a sweep grid.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.train.seed = self.seed;
            }
            "em.variant" => {
                self.variant = parse_variant(key, v)?;
                if let Some(var) = self.variant {
                    self.em.variant = var;
                }
            }
            "em.alpha" => self.em.alpha = parse_num(key, v)?,
            "em.p" => self.em.p = parse_num(key, v)?,
            "em.beta_skew" => self.em.beta_skew = parse_num(key, v)?,
            "em.beta_kurt" => self.em.beta_kurt = parse_num(key, v)?,
            "em.eps" => self.em.eps = parse_num(key, v)?,
            "em.layers" => self.em.layers = parse_list::<usize>(key, v)?.into_iter().collect::<BTreeSet<_>>(),
            "net.in_channels" => self.net.in_channels = parse_num(key, v)?,
            "net.blocks" => self.net.block_channels = parse_list(key, v)?,
            "net.hidden" => self.net.hidden = parse_num(key, v)?,
            "net.classes" => self.net.classes = parse_num(key, v)?,
            "net.norm_momentum" => self.net.norm_momentum = parse_num(key, v)?,
            "net.norm_eps" => self.net.norm_eps = parse_num(key, v)?,
            "data.volume_size" => self.data.volume_size = parse_num(key, v)?,
            "data.source_per_class" => self.data.source_per_class = parse_list(key, v)?,
            "data.target_per_class" => self.data.target_per_class = parse_list(key, v)?,
            "data.stats_per_class" => self.data.stats_per_class = parse_list(key, v)?,
            "data.cohorts" => self.data.cohorts = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "data.cache_dir" => self.data.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.lr0" => self.train.lr0 = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.physical_batch" => self.train.physical_batch = parse_num(key, v)?,
            "train.effective_batch" => self.train.effective_batch = parse_num(key, v)?,
            "train.val_fraction" => self.train.val_fraction = parse_num(key, v)?,
            "eval.positive_class" => self.eval.positive_class = parse_num(key, v)?,
            "eval.stats_layer" => self.eval.stats_layer = parse_num(key, v)?,
            "io.out_dir" => self.io.out_dir = PathBuf::from(v),
            "io.run_id" => self.io.run_id = v.to_string(),
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.net.classes != 3 {
            return Err(Error::config("net.classes", "the synthetic benchmark has exactly 3 classes"));
        }
        if self.net.in_channels != 1 {
            return Err(Error::config("net.in_channels", "synthetic volumes have a single channel"));
        }
        if self.em.layers.iter().any(|&l| l > self.net.blocks()) {
            return Err(Error::config("em.layers", "refers to a block the encoder does not have"));
        }
        if self.data.volume_size == 0 || !self.data.volume_size.is_multiple_of(self.net.spatial_divisor()) {
            return Err(Error::config(
                "data.volume_size",
                format!("must be a positive multiple of {}", self.net.spatial_divisor()),
            ));
        }
        for (key, counts) in [
            ("data.source_per_class", &self.data.source_per_class),
            ("data.target_per_class", &self.data.target_per_class),
            ("data.stats_per_class", &self.data.stats_per_class),
        ] {
            if counts.len() != self.net.classes {
                return Err(Error::config(key, "need one count per class"));
            }
        }
        if self.data.cohorts.len() < 2 {
            return Err(Error::config("data.cohorts", "need the source and at least one target"));
        }
        if self.eval.positive_class >= self.net.classes {
            return Err(Error::config("eval.positive_class", "out of range"));
        }
        if self.eval.stats_layer == 0 || self.eval.stats_layer > self.net.blocks() {
            return Err(Error::config(
                "eval.stats_layer",
                format!("must lie in 1..={}", self.net.blocks()),
            ));
        }
        if self.io.run_id.is_empty() || self.io.run_id.contains(['/', '\\']) {
            return Err(Error::config("io.run_id", "must be a plain file name"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "em.variant" => variant_name(self.variant).to_string(),
            "em.alpha" => self.em.alpha.to_string(),
            "em.p" => self.em.p.to_string(),
            "em.beta_skew" => self.em.beta_skew.to_string(),
            "em.beta_kurt" => self.em.beta_kurt.to_string(),
            "em.eps" => self.em.eps.to_string(),
            "em.layers" => join(&self.em.layers),
            "net.in_channels" => self.net.in_channels.to_string(),
            "net.blocks" => join(&self.net.block_channels),
            "net.hidden" => self.net.hidden.to_string(),
            "net.classes" => self.net.classes.to_string(),
            "net.norm_momentum" => self.net.norm_momentum.to_string(),
            "net.norm_eps" => self.net.norm_eps.to_string(),
            "data.volume_size" => self.data.volume_size.to_string(),
            "data.source_per_class" => join(&self.data.source_per_class),
            "data.target_per_class" => join(&self.data.target_per_class),
            "data.stats_per_class" => join(&self.data.stats_per_class),
            "data.cohorts" => self.data.cohorts.join(","),
            "data.cache_dir" => self
                .data
                .cache_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "train.lr0" => self.train.lr0.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.lr_decay" => self.train.lr_decay.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.physical_batch" => self.train.physical_batch.to_string(),
            "train.effective_batch" => self.train.effective_batch.to_string(),
            "train.val_fraction" => self.train.val_fraction.to_string(),
            "eval.positive_class" => self.eval.positive_class.to_string(),
            "eval.stats_layer" => self.eval.stats_layer.to_string(),
            "io.out_dir" => self.io.out_dir.display().to_string(),
            "io.run_id" => self.io.run_id.clone(),
            _ => return None,
        };
        Some(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Mixing config when a variant is selected.
    pub fn em_config(&self) -> Option<EmConfig> {
        self.variant.map(|v| EmConfig {
            variant: v,
            ..self.em.clone()
        })
    }

    /// Short label such as `em1;alpha=0.7;p=0.9;layers=2` or `baseline`.
    pub fn setting_label(&self) -> String {
        match self.em_config() {
            None => "baseline".into(),
            Some(em) => format!(
                "{};alpha={};p={};layers={}",
                em.variant,
                em.alpha,
                em.p,
                em.layers.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
            ),
        }
    }

    pub fn benchmark(&self) -> Benchmark {
        default_benchmark(
            self.seed,
            self.data.volume_size,
            &self.data.source_per_class,
            &self.data.target_per_class,
        )
    }
}
