//! The four `emix` commands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use emix_core::config::{variant_name, RunConfig};
use emix_core::data::{batch_of, load_or_generate, CohortSpec, Sample, SOURCE_NAME};
use emix_core::eval::{write_report_csv, ReportRow};
use emix_core::moments::{summarize_cohort_moments, write_summary_csv};
use emix_core::moments::{compute_channel_stats, DEFAULT_EPS};
use emix_core::net::{read_checkpoint, write_checkpoint};
use emix_core::net::{Network, Pass};
use emix_core::train::{fit, RunRecord};
use emix_core::{rng, Error, Result};

use crate::grid::Grid;

pub const SWEEP_CSV_HEADER: &str = "cell,variant,alpha,p,layers,cohort,acc,sen,spe,f1,status";

const FEATURE_CHUNK: usize = 8;

fn run_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.unwrap_or(&cfg.io.out_dir).join(&cfg.io.run_id)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Specs of the configured cohorts, source first, with the given per-class counts.
fn cohort_specs(cfg: &RunConfig, counts: impl Fn(&CohortSpec) -> Vec<usize>) -> Result<Vec<CohortSpec>> {
    let bench = cfg.benchmark();
    let mut specs = Vec::with_capacity(cfg.data.cohorts.len());
    for name in &cfg.data.cohorts {
        let spec = bench
            .find(name)
            .ok_or_else(|| Error::config("data.cohorts", format!("unknown cohort `{name}`")))?;
        if specs.iter().any(|s: &CohortSpec| &s.name == name) {
            return Err(Error::config("data.cohorts", format!("cohort `{name}` listed twice")));
        }
        let mut spec = spec.clone();
        spec.n_per_class = counts(&spec);
        specs.push(spec);
    }
    Ok(specs)
}

fn load(cfg: &RunConfig, spec: &CohortSpec) -> Result<Vec<Sample>> {
    load_or_generate(spec, cfg.data.cache_dir.as_deref())
}

/// The source cohort and the targets, at their configured sizes.
fn training_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<(String, Vec<Sample>)>)> {
    let specs = cohort_specs(cfg, |s| {
        if s.name == SOURCE_NAME {
            cfg.data.source_per_class.clone()
        } else {
            cfg.data.target_per_class.clone()
        }
    })?;
    let mut source = None;
    let mut targets = Vec::new();
    for spec in &specs {
        let samples = load(cfg, spec)?;
        if spec.name == SOURCE_NAME {
            source = Some(samples);
        } else {
            targets.push((spec.name.clone(), samples));
        }
    }
    let source = source.ok_or_else(|| Error::config("data.cohorts", format!("must include `{SOURCE_NAME}`")))?;
    Ok((source, targets))
}

/// Trains one configuration into `dir` and returns its record.
fn train_into(cfg: &RunConfig, dir: &Path) -> Result<RunRecord> {
    let (source, targets) = training_data(cfg)?;
    let em = cfg.em_config();
    let out = fit(
        &source,
        &targets,
        &cfg.net,
        em.as_ref(),
        &cfg.train,
        cfg.eval.positive_class,
        &cfg.setting_label(),
    )?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut w = create(&dir.join("record.json"))?;
    out.record.write_json(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("metrics.csv"))?;
    out.record.write_epoch_csv(&mut w)?;
    w.flush()?;
    let rows: Vec<ReportRow> = out
        .record
        .targets
        .iter()
        .map(|t| ReportRow {
            setting: out.record.setting.clone(),
            cohort: t.cohort.clone(),
            acc: t.acc,
            sen: t.sen,
            spe: t.spe,
            f1: t.f1,
        })
        .collect();
    let mut w = create(&dir.join("targets.csv"))?;
    write_report_csv(&mut w, &rows)?;
    w.flush()?;
    let mut w = create(&dir.join("best.ckpt"))?;
    write_checkpoint(&mut w, &cfg.net, &out.best)?;
    w.flush()?;
    Ok(out.record)
}

/// Trains on the source cohort and writes `record.json`, `metrics.csv`,
/// `targets.csv`, `config.txt` and `best.ckpt` into the run directory.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = run_dir(cfg, out);
    train_into(cfg, &dir)?;
    Ok(dir)
}

pub struct SweepSummary {
    pub dir: PathBuf,
    pub cells: usize,
    /// Cells that failed, with their error.
    pub failed: Vec<(usize, Error)>,
}

impl SweepSummary {
    /// The most severe cell failure, if any.
    pub fn worst(&self) -> Option<&Error> {
        self.failed
            .iter()
            .map(|(_, e)| e)
            .find(|e| !e.is_numerical())
            .or_else(|| self.failed.first().map(|(_, e)| e))
    }
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

fn sweep_rows(index: usize, cfg: &RunConfig, outcome: &Result<RunRecord>) -> Vec<String> {
    let prefix = format!(
        "{index},{},{},{},{}",
        variant_name(cfg.variant),
        cfg.em.alpha,
        cfg.em.p,
        cfg.em.layers.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
    );
    let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "nan".to_string() };
    match outcome {
        Ok(record) => record
            .targets
            .iter()
            .map(|t| format!("{prefix},{},{},{},{},{},ok", t.cohort, f(t.acc), f(t.sen), f(t.spe), f(t.f1)))
            .collect(),
        Err(e) => {
            let status = csv_safe(&format!("failed: {e}"));
            let targets: Vec<&String> = cfg.data.cohorts.iter().filter(|c| *c != SOURCE_NAME).collect();
            targets
                .iter()
                .map(|c| format!("{prefix},{c},nan,nan,nan,nan,{status}"))
                .collect()
        }
    }
}

/// Worker count from `EM_THREADS`, default 1.
pub fn sweep_threads() -> Result<usize> {
    match std::env::var("EM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config("EM_THREADS", format!("expected a positive integer, got `{v}`"))),
        },
    }
}

/// Runs every grid cell as a full training run under `cell-NNN/` and
/// appends its target rows to `sweep.csv` in cell order as cells finish.
pub fn cmd_sweep(cfg: &RunConfig, grid: &Grid, out: Option<&Path>, threads: usize) -> Result<SweepSummary> {
    let configs = grid.configs(cfg)?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)?;
    let mut csv = create(&dir.join("sweep.csv"))?;
    writeln!(csv, "{SWEEP_CSV_HEADER}")?;
    csv.flush()?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    let mut failed = Vec::new();
    let mut io_result: Result<()> = Ok(());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, configs.len().max(1)) {
            let tx = tx.clone();
            let (next, configs, dir) = (&next, &configs, &dir);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = configs.get(i) else { break };
                let outcome = train_into(cell, &dir.join(format!("cell-{i:03}")));
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut written = 0usize;
        for (i, outcome) in rx {
            pending.insert(i, outcome);
            while let Some(outcome) = pending.remove(&written) {
                if io_result.is_ok() {
                    io_result = sweep_rows(written, &configs[written], &outcome)
                        .iter()
                        .try_for_each(|row| writeln!(csv, "{row}"))
                        .and_then(|_| csv.flush())
                        .map_err(Error::from);
                }
                if let Err(e) = outcome {
                    failed.push((written, e));
                }
                written += 1;
            }
        }
    });
    io_result?;
    Ok(SweepSummary {
        dir,
        cells: configs.len(),
        failed,
    })
}

fn read_params(path: &Path) -> Result<(emix_core::net::EncoderConfig, emix_core::net::ParameterSet)> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}

/// Per-cohort moment summary of the activations after block
/// `eval.stats_layer`, written to `stats.csv`. Uses the checkpoint when
/// given, else freshly initialised weights.
pub fn cmd_stats_report(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let (net_cfg, params) = match ckpt {
        Some(path) => read_params(path)?,
        None => {
            let net = Network::new(cfg.net.clone())?;
            let params = net.init_params(rng::derive_str(cfg.seed, "init"));
            (cfg.net.clone(), params)
        }
    };
    let net = Network::new(net_cfg)?;
    let specs = cohort_specs(cfg, |_| cfg.data.stats_per_class.clone())?;
    let mut entries = Vec::new();
    for spec in &specs {
        let samples = load(cfg, spec)?;
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(FEATURE_CHUNK) {
            let x = batch_of(chunk)?;
            let features = net.block_features(&x, &params, cfg.eval.stats_layer)?;
            entries.push((spec.name.clone(), compute_channel_stats(&features, DEFAULT_EPS)?));
        }
    }
    let rows = summarize_cohort_moments(&entries)?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)?;
    let mut w = create(&dir.join("stats.csv"))?;
    write_summary_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(dir)
}

/// Writes `embeddings.csv`: one row per sample of every configured cohort
/// with id, cohort, label, predicted class and the pooled embedding.
pub fn cmd_export_embeddings(cfg: &RunConfig, ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let (net_cfg, params) = read_params(ckpt)?;
    let net = Network::new(net_cfg)?;
    let (source, targets) = training_data(cfg)?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)?;
    let mut w = create(&dir.join("embeddings.csv"))?;
    let dim = net.config().embedding_dim();
    let header: Vec<String> = ["sample_id", "cohort", "label", "pred"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|i| format!("e{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let cohorts = std::iter::once(&source).chain(targets.iter().map(|(_, s)| s));
    for samples in cohorts {
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(FEATURE_CHUNK) {
            let x = batch_of(chunk)?;
            let output = net.forward(&x, &params, Pass::eval())?.output;
            let preds = output.predictions();
            for (b, s) in chunk.iter().enumerate() {
                let values: Vec<String> = output.embedding_of(b).iter().map(|v| format!("{v:.6}")).collect();
                writeln!(w, "{},{},{},{},{}", s.id, s.cohort, s.label, preds[b], values.join(","))?;
            }
        }
    }
    w.flush()?;
    Ok(dir)
}
