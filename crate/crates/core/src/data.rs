//! Synthetic labelled volumes grouped into cohorts.
//!
//! Every sample is a background of zeros with one centred sphere (jittered
//! by up to `jitter` voxels per axis) whose radius encodes the class. A
//! cohort-level domain transform then applies, in order: gain, a quadratic
//! bias field, additive noise from a chosen family, normalisation onto
//! `[0, 1]` and a power-law intensity warp.
//!
//! Normalisation maps `[min(0, lo), max(1, hi)]` onto `[0, 1]`, so volumes
//! already inside the unit interval are left untouched and the gain stays
//! visible.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{compute_channel_stats, ChannelStats};
use crate::rng;
use crate::tensor::{FeatureBatch, Shape5};

pub const CACHE_MAGIC: &str = "EMVOL v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignal {
    /// Sphere radius in voxels.
    pub radius: f64,
    /// Foreground intensity before the domain transform.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian { sigma: f64 },
    /// `scale * (exp(sigma_log * z) - exp(sigma_log^2 / 2))`: zero mean, right-skewed.
    Lognormal { scale: f64, sigma_log: f64 },
    StudentT { nu: f64, sigma: f64 },
}

impl NoiseFamily {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseFamily::Gaussian { sigma } => sigma >= 0.0,
            NoiseFamily::Lognormal { scale, sigma_log } => scale >= 0.0 && sigma_log > 0.0,
            NoiseFamily::StudentT { nu, sigma } => nu > 4.0 && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid noise parameters {self:?}")))
        }
    }

    fn sampler(&self) -> Box<dyn Fn(&mut rng::Rng) -> f64> {
        match *self {
            NoiseFamily::Gaussian { sigma } => {
                let d = Normal::new(0.0, 1.0).expect("unit normal");
                Box::new(move |r| sigma * d.sample(r))
            }
            NoiseFamily::Lognormal { scale, sigma_log } => {
                let d = LogNormal::new(0.0, sigma_log).expect("validated");
                let mean = (0.5 * sigma_log * sigma_log).exp();
                Box::new(move |r| scale * (d.sample(r) - mean))
            }
            NoiseFamily::StudentT { nu, sigma } => {
                let d = StudentT::new(nu).expect("validated");
                Box::new(move |r| sigma * d.sample(r))
            }
        }
    }
}

/// Quadratic polynomial in normalised coordinates `u, v, w ∈ [-1, 1]`:
/// `c0 + c1 u + c2 v + c3 w + c4 u² + c5 v² + c6 w² + c7 uv + c8 uw + c9 vw`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub coeffs: [f64; 10],
}

impl BiasField {
    pub fn flat() -> Self {
        BiasField::default()
    }

    pub fn at(&self, u: f64, v: f64, w: f64) -> f64 {
        let c = &self.coeffs;
        c[0] + c[1] * u + c[2] * v + c[3] * w + c[4] * u * u + c[5] * v * v + c[6] * w * w + c[7] * u * v + c[8] * u * w + c[9] * v * w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub gain: f64,
    pub bias: BiasField,
    pub noise: NoiseFamily,
    /// `out = in^warp` on normalised intensities.
    pub warp: f64,
}

impl DomainTransform {
    pub fn identity() -> Self {
        DomainTransform {
            gain: 1.0,
            bias: BiasField::flat(),
            noise: NoiseFamily::Gaussian { sigma: 0.0 },
            warp: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub n_per_class: Vec<usize>,
    pub volume_size: usize,
    pub classes: Vec<ClassSignal>,
    pub transform: DomainTransform,
    /// Maximum centre displacement per axis, in voxels.
    pub jitter: f64,
    pub seed: u64,
}

impl CohortSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> usize {
        self.n_per_class.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("cohort `{}`: {m}", self.name)));
        if self.name.is_empty() || self.name.contains([',', ' ', '\n']) {
            return bad("name must be non-empty without commas or whitespace".into());
        }
        if self.classes.len() < 2 || self.n_per_class.len() != self.classes.len() {
            return bad("need one count per class and at least 2 classes".into());
        }
        if self.classes.windows(2).any(|w| !(w[0].radius < w[1].radius)) {
            return bad("class radii must be strictly increasing".into());
        }
        if self.volume_size < 2 {
            return bad("volume size must be at least 2".into());
        }
        let t = &self.transform;
        if !(t.gain > 0.0) || !(t.warp > 0.0) {
            return bad("gain and warp must be positive".into());
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be non-negative".into());
        }
        t.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cohort: String,
    pub label: usize,
    pub size: usize,
    /// `size³` intensities in `[0, 1]`, depth-major.
    pub volume: Vec<f32>,
}

impl Sample {
    pub fn shape(&self) -> Shape5 {
        Shape5::cube(1, 1, self.size)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.volume.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Batch of the given samples in order, one input channel.
pub fn batch_of(samples: &[&Sample]) -> Result<FeatureBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let size = first.size;
    let mut data = Vec::with_capacity(samples.len() * size * size * size);
    for s in samples {
        if s.size != size {
            return Err(Error::Shape(format!("sample `{}` has size {}, expected {size}", s.id, s.size)));
        }
        data.extend(s.volume.iter().map(|&v| f64::from(v)));
    }
    FeatureBatch::new(Shape5::cube(samples.len(), 1, size), data)
}

pub fn generate_sample(class: usize, spec: &CohortSpec, rng: &mut rng::Rng) -> Result<Vec<f32>> {
    let signal = spec
        .classes
        .get(class)
        .ok_or(Error::Label {
            label: class,
            classes: spec.num_classes(),
        })?;
    let n = spec.volume_size;
    let mid = (n as f64 - 1.0) / 2.0;
    let mut centre = [mid; 3];
    if spec.jitter > 0.0 {
        for c in &mut centre {
            *c += rng.random_range(-spec.jitter..=spec.jitter);
        }
    }
    let t = &spec.transform;
    let noise = t.noise.sampler();
    let half = (n as f64 - 1.0).max(1.0) / 2.0;
    let mut raw = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = ((z as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2) + (x as f64 - centre[2]).powi(2)).sqrt();
                // partial-volume edge one voxel wide
                let inside = (signal.radius + 0.5 - d).clamp(0.0, 1.0);
                let (u, v, w) = (z as f64 / half - 1.0, y as f64 / half - 1.0, x as f64 / half - 1.0);
                raw.push(t.gain * signal.contrast * inside + t.bias.at(u, v, w) + noise(rng));
            }
        }
    }
    let lo = raw.iter().copied().fold(0.0, f64::min);
    let hi = raw.iter().copied().fold(1.0, f64::max);
    let span = hi - lo;
    Ok(raw
        .into_iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0).powf(t.warp)).clamp(0.0, 1.0) as f32)
        .collect())
}

/// `Σ n_per_class` samples, class-stratified (all of class 0 first). Sample
/// `i` draws from its own stream of the cohort seed, so any subset can be
/// generated independently and agrees with a full serial run.
pub fn make_cohort(spec: &CohortSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total());
    let mut index = 0usize;
    for (label, &count) in spec.n_per_class.iter().enumerate() {
        for _ in 0..count {
            let mut r = rng::stream(spec.seed, index as u64);
            out.push(Sample {
                id: format!("{}-{index:04}", spec.name),
                cohort: spec.name.clone(),
                label,
                size: spec.volume_size,
                volume: generate_sample(label, spec, &mut r)?,
            });
            index += 1;
        }
    }
    Ok(out)
}

/// Intensity moments of each volume, one single-channel entry per sample.
pub fn volume_moments(samples: &[Sample], eps: f64) -> Result<Vec<(String, ChannelStats)>> {
    samples
        .iter()
        .map(|s| {
            let x = FeatureBatch::new(s.shape(), s.to_f64())?;
            Ok((s.cohort.clone(), compute_channel_stats(&x, eps)?))
        })
        .collect()
}

/// Foreground voxel count after an iterative two-class (isodata) threshold.
pub fn sphere_volume_feature(sample: &Sample) -> f64 {
    let v = &sample.volume;
    let mut t = v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
    for _ in 0..50 {
        let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0usize, 0.0, 0usize);
        for &x in v {
            let x = f64::from(x);
            if x > t {
                hi += x;
                nhi += 1;
            } else {
                lo += x;
                nlo += 1;
            }
        }
        if nlo == 0 || nhi == 0 {
            break;
        }
        let next = 0.5 * (lo / nlo as f64 + hi / nhi as f64);
        if (next - t).abs() < 1e-9 {
            break;
        }
        t = next;
    }
    v.iter().filter(|&&x| f64::from(x) > t).count() as f64
}

/// One source cohort and the shifted targets evaluated after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub source: CohortSpec,
    pub targets: Vec<CohortSpec>,
}

impl Benchmark {
    pub fn cohorts(&self) -> impl Iterator<Item = &CohortSpec> {
        std::iter::once(&self.source).chain(&self.targets)
    }

    pub fn find(&self, name: &str) -> Option<&CohortSpec> {
        self.cohorts().find(|c| c.name == name)
    }
}

pub const SOURCE_NAME: &str = "src";
pub const TARGET_NAMES: [&str; 3] = ["tgt_lognormal", "tgt_student", "tgt_warp"];

/// Class signals for a volume of edge `size`: radii 5/7/9 voxels at 32³,
/// scaled linearly.
pub fn default_classes(size: usize) -> Vec<ClassSignal> {
    let s = size as f64 / 32.0;
    [5.0, 7.0, 9.0]
        .iter()
        .map(|r| ClassSignal {
            radius: r * s,
            contrast: 0.7,
        })
        .collect()
}

/// Default suite: a mildly noisy Gaussian source and three targets shifted
/// by gain, bias field, noise family and intensity warp.
pub fn default_benchmark(seed: u64, size: usize, source_per_class: &[usize], target_per_class: &[usize]) -> Benchmark {
    let classes = default_classes(size);
    let jitter = 2.0 * size as f64 / 32.0;
    let cohort = |name: &str, counts: &[usize], transform: DomainTransform| CohortSpec {
        name: name.to_string(),
        n_per_class: counts.to_vec(),
        volume_size: size,
        classes: classes.clone(),
        transform,
        jitter,
        seed: rng::derive_str(seed, name),
    };
    let bias = |c: &[(usize, f64)]| {
        let mut b = BiasField::flat();
        for &(i, v) in c {
            b.coeffs[i] = v;
        }
        b
    };
    let source = cohort(
        SOURCE_NAME,
        source_per_class,
        DomainTransform {
            gain: 1.0,
            bias: bias(&[(0, 0.05)]),
            noise: NoiseFamily::Gaussian { sigma: 0.05 },
            warp: 1.0,
        },
    );
    let targets = vec![
        cohort(
            TARGET_NAMES[0],
            target_per_class,
            DomainTransform {
                gain: 0.75,
                bias: bias(&[(0, 0.1), (1, 0.08), (5, -0.05)]),
                noise: NoiseFamily::Lognormal {
                    scale: 0.08,
                    sigma_log: 0.8,
                },
                warp: 1.0,
            },
        ),
        cohort(
            TARGET_NAMES[1],
            target_per_class,
            DomainTransform {
                gain: 1.2,
                bias: bias(&[(0, 0.02), (3, -0.06), (7, 0.05)]),
                noise: NoiseFamily::StudentT { nu: 5.0, sigma: 0.06 },
                warp: 1.0,
            },
        ),
        cohort(
            TARGET_NAMES[2],
            target_per_class,
            DomainTransform {
                gain: 0.9,
                bias: bias(&[(0, 0.15), (4, 0.06), (6, 0.06)]),
                noise: NoiseFamily::Gaussian { sigma: 0.07 },
                warp: 2.5,
            },
        ),
    ];
    Benchmark { source, targets }
}

pub fn write_cohort_cache<W: Write>(mut w: W, spec: &CohortSpec, samples: &[Sample]) -> Result<()> {
    writeln!(w, "{CACHE_MAGIC}")?;
    writeln!(w, "spec {}", serde_json::to_string(spec)?)?;
    writeln!(w, "samples {} size {}", samples.len(), spec.volume_size)?;
    for s in samples {
        writeln!(w, "{} {}", s.id, s.label)?;
    }
    let bytes = samples.len() * spec.volume_size.pow(3) * 4;
    writeln!(w, "blob {bytes}")?;
    let mut buf = Vec::with_capacity(bytes);
    for s in samples {
        for v in &s.volume {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a cache file; returns the echoed spec and the samples.
pub fn read_cohort_cache<R: BufRead>(mut r: R) -> Result<(CohortSpec, Vec<Sample>)> {
    let mut next = |what: &str| -> Result<String> {
        let mut s = String::new();
        if r.read_line(&mut s)? == 0 {
            return Err(Error::Cache(format!("truncated before {what}")));
        }
        Ok(s.trim_end_matches(['\n', '\r']).to_string())
    };
    let magic = next("header")?;
    if magic != CACHE_MAGIC {
        return Err(Error::Cache(format!("bad header `{magic}`")));
    }
    let spec_line = next("spec")?;
    let spec: CohortSpec = serde_json::from_str(
        spec_line
            .strip_prefix("spec ")
            .ok_or_else(|| Error::Cache("missing spec echo".into()))?,
    )?;
    let counts = next("sample count")?;
    let parts: Vec<&str> = counts.split_whitespace().collect();
    let (n, size) = match parts[..] {
        ["samples", n, "size", s] => (
            n.parse::<usize>().map_err(|_| Error::Cache("bad sample count".into()))?,
            s.parse::<usize>().map_err(|_| Error::Cache("bad size".into()))?,
        ),
        _ => return Err(Error::Cache(format!("malformed count line `{counts}`"))),
    };
    if size != spec.volume_size {
        return Err(Error::Cache("size disagrees with spec echo".into()));
    }
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let l = next("sample metadata")?;
        let (id, label) = l
            .split_once(' ')
            .ok_or_else(|| Error::Cache(format!("malformed sample line {i}")))?;
        let label: usize = label.parse().map_err(|_| Error::Cache(format!("bad label on line {i}")))?;
        meta.push((id.to_string(), label));
    }
    let blob = next("blob")?;
    let per = size * size * size;
    if blob != format!("blob {}", n * per * 4) {
        return Err(Error::Cache(format!("unexpected blob line `{blob}`")));
    }
    let mut bytes = vec![0u8; n * per * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Cache("blob truncated".into()))?;
    let samples = meta
        .into_iter()
        .zip(bytes.chunks_exact(per * 4))
        .map(|((id, label), chunk)| Sample {
            id,
            cohort: spec.name.clone(),
            label,
            size,
            volume: chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
        .collect();
    Ok((spec, samples))
}

/// Loads `dir/<name>.emvol` when it echoes `spec`, otherwise generates the
/// cohort and (re)writes the cache.
pub fn load_or_generate(spec: &CohortSpec, cache_dir: Option<&std::path::Path>) -> Result<Vec<Sample>> {
    let Some(dir) = cache_dir else {
        return make_cohort(spec);
    };
    let path = dir.join(format!("{}.emvol", spec.name));
    if let Ok(file) = std::fs::File::open(&path) {
        if let Ok((cached, samples)) = read_cohort_cache(std::io::BufReader::new(file)) {
            if &cached == spec {
                return Ok(samples);
            }
        }
    }
    let samples = make_cohort(spec)?;
    std::fs::create_dir_all(dir)?;
    // Concurrent writers each finish a private file, then rename over the target.
    static NEXT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let tmp = dir.join(format!(".{}.{}.{n}.tmp", spec.name, std::process::id()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    write_cohort_cache(&mut w, spec, &samples)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, &path)?;
    Ok(samples)
}
