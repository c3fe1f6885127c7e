//! Sweep grids such as `alpha=0.1,0.3;p=0.5,0.9` or `layers;variant`.
//!
//! Axes are separated by `;` and values by `,`. A layer set joins block
//! indices with `+`. An axis given without values takes its default list.

use emix_core::config::RunConfig;
use emix_core::{Error, Result};

pub const DEFAULT_ALPHAS: [&str; 4] = ["0.1", "0.3", "0.5", "0.7"];
pub const DEFAULT_PS: [&str; 3] = ["0.5", "0.7", "0.9"];
pub const DEFAULT_LAYERS: [&str; 6] = ["1", "2", "3", "1+2", "2+3", "1+3"];
pub const DEFAULT_VARIANTS: [&str; 2] = ["em1", "em2"];

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    /// Full config key, e.g. `em.alpha`.
    pub key: String,
    /// Values in config syntax.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

fn resolve_key(name: &str) -> String {
    match name {
        "alpha" => "em.alpha".into(),
        "p" => "em.p".into(),
        "layers" => "em.layers".into(),
        "variant" => "em.variant".into(),
        "beta_skew" => "em.beta_skew".into(),
        "beta_kurt" => "em.beta_kurt".into(),
        other => other.into(),
    }
}

fn defaults(key: &str) -> Option<&'static [&'static str]> {
    match key {
        "em.alpha" => Some(&DEFAULT_ALPHAS),
        "em.p" => Some(&DEFAULT_PS),
        "em.layers" => Some(&DEFAULT_LAYERS),
        "em.variant" => Some(&DEFAULT_VARIANTS),
        _ => None,
    }
}

pub fn parse_grid(spec: &str) -> Result<Grid> {
    let mut axes: Vec<Axis> = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, list) = match part.split_once('=') {
            Some((n, l)) => (n.trim(), l.trim()),
            None => (part, ""),
        };
        let key = resolve_key(name);
        if key == "seed" || key.starts_with("io.") || key.starts_with("data.") {
            return Err(Error::config("grid", format!("`{name}` cannot be swept")));
        }
        if emix_core::config::KEYS.iter().all(|k| *k != key) {
            return Err(Error::config("grid", format!("unknown axis `{name}`")));
        }
        if axes.iter().any(|a| a.key == key) {
            return Err(Error::config("grid", format!("axis `{name}` given more than once")));
        }
        let values: Vec<String> = if list.is_empty() {
            defaults(&key)
                .ok_or_else(|| Error::config("grid", format!("axis `{name}` needs values")))?
                .iter()
                .map(|v| v.to_string())
                .collect()
        } else {
            list.split(',').map(|v| v.trim().to_string()).collect()
        };
        if values.iter().any(String::is_empty) {
            return Err(Error::config("grid", format!("empty value on axis `{name}`")));
        }
        let values = if key == "em.layers" {
            values.into_iter().map(|v| v.replace('+', ",")).collect()
        } else {
            values
        };
        axes.push(Axis { key, values });
    }
    if axes.is_empty() {
        return Err(Error::config("grid", "grid is empty"));
    }
    Ok(Grid { axes })
}

impl Grid {
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key/value overrides of each cell; the first axis varies slowest.
    pub fn cells(&self) -> Vec<Vec<(&str, &str)>> {
        let mut cells: Vec<Vec<(&str, &str)>> = vec![vec![]];
        for axis in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((axis.key.as_str(), v.as_str()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    /// Configs of every cell, validated.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        self.cells()
            .into_iter()
            .map(|overrides| {
                let mut cfg = base.clone();
                for (k, v) in overrides {
                    cfg.set(k, v)?;
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}
