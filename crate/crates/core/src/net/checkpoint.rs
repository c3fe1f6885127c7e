//! `EMCKPT v1`: a text manifest followed by one little-endian f32 blob.
//!
//! ```text
//! EMCKPT v1
//! net in_channels=1 blocks=8,16,32,64 hidden=32 classes=3 norm_momentum=0.1 norm_eps=0.00001
//! tensors 52
//! block1.a.conv.weight 8x1x3x3x3 f32 0
//! ...
//! blob <bytes>
//! <raw bytes>
//! ```

use std::io::{BufRead, Write};

use super::{EncoderConfig, Network, Param, ParamKind, ParameterSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "EMCKPT v1";

fn kind_of(name: &str) -> Result<ParamKind> {
    let kind = match name.rsplit('.').next() {
        Some("weight") => ParamKind::Weight,
        Some("bias") => ParamKind::Bias,
        Some("scale") => ParamKind::Scale,
        Some("shift") => ParamKind::Shift,
        Some("running_mean") => ParamKind::RunningMean,
        Some("running_var") => ParamKind::RunningVar,
        _ => return Err(Error::Checkpoint(format!("unrecognised tensor name `{name}`"))),
    };
    Ok(kind)
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &EncoderConfig, params: &ParameterSet) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let blocks: Vec<String> = cfg.block_channels.iter().map(usize::to_string).collect();
    writeln!(
        w,
        "net in_channels={} blocks={} hidden={} classes={} norm_momentum={} norm_eps={}",
        cfg.in_channels,
        blocks.join(","),
        cfg.hidden,
        cfg.classes,
        cfg.norm_momentum,
        cfg.norm_eps
    )?;
    writeln!(w, "tensors {}", params.len())?;
    let mut offset = 0usize;
    for p in params.iter() {
        let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
        writeln!(w, "{} {} f32 {}", p.name, shape.join("x"), offset)?;
        offset += 4 * p.len();
    }
    writeln!(w, "blob {offset}")?;
    let mut bytes = Vec::with_capacity(offset);
    for p in params.iter() {
        for &v in &p.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(Error::Checkpoint(format!("truncated manifest: missing {what}")));
    }
    Ok(s.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_net(line: &str) -> Result<EncoderConfig> {
    let bad = |m: &str| Error::Checkpoint(format!("malformed net line ({m}): `{line}`"));
    let rest = line.strip_prefix("net ").ok_or_else(|| bad("prefix"))?;
    let mut cfg = EncoderConfig::default();
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(k));
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad(k));
        match k {
            "in_channels" => cfg.in_channels = num(v)?,
            "blocks" => cfg.block_channels = v.split(',').map(num).collect::<Result<_>>()?,
            "hidden" => cfg.hidden = num(v)?,
            "classes" => cfg.classes = num(v)?,
            "norm_momentum" => cfg.norm_momentum = real(v)?,
            "norm_eps" => cfg.norm_eps = real(v)?,
            _ => return Err(bad(k)),
        }
    }
    Ok(cfg)
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<(EncoderConfig, ParameterSet)> {
    let magic = line(&mut r, "header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad header `{magic}`, expected `{CHECKPOINT_MAGIC}`")));
    }
    let cfg = parse_net(&line(&mut r, "net line")?)?;
    let count_line = line(&mut r, "tensor count")?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("malformed tensor count `{count_line}`")))?;
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for i in 0..count {
        let l = line(&mut r, &format!("manifest entry {i}"))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        let [name, shape, dtype, offset] = fields[..] else {
            return Err(Error::Checkpoint(format!("manifest entry {i} malformed: `{l}`")));
        };
        if dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype `{dtype}`")));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("tensor `{name}` has bad shape `{shape}`"))))
            .collect::<Result<_>>()?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Checkpoint(format!("tensor `{name}` has bad offset `{offset}`")))?;
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` at offset {offset}, expected {expected_offset}"
            )));
        }
        expected_offset += 4 * shape.iter().product::<usize>();
        entries.push((name.to_string(), shape));
    }
    let blob_line = line(&mut r, "blob line")?;
    let blob_len: usize = blob_line
        .strip_prefix("blob ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("malformed blob line `{blob_line}`")))?;
    if blob_len != expected_offset {
        return Err(Error::Checkpoint(format!(
            "blob declares {blob_len} bytes but manifest needs {expected_offset}"
        )));
    }
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)
        .map_err(|_| Error::Checkpoint(format!("blob truncated: expected {blob_len} bytes")))?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after blob".into()));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in entries {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
        }
        tensors.push(Param::new(name.clone(), kind_of(&name)?, shape, data));
    }
    let params = ParameterSet { tensors };
    Network::new(cfg.clone())
        .and_then(|net| net.check_params(&params))
        .map_err(|e| Error::Checkpoint(format!("manifest inconsistent with network: {e}")))?;
    Ok((cfg, params))
}
