//! File formats.
//!
//! Dataset binary (`.mgld`), all integers and floats little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `MGL1` |
//! | 4 | 2 | version (1) |
//! | 6 | 1 | dim (1 or 2) |
//! | 7 | 4 | grid points per axis `n` |
//! | 11 | 4 | sample count `N` |
//! | 15 | `8·N·L` | inputs, `L = n^dim` values each |
//! | … | `8·N·L` | targets |
//!
//! A JSON sidecar (`<file>.json`) carries the manifest and a creation time.
//! Checkpoints (`.mglc`) are one JSON header line followed by the flat
//! parameter vector as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mgl_core::datagen::{Dataset, Manifest};
use mgl_core::hilbert::{Field1D, Field2D, Grid1D, Grid2D};
use mgl_core::metrics::{EvalReport, MeanStd, METRIC_COLUMNS};
use mgl_core::model::{Model, ModelSpec};
use mgl_core::operators::Element;
use mgl_core::train::RunHistory;
use serde::{Deserialize, Serialize};

pub const DATASET_MAGIC: &[u8; 4] = b"MGL1";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{section} at byte {offset}: {message}")]
    Corrupt {
        section: &'static str,
        offset: usize,
        message: String,
    },
    #[error("cannot store {0}: only 1D and 2D fields go into dataset files")]
    Unsupported(&'static str),
}

fn corrupt(section: &'static str, offset: usize, message: impl Into<String>) -> FormatError {
    FormatError::Corrupt {
        section,
        offset,
        message: message.into(),
    }
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>, FormatError> {
    let dim = data.dim();
    let n = data.grid_n();
    let len = if dim == 1 { n } else { n * n };
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * data.len() * len);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(dim);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for e in data.inputs.iter().chain(&data.targets) {
        if matches!(e, Element::Scalar(_)) {
            return Err(FormatError::Unsupported("scalar samples"));
        }
        for v in e.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Raw contents of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub dim: u8,
    pub grid_n: usize,
    pub inputs: Vec<Element>,
    pub targets: Vec<Element>,
}

pub fn decode_dataset(bytes: &[u8]) -> Result<RawDataset, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("header", bytes.len(), format!("file ends after {} bytes", bytes.len())));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(corrupt("header", 0, "bad magic, expected MGL1"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(corrupt("header", 4, format!("unsupported version {version}")));
    }
    let dim = bytes[6];
    if dim != 1 && dim != 2 {
        return Err(corrupt("header", 6, format!("dim must be 1 or 2, got {dim}")));
    }
    let n = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    if Grid1D::new(n).is_err() {
        return Err(corrupt("header", 7, format!("invalid grid size {n}")));
    }
    let len = if dim == 1 { n } else { n * n };
    let body = 8 * len * count;
    if bytes.len() != HEADER_LEN + 2 * body {
        let section = if bytes.len() < HEADER_LEN + body { "inputs" } else { "targets" };
        return Err(corrupt(
            section,
            bytes.len(),
            format!("expected {} bytes in total for {count} samples", HEADER_LEN + 2 * body),
        ));
    }
    let read = |section: &'static str, start: usize| -> Result<Vec<Element>, FormatError> {
        (0..count)
            .map(|i| {
                let off = start + 8 * len * i;
                let values: Vec<f64> = bytes[off..off + 8 * len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let field = if dim == 1 {
                    Field1D::new(Grid1D::new(n).unwrap(), values).map(Element::Field1)
                } else {
                    Field2D::new(Grid2D::new(n).unwrap(), values).map(Element::Field2)
                };
                field.map_err(|e| corrupt(section, off, e.to_string()))
            })
            .collect()
    };
    Ok(RawDataset {
        dim,
        grid_n: n,
        inputs: read("inputs", HEADER_LEN)?,
        targets: read("targets", HEADER_LEN + body)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub manifest: Manifest,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub created_unix: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` and its manifest sidecar.
pub fn write_dataset(path: &Path, data: &Dataset) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, encode_dataset(data)?)?;
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let side = ManifestFile {
        manifest: data.manifest.clone(),
        created_unix,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    use anyhow::Context;
    let bytes = fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let raw = decode_dataset(&bytes).with_context(|| format!("dataset {}", path.display()))?;
    let side_path = sidecar_path(path);
    let side: ManifestFile = serde_json::from_str(
        &fs::read_to_string(&side_path).with_context(|| format!("reading manifest {}", side_path.display()))?,
    )
    .with_context(|| format!("parsing manifest {}", side_path.display()))?;
    let m = &side.manifest;
    if m.config.dim != raw.dim || m.config.grid_n != raw.grid_n || m.count != raw.inputs.len() {
        anyhow::bail!(
            "manifest {} (dim {}, grid {}, count {}) does not match the data file (dim {}, grid {}, count {})",
            side_path.display(),
            m.config.dim,
            m.config.grid_n,
            m.count,
            raw.dim,
            raw.grid_n,
            raw.inputs.len()
        );
    }
    Ok(Dataset::new(raw.inputs, raw.targets, side.manifest)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    spec: ModelSpec,
    param_count: usize,
}

const CHECKPOINT_FORMAT: &str = "mgl-checkpoint";

pub fn encode_checkpoint(model: &Model) -> anyhow::Result<Vec<u8>> {
    let params = model.params();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        spec: model.spec().clone(),
        param_count: params.len(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> anyhow::Result<Model> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("checkpoint header", 0, "missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt("checkpoint header", 0, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(corrupt("checkpoint header", 0, format!("unknown format {} v{}", header.format, header.version)).into());
    }
    let body = &bytes[nl + 1..];
    if body.len() != 8 * header.param_count {
        return Err(corrupt(
            "checkpoint parameters",
            nl + 1,
            format!("expected {} bytes, found {}", 8 * header.param_count, body.len()),
        )
        .into());
    }
    let params: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Model::from_params(header.spec, &params)?)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<Model> {
    use anyhow::Context;
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("checkpoint {}", path.display()))
}

pub fn history_csv(h: &RunHistory) -> String {
    let mut s = String::from("epoch,loss,wall_ms\n");
    for e in &h.epochs {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.wall_ms));
    }
    s
}

/// `label` columns followed by the nine metrics, one row per report.
pub fn metrics_csv(labels: &[&str], rows: &[(Vec<String>, EvalReport)]) -> String {
    let mut s = labels.join(",");
    for c in METRIC_COLUMNS {
        if !s.is_empty() {
            s.push(',');
        }
        s.push_str(c);
    }
    s.push('\n');
    for (lab, r) in rows {
        let mut cells = lab.clone();
        cells.extend(r.values().iter().map(|v| v.to_string()));
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// One row per variant, `mean ± std` per metric column.
pub fn aggregate_csv(rows: &[(String, [MeanStd; 9])]) -> String {
    let mut s = String::from("variant");
    for c in METRIC_COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (name, cols) in rows {
        s.push_str(name);
        for m in cols {
            s.push_str(&format!(",{:.4e} ± {:.4e}", m.mean, m.std));
        }
        s.push('\n');
    }
    s
}

/// Reads `x,y` rows (an optional header line is skipped) as a scalar graph.
pub fn read_scalar_pairs(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    use anyhow::Context;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',').map(str::trim);
        let parsed = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => out.push(p),
            None if i == 0 => continue,
            None => anyhow::bail!("{} line {}: expected `x,y`", path.display(), i + 1),
        }
    }
    Ok(out)
}

pub fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
