//! Dataset persistence: a single binary container or a pair of CSV files.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "BBL1" | n: u32 | d: u32 | n_targets: u16 | n_attributes: u16
//! n*d f64 features (row-major) | n u16 targets | n u16 attributes
//! u32 provenance length | provenance UTF-8
//! ```

use super::{DataError, LabeledDataset};
use ndarray::Array2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CONTAINER_MAGIC: &[u8; 4] = b"BBL1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T, DataError> {
    T::try_from(v).map_err(|_| DataError::InvalidParameter(format!("{what} = {v} does not fit the container header")))
}

pub fn encode_container(ds: &LabeledDataset) -> Result<Vec<u8>, DataError> {
    let (n, d) = ds.features.dim();
    let mut out = Vec::with_capacity(16 + n * d * 8 + n * 4 + 4 + ds.provenance.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&narrow::<u32>(n, "n")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u32>(d, "d")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.n_targets, "n_targets")?.to_le_bytes());
    out.extend_from_slice(&narrow::<u16>(ds.n_attributes, "n_attributes")?.to_le_bytes());
    for v in ds.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &t in ds.targets.iter().chain(&ds.attributes) {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    out.extend_from_slice(&narrow::<u32>(ds.provenance.len(), "provenance length")?.to_le_bytes());
    out.extend_from_slice(ds.provenance.as_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len()).ok_or(DataError::Truncated {
            expected: self.pos.saturating_add(k),
            got: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<LabeledDataset, DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CONTAINER_MAGIC {
        return Err(DataError::Format("not a BBL1 dataset container".into()));
    }
    let n = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let n_targets = cur.u16()? as usize;
    let n_attributes = cur.u16()? as usize;
    let raw = cur.take(n.checked_mul(d).and_then(|v| v.checked_mul(8)).ok_or_else(|| DataError::Format("header overflow".into()))?)?;
    let feats = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut labels = (0..2 * n).map(|_| cur.u16().map(usize::from)).collect::<Result<Vec<_>, _>>()?;
    let attributes = labels.split_off(n);
    let plen = cur.u32()? as usize;
    let provenance = std::str::from_utf8(cur.take(plen)?)
        .map_err(|_| DataError::Format("provenance is not UTF-8".into()))?
        .to_string();
    if cur.pos != bytes.len() {
        return Err(DataError::Format(format!("{} trailing bytes after container", bytes.len() - cur.pos)));
    }
    let features = Array2::from_shape_vec((n, d), feats).expect("length checked");
    LabeledDataset::new(features, labels, attributes, n_targets, n_attributes, provenance)
}

pub fn write_container(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_container(ds)?).map_err(io_err(path))
}

pub fn read_container(path: &Path) -> Result<LabeledDataset, DataError> {
    decode_container(&fs::read(path).map_err(io_err(path))?)
}

/// Writes `features` (one row per sample, no header) and `labels`
/// (`target,attribute,provenance` header, alphabet sizes in the first row).
pub fn write_csv(ds: &LabeledDataset, features: &Path, labels: &Path) -> Result<(), DataError> {
    let mut f = String::new();
    for row in ds.features.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        f.push_str(&cells.join(","));
        f.push('\n');
    }
    fs::write(features, f).map_err(io_err(features))?;
    let mut l = String::from("target,attribute,provenance\n");
    let prov = ds.provenance.replace('"', "\"\"");
    for (i, (t, a)) in ds.targets.iter().zip(&ds.attributes).enumerate() {
        let p = if i == 0 {
            format!("\"{prov} [n_targets={} n_attributes={}]\"", ds.n_targets, ds.n_attributes)
        } else {
            String::new()
        };
        writeln!(l, "{t},{a},{p}").expect("write to string");
    }
    fs::write(labels, l).map_err(io_err(labels))
}

pub fn read_csv(features: &Path, labels: &Path) -> Result<LabeledDataset, DataError> {
    let ftext = fs::read_to_string(features).map_err(io_err(features))?;
    let ltext = fs::read_to_string(labels).map_err(io_err(labels))?;
    let mut rows = Vec::new();
    let mut d = None;
    for (i, line) in ftext.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Format(format!("features line {}: {e}", i + 1)))?;
        if *d.get_or_insert(vals.len()) != vals.len() {
            return Err(DataError::Format(format!("features line {}: ragged row", i + 1)));
        }
        rows.extend(vals);
    }
    let mut lines = ltext.lines();
    if lines.next().map(str::trim) != Some("target,attribute,provenance") {
        return Err(DataError::Format("labels file lacks the target,attribute,provenance header".into()));
    }
    let (mut targets, mut attributes, mut provenance) = (Vec::new(), Vec::new(), String::new());
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.splitn(3, ',');
        let mut label = |what: &str| {
            parts
                .next()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| DataError::Format(format!("labels line {}: bad {what}", i + 2)))
        };
        targets.push(label("target")?);
        attributes.push(label("attribute")?);
        if i == 0 {
            provenance = parts.next().unwrap_or("").trim().trim_matches('"').replace("\"\"", "\"");
        }
    }
    let n = targets.len();
    let (prov, n_targets, n_attributes) = split_alphabets(&provenance)
        .unwrap_or((provenance.clone(), targets.iter().max().map_or(1, |m| m + 1), attributes.iter().max().map_or(1, |m| m + 1)));
    let d = d.unwrap_or(0);
    if rows.len() != n * d {
        return Err(DataError::LengthMismatch(rows.len() / d.max(1), n));
    }
    let features = Array2::from_shape_vec((n, d), rows).expect("length checked");
    LabeledDataset::new(features, targets, attributes, n_targets, n_attributes, prov)
}

fn split_alphabets(p: &str) -> Option<(String, usize, usize)> {
    let start = p.rfind(" [n_targets=")?;
    let tail = p[start..].strip_prefix(" [n_targets=")?.strip_suffix(']')?;
    let (t, a) = tail.split_once(" n_attributes=")?;
    Some((p[..start].to_string(), t.parse().ok()?, a.parse().ok()?))
}
