//! Binary artifact container for value grids and policies: a structured
//! text header (dims, axes, params hash, solver settings) terminated by a
//! `header_end` line, followed by the named arrays as little-endian f64 in
//! row-major (t, w, p) order.

use crate::model::CostModel;
use crate::policy::{Policy, Region};
use crate::solver::{GridSpec, SolverError, ValueGrid};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const GRID_MAGIC: &str = "merton-experts-grid v1";
const POLICY_MAGIC: &str = "merton-experts-policy v1";

#[derive(Error, Debug)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad container magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("container header is missing key {0}")]
    MissingKey(String),
    #[error("container header key {key} has invalid value {value:?}")]
    BadValue { key: String, value: String },
    #[error("payload truncated: expected {expected} f64 values, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("params hash mismatch: config {config}, artifact {artifact}")]
    HashMismatch { config: String, artifact: String },
    #[error(transparent)]
    Grid(#[from] SolverError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io { path: path.display().to_string(), source }
}

struct Header {
    magic: String,
    keys: BTreeMap<String, String>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str, ContainerError> {
        self.keys
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| ContainerError::MissingKey(key.to_string()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| ContainerError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }
}

fn write_payload<W: Write>(out: &mut W, arrays: &[&[f64]]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(1 << 16);
    for arr in arrays {
        for &v in *arr {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= (1 << 16) {
                out.write_all(&buf)?;
                buf.clear();
            }
        }
    }
    out.write_all(&buf)
}

fn read_header<R: Read>(reader: &mut R, path: &Path) -> Result<Header, ContainerError> {
    // read byte-wise up to the header terminator so the payload offset is
    // exact
    let mut text = Vec::new();
    let mut byte = [0u8; 1];
    let terminator = b"header_end\n";
    loop {
        let n = reader.read(&mut byte).map_err(io_err(path))?;
        if n == 0 {
            return Err(ContainerError::MissingKey("header_end".into()));
        }
        text.push(byte[0]);
        if text.ends_with(terminator) {
            break;
        }
        if text.len() > 1 << 20 {
            return Err(ContainerError::MissingKey("header_end".into()));
        }
    }
    let text = String::from_utf8_lossy(&text);
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or("").to_string();
    let mut keys = BTreeMap::new();
    for line in lines {
        if line == "header_end" {
            break;
        }
        if let Some((k, v)) = line.split_once(" = ") {
            keys.insert(k.to_string(), v.to_string());
        }
    }
    Ok(Header { magic, keys })
}

fn read_arrays<R: Read>(
    reader: &mut R,
    path: &Path,
    count: usize,
    len: usize,
) -> Result<Vec<Vec<f64>>, ContainerError> {
    let mut out = Vec::with_capacity(count);
    let mut bytes = vec![0u8; len * 8];
    for _ in 0..count {
        let mut filled = 0usize;
        while filled < bytes.len() {
            let n = reader.read(&mut bytes[filled..]).map_err(io_err(path))?;
            if n == 0 {
                return Err(ContainerError::Truncated { expected: len, got: filled / 8 });
            }
            filled += n;
        }
        let arr: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(arr);
    }
    Ok(out)
}

fn spec_header(spec: &GridSpec, params_hash: &str) -> String {
    format!(
        "params_hash = {params_hash}\nn_t = {}\nn_w = {}\nn_p = {}\nhorizon = {}\nw_max = {}\n",
        spec.n_t, spec.n_w, spec.n_p, spec.horizon, spec.w_max
    )
}

fn spec_from_header(h: &Header) -> Result<GridSpec, ContainerError> {
    Ok(GridSpec::new(
        h.parse("n_t")?,
        h.parse("n_w")?,
        h.parse("n_p")?,
        h.parse("horizon")?,
        h.parse("w_max")?,
    )?)
}

pub fn write_value_grid(path: &Path, grid: &ValueGrid) -> Result<(), ContainerError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = format!(
        "{GRID_MAGIC}\n{}arrays = values\nheader_end\n",
        spec_header(&grid.spec, &grid.params_hash)
    );
    out.write_all(header.as_bytes()).map_err(io_err(path))?;
    write_payload(&mut out, &[&grid.values]).map_err(io_err(path))?;
    Ok(())
}

pub fn read_value_grid(path: &Path) -> Result<ValueGrid, ContainerError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader, path)?;
    if header.magic != GRID_MAGIC {
        return Err(ContainerError::BadMagic {
            expected: GRID_MAGIC.into(),
            found: header.magic,
        });
    }
    let spec = spec_from_header(&header)?;
    let params_hash = header.get("params_hash")?.to_string();
    let len = spec.n_t * spec.level_len();
    let mut arrays = read_arrays(&mut reader, path, 1, len)?;
    Ok(ValueGrid { spec, values: arrays.pop().unwrap(), params_hash })
}

pub fn write_policy(path: &Path, policy: &Policy) -> Result<(), ContainerError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = format!(
        "{POLICY_MAGIC}\n{}k0 = {}\nk1 = {}\npi_lo = {}\npi_hi = {}\nregion_tol = {}\n\
         arrays = pi_hat,q_hat,gap,region\nheader_end\n",
        spec_header(&policy.spec, &policy.params_hash),
        policy.cost.k0,
        policy.cost.k1,
        policy.pi_lo,
        policy.pi_hi,
        policy.region_tol,
    );
    out.write_all(header.as_bytes()).map_err(io_err(path))?;
    let region_f: Vec<f64> =
        policy.region.iter().map(|r| if *r == Region::Purchase { 1.0 } else { 0.0 }).collect();
    write_payload(&mut out, &[&policy.pi_hat, &policy.q_hat, &policy.gap, &region_f])
        .map_err(io_err(path))?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<Policy, ContainerError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader, path)?;
    if header.magic != POLICY_MAGIC {
        return Err(ContainerError::BadMagic {
            expected: POLICY_MAGIC.into(),
            found: header.magic,
        });
    }
    let spec = spec_from_header(&header)?;
    let params_hash = header.get("params_hash")?.to_string();
    let cost = CostModel::new(header.parse("k0")?, header.parse("k1")?)
        .map_err(SolverError::Model)?;
    let pi_lo: f64 = header.parse("pi_lo")?;
    let pi_hi: f64 = header.parse("pi_hi")?;
    let region_tol: f64 = header.parse("region_tol")?;
    let len = spec.n_t * spec.level_len();
    let mut arrays = read_arrays(&mut reader, path, 4, len)?;
    let region_f = arrays.pop().unwrap();
    let gap = arrays.pop().unwrap();
    let q_hat = arrays.pop().unwrap();
    let pi_hat = arrays.pop().unwrap();
    let region = region_f
        .iter()
        .map(|&x| if x == 1.0 { Region::Purchase } else { Region::Continue })
        .collect();
    Ok(Policy { spec, region, pi_hat, q_hat, gap, cost, pi_lo, pi_hi, region_tol, params_hash })
}

/// Rejects an artifact whose generating configuration differs from the
/// one in hand.
pub fn check_hash(config_hash: &str, artifact_hash: &str) -> Result<(), ContainerError> {
    if config_hash != artifact_hash {
        return Err(ContainerError::HashMismatch {
            config: config_hash.to_string(),
            artifact: artifact_hash.to_string(),
        });
    }
    Ok(())
}
