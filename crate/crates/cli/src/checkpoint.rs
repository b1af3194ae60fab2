//! Binary checkpoint of a PDE solution.
//!
//! Layout: the line `MFGMV1`, `key = value` header lines, the line `end`,
//! then the arrays `u`, `ux` (row-major `nt x nx`), `m`, `lambda_sq`, `p0`
//! and `picard_iters` (each `nt` long) as little-endian 64-bit floats.

use std::fmt::Write as _;
use std::path::Path;

use mfgmv_core::model::{MeanFieldCurve, Preferences};
use mfgmv_core::mollify::{KernelKind, MollifierKernel};
use mfgmv_core::pde::{PdeSolution, SpaceTimeGrid};
use ndarray::Array2;
use sha2::{Digest, Sha256};

pub const MAGIC: &str = "MFGMV1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("checkpoint: {0}")]
pub struct CheckpointError(pub String);

fn err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError(msg.into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode(sol: &PdeSolution) -> Vec<u8> {
    let g = &sol.grid;
    let m = sol.m_used.values();
    let iters: Vec<f64> = sol.picard_iters.iter().map(|&k| k as f64).collect();
    let mut payload = Vec::with_capacity(8 * (2 * g.nt * g.nx + 4 * g.nt));
    for arr in [&sol.u, &sol.ux] {
        payload.extend(arr.iter().flat_map(|v| v.to_le_bytes()));
    }
    for part in [m, &sol.lambda_sq[..], &sol.p0[..], &iters[..]] {
        payload.extend(f64_bytes(part));
    }
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "horizon = {:?}", g.horizon);
    let _ = writeln!(header, "nt = {}", g.nt);
    let _ = writeln!(header, "nx = {}", g.nx);
    let _ = writeln!(header, "x_lo = {:?}", g.x_lo);
    let _ = writeln!(header, "x_hi = {:?}", g.x_hi);
    let _ = writeln!(header, "epsilon = {:?}", sol.kernel.epsilon());
    let _ = writeln!(header, "kernel = {}", sol.kernel.kind().name());
    let _ = writeln!(header, "gamma1 = {:?}", sol.prefs.gamma1);
    let _ = writeln!(header, "gamma2 = {:?}", sol.prefs.gamma2);
    let _ = writeln!(header, "ux_min = {:?}", sol.ux_min);
    let _ = writeln!(header, "ux_max = {:?}", sol.ux_max);
    let _ = writeln!(header, "m_hash = {}", sha256_hex(&f64_bytes(m)));
    let _ = writeln!(header, "payload_hash = {}", sha256_hex(&payload));
    let header_hash = sha256_hex(header.as_bytes());
    let _ = writeln!(header, "header_hash = {header_hash}");
    let _ = writeln!(header, "end");
    let mut out = header.into_bytes();
    out.extend(payload);
    out
}

struct Header<'a> {
    entries: Vec<(&'a str, &'a str)>,
}

impl Header<'_> {
    fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| err(format!("missing header field {key}")))
    }

    fn f64(&self, key: &str) -> Result<f64, CheckpointError> {
        self.get(key)?.parse().map_err(|_| err(format!("bad header field {key}")))
    }

    fn usize(&self, key: &str) -> Result<usize, CheckpointError> {
        self.get(key)?.parse().map_err(|_| err(format!("bad header field {key}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PdeSolution, CheckpointError> {
    let marker = b"\nend\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| err("header terminator not found"))?;
    let header_text = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| err("header is not valid text"))?;
    let payload = &bytes[split + marker.len()..];
    let mut lines = header_text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(err("bad magic"));
    }
    let hash_pos = header_text.find("header_hash = ").ok_or_else(|| err("missing header hash"))?;
    let header = Header {
        entries: lines.filter_map(|l| l.split_once(" = ")).collect(),
    };
    if sha256_hex(header_text[..hash_pos].as_bytes()) != header.get("header_hash")? {
        return Err(err("header hash mismatch"));
    }
    if sha256_hex(payload) != header.get("payload_hash")? {
        return Err(err("payload hash mismatch"));
    }
    let nt = header.usize("nt")?;
    let nx = header.usize("nx")?;
    let expected = 8 * (2 * nt * nx + 4 * nt);
    if payload.len() != expected {
        return Err(err(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (u, rest) = floats.split_at(nt * nx);
    let (ux, rest) = rest.split_at(nt * nx);
    let (m, rest) = rest.split_at(nt);
    let (lambda_sq, rest) = rest.split_at(nt);
    let (p0, iters) = rest.split_at(nt);
    if sha256_hex(&f64_bytes(m)) != header.get("m_hash")? {
        return Err(err("mean curve hash mismatch"));
    }
    let horizon = header.f64("horizon")?;
    let grid = SpaceTimeGrid::new(horizon, nt, nx, header.f64("x_lo")?, header.f64("x_hi")?).map_err(|e| err(e.to_string()))?;
    let kind = KernelKind::parse(header.get("kernel")?).ok_or_else(|| err("unknown kernel"))?;
    let kernel = MollifierKernel::new(kind, header.f64("epsilon")?).map_err(|e| err(e.to_string()))?;
    let prefs = Preferences::new(header.f64("gamma1")?, header.f64("gamma2")?).map_err(|e| err(e.to_string()))?;
    Ok(PdeSolution {
        grid,
        u: Array2::from_shape_vec((nt, nx), u.to_vec()).expect("shape checked"),
        ux: Array2::from_shape_vec((nt, nx), ux.to_vec()).expect("shape checked"),
        kernel,
        prefs,
        m_used: MeanFieldCurve::new(horizon, m.to_vec()).map_err(|e| err(e.to_string()))?,
        lambda_sq: lambda_sq.to_vec(),
        p0: p0.to_vec(),
        picard_iters: iters.iter().map(|&k| k as u32).collect(),
        ux_min: header.f64("ux_min")?,
        ux_max: header.f64("ux_max")?,
    })
}

pub fn save(path: &Path, sol: &PdeSolution) -> std::io::Result<()> {
    std::fs::write(path, encode(sol))
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}: {1}")]
    Corrupt(String, CheckpointError),
}

pub fn load(path: &Path) -> Result<PdeSolution, LoadError> {
    let bytes = std::fs::read(path).map_err(|e| LoadError::Io(path.display().to_string(), e))?;
    decode(&bytes).map_err(|e| LoadError::Corrupt(path.display().to_string(), e))
}
