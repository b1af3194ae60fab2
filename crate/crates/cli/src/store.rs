//! On-disk layout of a solved equilibrium.
//!
//! ```text
//! <dir>/config.conf        normalized configuration
//! <dir>/summary.txt        status, widths, continuation differences
//! <dir>/timing.txt         wall-clock times (not part of the reproducible output)
//! <dir>/eps_<k>/m.csv      t,m
//! <dir>/eps_<k>/b.csv      t,b,residual
//! <dir>/eps_<k>/u.ckpt     binary PDE checkpoint
//! <dir>/eps_<k>/summary.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfgmv_core::fixedpoint::{assemble_solution, fixed_point_tol, reconstruct_record, EpsilonRecord, EquilibriumSolution, Problem};
use mfgmv_core::model::MeanFieldCurve;
use mfgmv_core::pde::PdeSolution;

use crate::checkpoint;
use crate::config::Setup;
use crate::CliError;

/// Fixed 17-significant-digit float format used in every CSV and summary.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn num_list(v: &[f64]) -> String {
    v.iter().map(|&x| num(x)).collect::<Vec<_>>().join(", ")
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(path.display().to_string(), e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))
}

pub fn record_dir(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("eps_{k:02}"))
}

pub fn m_csv(m: &MeanFieldCurve) -> String {
    let mut s = String::from("t,m\n");
    for (i, v) in m.values().iter().enumerate() {
        let _ = writeln!(s, "{},{}", num(m.time(i)), num(*v));
    }
    s
}

fn record_summary(rec: &EpsilonRecord, tol: f64) -> String {
    let inv = &rec.invariants;
    let k = &rec.membership;
    let bc = &rec.bounds;
    let mut s = String::new();
    let _ = writeln!(s, "epsilon = {}", num(rec.epsilon));
    let _ = writeln!(s, "kernel = {}", rec.solution.kernel.kind().name());
    let _ = writeln!(s, "iterations = {}", rec.iterations);
    let _ = writeln!(s, "residual = {}", num(rec.residual));
    let _ = writeln!(s, "tol = {}", num(tol));
    let _ = writeln!(s, "history = {}", num_list(&rec.history));
    let _ = writeln!(s, "invariants.passed = {}", inv.passed());
    let _ = writeln!(s, "invariants.violations = {}", inv.violations().join(", "));
    let _ = writeln!(s, "invariants.cone_excess = {}", num(inv.cone_excess));
    let _ = writeln!(s, "invariants.cone_tol = {}", num(inv.cone_tol));
    let _ = writeln!(s, "invariants.ux_min = {}", num(inv.ux_min));
    let _ = writeln!(s, "invariants.ux_max = {}", num(inv.ux_max));
    let _ = writeln!(s, "invariants.non_monotone_slices = {}", inv.non_monotone_slices);
    let _ = writeln!(s, "invariants.boundary_residual = {}", num(inv.boundary_residual));
    let _ = writeln!(s, "invariants.layer_cells = {}", num(inv.layer_cells));
    let _ = writeln!(s, "boundary.max_relative_residual = {}", num(rec.boundary.max_relative_residual()));
    let _ = writeln!(s, "boundary.difference_quotient = {}", num(rec.boundary.difference_quotient()));
    let _ = writeln!(s, "membership.passed = {}", k.passed());
    let _ = writeln!(s, "membership.initial_error = {}", num(k.initial_error));
    let _ = writeln!(s, "membership.sup_norm = {}", num(k.sup_norm));
    let _ = writeln!(s, "membership.lipschitz = {}", num(k.lipschitz));
    let _ = writeln!(s, "bounds.kappa = {}", num(bc.kappa));
    let _ = writeln!(s, "bounds.lambda = {}", num(bc.lambda_bnd));
    let _ = writeln!(s, "bounds.m = {}", num(bc.m_bnd));
    let _ = writeln!(s, "bounds.c3 = {}", num(bc.c3));
    let _ = writeln!(s, "bounds.c4 = {}", num(bc.c4));
    let _ = writeln!(s, "bounds.c5 = {}", num(bc.c5));
    s
}

pub fn write_record(dir: &Path, k: usize, rec: &EpsilonRecord, tol: f64) -> Result<(), CliError> {
    let rd = record_dir(dir, k);
    create_dir(&rd)?;
    write_file(&rd.join("m.csv"), m_csv(&rec.m))?;
    let mut b = String::from("t,b,residual\n");
    let bc = &rec.boundary;
    for i in 0..bc.len() {
        let _ = writeln!(b, "{},{},{}", num(bc.times[i]), num(bc.b[i]), num(bc.residuals[i]));
    }
    write_file(&rd.join("b.csv"), b)?;
    write_file(&rd.join("u.ckpt"), checkpoint::encode(&rec.solution))?;
    write_file(&rd.join("summary.txt"), record_summary(rec, tol))
}

/// Writes every record and the top-level summary; `error` marks a partial run.
pub fn write_solution(
    dir: &Path,
    records: &[EpsilonRecord],
    tol: f64,
    continuation: Option<(&[f64], &[f64])>,
    error: Option<&mfgmv_core::Error>,
) -> Result<(), CliError> {
    create_dir(dir)?;
    for (k, rec) in records.iter().enumerate() {
        write_record(dir, k, rec, tol)?;
    }
    let mut s = String::new();
    let _ = writeln!(s, "status = {}", if error.is_none() { "complete" } else { "partial" });
    let _ = writeln!(s, "records = {}", records.len());
    let eps: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    let _ = writeln!(s, "epsilons = {}", num_list(&eps));
    let _ = writeln!(s, "tol = {}", num(tol));
    if let Some((m_diffs, b_diffs)) = continuation {
        let _ = writeln!(s, "continuation_diffs = {}", num_list(m_diffs));
        let _ = writeln!(s, "boundary_diffs = {}", num_list(b_diffs));
    }
    if let Some(e) = error {
        let _ = writeln!(s, "error.code = {}", e.code());
        let _ = writeln!(s, "error.message = {e}");
    }
    write_file(&dir.join("summary.txt"), s)
}

fn kv_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

/// Number of stored records.
pub fn record_count(dir: &Path) -> Result<usize, CliError> {
    let text = read_text(&dir.join("summary.txt"))?;
    kv_value(&text, "records")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Solution(format!("{}: summary lacks a record count", dir.display())))
}

/// Stored width, mean curve and PDE solution of record `k`.
pub fn load_stored(dir: &Path, k: usize) -> Result<(f64, usize, PdeSolution), CliError> {
    let rd = record_dir(dir, k);
    let sol = checkpoint::load(&rd.join("u.ckpt")).map_err(CliError::Checkpoint)?;
    let text = read_text(&rd.join("summary.txt"))?;
    let iterations = kv_value(&text, "iterations")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Solution(format!("{}: summary lacks iterations", rd.display())))?;
    Ok((sol.kernel.epsilon(), iterations, sol))
}

/// Width, mean curve and solution of the last stored record.
pub fn load_final(dir: &Path) -> Result<(f64, MeanFieldCurve, PdeSolution), CliError> {
    let n = record_count(dir)?;
    if n == 0 {
        return Err(CliError::Solution(format!("{} holds no records", dir.display())));
    }
    let (eps, _, sol) = load_stored(dir, n - 1)?;
    Ok((eps, sol.m_used.clone(), sol))
}

/// Rebuilds the full continuation from disk, re-evaluating each residual.
pub fn read_solution(dir: &Path, setup: &Setup) -> Result<EquilibriumSolution, CliError> {
    let n = record_count(dir)?;
    if n == 0 {
        return Err(CliError::Solution(format!("{} holds no records", dir.display())));
    }
    let problem = Problem { dm: &setup.dm, prefs: &setup.prefs, xi: &setup.xi, grid: &setup.grid };
    let mut records = Vec::with_capacity(n);
    for k in 0..n {
        let (eps, iterations, sol) = load_stored(dir, k)?;
        if sol.grid != setup.grid {
            return Err(CliError::Solution(format!(
                "record {k}: stored grid {:?} does not match the configured grid {:?}",
                sol.grid, setup.grid
            )));
        }
        if sol.prefs != setup.prefs || sol.kernel.kind() != setup.fixed_point.kernel {
            return Err(CliError::Solution(format!("record {k}: preferences or kernel differ from the configuration")));
        }
        let m = sol.m_used.clone();
        let rec = reconstruct_record(&problem, eps, m, sol, iterations, &setup.fixed_point).map_err(CliError::Core)?;
        records.push(rec);
    }
    Ok(assemble_solution(records, fixed_point_tol(&problem, &setup.fixed_point)))
}

/// SHA-256 over the reproducible outputs (CSV files and checkpoints) in record order.
pub fn output_hash(dir: &Path) -> Result<String, CliError> {
    let n = record_count(dir)?;
    let mut all = Vec::new();
    for k in 0..n {
        let rd = record_dir(dir, k);
        for f in ["m.csv", "b.csv", "u.ckpt"] {
            let p = rd.join(f);
            let bytes = std::fs::read(&p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
            all.extend(checkpoint::sha256_hex(&bytes).into_bytes());
        }
    }
    Ok(checkpoint::sha256_hex(&all))
}
