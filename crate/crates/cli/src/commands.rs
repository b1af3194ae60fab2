//! Command implementations shared by the binary, the suite runner and tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfgmv_core::fixedpoint::{epsilon_continuation, EquilibriumSolution, Problem};
use mfgmv_core::simulate::{estimate_mean_wealth, lift_paths, simulate_aux_paths, SimOptions};
use mfgmv_core::validate::{run_battery, BatteryOptions, ValidationReport};

use crate::config::{EngineConfig, Setup};
use crate::store::{self, create_dir, num, write_file};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub epsilon_floor: Option<f64>,
}

/// Runs the continuation and writes the solution directory. Partial results
/// are written before a convergence error is returned.
pub fn solve(cfg: &EngineConfig, out: &Path, opts: &SolveOptions) -> Result<(EquilibriumSolution, f64), CliError> {
    let setup = cfg.build(opts.epsilon_floor).map_err(CliError::Core)?;
    create_dir(out)?;
    write_file(&out.join("config.conf"), cfg.dump())?;
    let problem = Problem { dm: &setup.dm, prefs: &setup.prefs, xi: &setup.xi, grid: &setup.grid };
    log::info!(
        "solving on {}x{} grid over [{:.4}, {:.4}] with widths {:?}",
        setup.grid.nt,
        setup.grid.nx,
        setup.grid.x_lo,
        setup.grid.x_hi,
        setup.fixed_point.epsilon_schedule
    );
    let clock = Instant::now();
    let result = epsilon_continuation(&problem, &setup.fixed_point, None);
    let seconds = clock.elapsed().as_secs_f64();
    write_file(&out.join("timing.txt"), format!("solve_seconds = {seconds:.3}\n"))?;
    let eq = match result {
        Ok(eq) => eq,
        Err(partial) => {
            let tol = mfgmv_core::fixedpoint::fixed_point_tol(&problem, &setup.fixed_point);
            store::write_solution(out, &partial.completed, tol, None, Some(&partial.error))?;
            return Err(CliError::Core(partial.error));
        }
    };
    store::write_solution(out, &eq.records, eq.tol, Some((&eq.continuation_diffs, &eq.boundary_diffs)), None)?;
    let violations: Vec<String> = eq
        .records
        .iter()
        .flat_map(|r| r.invariants.violations().into_iter().map(move |v| format!("eps={:.4e}: {v}", r.epsilon)))
        .collect();
    if !violations.is_empty() {
        return Err(CliError::InvariantsFailed(violations));
    }
    log::info!("solved in {seconds:.2} s; final residual {:.3e}", eq.final_record().residual);
    Ok((eq, seconds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    pub paths: Option<usize>,
    pub drift_bias: f64,
    /// Skip the first-order and finite-population checks.
    pub core_only: bool,
}

/// Battery settings for a validation run.
pub fn battery_options(setup: &Setup, opts: &ValidateOptions) -> BatteryOptions {
    let mut b = BatteryOptions::desk(&setup.dm, &setup.prefs, opts.seed);
    if let Some(p) = opts.paths {
        b.mc_paths = p;
    }
    b.drift_bias = opts.drift_bias;
    if opts.core_only {
        b.perturbation = None;
        b.nplayer = None;
    }
    let steps = setup.grid.nt - 1;
    if steps % (b.mc_probes - 1) != 0 {
        b.mc_probes = 2;
    }
    if steps % b.martingale_stride != 0 {
        b.martingale_stride = steps;
    }
    b
}

/// Runs the battery against a stored solution and writes `report.txt` and
/// `report.csv` into `out`.
pub fn validate(cfg: &EngineConfig, solution: &Path, out: &Path, opts: &ValidateOptions) -> Result<ValidationReport, CliError> {
    let setup = cfg.build(None).map_err(CliError::Core)?;
    let eq = store::read_solution(solution, &setup)?;
    let clock = Instant::now();
    let mut report = run_battery(&eq, &setup.dm, &setup.prefs, &setup.xi, &battery_options(&setup, opts)).map_err(CliError::Core)?;
    report.meta("runtime.battery", clock.elapsed().as_secs_f64());
    create_dir(out)?;
    write_file(&out.join("report.txt"), report.to_kv())?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    for c in &report.checks {
        log::info!("{} {}: {:.4e} (tolerance {:.4e})", if c.passed { "pass" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOptions {
    pub paths: usize,
    pub seed: u64,
    /// How many paths are written to `paths.csv`; all are used for the means.
    pub write_paths: usize,
}

/// Simulates the stored final record, writing `paths.csv` and `mean.csv`.
/// Returns the number of probe times where the estimate is within 3 SE.
pub fn simulate(cfg: &EngineConfig, solution: &Path, out: &Path, opts: &SimulateOptions) -> Result<(usize, usize), CliError> {
    let setup = cfg.build(None).map_err(CliError::Core)?;
    let (_, m, sol) = store::load_final(solution)?;
    let steps = sol.grid.nt - 1;
    let stride = if steps % 10 == 0 { steps / 10 } else { 1 };
    let sim = SimOptions::new(opts.paths, opts.seed).with_stride(stride);
    let mut bundle = simulate_aux_paths(&sol, &setup.xi, &setup.dm, &sim).map_err(CliError::Core)?;
    lift_paths(&mut bundle, &sol, &setup.dm, &m);
    let est = estimate_mean_wealth(&bundle).map_err(CliError::Core)?;
    create_dir(out)?;

    let d = bundle.num_assets;
    let mut header = String::from("path,t,x,wealth,adjoint_p");
    for field in ["q", "pi", "z"] {
        for c in 0..d {
            let _ = write!(header, ",{field}_{c}");
        }
    }
    let mut s = header + "\n";
    for p in 0..opts.write_paths.min(bundle.n_paths) {
        for r in 0..bundle.n_records() {
            let _ = write!(
                s,
                "{p},{},{},{},{}",
                num(bundle.times[r]),
                num(bundle.x_at(p, r)),
                num(bundle.wealth_at(p, r)),
                num(bundle.adjoint_p_at(p, r))
            );
            for v in bundle.q_at(p, r).iter().chain(bundle.pi_at(p, r)).chain(bundle.z_at(p, r)) {
                let _ = write!(s, ",{}", num(*v));
            }
            s.push('\n');
        }
    }
    write_file(&out.join("paths.csv"), s)?;

    let mut s = String::from("t,m,mc_mean,std_error,within_3se\n");
    let mut within = 0;
    for (k, &t) in est.times.iter().enumerate() {
        let mv = m.at(t);
        let se = est.std_error.as_ref().map(|v| v[k]).unwrap_or(f64::NAN);
        let ok = (est.mean[k] - mv).abs() <= 3.0 * se;
        within += ok as usize;
        let _ = writeln!(s, "{},{},{},{},{}", num(t), num(mv), num(est.mean[k]), num(se), ok);
    }
    write_file(&out.join("mean.csv"), s)?;
    log::info!("{within} of {} probe times within 3 SE", est.times.len());
    Ok((within, est.times.len()))
}

/// Writes `u.csv` (`t,x,u,ux`) for every stored record into `out/eps_<k>/`.
pub fn export(solution: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let n = store::record_count(solution)?;
    let mut written = Vec::with_capacity(n);
    for k in 0..n {
        let (_, _, sol) = store::load_stored(solution, k)?;
        let g = &sol.grid;
        let mut s = String::with_capacity(g.nt * g.nx * 96);
        s.push_str("t,x,u,ux\n");
        for i in 0..g.nt {
            for j in 0..g.nx {
                let _ = writeln!(s, "{},{},{},{}", num(g.t(i)), num(g.x(j)), num(sol.u[[i, j]]), num(sol.ux[[i, j]]));
            }
        }
        let dir = store::record_dir(out, k);
        create_dir(&dir)?;
        let path = dir.join("u.csv");
        write_file(&path, s)?;
        written.push(path);
    }
    Ok(written)
}
