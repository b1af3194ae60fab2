//! Oracles and statistical checks for computed equilibria.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fixedpoint::{EpsilonRecord, EquilibriumSolution};
use crate::model::{DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences};
use crate::mollify::gamma_eps_at;
use crate::pde::{PdeSolution, SpaceTimeGrid};
use crate::simulate::{estimate_mean_wealth, lift_paths, mean_and_se, path_rng, simulate_aux_paths, PathBundle, SimOptions};

/// What kind of evidence a check rests on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Comparison with a closed-form solution.
    Oracle,
    /// Structural property of the exact solution.
    Property,
    /// Monte Carlo statistic against a confidence band.
    Statistical,
    /// Negative control that is expected to fail its underlying test.
    Control,
}

impl CheckKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::Oracle => "oracle",
            CheckKind::Property => "property",
            CheckKind::Statistical => "statistical",
            CheckKind::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: &str, kind: CheckKind, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            value,
            tolerance,
            passed: value <= tolerance,
            detail: detail.into(),
        }
    }

    pub fn flag(name: &str, kind: CheckKind, passed: bool, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), kind, value, tolerance, passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Run metadata such as seeds, grid sizes and runtimes.
    pub meta: Vec<(String, String)>,
}

impl ValidationReport {
    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Flat `key = value` text.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k} = {v}");
        }
        for c in &self.checks {
            let _ = writeln!(s, "check.{}.kind = {}", c.name, c.kind.name());
            let _ = writeln!(s, "check.{}.value = {:.16e}", c.name, c.value);
            let _ = writeln!(s, "check.{}.tolerance = {:.16e}", c.name, c.tolerance);
            let _ = writeln!(s, "check.{}.passed = {}", c.name, c.passed);
            if !c.detail.is_empty() {
                let _ = writeln!(s, "check.{}.detail = {}", c.name, c.detail);
            }
        }
        let _ = writeln!(s, "passed = {}", self.passed());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,value,tolerance,passed,detail\n");
        for c in &self.checks {
            let detail = c.detail.replace('"', "'");
            let _ = writeln!(
                s,
                "{},{},{:.16e},{:.16e},{},\"{}\"",
                c.name,
                c.kind.name(),
                c.value,
                c.tolerance,
                c.passed,
                detail
            );
        }
        s
    }
}

/// Composite Simpson rule with `panels` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Closed-form equilibrium for a single risk-tolerance level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantOracle {
    /// `u(t_i, x_j) = x_j - gamma int_{t_i}^T |lambda|^2`.
    pub u: Array2<f64>,
    /// `m(t) = e^{int_0^t r} (E[xi] + gamma / P0(0) int_0^t |lambda|^2)`.
    pub m: MeanFieldCurve,
    /// `(gamma / P0(t)) (sigma(t)^T)^{-1} lambda(t)` on the grid times.
    pub pi: Vec<DVector<f64>>,
}

/// Evaluates the constant-level oracle on `grid` with Simpson quadrature
/// (64 panels per time cell).
pub fn constant_gamma_oracle(dm: &DerivedMarket, gamma: f64, grid: &SpaceTimeGrid, xi_mean: f64) -> ConstantOracle {
    let nt = grid.nt;
    let lam2 = |s: f64| dm.lambda_norm_sq(s);
    // Cumulative int_0^{t_i} |lambda|^2.
    let mut cum = vec![0.0; nt];
    for i in 1..nt {
        cum[i] = cum[i - 1] + simpson(lam2, grid.t(i - 1), grid.t(i), 64);
    }
    let total = cum[nt - 1];
    let mut u = Array2::zeros((nt, grid.nx));
    for i in 0..nt {
        let shift = gamma * (total - cum[i]);
        for j in 0..grid.nx {
            u[[i, j]] = if i + 1 == nt { grid.x(j) } else { grid.x(j) - shift };
        }
    }
    let p00 = dm.p0(0.0);
    let m_values = (0..nt)
        .map(|i| dm.integrated_rate(0.0, grid.t(i)).exp() * (xi_mean + gamma / p00 * cum[i]))
        .collect();
    let pi = (0..nt)
        .map(|i| {
            let t = grid.t(i);
            dm.allocation_direction(t) * (gamma / dm.p0(t))
        })
        .collect();
    ConstantOracle {
        u,
        m: MeanFieldCurve::new(grid.horizon, m_values).expect("grid has at least two nodes"),
        pi,
    }
}

/// Largest `|u_num - u_oracle|` over the grid.
pub fn max_node_error(sol: &PdeSolution, oracle: &ConstantOracle) -> f64 {
    (&sol.u - &oracle.u).iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Row indices of the grid times closest to `times`.
pub fn rows_for_times(grid: &SpaceTimeGrid, times: &[f64]) -> Vec<usize> {
    times
        .iter()
        .map(|&t| ((t / grid.horizon) * (grid.nt - 1) as f64).round() as usize)
        .map(|i| i.min(grid.nt - 1))
        .collect()
}

/// Far-field comparison at `b(t) +- 2 eps P_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarFieldResult {
    /// `(t, |u - affine_gamma1|` above, `|u - affine_gamma2|` below).
    pub probes: Vec<(f64, f64, f64)>,
    pub max_error: f64,
    /// Whether the mollified coefficient is exactly the outer level at every probe.
    pub coefficient_exact: bool,
}

pub fn far_field_check(record: &EpsilonRecord, dm: &DerivedMarket, times: &[f64]) -> FarFieldResult {
    let sol = &record.solution;
    let g = &sol.grid;
    let offset = 2.0 * record.epsilon * dm.p_max;
    let prefs = sol.prefs;
    let mut probes = Vec::new();
    let mut exact = true;
    for i in rows_for_times(g, times) {
        let t = g.t(i);
        let l2 = simpson(|s| dm.lambda_norm_sq(s), t, g.horizon, 256);
        let above = record.boundary.b[i] + offset;
        let below = record.boundary.b[i] - offset;
        let ua = sol.u_at_row(i, above);
        let ub = sol.u_at_row(i, below);
        let m_t = sol.m_used.values()[i];
        exact &= gamma_eps_at(ua / sol.p0[i], m_t, &prefs, &sol.kernel) == prefs.gamma1;
        exact &= gamma_eps_at(ub / sol.p0[i], m_t, &prefs, &sol.kernel) == prefs.gamma2;
        probes.push((t, (ua - (above - prefs.gamma1 * l2)).abs(), (ub - (below - prefs.gamma2 * l2)).abs()));
    }
    let max_error = probes.iter().fold(0.0_f64, |a, p| a.max(p.1).max(p.2));
    FarFieldResult { probes, max_error, coefficient_exact: exact }
}

/// One Monte Carlo probe of the mean wealth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McProbe {
    pub t: f64,
    pub m: f64,
    pub mc_mean: f64,
    pub std_error: f64,
    pub tolerance: f64,
}

impl McProbe {
    pub fn ok(&self) -> bool {
        (self.mc_mean - self.m).abs() <= self.tolerance
    }
}

/// Re-estimates `E[X(t)]` by simulation at `probes` equally spaced times and
/// compares with the stored curve within `3 SE + 5 dx^2`.
pub fn monte_carlo_consistency(
    record: &EpsilonRecord,
    dm: &DerivedMarket,
    xi: &InitialDistribution,
    n_paths: usize,
    seed: u64,
    probes: usize,
) -> Result<Vec<McProbe>> {
    let sol = &record.solution;
    let steps = sol.grid.nt - 1;
    if probes < 2 || steps % (probes - 1) != 0 {
        return Err(Error::InvalidInput(format!("{probes} probes do not divide {steps} time steps")));
    }
    let opts = SimOptions::new(n_paths, seed).with_stride(steps / (probes - 1));
    let mut bundle = simulate_aux_paths(sol, xi, dm, &opts)?;
    lift_paths(&mut bundle, sol, dm, &record.m);
    let est = estimate_mean_wealth(&bundle)?;
    let se = est
        .std_error
        .ok_or_else(|| Error::InvalidInput("at least two paths are needed for standard errors".into()))?;
    let dx2 = sol.grid.dx().powi(2);
    Ok(est
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| McProbe {
            t,
            m: record.m.at(t),
            mc_mean: est.mean[k],
            std_error: se[k],
            tolerance: 3.0 * se[k] + 5.0 * dx2,
        })
        .collect())
}

/// Increments of `H = P + P0 X` between consecutive recorded times and over
/// the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleResult {
    /// `(t_start, t_end, mean increment, standard error)`.
    pub intervals: Vec<(f64, f64, f64, f64)>,
    pub total: (f64, f64),
    pub passed: bool,
}

impl MartingaleResult {
    /// Largest `|mean| / SE` over all tested increments.
    pub fn worst_z(&self) -> f64 {
        self.intervals
            .iter()
            .map(|iv| (iv.2, iv.3))
            .chain(std::iter::once(self.total))
            .map(|(m, se)| if se > 0.0 { m.abs() / se } else if m == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

pub fn martingale_test(bundle: &PathBundle, sol: &PdeSolution) -> Result<MartingaleResult> {
    if !bundle.lifted {
        return Err(Error::InvalidInput("bundle must be lifted".into()));
    }
    let n_rec = bundle.n_records();
    let h = |path: usize, r: usize| {
        let p0 = sol.p0[bundle.rows[r]];
        bundle.adjoint_p_at(path, r) + p0 * bundle.wealth_at(path, r)
    };
    let within = |mean: f64, se: Option<f64>| match se {
        Some(se) => mean.abs() <= 3.0 * se,
        None => mean == 0.0,
    };
    let mut passed = true;
    let mut intervals = Vec::with_capacity(n_rec.saturating_sub(1));
    for r in 0..n_rec - 1 {
        let incr: Vec<f64> = (0..bundle.n_paths).map(|p| h(p, r + 1) - h(p, r)).collect();
        let (mean, se, _) = mean_and_se(&incr);
        passed &= within(mean, se);
        intervals.push((bundle.times[r], bundle.times[r + 1], mean, se.unwrap_or(0.0)));
    }
    let incr: Vec<f64> = (0..bundle.n_paths).map(|p| h(p, n_rec - 1) - h(p, 0)).collect();
    let (mean, se, _) = mean_and_se(&incr);
    passed &= within(mean, se);
    Ok(MartingaleResult { intervals, total: (mean, se.unwrap_or(0.0)), passed })
}

/// Settings for the first-order (spike perturbation) test.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    pub times: Vec<f64>,
    pub etas: Vec<DVector<f64>>,
    /// Perturbation lengths; the pass criterion uses the smallest.
    pub eps_list: Vec<f64>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub substeps: usize,
    pub seed: u64,
    pub c_slack: f64,
}

/// `10 M lambda_max P_max`.
pub fn default_c_slack(dm: &DerivedMarket, prefs: &Preferences) -> f64 {
    10.0 * dm.lambda_max.powi(2) * prefs.gamma2 * dm.lambda_max * dm.p_max
}

/// `count` directions: `+e_k`, `-e_k` for each axis, then Gaussian vectors.
pub fn perturbation_directions(d: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(count);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            if out.len() < count {
                out.push(DVector::from_fn(d, |i, _| if i == k { sign } else { 0.0 }));
            }
        }
    }
    let mut rng = path_rng(seed, u64::MAX);
    while out.len() < count {
        out.push(DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationEntry {
    pub t: f64,
    pub eta_index: usize,
    pub eps: f64,
    pub quotient: f64,
    pub std_error: f64,
    /// The deterministic variance contribution divided by `eps`.
    pub variance_term: f64,
    /// `quotient + 3 SE + c_slack eps`; nonnegative means pass.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub entries: Vec<PerturbationEntry>,
    pub passed: bool,
    pub worst_margin: f64,
}

/// Weights and nodes of the trapezoid rule over `[t, t + eps]`.
fn trapezoid_nodes(t: f64, eps: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = eps / n as f64;
    let nodes = (0..=n).map(|k| t + k as f64 * h).collect();
    let weights = (0..=n).map(|k| if k == 0 || k == n { 0.5 * h } else { h }).collect();
    (nodes, weights)
}

/// Estimates `(J(t, pi^{t,eps,eta}) - J(t, pi_bar)) / eps` through its
/// decomposition into
///
/// ```text
/// -gamma(t, X(t)) eta^T int P0 theta
/// + 1/2 eta^T (int P0^2 sigma sigma^T) eta
/// + eta^T E_t[int P0 sigma Z]
/// ```
///
/// over `[t, t + eps]`, with `Z = gamma_eps lambda` and the conditional
/// expectation estimated by inner paths started from outer equilibrium
/// states at `t`.
pub fn perturbation_test(
    record: &EpsilonRecord,
    dm: &DerivedMarket,
    xi: &InitialDistribution,
    cfg: &PerturbationConfig,
) -> Result<PerturbationResult> {
    let sol = &record.solution;
    let g = &sol.grid;
    let d = dm.num_assets();
    let outer_opts = SimOptions::new(cfg.n_outer, cfg.seed);
    let outer = simulate_aux_paths(sol, xi, dm, &outer_opts)?;
    let mut entries = Vec::new();
    for (t_index, row) in rows_for_times(g, &cfg.times).into_iter().enumerate() {
        let t = g.t(row);
        if row + 1 >= g.nt {
            return Err(Error::InvalidInput(format!("perturbation time {t} must be before the horizon")));
        }
        let m_t = sol.m_used.values()[row];
        let p0_t = sol.p0[row];
        let states: Vec<(f64, f64)> = (0..cfg.n_outer)
            .map(|p| {
                let x = outer.x_at(p, row);
                let gamma = gamma_eps_at(sol.u_at_row(row, x) / p0_t, m_t, &sol.prefs, &sol.kernel);
                (x, gamma)
            })
            .collect();
        for (eps_index, &eps) in cfg.eps_list.iter().enumerate() {
            if t + eps > g.horizon {
                return Err(Error::InvalidInput(format!("perturbation [{t}, {}] leaves the horizon", t + eps)));
            }
            let (nodes, weights) = trapezoid_nodes(t, eps, cfg.substeps);
            let p0_theta: Vec<DVector<f64>> = nodes.iter().map(|&s| dm.theta(s) * dm.p0(s)).collect();
            let lambda_norm: Vec<f64> = nodes.iter().map(|&s| dm.lambda_norm_sq(s).sqrt()).collect();
            let mut a = DVector::zeros(d);
            let mut b = DMatrix::zeros(d, d);
            for (k, &s) in nodes.iter().enumerate() {
                a += &p0_theta[k] * weights[k];
                let sig = dm.sigma(s);
                b += (&sig * sig.transpose()) * (weights[k] * dm.p0(s).powi(2));
            }
            // Inner conditional expectations, one d-vector per outer state.
            let stream_base = ((t_index as u64) << 48) | ((eps_index as u64) << 40);
            let inner: Vec<DVector<f64>> = states
                .par_iter()
                .enumerate()
                .map(|(p, &(x0, _))| {
                    let mut mean_gamma = vec![0.0; nodes.len()];
                    for q in 0..cfg.n_inner {
                        let mut rng = path_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, stream_base | ((p * cfg.n_inner + q) as u64));
                        let mut x = x0;
                        for k in 0..nodes.len() {
                            let gamma = sol.gamma_at(dm, nodes[k], x);
                            mean_gamma[k] += gamma;
                            if k + 1 < nodes.len() {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                let h = nodes[k + 1] - nodes[k];
                                x += gamma * lambda_norm[k] * h.sqrt() * z;
                            }
                        }
                    }
                    let mut c = DVector::zeros(d);
                    for k in 0..nodes.len() {
                        c += &p0_theta[k] * (weights[k] * mean_gamma[k] / cfg.n_inner as f64);
                    }
                    c
                })
                .collect();
            for (eta_index, eta) in cfg.etas.iter().enumerate() {
                let eta_a = eta.dot(&a);
                let variance = 0.5 * eta.dot(&(&b * eta));
                let quotients: Vec<f64> = states
                    .iter()
                    .zip(&inner)
                    .map(|(&(_, gamma), c)| (-gamma * eta_a + variance + eta.dot(c)) / eps)
                    .collect();
                let (quotient, se, _) = mean_and_se(&quotients);
                let se = se.unwrap_or(0.0);
                entries.push(PerturbationEntry {
                    t,
                    eta_index,
                    eps,
                    quotient,
                    std_error: se,
                    variance_term: variance / eps,
                    margin: quotient + 3.0 * se + cfg.c_slack * eps,
                });
            }
        }
    }
    let smallest = cfg.eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_margin = entries
        .iter()
        .filter(|e| e.eps == smallest)
        .map(|e| e.margin)
        .fold(f64::INFINITY, f64::min);
    Ok(PerturbationResult { passed: worst_margin >= 0.0, entries, worst_margin })
}

/// Settings for the finite-population check.
#[derive(Debug, Clone, PartialEq)]
pub struct NPlayerConfig {
    pub n_list: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Discretization allowance added to `std / sqrt(N)` in the bound.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NPlayerResult {
    /// `(N, median D_N)`.
    pub medians: Vec<(usize, f64)>,
    /// Median `D` of the smallest `N` over that of the largest.
    pub ratio: f64,
    /// `sqrt(N_max / N_min)`.
    pub expected_ratio: f64,
    pub ratio_ok: bool,
    /// `sup_t std(X(t))` estimated from the largest population.
    pub population_std: f64,
    pub bound: f64,
    pub bound_ok: bool,
}

impl NPlayerResult {
    pub fn passed(&self) -> bool {
        self.ratio_ok && self.bound_ok
    }
}

/// Simulates `n` agents applying the mean-field feedback allocation to their
/// own wealth; returns `(sup_t |mean X - m(t)|, sup_t std X(t))`.
fn simulate_population(
    sol: &PdeSolution,
    m: &MeanFieldCurve,
    dm: &DerivedMarket,
    xi: &InitialDistribution,
    n: usize,
    seed: u64,
    stream_base: u64,
) -> Result<(f64, f64)> {
    let g = &sol.grid;
    let rates: Vec<f64> = (0..g.nt).map(|i| dm.rate(g.t(i))).collect();
    let lam_norm: Vec<f64> = sol.lambda_sq.iter().map(|v| v.sqrt()).collect();
    let paths: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut rng = path_rng(seed, stream_base + a as u64);
            let mut wealth = xi.sample(&mut rng);
            let mut out = Vec::with_capacity(g.nt);
            out.push(wealth);
            for i in 0..g.nt - 1 {
                let dt = g.t(i + 1) - g.t(i);
                let p0 = sol.p0[i];
                let x = sol.invert_row(i, p0 * wealth)?;
                let gamma = gamma_eps_at(wealth, sol.m_used.values()[i], &sol.prefs, &sol.kernel);
                // pi^T theta = c |lambda|^2 and pi^T sigma dW = c lambda^T dW.
                let c = gamma * sol.ux_at_row(i, x) / p0;
                let z: f64 = StandardNormal.sample(&mut rng);
                wealth += (rates[i] * wealth + c * sol.lambda_sq[i]) * dt + c * lam_norm[i] * dt.sqrt() * z;
                out.push(wealth);
            }
            Ok(out)
        })
        .collect();
    let paths: Vec<Vec<f64>> = paths.into_iter().collect::<Result<_>>()?;
    let mut sup_dev = 0.0_f64;
    let mut sup_std = 0.0_f64;
    for i in 0..g.nt {
        let col: Vec<f64> = paths.iter().map(|p| p[i]).collect();
        let (mean, _, sd) = mean_and_se(&col);
        sup_dev = sup_dev.max((mean - m.at(g.t(i))).abs());
        sup_std = sup_std.max(sd.unwrap_or(0.0));
    }
    Ok((sup_dev, sup_std))
}

/// Finite-population check: `N` independent agents use the mean-field
/// feedback with the benchmark frozen at `m`; their empirical mean should
/// approach `m` at rate `N^{-1/2}`.
pub fn nplayer_validation(
    record: &EpsilonRecord,
    dm: &DerivedMarket,
    xi: &InitialDistribution,
    cfg: &NPlayerConfig,
) -> Result<NPlayerResult> {
    if cfg.n_list.len() < 2 || cfg.replications == 0 {
        return Err(Error::InvalidInput("need at least two population sizes and one replication".into()));
    }
    let mut medians = Vec::new();
    let mut population_std = 0.0;
    let largest = *cfg.n_list.iter().max().expect("nonempty");
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let mut devs = Vec::with_capacity(cfg.replications);
        for rep in 0..cfg.replications {
            let base = ((ni as u64) << 52) | ((rep as u64) << 32);
            let (dev, sd) = simulate_population(&record.solution, &record.m, dm, xi, n, cfg.seed, base)?;
            devs.push(dev);
            if n == largest && rep == 0 {
                population_std = sd;
            }
        }
        devs.sort_by(f64::total_cmp);
        let median = if devs.len() % 2 == 1 {
            devs[devs.len() / 2]
        } else {
            0.5 * (devs[devs.len() / 2 - 1] + devs[devs.len() / 2])
        };
        medians.push((n, median));
    }
    let (n_min, d_min) = *medians.iter().min_by_key(|p| p.0).expect("nonempty");
    let (n_max, d_max) = *medians.iter().max_by_key(|p| p.0).expect("nonempty");
    let ratio = d_min / d_max;
    let expected_ratio = (n_max as f64 / n_min as f64).sqrt();
    let ratio_ok = ratio >= expected_ratio / 2.0 && ratio <= expected_ratio * 2.0;
    let bound = 5.0 * (population_std / (n_max as f64).sqrt() + cfg.slack);
    Ok(NPlayerResult {
        medians,
        ratio,
        expected_ratio,
        ratio_ok,
        population_std,
        bound,
        bound_ok: d_max <= bound,
    })
}

/// Drift added to the auxiliary paths in the martingale negative control.
pub const CONTROL_DRIFT_BIAS: f64 = 0.01;

/// Which parts of the battery to run and at what size.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryOptions {
    pub seed: u64,
    pub mc_paths: usize,
    pub mc_probes: usize,
    pub martingale_stride: usize,
    /// Test hook forwarded to the martingale simulation.
    pub drift_bias: f64,
    /// Also run the martingale test on biased paths and require it to fail.
    pub martingale_control: bool,
    pub perturbation: Option<PerturbationConfig>,
    pub nplayer: Option<NPlayerConfig>,
}

impl BatteryOptions {
    pub fn desk(dm: &DerivedMarket, prefs: &Preferences, seed: u64) -> Self {
        Self {
            seed,
            mc_paths: 100_000,
            mc_probes: 11,
            martingale_stride: 40,
            drift_bias: 0.0,
            martingale_control: true,
            perturbation: Some(PerturbationConfig {
                times: vec![0.25, 0.5, 0.75],
                etas: perturbation_directions(dm.num_assets(), 16, seed),
                eps_list: vec![1e-2, 3e-3, 1e-3],
                n_outer: 2_000,
                n_inner: 200,
                substeps: 20,
                seed,
                c_slack: default_c_slack(dm, prefs),
            }),
            nplayer: Some(NPlayerConfig { n_list: vec![100, 1_000, 10_000], replications: 20, seed, slack: 4e-4 }),
        }
    }
}

/// Runs the checks that apply to a stored equilibrium.
pub fn run_battery(
    eq: &EquilibriumSolution,
    dm: &DerivedMarket,
    prefs: &Preferences,
    xi: &InitialDistribution,
    opts: &BatteryOptions,
) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let rec = eq.final_record();
    let sol = &rec.solution;
    let g = &sol.grid;
    report.meta("seed", opts.seed);
    report.meta("nt", g.nt);
    report.meta("nx", g.nx);
    report.meta("epsilon", rec.epsilon);

    if prefs.is_constant() {
        let oracle = constant_gamma_oracle(dm, prefs.gamma1, g, xi.mean());
        report.push(Check::at_most(
            "constant_u_oracle",
            CheckKind::Oracle,
            max_node_error(sol, &oracle),
            1e-6,
            "max node error against the affine solution",
        ));
        report.push(Check::at_most(
            "constant_m_oracle",
            CheckKind::Oracle,
            rec.m.sup_distance(&oracle.m),
            2e-3,
            "sup error against the mean ODE solution",
        ));
        let iterations = eq.records.iter().map(|r| r.iterations).max().unwrap_or(0);
        report.push(Check::at_most(
            "constant_iterations",
            CheckKind::Property,
            iterations as f64,
            2.0,
            "largest number of map evaluations over the schedule",
        ));
        let spread = eq
            .records
            .iter()
            .map(|r| r.m.sup_distance(&rec.m))
            .fold(0.0, f64::max);
        report.push(Check::at_most(
            "constant_width_invariance",
            CheckKind::Property,
            spread,
            1e-8,
            "sup distance between mean curves across widths",
        ));
    }

    let inv = &rec.invariants;
    report.push(Check::at_most(
        "cone_bound",
        CheckKind::Property,
        inv.cone_excess,
        inv.cone_tol,
        "max |u - x| - M (T - t)",
    ));
    report.push(Check::flag("ux_positive", CheckKind::Property, inv.ux_positive(), inv.ux_min, 0.0, "min u_x > 0"));
    report.push(Check::at_most("ux_cap", CheckKind::Property, inv.ux_max, inv.m1_cap, "max u_x"));
    report.push(Check::at_most(
        "monotone_slices",
        CheckKind::Property,
        inv.non_monotone_slices as f64,
        0.0,
        "time slices that are not strictly increasing",
    ));
    report.push(Check::at_most(
        "boundary_residual",
        CheckKind::Property,
        rec.boundary.max_relative_residual(),
        1e-9,
        "max |u(t, b) - R| / (1 + |R|)",
    ));
    let n = rec.boundary.len();
    report.push(Check::at_most(
        "terminal_boundary",
        CheckKind::Property,
        (rec.boundary.b[n - 1] - rec.m.values()[rec.m.len() - 1]).abs(),
        1e-9,
        "|b(T) - m(T)|",
    ));
    report.meta("boundary_slope", rec.boundary.difference_quotient());
    report.meta("ux_min", inv.ux_min);
    report.meta("ux_max", inv.ux_max);
    if !prefs.is_constant() {
        let ff = far_field_check(rec, dm, &[0.0, 0.25, 0.5, 0.75]);
        report.push(Check::at_most(
            "far_field",
            CheckKind::Property,
            ff.max_error,
            1e-5,
            format!("affine match at b +- 2 eps P_max; coefficient exact there: {}", ff.coefficient_exact),
        ));
        report.push(Check::flag(
            "layer_resolution",
            CheckKind::Property,
            inv.layer_resolved(),
            inv.layer_cells,
            crate::pde::MIN_LAYER_CELLS,
            "grid cells across the transition layer",
        ));
    }

    report.push(Check::at_most(
        "fixed_point_residual",
        CheckKind::Property,
        rec.residual,
        eq.tol,
        format!("after {} iterations", rec.iterations),
    ));
    let k = &rec.membership;
    report.push(Check::flag(
        "invariant_set",
        CheckKind::Property,
        k.passed(),
        k.lipschitz,
        1.1 * k.c5,
        format!("|m(0) - E xi| = {:.3e}, sup |m| = {:.4} (C4 = {:.4})", k.initial_error, k.sup_norm, k.c4),
    ));
    if eq.continuation_diffs.len() >= 2 {
        let first = eq.continuation_diffs[0];
        let last = *eq.continuation_diffs.last().expect("nonempty");
        report.push(Check::at_most("continuation_m", CheckKind::Property, last, first, "final vs first successive difference"));
        let first = eq.boundary_diffs[0];
        let last = *eq.boundary_diffs.last().expect("nonempty");
        report.push(Check::at_most("continuation_b", CheckKind::Property, last, first, "final vs first successive difference"));
    }

    let clock = std::time::Instant::now();
    let probes = monte_carlo_consistency(rec, dm, xi, opts.mc_paths, opts.seed, opts.mc_probes)?;
    let worst = probes
        .iter()
        .map(|p| (p.mc_mean - p.m).abs() / p.tolerance)
        .fold(0.0, f64::max);
    report.push(Check::at_most(
        "monte_carlo_mean",
        CheckKind::Statistical,
        worst,
        1.0,
        format!("max |mc - m| / (3 SE + 5 dx^2) over {} probes", probes.len()),
    ));
    report.meta("runtime.monte_carlo_mean", clock.elapsed().as_secs_f64());

    let clock = std::time::Instant::now();
    let stride = opts.martingale_stride;
    let mut mopts = SimOptions::new(opts.mc_paths, opts.seed.wrapping_add(1)).with_stride(stride);
    mopts.drift_bias = opts.drift_bias;
    let mut bundle = simulate_aux_paths(sol, xi, dm, &mopts)?;
    lift_paths(&mut bundle, sol, dm, &rec.m);
    let mt = martingale_test(&bundle, sol)?;
    report.push(Check::flag(
        "martingale",
        CheckKind::Statistical,
        mt.passed,
        mt.worst_z(),
        3.0,
        format!("{} intervals plus the full horizon", mt.intervals.len()),
    ));
    report.meta("runtime.martingale", clock.elapsed().as_secs_f64());
    if opts.drift_bias != 0.0 {
        report.meta("drift_bias", opts.drift_bias);
    }
    if opts.martingale_control {
        let mut copts = SimOptions::new(opts.mc_paths, opts.seed.wrapping_add(2)).with_stride(stride);
        copts.drift_bias = CONTROL_DRIFT_BIAS;
        let mut biased = simulate_aux_paths(sol, xi, dm, &copts)?;
        lift_paths(&mut biased, sol, dm, &rec.m);
        let ct = martingale_test(&biased, sol)?;
        report.push(Check::flag(
            "martingale_control",
            CheckKind::Control,
            !ct.passed,
            ct.worst_z(),
            3.0,
            format!("drift bias {CONTROL_DRIFT_BIAS} must be detected"),
        ));
    }

    if let Some(pcfg) = &opts.perturbation {
        let clock = std::time::Instant::now();
        let pr = perturbation_test(rec, dm, xi, pcfg)?;
        report.push(Check::flag(
            "first_order_condition",
            CheckKind::Statistical,
            pr.passed,
            pr.worst_margin,
            0.0,
            format!("{} directions at {} times", pcfg.etas.len(), pcfg.times.len()),
        ));
        report.meta("runtime.first_order_condition", clock.elapsed().as_secs_f64());
    }
    if let Some(ncfg) = &opts.nplayer {
        let clock = std::time::Instant::now();
        let np = nplayer_validation(rec, dm, xi, ncfg)?;
        report.push(Check::flag(
            "nplayer_rate",
            CheckKind::Statistical,
            np.ratio_ok,
            np.ratio,
            np.expected_ratio,
            "median D ratio between smallest and largest population",
        ));
        let d_max = np.medians.iter().max_by_key(|p| p.0).expect("nonempty").1;
        report.push(Check::at_most("nplayer_bound", CheckKind::Statistical, d_max, np.bound, "largest population"));
        report.meta("runtime.nplayer", clock.elapsed().as_secs_f64());
    }
    Ok(report)
}
