//! Euler-Maruyama paths of the auxiliary process and their lift to wealth,
//! adjoint processes and the equilibrium allocation.
//!
//! Path `i` draws all of its randomness from its own ChaCha stream keyed by
//! `(seed, i)`, so bundles do not depend on how paths are split across
//! worker threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DerivedMarket, InitialDistribution, MeanFieldCurve};
use crate::mollify::gamma_eps_at;
use crate::pde::PdeSolution;

/// Random stream for path `index` under `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// One Gaussian per step scaled by `|lambda(t)|`; exact in law for `x`.
    Scalar,
    /// `d` Gaussians per step combined as `lambda(t)^T dW`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// States are stored every `record_stride` grid steps; it must divide `nt - 1`.
    pub record_stride: usize,
    pub noise: NoiseMode,
    /// Test hook: replaces every Gaussian draw by 0.
    pub zero_noise: bool,
    /// Test hook: adds `drift_bias * dt` to every increment of `x`.
    pub drift_bias: f64,
}

impl SimOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            record_stride: 1,
            noise: NoiseMode::Scalar,
            zero_noise: false,
            drift_bias: 0.0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }
}

/// Simulated paths. Per-path arrays are path-major: entry `(path, r)` of a
/// scalar field sits at `path * n_records + r`, and component `c` of a vector
/// field at `(path * n_records + r) * d + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n_paths: usize,
    pub num_assets: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    /// Grid rows at which states are recorded.
    pub rows: Vec<usize>,
    pub times: Vec<f64>,
    /// Sampled initial wealth per path.
    pub xi: Vec<f64>,
    pub x: Vec<f64>,
    /// `X = u(t, x) / P0(t)`.
    pub wealth: Vec<f64>,
    /// `P = x - u(t, x)`.
    pub adjoint_p: Vec<f64>,
    /// `Q = gamma_eps (1 - u_x) lambda`.
    pub adjoint_q: Vec<f64>,
    /// `(gamma_eps u_x / P0) (sigma^T)^{-1} lambda`.
    pub pi_bar: Vec<f64>,
    /// `Z = Q + P0 sigma^T pi_bar`.
    pub z_rep: Vec<f64>,
    pub lifted: bool,
}

impl PathBundle {
    pub fn n_records(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    fn idx(&self, path: usize, r: usize) -> usize {
        path * self.rows.len() + r
    }

    pub fn x_at(&self, path: usize, r: usize) -> f64 {
        self.x[self.idx(path, r)]
    }

    pub fn wealth_at(&self, path: usize, r: usize) -> f64 {
        self.wealth[self.idx(path, r)]
    }

    pub fn adjoint_p_at(&self, path: usize, r: usize) -> f64 {
        self.adjoint_p[self.idx(path, r)]
    }

    pub fn q_at(&self, path: usize, r: usize) -> &[f64] {
        let k = self.idx(path, r) * self.num_assets;
        &self.adjoint_q[k..k + self.num_assets]
    }

    pub fn pi_at(&self, path: usize, r: usize) -> &[f64] {
        let k = self.idx(path, r) * self.num_assets;
        &self.pi_bar[k..k + self.num_assets]
    }

    pub fn z_at(&self, path: usize, r: usize) -> &[f64] {
        let k = self.idx(path, r) * self.num_assets;
        &self.z_rep[k..k + self.num_assets]
    }

    /// Column of a scalar field at record `r`.
    pub fn column(&self, field: &[f64], r: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| field[self.idx(p, r)]).collect()
    }
}

/// Per-row market quantities used by the time stepper.
struct RowData {
    dt: Vec<f64>,
    lambda_norm: Vec<f64>,
    lambda: Vec<DVector<f64>>,
}

impl RowData {
    fn new(sol: &PdeSolution, dm: &DerivedMarket) -> Self {
        let g = &sol.grid;
        Self {
            dt: (0..g.nt - 1).map(|i| g.t(i + 1) - g.t(i)).collect(),
            lambda_norm: sol.lambda_sq.iter().map(|v| v.sqrt()).collect(),
            lambda: (0..g.nt).map(|i| dm.lambda(g.t(i))).collect(),
        }
    }
}

/// Marches one path from grid row `start_row` at state `x0`, calling
/// `record(row, x)` at every recorded row (including the start).
#[allow(clippy::too_many_arguments)]
fn march<R: rand::Rng>(
    sol: &PdeSolution,
    rows: &RowData,
    start_row: usize,
    x0: f64,
    rng: &mut R,
    opts: &SimOptions,
    path: usize,
    mut record: impl FnMut(usize, f64),
) -> Result<()> {
    let g = &sol.grid;
    let mut x = x0;
    record(start_row, x);
    let d = rows.lambda[0].len();
    for i in start_row..g.nt - 1 {
        let dt = rows.dt[i];
        let gamma = sol.gamma_at_row(i, x);
        let dw_coeff = match opts.noise {
            NoiseMode::Scalar => {
                let z: f64 = StandardNormal.sample(rng);
                let z = if opts.zero_noise { 0.0 } else { z };
                rows.lambda_norm[i] * z
            }
            NoiseMode::Full => {
                let mut s = 0.0;
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    let z = if opts.zero_noise { 0.0 } else { z };
                    s += rows.lambda[i][c] * z;
                }
                s
            }
        };
        x += gamma * dt.sqrt() * dw_coeff + opts.drift_bias * dt;
        if !sol.in_domain(x) {
            return Err(Error::PathOutOfRange { path, t: g.t(i + 1), x });
        }
        if (i + 1 - start_row) % opts.record_stride == 0 {
            record(i + 1, x);
        }
    }
    Ok(())
}

fn check_options(sol: &PdeSolution, opts: &SimOptions, start_row: usize) -> Result<Vec<usize>> {
    let steps = sol.grid.nt - 1 - start_row;
    if opts.n_paths == 0 {
        return Err(Error::InvalidInput("at least one path is required".into()));
    }
    if opts.record_stride == 0 || steps % opts.record_stride != 0 {
        return Err(Error::InvalidInput(format!(
            "record stride {} must divide the {steps} remaining time steps",
            opts.record_stride
        )));
    }
    Ok((0..=steps / opts.record_stride).map(|k| start_row + k * opts.record_stride).collect())
}

fn empty_bundle(sol: &PdeSolution, opts: &SimOptions, rows: Vec<usize>, d: usize) -> PathBundle {
    let times = rows.iter().map(|&i| sol.grid.t(i)).collect();
    let n = opts.n_paths * rows.len();
    PathBundle {
        n_paths: opts.n_paths,
        num_assets: d,
        seed: opts.seed,
        noise: opts.noise,
        rows,
        times,
        xi: vec![0.0; opts.n_paths],
        x: vec![0.0; n],
        wealth: Vec::new(),
        adjoint_p: Vec::new(),
        adjoint_q: Vec::new(),
        pi_bar: Vec::new(),
        z_rep: Vec::new(),
        lifted: false,
    }
}

/// Simulates the auxiliary process from `x(0) = v(0, P0(0) xi)` with `xi`
/// drawn from the initial law.
pub fn simulate_aux_paths(
    sol: &PdeSolution,
    xi: &InitialDistribution,
    dm: &DerivedMarket,
    opts: &SimOptions,
) -> Result<PathBundle> {
    let rows_rec = check_options(sol, opts, 0)?;
    let data = RowData::new(sol, dm);
    let n_rec = rows_rec.len();
    let p00 = sol.p0[0];
    let per_path: Vec<Result<(f64, Vec<f64>)>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(opts.seed, path as u64);
            let draw = xi.sample(&mut rng);
            let x0 = sol.invert_row(0, p00 * draw)?;
            let mut out = Vec::with_capacity(n_rec);
            march(sol, &data, 0, x0, &mut rng, opts, path, |_, x| out.push(x))?;
            Ok((draw, out))
        })
        .collect();
    let mut bundle = empty_bundle(sol, opts, rows_rec, dm.num_assets());
    for (path, res) in per_path.into_iter().enumerate() {
        let (draw, xs) = res?;
        bundle.xi[path] = draw;
        bundle.x[path * n_rec..(path + 1) * n_rec].copy_from_slice(&xs);
    }
    Ok(bundle)
}

/// Simulates paths that all start from grid row `start_row`, path `k`
/// starting at `starts[k]` and drawing from stream `stream_base + k`.
pub fn simulate_from_states(
    sol: &PdeSolution,
    dm: &DerivedMarket,
    start_row: usize,
    starts: &[f64],
    stream_base: u64,
    opts: &SimOptions,
) -> Result<PathBundle> {
    let opts = SimOptions { n_paths: starts.len(), ..*opts };
    let rows_rec = check_options(sol, &opts, start_row)?;
    let data = RowData::new(sol, dm);
    let n_rec = rows_rec.len();
    let per_path: Vec<Result<Vec<f64>>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &x0)| {
            let mut rng = path_rng(opts.seed, stream_base + k as u64);
            let mut out = Vec::with_capacity(n_rec);
            march(sol, &data, start_row, x0, &mut rng, &opts, k, |_, x| out.push(x))?;
            Ok(out)
        })
        .collect();
    let mut bundle = empty_bundle(sol, &opts, rows_rec, dm.num_assets());
    for (k, res) in per_path.into_iter().enumerate() {
        bundle.x[k * n_rec..(k + 1) * n_rec].copy_from_slice(&res?);
        bundle.xi[k] = sol.u_at_row(start_row, starts[k]) / sol.p0[start_row];
    }
    Ok(bundle)
}

/// Fills wealth, adjoint and allocation fields from the simulated `x`.
pub fn lift_paths(bundle: &mut PathBundle, sol: &PdeSolution, dm: &DerivedMarket, m: &MeanFieldCurve) {
    let d = bundle.num_assets;
    let n_rec = bundle.n_records();
    struct RecordRow {
        p0: f64,
        m_t: f64,
        lambda: DVector<f64>,
        direction: DVector<f64>,
        sigma_t: DMatrix<f64>,
    }
    let rec: Vec<RecordRow> = bundle
        .rows
        .iter()
        .map(|&i| {
            let t = sol.grid.t(i);
            RecordRow {
                p0: sol.p0[i],
                m_t: m.at(t),
                lambda: dm.lambda(t),
                direction: dm.allocation_direction(t),
                sigma_t: dm.sigma(t).transpose(),
            }
        })
        .collect();
    let per_path: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut wealth = Vec::with_capacity(n_rec);
            let mut adj_p = Vec::with_capacity(n_rec);
            let mut q = Vec::with_capacity(n_rec * d);
            let mut pi = Vec::with_capacity(n_rec * d);
            let mut z = Vec::with_capacity(n_rec * d);
            for (r, row) in rec.iter().enumerate() {
                let i = bundle.rows[r];
                let x = bundle.x[path * n_rec + r];
                let u = sol.u_at_row(i, x);
                let ux = sol.ux_at_row(i, x);
                let gamma = gamma_eps_at(u / row.p0, row.m_t, &sol.prefs, &sol.kernel);
                wealth.push(u / row.p0);
                adj_p.push(x - u);
                let qv = &row.lambda * (gamma * (1.0 - ux));
                let pv = &row.direction * (gamma * ux / row.p0);
                let zv = &qv + &row.sigma_t * &pv * row.p0;
                q.extend(qv.iter());
                pi.extend(pv.iter());
                z.extend(zv.iter());
            }
            (wealth, adj_p, q, pi, z)
        })
        .collect();
    bundle.wealth = Vec::with_capacity(bundle.n_paths * n_rec);
    bundle.adjoint_p = Vec::with_capacity(bundle.n_paths * n_rec);
    bundle.adjoint_q = Vec::with_capacity(bundle.n_paths * n_rec * d);
    bundle.pi_bar = Vec::with_capacity(bundle.n_paths * n_rec * d);
    bundle.z_rep = Vec::with_capacity(bundle.n_paths * n_rec * d);
    for (w, p, q, pi, z) in per_path {
        bundle.wealth.extend(w);
        bundle.adjoint_p.extend(p);
        bundle.adjoint_q.extend(q);
        bundle.pi_bar.extend(pi);
        bundle.z_rep.extend(z);
    }
    bundle.lifted = true;
}

/// Sample mean of wealth per record time, with standard errors when at
/// least two paths exist.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimate {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    /// `None` for a single path.
    pub std_error: Option<Vec<f64>>,
    pub std_dev: Option<Vec<f64>>,
}

impl MeanEstimate {
    /// The mean as a curve; record times are uniform by construction.
    pub fn curve(&self) -> Result<MeanFieldCurve> {
        MeanFieldCurve::new(*self.times.last().expect("nonempty"), self.mean.clone())
    }
}

/// Mean and standard error of a sample, summed in path order.
pub fn mean_and_se(values: &[f64]) -> (f64, Option<f64>, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()), Some(var.sqrt()))
}

pub fn estimate_mean_wealth(bundle: &PathBundle) -> Result<MeanEstimate> {
    if !bundle.lifted {
        return Err(Error::InvalidInput("bundle must be lifted before estimating wealth".into()));
    }
    let n_rec = bundle.n_records();
    let mut mean = Vec::with_capacity(n_rec);
    let mut se = Vec::with_capacity(n_rec);
    let mut sd = Vec::with_capacity(n_rec);
    for r in 0..n_rec {
        let (m, s, d) = mean_and_se(&bundle.column(&bundle.wealth, r));
        mean.push(m);
        se.push(s);
        sd.push(d);
    }
    let multi = bundle.n_paths >= 2;
    Ok(MeanEstimate {
        times: bundle.times.clone(),
        mean,
        std_error: multi.then(|| se.into_iter().map(|v| v.unwrap_or(0.0)).collect()),
        std_dev: multi.then(|| sd.into_iter().map(|v| v.unwrap_or(0.0)).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_market, MarketModel, Preferences};
    use crate::mollify::MollifierKernel;
    use crate::pde::{solve_regularized_pde, SchemeOptions, SpaceTimeGrid};

    fn constant_setup(nt: usize) -> (DerivedMarket, MeanFieldCurve, PdeSolution) {
        let dm = derive_market(&MarketModel::scalar(1.0, 0.0, 0.04, 0.2).unwrap()).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.1).unwrap();
        let g = SpaceTimeGrid::new(1.0, nt, 401, -2.0, 4.0).unwrap();
        let p = Preferences::constant(1.0).unwrap();
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        (dm, m, sol)
    }

    #[test]
    fn single_step_increment_law() {
        let (dm, _, sol) = constant_setup(2);
        let xi = InitialDistribution::uniform(0.9, 1.1).unwrap();
        let b = simulate_aux_paths(&sol, &xi, &dm, &SimOptions::new(100_000, 7)).unwrap();
        let incr: Vec<f64> = (0..b.n_paths).map(|p| b.x_at(p, 1) - b.x_at(p, 0)).collect();
        let (mean, se, sd) = mean_and_se(&incr);
        let var = sd.unwrap().powi(2);
        assert!((var / 0.04 - 1.0).abs() < 0.03, "var {var}");
        assert!(mean.abs() < 3.0 * se.unwrap());
    }

    #[test]
    fn zero_noise_keeps_paths_fixed() {
        let (dm, _, sol) = constant_setup(41);
        let xi = InitialDistribution::uniform(0.9, 1.1).unwrap();
        let opts = SimOptions { zero_noise: true, ..SimOptions::new(50, 1) };
        let b = simulate_aux_paths(&sol, &xi, &dm, &opts).unwrap();
        for p in 0..b.n_paths {
            for r in 0..b.n_records() {
                assert_eq!(b.x_at(p, r), b.x_at(p, 0));
            }
        }
    }

    #[test]
    fn martingale_and_lift_identities() {
        let (dm, m, sol) = constant_setup(101);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let opts = SimOptions::new(100_000, 11).with_stride(10);
        let mut b = simulate_aux_paths(&sol, &xi, &dm, &opts).unwrap();
        let last = b.n_records() - 1;
        let incr: Vec<f64> = (0..b.n_paths).map(|p| b.x_at(p, last) - b.x_at(p, 0)).collect();
        let (mean, se, _) = mean_and_se(&incr);
        assert!(mean.abs() < 3.0 * se.unwrap());

        lift_paths(&mut b, &sol, &dm, &m);
        for p in 0..b.n_paths {
            assert_eq!(b.adjoint_p_at(p, last), 0.0);
            assert!((b.wealth_at(p, 0) - b.xi[p]).abs() < 1e-9);
            assert!(b.q_at(p, 5)[0].abs() < 1e-8);
            assert!((b.pi_at(p, 5)[0] - 1.0).abs() < 1e-8);
            assert!((b.z_at(p, 3)[0] - 0.2).abs() < 1e-12);
        }
        let est = estimate_mean_wealth(&b).unwrap();
        let se = est.std_error.as_ref().unwrap();
        let xi_mean = b.xi.iter().sum::<f64>() / b.n_paths as f64;
        for (k, t) in est.times.iter().enumerate() {
            assert!((est.mean[k] - (1.0 + 0.04 * t)).abs() < 3.0 * se[k] + 1e-9, "t={t}");
            // X = x - 0.04 (1 - t) pathwise, so only the increments of x remain.
            let dx_mean = (0..b.n_paths).map(|p| b.x_at(p, k) - b.x_at(p, 0)).sum::<f64>() / b.n_paths as f64;
            assert!((est.mean[k] - (xi_mean + 0.04 * t + dx_mean)).abs() < 1e-9);
        }
    }

    #[test]
    fn single_path_has_no_standard_error() {
        let (dm, m, sol) = constant_setup(11);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let mut b = simulate_aux_paths(&sol, &xi, &dm, &SimOptions::new(1, 3)).unwrap();
        lift_paths(&mut b, &sol, &dm, &m);
        let est = estimate_mean_wealth(&b).unwrap();
        assert!(est.std_error.is_none());
        assert_eq!(est.mean[4], b.wealth_at(0, 4));
    }

    #[test]
    fn standard_error_scales_with_path_count() {
        let (dm, m, sol) = constant_setup(21);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let median_se = |n: usize| {
            let mut b = simulate_aux_paths(&sol, &xi, &dm, &SimOptions::new(n, 5)).unwrap();
            lift_paths(&mut b, &sol, &dm, &m);
            let mut se = estimate_mean_wealth(&b).unwrap().std_error.unwrap();
            se.sort_by(f64::total_cmp);
            se[se.len() / 2]
        };
        let ratio = median_se(40_000) / median_se(20_000);
        assert!((ratio * 2f64.sqrt() - 1.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn full_noise_mode_has_same_increment_variance() {
        let dm = derive_market(
            &MarketModel::constant(
                1.0,
                0.0,
                DVector::from_vec(vec![0.05, 0.03]),
                DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.05, 0.25]),
            )
            .unwrap(),
        )
        .unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.1).unwrap();
        let g = SpaceTimeGrid::new(1.0, 2, 401, -2.0, 4.0).unwrap();
        let p = Preferences::constant(1.5).unwrap();
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        let xi = InitialDistribution::uniform(0.9, 1.1).unwrap();
        let opts = SimOptions { noise: NoiseMode::Full, ..SimOptions::new(100_000, 9) };
        let b = simulate_aux_paths(&sol, &xi, &dm, &opts).unwrap();
        let incr: Vec<f64> = (0..b.n_paths).map(|p| b.x_at(p, 1) - b.x_at(p, 0)).collect();
        let var = mean_and_se(&incr).2.unwrap().powi(2);
        let expected = 1.5f64.powi(2) * dm.lambda_norm_sq(0.0);
        assert!((var / expected - 1.0).abs() < 0.03);
    }

    #[test]
    fn bundles_do_not_depend_on_thread_count() {
        let (dm, _, sol) = constant_setup(41);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let opts = SimOptions::new(2_000, 42).with_stride(4);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_aux_paths(&sol, &xi, &dm, &opts).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.x.len(), four.x.len());
        assert!(one.x.iter().zip(&four.x).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn invalid_options_are_rejected() {
        let (dm, _, sol) = constant_setup(41);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        assert!(simulate_aux_paths(&sol, &xi, &dm, &SimOptions::new(0, 1)).is_err());
        assert!(simulate_aux_paths(&sol, &xi, &dm, &SimOptions::new(10, 1).with_stride(3)).is_err());
    }
}
