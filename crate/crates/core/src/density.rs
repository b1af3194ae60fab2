//! Deterministic law of the auxiliary process.
//!
//! The auxiliary process is a driftless diffusion with scalar magnitude
//! `a(t, x) = gamma_eps(t, u(t, x) / P0(t)) |lambda(t)|`, so its density
//! solves `p_t = 1/2 (a^2 p)_xx`. The discretization differences the flux
//! `a^2 p` at the nodes, which conserves mass and the first moment exactly
//! away from the absorbing boundaries.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{DerivedMarket, InitialDistribution, MeanFieldCurve};
use crate::pde::PdeSolution;
use crate::tridiag::solve_tridiagonal;

/// Allowed negative round-off before clipping.
const NEGATIVE_TOL: f64 = 1e-12;
/// Allowed cumulative mass drift.
const MASS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEvolution {
    /// `p[[i, j]]` is the density of `x(t_i)` at `x_j`.
    pub p: Array2<f64>,
    /// `|sum_j p[[i, j]] dx - 1|` per time row.
    pub mass_drift: Vec<f64>,
    pub dx: f64,
}

impl DensityEvolution {
    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.p.row(i)
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.mass_drift.iter().copied().fold(0.0, f64::max)
    }
}

/// Mass of a density row.
pub fn mass(p: &[f64], dx: f64) -> f64 {
    p.iter().sum::<f64>() * dx
}

/// `k`-th raw moment of a density row on `xs`.
pub fn moment(p: &[f64], xs: &[f64], dx: f64, k: i32) -> f64 {
    p.iter().zip(xs).map(|(p, x)| p * x.powi(k)).sum::<f64>() * dx
}

/// Pointwise pushforward density `f_xi(u(0, x) / P0(0)) u_x(0, x) / P0(0)`.
pub fn pushforward_pdf(sol: &PdeSolution, xi: &InitialDistribution, x: f64) -> f64 {
    let p00 = sol.p0[0];
    xi.pdf(sol.u_at_row(0, x) / p00) * sol.ux_at_row(0, x) / p00
}

/// Density of `x(0) = v(0, P0(0) xi)` on the grid nodes.
///
/// The probability of each grid cell under the pushforward is split between
/// its two end nodes so that the cell's conditional mean is preserved. With
/// `u(0, .)` linear inside each cell this makes both the mass and the mean
/// of `u(0, x(0)) / P0(0)` exact, whatever the shape of the initial law.
pub fn initial_aux_density(sol: &PdeSolution, xi: &InitialDistribution, dm: &DerivedMarket) -> Result<Vec<f64>> {
    let g = &sol.grid;
    let (nx, dx) = (g.nx, g.dx());
    let p00 = dm.p0(0.0);
    let (lo, hi) = xi.support();
    let (u_lo, u_hi) = (sol.u_at_row(0, g.x_lo), sol.u_at_row(0, g.x_hi));
    for y in [p00 * lo, p00 * hi] {
        if y < u_lo || y > u_hi {
            return Err(Error::OutOfRange { t: 0.0, y, lo: u_lo, hi: u_hi });
        }
    }
    let mut p = vec![0.0; nx];
    let mut ya = sol.u_at_row(0, g.x(0)) / p00;
    let mut fa = xi.cdf(ya);
    for k in 0..nx - 1 {
        let yb = sol.u_at_row(0, g.x(k + 1)) / p00;
        let fb = xi.cdf(yb);
        let w = (fb - fa).max(0.0);
        if w > 0.0 && yb > ya {
            let cy = xi.partial_mean(ya, yb) / w;
            let theta = ((cy - ya) / (yb - ya)).clamp(0.0, 1.0);
            p[k] += w * (1.0 - theta) / dx;
            p[k + 1] += w * theta / dx;
        }
        ya = yb;
        fa = fb;
    }
    let total = mass(&p, dx);
    if !(total > 0.0) {
        return Err(Error::MassLoss { t: 0.0, drift: 1.0 });
    }
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Squared diffusion magnitude `a^2` along grid row `i`.
fn diffusion_row(sol: &PdeSolution, i: usize, out: &mut [f64]) {
    let lam2 = sol.lambda_sq[i];
    for (j, a2) in out.iter_mut().enumerate() {
        let g = sol.gamma_at_row(i, sol.grid.x(j));
        *a2 = g * g * lam2;
    }
}

/// One implicit Euler step of `p_t = 1/2 (a2 p)_xx` with zero boundary
/// values. A zero step leaves `p` untouched.
pub fn diffuse_step(p: &mut [f64], a2: &[f64], dt: f64, dx: f64) {
    if dt == 0.0 {
        return;
    }
    let n = p.len();
    let c = 0.5 * dt / (dx * dx);
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = p.to_vec();
    rhs[0] = 0.0;
    rhs[n - 1] = 0.0;
    for j in 1..n - 1 {
        lower[j] = if j > 1 { -c * a2[j - 1] } else { 0.0 };
        diag[j] = 1.0 + 2.0 * c * a2[j];
        upper[j] = if j + 2 < n { -c * a2[j + 1] } else { 0.0 };
    }
    solve_tridiagonal(&lower, &diag, &upper, &rhs, p);
}

/// Evolves `p0` forward over the solution's time grid.
pub fn evolve_density(sol: &PdeSolution, p0: &[f64]) -> Result<DensityEvolution> {
    let g = &sol.grid;
    let (nt, nx, dx) = (g.nt, g.nx, g.dx());
    if p0.len() != nx {
        return Err(Error::InvalidInput(format!("density row has {} entries, grid has {nx}", p0.len())));
    }
    let mut p = Array2::zeros((nt, nx));
    let mut mass_drift = vec![0.0; nt];
    let mut current = p0.to_vec();
    mass_drift[0] = (mass(&current, dx) - 1.0).abs();
    p.row_mut(0).assign(&ndarray::ArrayView1::from(&current[..]));
    let mut a2 = vec![0.0; nx];
    for i in 1..nt {
        diffusion_row(sol, i, &mut a2);
        diffuse_step(&mut current, &a2, g.t(i) - g.t(i - 1), dx);
        let t = g.t(i);
        let min = current.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -NEGATIVE_TOL {
            return Err(Error::NegativeDensity { t, min });
        }
        for v in &mut current {
            *v = v.max(0.0);
        }
        let drift = (mass(&current, dx) - 1.0).abs();
        if drift > MASS_TOL {
            return Err(Error::MassLoss { t, drift });
        }
        mass_drift[i] = drift;
        p.row_mut(i).assign(&ndarray::ArrayView1::from(&current[..]));
    }
    Ok(DensityEvolution { p, mass_drift, dx })
}

/// `m(t_i) = sum_j u(t_i, x_j) / P0(t_i) p(t_i, x_j) dx`.
pub fn mean_wealth_from_density(sol: &PdeSolution, de: &DensityEvolution) -> Result<MeanFieldCurve> {
    let g = &sol.grid;
    let values = (0..g.nt)
        .map(|i| {
            let row = de.p.row(i);
            let s: f64 = (0..g.nx).map(|j| sol.u_at_row(i, g.x(j)) * row[j]).sum();
            s * de.dx / sol.p0[i]
        })
        .collect();
    MeanFieldCurve::new(g.horizon, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_market, MarketModel, Preferences};
    use crate::mollify::MollifierKernel;
    use crate::pde::{solve_regularized_pde, SchemeOptions, SpaceTimeGrid};

    fn solve(prefs: Preferences, nt: usize, nx: usize) -> (DerivedMarket, PdeSolution) {
        let dm = derive_market(&MarketModel::scalar(1.0, 0.0, 0.04, 0.2).unwrap()).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.1).unwrap();
        let g = SpaceTimeGrid::new(1.0, nt, nx, -2.0, 4.0).unwrap();
        let sol = solve_regularized_pde(&dm, &prefs, &m, &k, &g, &SchemeOptions::default()).unwrap();
        (dm, sol)
    }

    #[test]
    fn constant_case_initial_density_is_shifted_uniform() {
        let (dm, sol) = solve(Preferences::constant(1.0).unwrap(), 101, 501);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let p = initial_aux_density(&sol, &xi, &dm).unwrap();
        let dx = sol.grid.dx();
        assert!((mass(&p, dx) - 1.0).abs() < 1e-10);
        for j in 0..sol.grid.nx {
            let x = sol.grid.x(j);
            if x > 0.54 + dx && x < 1.54 - dx {
                assert!((p[j] - 1.0).abs() < 1e-9, "x={x} p={}", p[j]);
            } else if x < 0.54 - dx || x > 1.54 + dx {
                assert_eq!(p[j], 0.0);
            }
            let pf = pushforward_pdf(&sol, &xi, x);
            if (x - 0.54).abs() > dx && (x - 1.54).abs() > dx {
                assert!((pf - p[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_map_keeps_initial_density() {
        let (dm, mut sol) = solve(Preferences::constant(1.0).unwrap(), 11, 401);
        let xs = sol.grid.xs();
        for j in 0..sol.grid.nx {
            sol.u[[0, j]] = xs[j];
            sol.ux[[0, j]] = 1.0;
        }
        let xi = InitialDistribution::truncated_normal(1.0, 0.2, 0.3, 1.7).unwrap();
        let p = initial_aux_density(&sol, &xi, &dm).unwrap();
        for j in 20..sol.grid.nx - 20 {
            let x = xs[j];
            if (x - 0.3).abs() > 0.02 && (x - 1.7).abs() > 0.02 {
                // Cell averages differ from point values by O(dx^2 f'').
                assert!((p[j] - xi.pdf(x)).abs() < 1e-3 * (1.0 + xi.pdf(x)), "x={x}");
            }
        }
    }

    #[test]
    fn heat_kernel_variance_and_moments() {
        let (dm, sol) = solve(Preferences::constant(1.0).unwrap(), 201, 801);
        let xi = InitialDistribution::uniform(0.99, 1.01).unwrap();
        let p0 = initial_aux_density(&sol, &xi, &dm).unwrap();
        let de = evolve_density(&sol, &p0).unwrap();
        let xs = sol.grid.xs();
        let dx = de.dx;
        let var = |i: usize| {
            let row: Vec<f64> = de.row(i).to_vec();
            moment(&row, &xs, dx, 2) - moment(&row, &xs, dx, 1).powi(2)
        };
        let v0 = var(0);
        let v1 = var(sol.grid.nt - 1);
        assert!(((v1 - v0) / 0.04 - 1.0).abs() < 0.02, "variance growth {}", v1 - v0);
        let first0 = moment(&p0, &xs, dx, 1);
        for i in 0..sol.grid.nt {
            let row: Vec<f64> = de.row(i).to_vec();
            assert!((moment(&row, &xs, dx, 1) - first0).abs() < 1e-6);
            assert!((mass(&row, dx) - 1.0).abs() < 1e-8);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn zero_step_is_noop() {
        let mut p = vec![0.0, 1.0, 2.0, 1.0, 0.0];
        let before = p.clone();
        diffuse_step(&mut p, &[1.0; 5], 0.0, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn constant_case_mean_wealth_grows_linearly() {
        let (dm, sol) = solve(Preferences::constant(1.0).unwrap(), 401, 401);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let p0 = initial_aux_density(&sol, &xi, &dm).unwrap();
        let de = evolve_density(&sol, &p0).unwrap();
        let m = mean_wealth_from_density(&sol, &de).unwrap();
        for (i, v) in m.values().iter().enumerate() {
            let t = sol.grid.t(i);
            assert!((v - (1.0 + 0.04 * t)).abs() < 2e-3, "t={t}");
        }
        assert!((m.values()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn piecewise_run_conserves_mass_and_first_moment() {
        let (dm, sol) = solve(Preferences::new(1.0, 2.0).unwrap(), 201, 501);
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let p0 = initial_aux_density(&sol, &xi, &dm).unwrap();
        let de = evolve_density(&sol, &p0).unwrap();
        assert!(de.max_mass_drift() < 1e-8);
        let xs = sol.grid.xs();
        let first0 = moment(&p0, &xs, de.dx, 1);
        for i in 0..sol.grid.nt {
            let row: Vec<f64> = de.row(i).to_vec();
            assert!((moment(&row, &xs, de.dx, 1) - first0).abs() < 1e-6);
        }
    }

    #[test]
    fn support_outside_grid_is_rejected() {
        let (dm, sol) = solve(Preferences::constant(1.0).unwrap(), 11, 101);
        let xi = InitialDistribution::uniform(2.0, 9.0).unwrap();
        assert!(matches!(initial_aux_density(&sol, &xi, &dm), Err(Error::OutOfRange { .. })));
    }
}
