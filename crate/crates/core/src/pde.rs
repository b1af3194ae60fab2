//! Backward solver for the regularized quasi-linear terminal-value problem
//!
//! ```text
//! u_t + D_eps(t, u) u_xx - V_eps(t, u) u_x = 0,   u(T, x) = x,
//! ```
//!
//! on a truncated interval with Dirichlet far-field data taken from the
//! constant-coefficient affine solutions. Each time step is a theta-scheme
//! whose coefficients are lagged by a Picard loop; steps that fail to settle
//! are retried on halved sub-steps.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{BoundConstants, DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences};
use crate::mollify::{gamma_eps_at, KernelKind, MollifierKernel};
use crate::tridiag::solve_tridiagonal;

/// Uniform space-time grid over `[0, T] x [x_lo, x_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    pub horizon: f64,
    pub nt: usize,
    pub nx: usize,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl SpaceTimeGrid {
    pub fn new(horizon: f64, nt: usize, nx: usize, x_lo: f64, x_hi: f64) -> Result<Self> {
        if nt < 2 || nx < 3 {
            return Err(Error::InvalidInput(format!("grid needs nt >= 2 and nx >= 3, got nt={nt} nx={nx}")));
        }
        if !(horizon > 0.0 && x_hi > x_lo && x_lo.is_finite() && x_hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid needs T > 0 and x_hi > x_lo, got T={horizon} [{x_lo}, {x_hi}]"
            )));
        }
        Ok(Self { horizon, nt, nx, x_lo, x_hi })
    }

    /// Smallest admissible margin around the discounted initial support:
    /// terminal cone `M T` plus six diffusion standard deviations.
    pub fn min_margin(dm: &DerivedMarket, prefs: &Preferences) -> f64 {
        let horizon = dm.horizon();
        dm.lambda_max.powi(2) * prefs.gamma2 * horizon + 6.0 * prefs.gamma2 * dm.lambda_max * horizon.sqrt()
    }

    /// Grid covering `P0(0) supp(xi)` widened by `margin_factor * min_margin`.
    pub fn for_problem(
        dm: &DerivedMarket,
        prefs: &Preferences,
        xi: &InitialDistribution,
        nt: usize,
        nx: usize,
        margin_factor: f64,
    ) -> Result<Self> {
        if !(margin_factor >= 1.0) {
            return Err(Error::InvalidInput(format!("domain margin factor must be >= 1, got {margin_factor}")));
        }
        let (lo, hi) = xi.support();
        let p00 = dm.p0(0.0);
        let margin = margin_factor * Self::min_margin(dm, prefs);
        Self::new(dm.horizon(), nt, nx, p00 * lo - margin, p00 * hi + margin)
    }

    /// Checks that the grid contains the discounted initial support plus the
    /// minimal margin.
    pub fn check_coverage(&self, dm: &DerivedMarket, prefs: &Preferences, xi: &InitialDistribution) -> Result<()> {
        let (lo, hi) = xi.support();
        let p00 = dm.p0(0.0);
        let margin = Self::min_margin(dm, prefs) * (1.0 - 1e-12);
        if self.x_lo > p00 * lo - margin || self.x_hi < p00 * hi + margin {
            return Err(Error::DomainTooSmall(format!(
                "[{}, {}] does not cover [{}, {}]",
                self.x_lo,
                self.x_hi,
                p00 * lo - margin,
                p00 * hi + margin
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.nt - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.nx - 1) as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i + 1 == self.nt {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.nx {
            self.x_hi
        } else {
            self.x_lo + j as f64 * self.dx()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }

    /// Cell index and weight of `x`, clamped to the grid.
    pub(crate) fn locate_x(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.x_lo) / self.dx()).clamp(0.0, (self.nx - 1) as f64);
        let j = (s.floor() as usize).min(self.nx - 2);
        (j, s - j as f64)
    }

    pub(crate) fn locate_t(&self, t: f64) -> (usize, f64) {
        crate::model::locate(self.horizon, self.nt, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advection {
    /// Second-order central difference.
    Central,
    /// First-order one-sided difference taken from the upwind side.
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeOptions {
    /// 1 is implicit Euler, 0.5 is Crank-Nicolson.
    pub theta: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    /// How many times a stubborn step may be split in half.
    pub max_halvings: u32,
    pub advection: Advection,
    /// Cone-bound tolerance in units of `dx^2`.
    pub cone_tol_factor: f64,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self {
            theta: 1.0,
            picard_tol: 1e-10,
            picard_max: 50,
            max_halvings: 8,
            advection: Advection::Upwind,
            cone_tol_factor: 10.0,
        }
    }
}

/// Grid values of the regularized solution and everything needed to
/// evaluate its coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution {
    pub grid: SpaceTimeGrid,
    /// `u[[i, j]] = u(t_i, x_j)`.
    pub u: Array2<f64>,
    pub ux: Array2<f64>,
    pub kernel: MollifierKernel,
    pub prefs: Preferences,
    /// Benchmark curve on the grid times.
    pub m_used: MeanFieldCurve,
    /// `|lambda(t_i)|^2`.
    pub lambda_sq: Vec<f64>,
    /// `P0(t_i)`.
    pub p0: Vec<f64>,
    /// Picard iterations spent on the step ending at `t_i` (last entry is 0).
    pub picard_iters: Vec<u32>,
    pub ux_min: f64,
    pub ux_max: f64,
}

struct Coefficients<'a> {
    dm: &'a DerivedMarket,
    m: &'a MeanFieldCurve,
    prefs: Preferences,
    kernel: MollifierKernel,
}

impl Coefficients<'_> {
    /// `(D, V)` at time `t` for the raw unknown `y`.
    #[inline]
    fn eval(&self, lam2: f64, p0: f64, m_t: f64, y: f64) -> (f64, f64) {
        let g = gamma_eps_at(y / p0, m_t, &self.prefs, &self.kernel);
        (0.5 * lam2 * g * g, lam2 * g)
    }
}

fn operator_coefficients(adv: Advection, d: f64, v: f64, dx: f64) -> (f64, f64, f64) {
    let dd = d / (dx * dx);
    match adv {
        Advection::Central => {
            let a = v / (2.0 * dx);
            (dd + a, -2.0 * dd, dd - a)
        }
        // u_tau + V u_x = D u_xx in reversed time with V > 0: information
        // travels toward larger x, so the difference looks left.
        Advection::Upwind => {
            let a = v / dx;
            (dd + a, -2.0 * dd - a, dd)
        }
    }
}

struct Marcher<'a> {
    grid: SpaceTimeGrid,
    coeffs: Coefficients<'a>,
    opts: SchemeOptions,
}

struct StepOutcome {
    u: Vec<f64>,
    iterations: u32,
    g_lo: f64,
    g_hi: f64,
}

impl Marcher<'_> {
    fn apply_operator(&self, t: f64, w: &[f64], out: &mut [f64]) {
        let dx = self.grid.dx();
        let lam2 = self.coeffs.dm.lambda_norm_sq(t);
        let p0 = self.coeffs.dm.p0(t);
        let m_t = self.coeffs.m.at(t);
        let n = w.len();
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for j in 1..n - 1 {
            let (d, v) = self.coeffs.eval(lam2, p0, m_t, w[j]);
            let (l, c, r) = operator_coefficients(self.opts.advection, d, v, dx);
            out[j] = l * w[j - 1] + c * w[j] + r * w[j + 1];
        }
    }

    /// Advances from `t_from` back to `t_to < t_from`.
    fn advance(&self, t_from: f64, t_to: f64, u_from: &[f64], g_lo: f64, g_hi: f64, depth: u32) -> Result<StepOutcome> {
        let n = u_from.len();
        let dt = t_from - t_to;
        let theta = self.opts.theta;
        let dx = self.grid.dx();
        let dm = self.coeffs.dm;
        let prefs = self.coeffs.prefs;

        let lam2_to = dm.lambda_norm_sq(t_to);
        let lam2_from = dm.lambda_norm_sq(t_from);
        let step_l2 = dt * (theta * lam2_to + (1.0 - theta) * lam2_from);
        let g_lo_to = g_lo - prefs.gamma2 * step_l2;
        let g_hi_to = g_hi - prefs.gamma1 * step_l2;

        let mut rhs = u_from.to_vec();
        if theta < 1.0 {
            let mut lu = vec![0.0; n];
            self.apply_operator(t_from, u_from, &mut lu);
            for j in 1..n - 1 {
                rhs[j] += (1.0 - theta) * dt * lu[j];
            }
        }
        rhs[0] = g_lo_to;
        rhs[n - 1] = g_hi_to;

        let p0 = dm.p0(t_to);
        let m_t = self.coeffs.m.at(t_to);
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        let mut w = u_from.to_vec();
        w[0] = g_lo_to;
        w[n - 1] = g_hi_to;
        let mut next = vec![0.0; n];
        let mut residual = f64::INFINITY;
        for k in 1..=self.opts.picard_max {
            for j in 1..n - 1 {
                let (d, v) = self.coeffs.eval(lam2_to, p0, m_t, w[j]);
                let (l, c, r) = operator_coefficients(self.opts.advection, d, v, dx);
                lower[j] = -theta * dt * l;
                diag[j] = 1.0 - theta * dt * c;
                upper[j] = -theta * dt * r;
            }
            solve_tridiagonal(&lower, &diag, &upper, &rhs, &mut next);
            residual = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut w, &mut next);
            if residual <= self.opts.picard_tol {
                return Ok(StepOutcome { u: w, iterations: k as u32, g_lo: g_lo_to, g_hi: g_hi_to });
            }
            // Constant coefficients: the first solve is already exact.
            if prefs.gamma1 == prefs.gamma2 && k >= 2 {
                return Ok(StepOutcome { u: w, iterations: k as u32, g_lo: g_lo_to, g_hi: g_hi_to });
            }
        }
        if depth >= self.opts.max_halvings {
            return Err(Error::PicardDivergence { t: t_to, residual, iterations: self.opts.picard_max });
        }
        let mid = 0.5 * (t_from + t_to);
        let first = self.advance(t_from, mid, u_from, g_lo, g_hi, depth + 1)?;
        let second = self.advance(mid, t_to, &first.u, first.g_lo, first.g_hi, depth + 1)?;
        Ok(StepOutcome {
            iterations: self.opts.picard_max as u32 + first.iterations + second.iterations,
            ..second
        })
    }
}

/// Dirichlet values `x_b - gamma_b int_t^T |lambda|^2`, accumulated with the
/// same quadrature the time scheme uses so the affine solution is reproduced
/// exactly.
fn far_field_values(grid: &SpaceTimeGrid, dm: &DerivedMarket, prefs: &Preferences, theta: f64) -> Vec<(f64, f64)> {
    let nt = grid.nt;
    let mut out = vec![(grid.x_lo, grid.x_hi); nt];
    for i in (0..nt - 1).rev() {
        let dt = grid.t(i + 1) - grid.t(i);
        let l2 = dt * (theta * dm.lambda_norm_sq(grid.t(i)) + (1.0 - theta) * dm.lambda_norm_sq(grid.t(i + 1)));
        out[i] = (out[i + 1].0 - prefs.gamma2 * l2, out[i + 1].1 - prefs.gamma1 * l2);
    }
    out
}

/// Rejects runs whose mollified transition layer reaches the far-field
/// boundaries.
fn check_far_field(
    grid: &SpaceTimeGrid,
    dm: &DerivedMarket,
    prefs: &Preferences,
    kernel: &MollifierKernel,
    m: &MeanFieldCurve,
    theta: f64,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (i, (lo, hi)) in far_field_values(grid, dm, prefs, theta).into_iter().enumerate() {
        let t = grid.t(i);
        let p0 = dm.p0(t);
        let m_t = m.at(t);
        let r_lo = (gamma_eps_at(lo / p0, m_t, prefs, kernel) - prefs.gamma2).abs();
        let r_hi = (gamma_eps_at(hi / p0, m_t, prefs, kernel) - prefs.gamma1).abs();
        worst = worst.max(r_lo).max(r_hi);
    }
    if worst > 1e-8 {
        return Err(Error::DomainTooSmall(format!(
            "mollified transition reaches the boundary (|gamma_eps - gamma_far| = {worst:.3e})"
        )));
    }
    Ok(worst)
}

/// Marches the regularized problem without enforcing the solution
/// invariants; see [`solve_regularized_pde`] for the checked version.
pub fn solve_regularized_pde_unchecked(
    dm: &DerivedMarket,
    prefs: &Preferences,
    m: &MeanFieldCurve,
    kernel: &MollifierKernel,
    grid: &SpaceTimeGrid,
    opts: &SchemeOptions,
) -> Result<PdeSolution> {
    if (grid.horizon - dm.horizon()).abs() > 1e-12 * dm.horizon() {
        return Err(Error::InvalidInput("grid and market horizons differ".into()));
    }
    if !(opts.theta >= 0.5 && opts.theta <= 1.0) {
        return Err(Error::InvalidInput(format!("theta must lie in [0.5, 1], got {}", opts.theta)));
    }
    let (nt, nx) = (grid.nt, grid.nx);
    let marcher = Marcher {
        grid: *grid,
        coeffs: Coefficients { dm, m, prefs: *prefs, kernel: *kernel },
        opts: *opts,
    };
    let mut u = Array2::<f64>::zeros((nt, nx));
    let xs = grid.xs();
    for j in 0..nx {
        u[[nt - 1, j]] = xs[j];
    }
    let mut picard_iters = vec![0u32; nt];
    let (mut g_lo, mut g_hi) = (grid.x_lo, grid.x_hi);
    let mut current = xs.clone();
    for i in (0..nt - 1).rev() {
        let out = marcher.advance(grid.t(i + 1), grid.t(i), &current, g_lo, g_hi, 0)?;
        for j in 0..nx {
            u[[i, j]] = out.u[j];
        }
        picard_iters[i] = out.iterations;
        g_lo = out.g_lo;
        g_hi = out.g_hi;
        current = out.u;
    }
    let m_used = MeanFieldCurve::from_fn(grid.horizon, nt, |t| m.at(t))?;
    let lambda_sq = (0..nt).map(|i| dm.lambda_norm_sq(grid.t(i))).collect();
    let p0 = (0..nt).map(|i| dm.p0(grid.t(i))).collect();
    let mut sol = PdeSolution {
        grid: *grid,
        u,
        ux: Array2::zeros((nt, nx)),
        kernel: *kernel,
        prefs: *prefs,
        m_used,
        lambda_sq,
        p0,
        picard_iters,
        ux_min: 0.0,
        ux_max: 0.0,
    };
    let (lo, hi) = fill_derivative(&mut sol);
    sol.ux_min = lo;
    sol.ux_max = hi;
    Ok(sol)
}

/// Solves the regularized problem and enforces the solution invariants:
/// far-field consistency, the cone bound and strict positivity of `u_x`.
pub fn solve_regularized_pde(
    dm: &DerivedMarket,
    prefs: &Preferences,
    m: &MeanFieldCurve,
    kernel: &MollifierKernel,
    grid: &SpaceTimeGrid,
    opts: &SchemeOptions,
) -> Result<PdeSolution> {
    check_far_field(grid, dm, prefs, kernel, m, opts.theta)?;
    let sol = solve_regularized_pde_unchecked(dm, prefs, m, kernel, grid, opts)?;
    let m_bnd = dm.lambda_max.powi(2) * prefs.gamma2;
    let report = check_solution_invariants_with(&sol, m_bnd, crate::model::DEFAULT_M1_CAP, opts.cone_tol_factor);
    if !report.cone_ok() {
        return Err(Error::InvariantViolation(format!(
            "cone bound exceeded by {:.3e} (tolerance {:.3e})",
            report.cone_excess, report.cone_tol
        )));
    }
    if !report.ux_positive() {
        return Err(Error::NonMonotone { min_ux: report.ux_min });
    }
    if !report.monotone_ok() {
        return Err(Error::InvariantViolation(format!(
            "{} time slices are not strictly increasing",
            report.non_monotone_slices
        )));
    }
    Ok(sol)
}

fn fill_derivative(sol: &mut PdeSolution) -> (f64, f64) {
    let (nt, nx) = (sol.grid.nt, sol.grid.nx);
    let dx = sol.grid.dx();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..nt {
        if i == nt - 1 {
            // Derivative of the identity.
            for j in 0..nx {
                sol.ux[[i, j]] = 1.0;
            }
        } else {
            sol.ux[[i, 0]] = (sol.u[[i, 1]] - sol.u[[i, 0]]) / dx;
            sol.ux[[i, nx - 1]] = (sol.u[[i, nx - 1]] - sol.u[[i, nx - 2]]) / dx;
            for j in 1..nx - 1 {
                sol.ux[[i, j]] = (sol.u[[i, j + 1]] - sol.u[[i, j - 1]]) / (2.0 * dx);
            }
        }
        for j in 0..nx {
            lo = lo.min(sol.ux[[i, j]]);
            hi = hi.max(sol.ux[[i, j]]);
        }
    }
    (lo, hi)
}

/// Recomputes `u_x` (central differences inside, one-sided at the ends) and
/// returns its `(min, max)` over the grid.
pub fn spatial_derivative(sol: &mut PdeSolution) -> Result<(f64, f64)> {
    let (lo, hi) = fill_derivative(sol);
    sol.ux_min = lo;
    sol.ux_max = hi;
    if lo <= 0.0 {
        return Err(Error::NonMonotone { min_ux: lo });
    }
    Ok((lo, hi))
}

impl PdeSolution {
    pub fn epsilon(&self) -> f64 {
        self.kernel.epsilon()
    }

    pub fn kernel_kind(&self) -> KernelKind {
        self.kernel.kind()
    }

    pub fn is_terminal_row(&self, i: usize) -> bool {
        i + 1 == self.grid.nt
    }

    pub fn in_domain(&self, x: f64) -> bool {
        x >= self.grid.x_lo && x <= self.grid.x_hi
    }

    /// `u(t_i, x)` by linear interpolation in `x`; exact identity on the
    /// terminal row.
    #[inline]
    pub fn u_at_row(&self, i: usize, x: f64) -> f64 {
        if self.is_terminal_row(i) {
            return x;
        }
        let (j, w) = self.grid.locate_x(x);
        let a = self.u[[i, j]];
        let b = self.u[[i, j + 1]];
        let base = a + w * (b - a);
        // Linear extension outside the grid keeps the far-field affine shape.
        if x < self.grid.x_lo {
            base + (x - self.grid.x_lo)
        } else if x > self.grid.x_hi {
            base + (x - self.grid.x_hi)
        } else {
            base
        }
    }

    #[inline]
    pub fn ux_at_row(&self, i: usize, x: f64) -> f64 {
        if self.is_terminal_row(i) {
            return 1.0;
        }
        let (j, w) = self.grid.locate_x(x);
        let a = self.ux[[i, j]];
        let b = self.ux[[i, j + 1]];
        a + w * (b - a)
    }

    /// Bilinear `u(t, x)`.
    pub fn u_at(&self, t: f64, x: f64) -> f64 {
        let (i, w) = self.grid.locate_t(t);
        if w == 0.0 {
            return self.u_at_row(i, x);
        }
        (1.0 - w) * self.u_at_row(i, x) + w * self.u_at_row(i + 1, x)
    }

    /// Bilinear `u_x(t, x)`.
    pub fn ux_at(&self, t: f64, x: f64) -> f64 {
        let (i, w) = self.grid.locate_t(t);
        if w == 0.0 {
            return self.ux_at_row(i, x);
        }
        (1.0 - w) * self.ux_at_row(i, x) + w * self.ux_at_row(i + 1, x)
    }

    pub fn lambda_sq_at(&self, t: f64) -> f64 {
        let (i, w) = self.grid.locate_t(t);
        if w == 0.0 {
            self.lambda_sq[i]
        } else {
            (1.0 - w) * self.lambda_sq[i] + w * self.lambda_sq[i + 1]
        }
    }

    /// `gamma_eps(t_i, u(t_i, x) / P0(t_i))`.
    #[inline]
    pub fn gamma_at_row(&self, i: usize, x: f64) -> f64 {
        let y = self.u_at_row(i, x) / self.p0[i];
        gamma_eps_at(y, self.m_used.values()[i], &self.prefs, &self.kernel)
    }

    /// Mollified coefficient seen by the auxiliary process at `(t, x)`, with
    /// market quantities taken from `dm`.
    pub fn gamma_at(&self, dm: &DerivedMarket, t: f64, x: f64) -> f64 {
        let y = self.u_at(t, x) / dm.p0(t);
        gamma_eps_at(y, self.m_used.at(t), &self.prefs, &self.kernel)
    }

    /// Inverse of the monotone piecewise-linear slice with node values `node(j)`.
    fn invert_nodes(&self, t: f64, y: f64, node: impl Fn(usize) -> f64) -> Result<f64> {
        let nx = self.grid.nx;
        let lo = node(0);
        let hi = node(nx - 1);
        let tol = 1e-10 * (1.0 + y.abs());
        if !(y >= lo - tol && y <= hi + tol) {
            return Err(Error::OutOfRange { t, y, lo, hi });
        }
        if y <= lo {
            return Ok(self.grid.x_lo);
        }
        if y >= hi {
            return Ok(self.grid.x_hi);
        }
        // Bisection over node indices, then the exact root of the linear piece.
        let (mut a, mut b) = (0usize, nx - 1);
        let mut iterations = 0;
        while b - a > 1 && iterations < 200 {
            let mid = (a + b) / 2;
            if node(mid) <= y {
                a = mid;
            } else {
                b = mid;
            }
            iterations += 1;
        }
        let (ua, ub) = (node(a), node(b));
        let xa = self.grid.x(a);
        let xb = self.grid.x(b);
        if ub <= ua {
            return Err(Error::NonMonotone { min_ux: (ub - ua) / (xb - xa) });
        }
        let x = xa + (xb - xa) * (y - ua) / (ub - ua);
        Ok(x.clamp(xa, xb))
    }

    /// Solves `u(t_i, x) = y` on a grid row.
    pub fn invert_row(&self, i: usize, y: f64) -> Result<f64> {
        let t = self.grid.t(i);
        if self.is_terminal_row(i) {
            let xs = |j: usize| self.grid.x(j);
            return self.invert_nodes(t, y, xs);
        }
        self.invert_nodes(t, y, |j| self.u[[i, j]])
    }

    /// Solves `u(t, x) = y` for the bilinear interpolant.
    pub fn invert_u(&self, t: f64, y: f64) -> Result<f64> {
        let (i, w) = self.grid.locate_t(t);
        if w == 0.0 {
            return self.invert_row(i, y);
        }
        let row = |r: usize, j: usize| if self.is_terminal_row(r) { self.grid.x(j) } else { self.u[[r, j]] };
        self.invert_nodes(t, y, |j| (1.0 - w) * row(i, j) + w * row(i + 1, j))
    }

    /// Plain bisection for `u(t, x) = y` inside `[lo, hi]` (at most 200 halvings).
    pub fn invert_u_bracketed(&self, t: f64, y: f64, lo: f64, hi: f64) -> Result<f64> {
        let (mut a, mut b) = (lo.max(self.grid.x_lo), hi.min(self.grid.x_hi));
        let fa = self.u_at(t, a) - y;
        let fb = self.u_at(t, b) - y;
        if fa > 0.0 || fb < 0.0 {
            return Err(Error::OutOfRange { t, y, lo: self.u_at(t, a), hi: self.u_at(t, b) });
        }
        let tol = 1e-10 * (1.0 + y.abs());
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let f = self.u_at(t, mid) - y;
            if f.abs() <= tol * 1e-3 || b - a <= f64::EPSILON * (1.0 + mid.abs()) {
                return Ok(mid);
            }
            if f < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Numerical audit of a solution against the properties the exact
/// regularized solution has.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    /// `max (|u - x| - M (T - t))` over all nodes; positive means outside the cone.
    pub cone_excess: f64,
    pub cone_tol: f64,
    pub ux_min: f64,
    pub ux_max: f64,
    pub m1_cap: f64,
    pub non_monotone_slices: usize,
    /// `max |gamma_eps| deviation from gamma2 / gamma1` at `x_lo` / `x_hi`.
    pub boundary_residual: f64,
    /// Grid cells across the mollified transition layer (`2 eps P0 / dx`, minimum over t).
    pub layer_cells: f64,
    pub terminal_ok: bool,
}

/// Minimum number of cells the transition layer must span to count as resolved.
pub const MIN_LAYER_CELLS: f64 = 4.0;

impl InvariantReport {
    pub fn cone_ok(&self) -> bool {
        self.cone_excess <= self.cone_tol
    }

    pub fn ux_positive(&self) -> bool {
        self.ux_min > 0.0
    }

    pub fn ux_ok(&self) -> bool {
        self.ux_positive() && self.ux_max <= self.m1_cap
    }

    pub fn monotone_ok(&self) -> bool {
        self.non_monotone_slices == 0
    }

    pub fn boundary_ok(&self) -> bool {
        self.boundary_residual <= 1e-8
    }

    /// Only meaningful when the two risk levels differ.
    pub fn layer_resolved(&self) -> bool {
        self.layer_cells >= MIN_LAYER_CELLS
    }

    pub fn passed(&self) -> bool {
        self.cone_ok()
            && self.ux_ok()
            && self.monotone_ok()
            && self.boundary_ok()
            && self.layer_resolved()
            && self.terminal_ok
    }

    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.cone_ok() {
            v.push("cone_bound");
        }
        if !self.ux_ok() {
            v.push("ux_range");
        }
        if !self.monotone_ok() {
            v.push("monotone_slices");
        }
        if !self.boundary_ok() {
            v.push("boundary_layer");
        }
        if !self.layer_resolved() {
            v.push("layer_resolution");
        }
        if !self.terminal_ok {
            v.push("terminal_row");
        }
        v
    }
}

fn check_solution_invariants_with(sol: &PdeSolution, m_bnd: f64, m1_cap: f64, cone_tol_factor: f64) -> InvariantReport {
    let g = &sol.grid;
    let dx = g.dx();
    let mut cone_excess = f64::NEG_INFINITY;
    let mut non_monotone = 0;
    let mut boundary_residual = 0.0_f64;
    let mut layer_cells = f64::INFINITY;
    let constant = sol.prefs.gamma1 == sol.prefs.gamma2;
    for i in 0..g.nt {
        let t = g.t(i);
        let cone = m_bnd * (g.horizon - t);
        let mut increasing = true;
        for j in 0..g.nx {
            let excess = (sol.u[[i, j]] - g.x(j)).abs() - cone;
            cone_excess = cone_excess.max(excess);
            if j > 0 && !(sol.u[[i, j]] > sol.u[[i, j - 1]]) {
                increasing = false;
            }
        }
        if !increasing {
            non_monotone += 1;
        }
        let r_lo = (sol.gamma_at_row(i, g.x_lo) - sol.prefs.gamma2).abs();
        let r_hi = (sol.gamma_at_row(i, g.x_hi) - sol.prefs.gamma1).abs();
        boundary_residual = boundary_residual.max(r_lo).max(r_hi);
        if !constant {
            layer_cells = layer_cells.min(2.0 * sol.epsilon() * sol.p0[i] / dx);
        }
    }
    let terminal_ok = (0..g.nx).all(|j| sol.u[[g.nt - 1, j]] == g.x(j));
    InvariantReport {
        cone_excess,
        cone_tol: cone_tol_factor * dx * dx,
        ux_min: sol.ux_min,
        ux_max: sol.ux_max,
        m1_cap,
        non_monotone_slices: non_monotone,
        boundary_residual,
        layer_cells,
        terminal_ok,
    }
}

/// Audits a solution against the cone bound, the `u_x` range, slice
/// monotonicity and the far-field boundary layer.
pub fn check_solution_invariants(sol: &PdeSolution, bc: &BoundConstants, opts: &SchemeOptions) -> InvariantReport {
    check_solution_invariants_with(sol, bc.m_bnd, bc.m1_cap, opts.cone_tol_factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bound_constants, derive_market, MarketModel};

    fn scalar_market(r: f64) -> DerivedMarket {
        // lambda = (mu - r) / sigma = 0.2 with sigma = 0.2.
        derive_market(&MarketModel::scalar(1.0, r, r + 0.04, 0.2).unwrap()).unwrap()
    }

    fn grid(nt: usize, nx: usize, lo: f64, hi: f64) -> SpaceTimeGrid {
        SpaceTimeGrid::new(1.0, nt, nx, lo, hi).unwrap()
    }

    #[test]
    fn constant_gamma_matches_affine_solution() {
        let dm = scalar_market(0.0);
        let p = Preferences::constant(1.0).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.05).unwrap();
        let g = grid(401, 401, -2.0, 4.0);
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        let mut err = 0.0_f64;
        for i in 0..g.nt {
            for j in 0..g.nx {
                let exact = g.x(j) - 0.04 * (1.0 - g.t(i));
                err = err.max((sol.u[[i, j]] - exact).abs());
            }
        }
        assert!(err < 1e-6, "max error {err}");
        assert!((sol.ux_min - 1.0).abs() < 1e-8 && (sol.ux_max - 1.0).abs() < 1e-8);
        for j in 0..g.nx {
            assert_eq!(sol.u[[g.nt - 1, j]], g.x(j));
            assert_eq!(sol.ux[[g.nt - 1, j]], 1.0);
        }
    }

    #[test]
    fn crank_nicolson_constant_case() {
        let dm = scalar_market(0.0);
        let p = Preferences::constant(2.0).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.05).unwrap();
        let g = grid(101, 101, -2.0, 4.0);
        let opts = SchemeOptions { theta: 0.5, ..Default::default() };
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &opts).unwrap();
        assert!((sol.u_at_row(0, 1.0) - (1.0 - 0.08)).abs() < 1e-10);
    }

    fn piecewise() -> (DerivedMarket, Preferences, MeanFieldCurve, MollifierKernel) {
        (
            scalar_market(0.0),
            Preferences::new(1.0, 2.0).unwrap(),
            MeanFieldCurve::constant(1.0, 2, 1.0).unwrap(),
            MollifierKernel::quartic(0.05).unwrap(),
        )
    }

    #[test]
    fn piecewise_far_field_and_derivative_bounds() {
        let (dm, p, m, k) = piecewise();
        let g = grid(401, 401, -2.0, 4.0);
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        assert!((sol.u_at_row(0, g.x_hi) - (g.x_hi - 0.04)).abs() < 1e-6);
        assert!((sol.u_at_row(0, g.x_lo) - (g.x_lo - 0.08)).abs() < 1e-6);
        assert!(sol.ux_min > 0.0 && sol.ux_max <= 10.0);
        let bc = bound_constants(&dm, &p, 1.0, sol.ux_max);
        let report = check_solution_invariants(&sol, &bc, &SchemeOptions::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn comparison_bracket_with_affine_solutions() {
        let (dm, p, m, k) = piecewise();
        let g = grid(201, 301, -2.0, 4.0);
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        let tol = 5.0 * g.dx() * g.dx();
        for i in 0..g.nt {
            let tau = 1.0 - g.t(i);
            for j in 0..g.nx {
                let x = g.x(j);
                let u = sol.u[[i, j]];
                assert!(x - 0.08 * tau <= u + tol, "below gamma2 solution at ({i},{j})");
                assert!(u <= x - 0.04 * tau + tol, "above gamma1 solution at ({i},{j})");
            }
        }
    }

    #[test]
    fn central_option_is_consistent() {
        let (dm, p, m, k) = piecewise();
        let g = grid(201, 401, -2.0, 4.0);
        let upwind = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        let opts = SchemeOptions { advection: Advection::Central, ..Default::default() };
        let central = solve_regularized_pde(&dm, &p, &m, &k, &g, &opts).unwrap();
        let diff = (&central.u - &upwind.u).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        // First-order upwinding adds O(V dx) numerical diffusion.
        assert!(diff < 0.08 * g.dx(), "diff {diff}");
    }

    #[test]
    fn inversion_round_trip_and_identity_slice() {
        let (dm, p, m, k) = piecewise();
        let g = grid(101, 201, -2.0, 4.0);
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        assert!((sol.invert_u(1.0, 3.7).unwrap() - 3.7).abs() < 1e-12);
        for i in [0, 37, 100] {
            for j in 0..g.nx {
                let x = sol.invert_u(g.t(i), sol.u[[i, j]]).unwrap();
                assert!((x - g.x(j)).abs() < 1e-9, "row {i} node {j}");
            }
        }
        let t = 0.4321;
        for y in [-1.0, 0.3, 1.0, 1.02, 2.5] {
            let x = sol.invert_u(t, y).unwrap();
            assert!((sol.u_at(t, x) - y).abs() <= 1e-10 * (1.0 + y.abs()));
            let xb = sol.invert_u_bracketed(t, y, g.x_lo, g.x_hi).unwrap();
            assert!((x - xb).abs() < 1e-9);
        }
        assert!(matches!(sol.invert_u(0.0, 100.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn constant_case_inverse_is_shift() {
        let dm = scalar_market(0.0);
        let p = Preferences::constant(1.0).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.05).unwrap();
        let g = grid(401, 401, -2.0, 4.0);
        let sol = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        assert!((sol.invert_u(0.0, 1.0).unwrap() - 1.04).abs() < 1e-9);
    }

    #[test]
    fn domain_too_small_is_detected() {
        let (dm, p, _, k) = piecewise();
        let m = MeanFieldCurve::constant(1.0, 2, 3.99).unwrap();
        let g = grid(51, 101, -2.0, 4.0);
        let err = solve_regularized_pde(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DomainTooSmall(_)), "{err:?}");
    }

    #[test]
    fn under_resolved_grid_is_flagged() {
        let (dm, p, m, k) = piecewise();
        let g = grid(401, 5, -2.0, 4.0);
        let sol = solve_regularized_pde_unchecked(&dm, &p, &m, &k, &g, &SchemeOptions::default()).unwrap();
        let bc = bound_constants(&dm, &p, 1.0, sol.ux_max);
        let report = check_solution_invariants(&sol, &bc, &SchemeOptions::default());
        assert!(!report.passed());
        assert!(report.terminal_ok);
    }

    #[test]
    fn grid_for_problem_covers_support() {
        let dm = scalar_market(0.02);
        let p = Preferences::new(1.0, 2.0).unwrap();
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let g = SpaceTimeGrid::for_problem(&dm, &p, &xi, 11, 21, 1.0).unwrap();
        g.check_coverage(&dm, &p, &xi).unwrap();
        let narrow = SpaceTimeGrid::new(1.0, 11, 21, 0.0, 2.0).unwrap();
        assert!(narrow.check_coverage(&dm, &p, &xi).is_err());
        assert!(SpaceTimeGrid::for_problem(&dm, &p, &xi, 11, 21, 0.5).is_err());
    }
}
