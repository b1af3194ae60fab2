//! The separation boundary `b(t)`: the pre-image of the discounted benchmark
//! `R(t) = P0(t) m(t)` under `u(t, .)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DerivedMarket, MeanFieldCurve};
use crate::pde::PdeSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve {
    pub times: Vec<f64>,
    pub b: Vec<f64>,
    /// `R(t_i) = P0(t_i) m(t_i)`.
    pub targets: Vec<f64>,
    /// `|u(t_i, b(t_i)) - R(t_i)|`.
    pub residuals: Vec<f64>,
}

impl BoundaryCurve {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Largest residual relative to `1 + |R(t)|`.
    pub fn max_relative_residual(&self) -> f64 {
        self.residuals
            .iter()
            .zip(&self.targets)
            .map(|(r, y)| r / (1.0 + y.abs()))
            .fold(0.0, f64::max)
    }

    /// Largest finite-difference slope `|b(t_{i+1}) - b(t_i)| / dt`.
    pub fn difference_quotient(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.b.windows(2))
            .map(|(t, b)| (b[1] - b[0]).abs() / (t[1] - t[0]))
            .fold(0.0, f64::max)
    }

    pub fn at(&self, t: f64) -> f64 {
        let n = self.b.len();
        let horizon = self.times[n - 1];
        let (i, w) = crate::model::locate(horizon, n, t);
        if w == 0.0 {
            self.b[i]
        } else {
            (1.0 - w) * self.b[i] + w * self.b[i + 1]
        }
    }

    /// Sup distance, resampling `other` onto this curve's times if needed.
    pub fn sup_distance(&self, other: &BoundaryCurve) -> f64 {
        self.times
            .iter()
            .zip(&self.b)
            .map(|(&t, &b)| (b - other.at(t)).abs())
            .fold(0.0, f64::max)
    }
}

fn root_at(sol: &PdeSolution, i: usize, target: f64, bracket: Option<(f64, f64)>) -> Result<f64> {
    let t = sol.grid.t(i);
    let found = match bracket {
        None => sol.invert_row(i, target),
        Some((lo, hi)) => sol.invert_u_bracketed(t, target, lo, hi),
    };
    found.map_err(|e| match e {
        Error::OutOfRange { t, y, lo, hi } => Error::DomainTooSmall(format!(
            "benchmark {y} at t={t} lies outside the range [{lo}, {hi}] of u"
        )),
        other => other,
    })
}

fn boundary_impl(
    sol: &PdeSolution,
    m: &MeanFieldCurve,
    dm: &DerivedMarket,
    bracket: Option<(f64, f64)>,
) -> Result<BoundaryCurve> {
    let nt = sol.grid.nt;
    let rows: Vec<Result<(f64, f64, f64, f64)>> = (0..nt)
        .into_par_iter()
        .map(|i| {
            let t = sol.grid.t(i);
            let target = dm.p0(t) * m.at(t);
            let b = root_at(sol, i, target, bracket)?;
            let residual = (sol.u_at_row(i, b) - target).abs();
            Ok((t, b, target, residual))
        })
        .collect();
    let mut curve = BoundaryCurve {
        times: Vec::with_capacity(nt),
        b: Vec::with_capacity(nt),
        targets: Vec::with_capacity(nt),
        residuals: Vec::with_capacity(nt),
    };
    for row in rows {
        let (t, b, target, residual) = row?;
        curve.times.push(t);
        curve.b.push(b);
        curve.targets.push(target);
        curve.residuals.push(residual);
    }
    Ok(curve)
}

/// Solves `u(t_i, b) = P0(t_i) m(t_i)` at every grid time.
pub fn separation_boundary(sol: &PdeSolution, m: &MeanFieldCurve, dm: &DerivedMarket) -> Result<BoundaryCurve> {
    boundary_impl(sol, m, dm, None)
}

/// Same as [`separation_boundary`] but locates each root by plain bisection
/// started from `[lo, hi]`.
pub fn separation_boundary_bracketed(
    sol: &PdeSolution,
    m: &MeanFieldCurve,
    dm: &DerivedMarket,
    lo: f64,
    hi: f64,
) -> Result<BoundaryCurve> {
    boundary_impl(sol, m, dm, Some((lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_market, MarketModel, Preferences};
    use crate::mollify::{gamma_eps_at, MollifierKernel};
    use crate::pde::{solve_regularized_pde, SchemeOptions, SpaceTimeGrid};

    fn setup(prefs: Preferences, nx: usize) -> (DerivedMarket, MeanFieldCurve, PdeSolution) {
        let dm = derive_market(&MarketModel::scalar(1.0, 0.0, 0.04, 0.2).unwrap()).unwrap();
        let m = MeanFieldCurve::constant(1.0, 2, 1.0).unwrap();
        let k = MollifierKernel::quartic(0.05).unwrap();
        let g = SpaceTimeGrid::new(1.0, 201, nx, -2.0, 4.0).unwrap();
        let sol = solve_regularized_pde(&dm, &prefs, &m, &k, &g, &SchemeOptions::default()).unwrap();
        (dm, m, sol)
    }

    #[test]
    fn constant_case_matches_shifted_line() {
        let (dm, m, sol) = setup(Preferences::constant(1.0).unwrap(), 301);
        let b = separation_boundary(&sol, &m, &dm).unwrap();
        for (t, v) in b.times.iter().zip(&b.b) {
            assert!((v - (1.0 + 0.04 * (1.0 - t))).abs() < 1e-9, "t={t}");
        }
        assert_eq!(*b.b.last().unwrap(), 1.0);
        assert!(b.max_relative_residual() <= 1e-9);
        assert!((b.difference_quotient() - 0.04).abs() < 1e-6);
    }

    #[test]
    fn piecewise_boundary_is_unique_and_layer_is_sharp() {
        let prefs = Preferences::new(1.0, 2.0).unwrap();
        let (dm, m, sol) = setup(prefs, 401);
        let b = separation_boundary(&sol, &m, &dm).unwrap();
        assert!(b.max_relative_residual() <= 1e-9);
        assert!((b.b[b.len() - 1] - 1.0).abs() <= 1e-9);
        let shifted = separation_boundary_bracketed(&sol, &m, &dm, -1.7, 3.3).unwrap();
        assert!(b.sup_distance(&shifted) < 1e-9);
        let k = sol.kernel;
        for i in [50, 100, 150] {
            let above = b.b[i] + 2.0 * k.epsilon() * dm.p_max;
            let below = b.b[i] - 2.0 * k.epsilon() * dm.p_max;
            let p0 = sol.p0[i];
            let mt = m.at(sol.grid.t(i));
            assert_eq!(gamma_eps_at(sol.u_at_row(i, above) / p0, mt, &prefs, &k), 1.0);
            assert_eq!(gamma_eps_at(sol.u_at_row(i, below) / p0, mt, &prefs, &k), 2.0);
        }
    }

    #[test]
    fn refinement_moves_boundary_little() {
        let prefs = Preferences::new(1.0, 2.0).unwrap();
        let (dm, m, coarse) = setup(prefs, 301);
        let (_, _, fine) = setup(prefs, 601);
        let bc = separation_boundary(&coarse, &m, &dm).unwrap();
        let bf = separation_boundary(&fine, &m, &dm).unwrap();
        let dx = coarse.grid.dx();
        assert!(bc.sup_distance(&bf) <= 5.0 * dx * dx, "{}", bc.sup_distance(&bf));
    }

    #[test]
    fn target_outside_grid_is_domain_error() {
        let (dm, _, sol) = setup(Preferences::constant(1.0).unwrap(), 101);
        let far = MeanFieldCurve::constant(1.0, 2, 50.0).unwrap();
        assert!(matches!(separation_boundary(&sol, &far, &dm), Err(Error::DomainTooSmall(_))));
    }
}
