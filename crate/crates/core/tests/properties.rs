use std::sync::OnceLock;

use mfgmv_core::density::{diffuse_step, mass};
use mfgmv_core::model::{derive_market, InitialDistribution, MarketModel, MeanFieldCurve, Preferences};
use mfgmv_core::mollify::{gamma_eps_at, kernel_cdf, KernelKind, MollifierKernel};
use mfgmv_core::pde::{solve_regularized_pde, PdeSolution, SchemeOptions, SpaceTimeGrid};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = KernelKind> {
    prop_oneof![Just(KernelKind::Quartic), Just(KernelKind::Bump)]
}

/// Two curves sampled on the same time grid.
fn curve_pair() -> impl Strategy<Value = (MeanFieldCurve, MeanFieldCurve)> {
    prop::collection::vec((0.1f64..3.0, 0.1f64..3.0), 2..40).prop_map(|v| {
        let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        (MeanFieldCurve::new(1.0, x).unwrap(), MeanFieldCurve::new(1.0, y).unwrap())
    })
}

/// One piecewise solve shared by the inversion properties.
fn solution() -> &'static PdeSolution {
    static SOL: OnceLock<PdeSolution> = OnceLock::new();
    SOL.get_or_init(|| {
        let dm = derive_market(&MarketModel::scalar(1.0, 0.02, 0.06, 0.2).unwrap()).unwrap();
        let prefs = Preferences::new(1.0, 2.0).unwrap();
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let grid = SpaceTimeGrid::for_problem(&dm, &prefs, &xi, 81, 241, 1.5).unwrap();
        let m = MeanFieldCurve::from_fn(1.0, 81, |t| 1.0 + 0.05 * t).unwrap();
        let kernel = MollifierKernel::quartic(0.2).unwrap();
        solve_regularized_pde(&dm, &prefs, &m, &kernel, &grid, &SchemeOptions::default()).unwrap()
    })
}

proptest! {
    #[test]
    fn kernel_cdf_is_a_monotone_cdf(k in kind(), eps in 0.01f64..1.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let kernel = MollifierKernel::new(k, eps).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (fa, fb) = (kernel_cdf(&kernel, lo), kernel_cdf(&kernel, hi));
        prop_assert!((0.0..=1.0).contains(&fa) && (0.0..=1.0).contains(&fb));
        prop_assert!(fa <= fb + 1e-12);
        // Symmetric kernel.
        prop_assert!((kernel_cdf(&kernel, a) + kernel_cdf(&kernel, -a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn kernel_cdf_saturates_outside_width(k in kind(), eps in 0.01f64..1.0, s in 1.0f64..5.0) {
        let kernel = MollifierKernel::new(k, eps).unwrap();
        prop_assert_eq!(kernel_cdf(&kernel, s * eps), 1.0);
        prop_assert_eq!(kernel_cdf(&kernel, -s * eps), 0.0);
    }

    #[test]
    fn mollified_gamma_stays_between_levels(
        g1 in 0.1f64..3.0, spread in 0.0f64..3.0, eps in 0.01f64..0.5, y in -3.0f64..3.0, m in -1.0f64..2.0,
    ) {
        let prefs = Preferences::new(g1, g1 + spread).unwrap();
        let kernel = MollifierKernel::quartic(eps).unwrap();
        let g = gamma_eps_at(y, m, &prefs, &kernel);
        prop_assert!(g >= prefs.gamma1 - 1e-12 && g <= prefs.gamma2 + 1e-12);
        if y - m >= eps {
            prop_assert!((g - prefs.gamma1).abs() <= 1e-12);
        }
        if y - m <= -eps {
            prop_assert!((g - prefs.gamma2).abs() <= 1e-12);
        }
    }

    #[test]
    fn blend_is_a_convex_combination((a, b) in curve_pair(), alpha in 0.0f64..=1.0) {
        let c = a.blend(&b, alpha);
        let d_ab = a.sup_distance(&b);
        prop_assert!(a.sup_distance(&c) <= alpha * d_ab + 1e-12);
        prop_assert!((c.sup_distance(&b) - (1.0 - alpha) * d_ab).abs() <= 1e-12);
        let same = a.blend(&b, 0.0);
        prop_assert_eq!(same.values(), a.values());
        prop_assert!(c.sup_norm() <= a.sup_norm().max(b.sup_norm()) + 1e-12);
    }

    #[test]
    fn sup_distance_is_a_metric_on_shared_grid((a, b) in curve_pair()) {
        // Node times are recomputed from the horizon, so interpolation at a
        // node may round in the last bits.
        prop_assert!((a.sup_distance(&b) - b.sup_distance(&a)).abs() <= 1e-12);
        prop_assert!(a.sup_distance(&a) <= 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf(q in 0.001f64..0.999, mean in 0.5f64..1.5, sd in 0.05f64..1.0) {
        for xi in [
            InitialDistribution::uniform(0.3, 2.0).unwrap(),
            InitialDistribution::truncated_normal(mean, sd, 0.2, 2.0).unwrap(),
            InitialDistribution::tabulated(0.5, 1.5, vec![1.0, 3.0, 2.0, 0.5]).unwrap(),
        ] {
            let x = xi.quantile(q);
            let (lo, hi) = xi.support();
            prop_assert!(x >= lo && x <= hi);
            prop_assert!((xi.cdf(x) - q).abs() <= 1e-8, "{:?}: cdf(quantile({})) = {}", xi, q, xi.cdf(x));
        }
    }

    #[test]
    fn implicit_diffusion_keeps_density_nonnegative(
        p in prop::collection::vec(0.0f64..2.0, 8..60), a2 in 0.01f64..1.0, dt in 1e-4f64..0.1,
    ) {
        let n = p.len();
        let dx = 1.0 / (n - 1) as f64;
        let mut q = p.clone();
        q[0] = 0.0;
        q[n - 1] = 0.0;
        let before = mass(&q, dx);
        diffuse_step(&mut q, &vec![a2; n], dt, dx);
        prop_assert!(q.iter().all(|&v| v >= -1e-14));
        // Absorbing ends can only remove mass.
        prop_assert!(mass(&q, dx) <= before + 1e-12);
    }

    #[test]
    fn row_inversion_round_trips(frac in 0.0f64..1.0, row in 0usize..81) {
        let sol = solution();
        let g = &sol.grid;
        let x = g.x_lo + frac * (g.x_hi - g.x_lo);
        let y = sol.u_at_row(row, x);
        let back = sol.invert_row(row, y).unwrap();
        prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs()), "row {} x {} back {}", row, x, back);
    }

    #[test]
    fn solution_rows_are_increasing(row in 0usize..81, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let sol = solution();
        let g = &sol.grid;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (xa, xb) = (g.x_lo + lo * (g.x_hi - g.x_lo), g.x_lo + hi * (g.x_hi - g.x_lo));
        prop_assert!(sol.u_at_row(row, xa) <= sol.u_at_row(row, xb));
    }
}
