use mfgmv_core::fixedpoint::{epsilon_continuation, FixedPointConfig, Problem};
use mfgmv_core::model::{derive_market, InitialDistribution, MarketModel, Preferences};
use mfgmv_core::pde::SpaceTimeGrid;

const HORIZON: f64 = 1.0;
const LAMBDA_SQ: f64 = 0.04;

fn solve(prefs: Preferences, nx: usize, schedule: Vec<f64>) -> mfgmv_core::fixedpoint::EquilibriumSolution {
    let dm = derive_market(&MarketModel::scalar(HORIZON, 0.0, 0.04, 0.2).unwrap()).unwrap();
    let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
    let grid = SpaceTimeGrid::for_problem(&dm, &prefs, &xi, 101, nx, 1.5).unwrap();
    let problem = Problem { dm: &dm, prefs: &prefs, xi: &xi, grid: &grid };
    let cfg = FixedPointConfig { damping: 1.0, epsilon_schedule: schedule, ..FixedPointConfig::default() };
    epsilon_continuation(&problem, &cfg, None).unwrap()
}

#[test]
fn constant_aversion_matches_closed_form() {
    // Zero rate and constant gamma: u = x - |lambda|^2 gamma (T - t), the
    // control is gamma, so m(t) = E[xi] + gamma |lambda|^2 t.
    let gamma = 2.0;
    let eq = solve(Preferences::constant(gamma).unwrap(), 201, vec![0.2, 0.1]);
    for rec in &eq.records {
        let g = &rec.solution.grid;
        for i in 0..g.nt {
            let t = g.t(i);
            for j in 0..g.nx {
                let exact = g.x(j) - LAMBDA_SQ * gamma * (HORIZON - t);
                assert!((rec.solution.u[[i, j]] - exact).abs() <= 1e-9, "u at ({t}, {})", g.x(j));
            }
            let m_exact = 1.0 + gamma * LAMBDA_SQ * t;
            assert!((rec.m.at(t) - m_exact).abs() <= 1e-3, "m({t}) = {}", rec.m.at(t));
        }
        for (k, &t) in rec.boundary.times.iter().enumerate() {
            let b_exact = rec.m.at(t) + LAMBDA_SQ * gamma * (HORIZON - t);
            assert!((rec.boundary.b[k] - b_exact).abs() <= 1e-8, "b({t})");
        }
    }
    assert!(eq.continuation_diffs.iter().all(|&d| d <= 1e-9));
}

#[test]
fn piecewise_solution_lies_between_constant_solutions() {
    let (g1, g2) = (1.0, 2.0);
    let eq = solve(Preferences::new(g1, g2).unwrap(), 401, vec![0.2, 0.1]);
    let rec = eq.final_record();
    let g = &rec.solution.grid;
    let slack = 10.0 * g.dx() * g.dx();
    for i in 0..g.nt {
        let tau = HORIZON - g.t(i);
        for j in 0..g.nx {
            let (x, u) = (g.x(j), rec.solution.u[[i, j]]);
            assert!(u <= x - LAMBDA_SQ * g1 * tau + slack && u >= x - LAMBDA_SQ * g2 * tau - slack);
        }
    }
    // The mean drifts at a rate between the two constant equilibria.
    for i in 1..g.nt {
        let t = g.t(i);
        let growth = (rec.m.at(t) - rec.m.at(0.0)) / t;
        assert!(growth >= g1 * LAMBDA_SQ - 1e-3 && growth <= g2 * LAMBDA_SQ + 1e-3, "growth {growth} at {t}");
    }
    assert!(rec.residual <= eq.tol);
}
