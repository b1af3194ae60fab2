//! Mean-field consistency: damped Picard iteration on the map
//! `m -> E[X(t; m)]` and continuation in the smoothing width.

use crate::boundary::{separation_boundary, BoundaryCurve};
use crate::density::{evolve_density, initial_aux_density, mean_wealth_from_density};
use crate::error::{Error, Result};
use crate::model::{bound_constants, BoundConstants, DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences};
use crate::mollify::{KernelKind, MollifierKernel};
use crate::pde::{check_solution_invariants, solve_regularized_pde, InvariantReport, PdeSolution, SchemeOptions, SpaceTimeGrid};
use crate::simulate::{estimate_mean_wealth, lift_paths, simulate_aux_paths, SimOptions};

/// How `E[X(t; m)]` is evaluated inside the fixed-point map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationEngine {
    /// Forward Kolmogorov equation; deterministic.
    Density,
    /// Monte Carlo with the same seed on every call.
    MonteCarlo,
}

impl ExpectationEngine {
    pub fn name(&self) -> &'static str {
        match self {
            ExpectationEngine::Density => "density",
            ExpectationEngine::MonteCarlo => "montecarlo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "density" => Some(ExpectationEngine::Density),
            "montecarlo" | "monte-carlo" | "mc" => Some(ExpectationEngine::MonteCarlo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointConfig {
    /// Weight of the new image in `m <- (1 - a) m + a Phi(m)`.
    pub damping: f64,
    /// Sup-norm tolerance on `m - Phi(m)`; `None` means `1e-4 (1 + C4)`.
    pub tol: Option<f64>,
    pub max_iters: usize,
    pub epsilon_schedule: Vec<f64>,
    pub epsilon_floor: f64,
    pub kernel: KernelKind,
    pub engine: ExpectationEngine,
    pub mc_paths: usize,
    pub mc_seed: u64,
    pub scheme: SchemeOptions,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: None,
            max_iters: 200,
            epsilon_schedule: vec![0.2, 0.1, 0.05],
            epsilon_floor: 1e-3,
            kernel: KernelKind::Quartic,
            engine: ExpectationEngine::Density,
            mc_paths: 20_000,
            mc_seed: 1,
            scheme: SchemeOptions::default(),
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
            }
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon floor must be positive, got {}", self.epsilon_floor)));
        }
        if self.epsilon_schedule.is_empty() {
            return Err(Error::InvalidInput("epsilon schedule is empty".into()));
        }
        if self.epsilon_schedule.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidInput("epsilon schedule must be strictly decreasing".into()));
        }
        if let Some(&e) = self.epsilon_schedule.iter().find(|&&e| e < self.epsilon_floor) {
            return Err(Error::InvalidInput(format!(
                "epsilon {e} is below the floor {}",
                self.epsilon_floor
            )));
        }
        if self.engine == ExpectationEngine::MonteCarlo && self.mc_paths == 0 {
            return Err(Error::InvalidInput("Monte Carlo engine needs at least one path".into()));
        }
        Ok(())
    }
}

/// Smallest width that keeps the transition layer resolved on `grid`:
/// `max(2 dx P_max, 1e-3 std(xi))`.
pub fn default_epsilon_floor(grid: &SpaceTimeGrid, dm: &DerivedMarket, xi: &InitialDistribution) -> f64 {
    (2.0 * grid.dx() * dm.p_max).max(1e-3 * xi.std_dev())
}

/// Geometric schedule `eps_k = 0.2 std(xi) 2^{-k}` kept above `floor`.
pub fn default_epsilon_schedule(xi: &InitialDistribution, floor: f64, max_len: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = 0.2 * xi.std_dev();
    while e >= floor && out.len() < max_len {
        out.push(e);
        e *= 0.5;
    }
    if out.is_empty() {
        out.push(floor);
    }
    out
}

/// The inputs shared by every evaluation of the fixed-point map.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub dm: &'a DerivedMarket,
    pub prefs: &'a Preferences,
    pub xi: &'a InitialDistribution,
    pub grid: &'a SpaceTimeGrid,
}

impl Problem<'_> {
    /// `E[xi] exp(int_0^t r)`, the mean wealth with no risky investment.
    pub fn riskless_guess(&self) -> MeanFieldCurve {
        let mean = self.xi.mean();
        MeanFieldCurve::from_fn(self.grid.horizon, self.grid.nt, |t| mean * self.dm.integrated_rate(0.0, t).exp())
            .expect("grid has at least two nodes")
    }
}

/// One evaluation of the fixed-point map together with the PDE solution it
/// was computed from.
#[derive(Debug, Clone)]
pub struct PhiOutput {
    pub image: MeanFieldCurve,
    pub solution: PdeSolution,
}

/// `Phi(m)(t) = E[X(t; m)]` for the regularization `kernel`.
pub fn phi_eps(problem: &Problem, m: &MeanFieldCurve, kernel: &MollifierKernel, cfg: &FixedPointConfig) -> Result<PhiOutput> {
    let m = m.resample(problem.grid.nt);
    let sol = solve_regularized_pde(problem.dm, problem.prefs, &m, kernel, problem.grid, &cfg.scheme)?;
    let image = match cfg.engine {
        ExpectationEngine::Density => {
            let p0 = initial_aux_density(&sol, problem.xi, problem.dm)?;
            let de = evolve_density(&sol, &p0)?;
            mean_wealth_from_density(&sol, &de)?
        }
        ExpectationEngine::MonteCarlo => {
            let opts = SimOptions::new(cfg.mc_paths, cfg.mc_seed);
            let mut bundle = simulate_aux_paths(&sol, problem.xi, problem.dm, &opts)?;
            lift_paths(&mut bundle, &sol, problem.dm, &m);
            estimate_mean_wealth(&bundle)?.curve()?
        }
    };
    Ok(PhiOutput { image, solution: sol })
}

/// Bounds of the invariant set of mean curves, checked with 10% slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMembership {
    /// `|m(0) - E[xi]|`.
    pub initial_error: f64,
    pub sup_norm: f64,
    pub lipschitz: f64,
    pub c4: f64,
    pub c5: f64,
}

/// Tolerance on `m(0) = E[xi]`.
pub const INITIAL_MEAN_TOL: f64 = 1e-8;

impl KMembership {
    pub fn new(m: &MeanFieldCurve, xi_mean: f64, bc: &BoundConstants) -> Self {
        Self {
            initial_error: (m.values()[0] - xi_mean).abs(),
            sup_norm: m.sup_norm(),
            lipschitz: m.lipschitz(),
            c4: bc.c4,
            c5: bc.c5,
        }
    }

    pub fn passed(&self) -> bool {
        self.initial_error <= INITIAL_MEAN_TOL && self.sup_norm <= 1.1 * self.c4 && self.lipschitz <= 1.1 * self.c5
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub m: MeanFieldCurve,
    /// `||m - Phi(m)||_inf` at the returned curve.
    pub residual: f64,
    /// Number of evaluations of the map.
    pub iterations: usize,
    pub history: Vec<f64>,
    /// PDE solution built on the returned curve.
    pub solution: PdeSolution,
    pub tol: f64,
}

/// Resolved tolerance for a problem.
pub fn fixed_point_tol(problem: &Problem, cfg: &FixedPointConfig) -> f64 {
    cfg.tol.unwrap_or_else(|| {
        let bc = bound_constants(problem.dm, problem.prefs, problem.xi.mean(), 1.0);
        1e-4 * (1.0 + bc.c4)
    })
}

/// Damped Picard iteration from `m0`.
///
/// Each pass evaluates `Phi(m_j)`; once `||Phi(m_j) - m_j|| <= tol` the
/// current iterate is returned together with that residual, which is
/// equivalent to stopping on `||m_{j+1} - m_j|| <= damping * tol`.
pub fn solve_fixed_point(
    problem: &Problem,
    kernel: &MollifierKernel,
    m0: &MeanFieldCurve,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    let tol = fixed_point_tol(problem, cfg);
    let mut m = m0.resample(problem.grid.nt);
    let mut history = Vec::new();
    for iteration in 1..=cfg.max_iters {
        let out = phi_eps(problem, &m, kernel, cfg)?;
        let residual = out.image.sup_distance(&m);
        history.push(residual);
        log::debug!(
            "eps={:.4e} iteration {iteration}: residual {residual:.3e}",
            kernel.epsilon()
        );
        if residual <= tol {
            return Ok(FixedPointResult {
                m,
                residual,
                iterations: iteration,
                history,
                solution: out.solution,
                tol,
            });
        }
        if !residual.is_finite() {
            break;
        }
        m = m.blend(&out.image, cfg.damping);
    }
    Err(Error::NoConvergence {
        iterations: history.len(),
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

#[derive(Debug, Clone)]
pub struct EpsilonRecord {
    pub epsilon: f64,
    pub m: MeanFieldCurve,
    pub solution: PdeSolution,
    pub boundary: BoundaryCurve,
    pub residual: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub membership: KMembership,
    pub invariants: InvariantReport,
    pub bounds: BoundConstants,
}

#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub records: Vec<EpsilonRecord>,
    /// `||m^{eps_k} - m^{eps_{k+1}}||_inf`.
    pub continuation_diffs: Vec<f64>,
    /// `||b^{eps_k} - b^{eps_{k+1}}||_inf`.
    pub boundary_diffs: Vec<f64>,
    pub tol: f64,
}

impl EquilibriumSolution {
    /// The smallest-width record.
    pub fn final_record(&self) -> &EpsilonRecord {
        self.records.last().expect("continuation produces at least one record")
    }

    /// Whether the last successive difference is no larger than the first
    /// (vacuously true with fewer than two differences).
    pub fn cauchy_ok(diffs: &[f64]) -> bool {
        match (diffs.first(), diffs.last()) {
            (Some(first), Some(last)) => last <= first,
            _ => true,
        }
    }
}

/// Continuation that stopped early; completed records are kept.
#[derive(Debug, Clone)]
pub struct PartialContinuation {
    pub completed: Vec<EpsilonRecord>,
    pub error: Error,
}

fn build_record(problem: &Problem, epsilon: f64, fp: FixedPointResult, cfg: &FixedPointConfig) -> Result<EpsilonRecord> {
    let boundary = separation_boundary(&fp.solution, &fp.m, problem.dm)?;
    let bounds = bound_constants(problem.dm, problem.prefs, problem.xi.mean(), fp.solution.ux_max);
    let invariants = check_solution_invariants(&fp.solution, &bounds, &cfg.scheme);
    let membership = KMembership::new(&fp.m, problem.xi.mean(), &bounds);
    Ok(EpsilonRecord {
        epsilon,
        m: fp.m,
        solution: fp.solution,
        boundary,
        residual: fp.residual,
        iterations: fp.iterations,
        history: fp.history,
        membership,
        invariants,
        bounds,
    })
}

/// Rebuilds a record from a stored curve and PDE solution; the residual is
/// re-evaluated with one fresh call of the map.
pub fn reconstruct_record(
    problem: &Problem,
    epsilon: f64,
    m: MeanFieldCurve,
    solution: PdeSolution,
    iterations: usize,
    cfg: &FixedPointConfig,
) -> Result<EpsilonRecord> {
    let kernel = MollifierKernel::new(cfg.kernel, epsilon)?;
    let m = m.resample(problem.grid.nt);
    let residual = phi_eps(problem, &m, &kernel, cfg)?.image.sup_distance(&m);
    let fp = FixedPointResult {
        m,
        residual,
        iterations,
        history: vec![residual],
        solution,
        tol: fixed_point_tol(problem, cfg),
    };
    build_record(problem, epsilon, fp, cfg)
}

/// Collects records in schedule order and computes the successive differences.
pub fn assemble_solution(records: Vec<EpsilonRecord>, tol: f64) -> EquilibriumSolution {
    let continuation_diffs = records.windows(2).map(|w| w[0].m.sup_distance(&w[1].m)).collect();
    let boundary_diffs = records.windows(2).map(|w| w[0].boundary.sup_distance(&w[1].boundary)).collect();
    EquilibriumSolution { records, continuation_diffs, boundary_diffs, tol }
}

/// Runs the fixed point for every width in the schedule, warm-starting each
/// from the previous solution.
pub fn epsilon_continuation(
    problem: &Problem,
    cfg: &FixedPointConfig,
    m0: Option<&MeanFieldCurve>,
) -> std::result::Result<EquilibriumSolution, PartialContinuation> {
    let fail = |completed: Vec<EpsilonRecord>, error: Error| PartialContinuation { completed, error };
    if let Err(e) = cfg.validate() {
        return Err(fail(Vec::new(), e));
    }
    let tol = fixed_point_tol(problem, cfg);
    let mut records: Vec<EpsilonRecord> = Vec::new();
    let mut start = m0.cloned().unwrap_or_else(|| problem.riskless_guess());
    for &epsilon in &cfg.epsilon_schedule {
        let kernel = match MollifierKernel::new(cfg.kernel, epsilon) {
            Ok(k) => k,
            Err(e) => return Err(fail(records, e)),
        };
        let result = solve_fixed_point(problem, &kernel, &start, cfg).and_then(|fp| build_record(problem, epsilon, fp, cfg));
        match result {
            Ok(rec) => {
                log::info!(
                    "eps={epsilon:.4e}: residual {:.3e} after {} iterations",
                    rec.residual,
                    rec.iterations
                );
                start = rec.m.clone();
                records.push(rec);
            }
            Err(e) => return Err(fail(records, e)),
        }
    }
    Ok(assemble_solution(records, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_market, MarketModel};

    struct Setup {
        dm: DerivedMarket,
        prefs: Preferences,
        xi: InitialDistribution,
        grid: SpaceTimeGrid,
    }

    impl Setup {
        fn new(prefs: Preferences, rate: f64, nt: usize, nx: usize) -> Self {
            let dm = derive_market(&MarketModel::scalar(1.0, rate, rate + 0.04, 0.2).unwrap()).unwrap();
            let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
            let grid = SpaceTimeGrid::for_problem(&dm, &prefs, &xi, nt, nx, 1.0).unwrap();
            Self { dm, prefs, xi, grid }
        }

        fn problem(&self) -> Problem<'_> {
            Problem { dm: &self.dm, prefs: &self.prefs, xi: &self.xi, grid: &self.grid }
        }
    }

    #[test]
    fn constant_map_ignores_its_argument() {
        let s = Setup::new(Preferences::constant(1.0).unwrap(), 0.0, 101, 201);
        let cfg = FixedPointConfig::default();
        let k = MollifierKernel::quartic(0.1).unwrap();
        let a = phi_eps(&s.problem(), &MeanFieldCurve::constant(1.0, 2, 0.0).unwrap(), &k, &cfg).unwrap();
        let b = phi_eps(&s.problem(), &MeanFieldCurve::constant(1.0, 2, 100.0).unwrap(), &k, &cfg).unwrap();
        assert!(a.image.sup_distance(&b.image) < 1e-10);
        assert!((a.image.values()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_case_converges_in_two_passes() {
        let s = Setup::new(Preferences::constant(1.0).unwrap(), 0.0, 101, 201);
        let cfg = FixedPointConfig { damping: 1.0, ..Default::default() };
        let k = MollifierKernel::quartic(0.1).unwrap();
        let fp = solve_fixed_point(&s.problem(), &k, &s.problem().riskless_guess(), &cfg).unwrap();
        assert!(fp.iterations <= 2);
        let oracle = MeanFieldCurve::from_fn(1.0, 101, |t| 1.0 + 0.04 * t).unwrap();
        assert!(fp.m.sup_distance(&oracle) < 2e-3);
        let again = solve_fixed_point(&s.problem(), &k, &fp.m, &cfg).unwrap();
        assert_eq!(again.iterations, 1);
        assert!(again.residual <= fp.tol);
    }

    #[test]
    fn damping_does_not_move_the_fixed_point() {
        let s = Setup::new(Preferences::new(1.0, 2.0).unwrap(), 0.02, 81, 241);
        let k = MollifierKernel::quartic(0.1).unwrap();
        let tol = 1e-7;
        let full = FixedPointConfig { damping: 1.0, tol: Some(tol), ..Default::default() };
        let half = FixedPointConfig { damping: 0.5, tol: Some(tol), ..Default::default() };
        let a = solve_fixed_point(&s.problem(), &k, &s.problem().riskless_guess(), &full).unwrap();
        let b = solve_fixed_point(&s.problem(), &k, &s.problem().riskless_guess(), &half).unwrap();
        // Both returned curves are within tol / (1 - L) of the fixed point.
        assert!(a.m.sup_distance(&b.m) <= 2.0 * tol * 10.0, "{}", a.m.sup_distance(&b.m));
    }

    #[test]
    fn constant_continuation_is_width_independent() {
        let s = Setup::new(Preferences::constant(1.0).unwrap(), 0.0, 101, 201);
        let cfg = FixedPointConfig { damping: 1.0, epsilon_schedule: vec![0.2, 0.1, 0.05], ..Default::default() };
        let eq = epsilon_continuation(&s.problem(), &cfg, None).unwrap();
        assert_eq!(eq.records.len(), 3);
        assert!(eq.continuation_diffs.iter().all(|d| *d < 1e-8));
        assert!(eq.final_record().membership.passed());
    }

    #[test]
    fn single_width_schedule() {
        let s = Setup::new(Preferences::new(1.0, 2.0).unwrap(), 0.02, 41, 161);
        let cfg = FixedPointConfig { epsilon_schedule: vec![0.1], ..Default::default() };
        let eq = epsilon_continuation(&s.problem(), &cfg, None).unwrap();
        assert_eq!(eq.records.len(), 1);
        assert_eq!(eq.final_record().epsilon, 0.1);
        assert!(eq.continuation_diffs.is_empty());
        assert!(eq.final_record().membership.passed());
    }

    #[test]
    fn exhausted_budget_reports_history() {
        let s = Setup::new(Preferences::new(1.0, 2.0).unwrap(), 0.02, 41, 161);
        let cfg = FixedPointConfig { max_iters: 1, tol: Some(1e-14), epsilon_schedule: vec![0.1], ..Default::default() };
        match epsilon_continuation(&s.problem(), &cfg, None) {
            Err(PartialContinuation { completed, error: Error::NoConvergence { history, .. } }) => {
                assert!(completed.is_empty());
                assert_eq!(history.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            FixedPointConfig { damping: 0.0, ..Default::default() },
            FixedPointConfig { epsilon_schedule: vec![0.1, 0.2], ..Default::default() },
            FixedPointConfig { epsilon_schedule: vec![0.1, 1e-4], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let xi = InitialDistribution::uniform(0.5, 1.5).unwrap();
        let sched = default_epsilon_schedule(&xi, 0.01, 10);
        assert!((sched[0] - 0.2 * xi.std_dev()).abs() < 1e-15);
        assert!(sched.iter().all(|e| *e >= 0.01));
    }
}
