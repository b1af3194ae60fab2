//! Market data, preferences, the initial wealth law and the constants derived
//! from them.
//!
//! All time-dependent coefficients are stored as samples on a uniform grid
//! over `[0, T]` and linearly interpolated in between.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Condition number above which a volatility matrix is treated as singular.
pub const MAX_VOL_CONDITION: f64 = 1e12;

/// Locates `t` on a uniform grid of `n` nodes over `[0, horizon]`.
///
/// Returns the left node index and the interpolation weight of the right node.
/// Times outside the grid are clamped.
pub(crate) fn locate(horizon: f64, n: usize, t: f64) -> (usize, f64) {
    debug_assert!(n >= 2);
    let cells = (n - 1) as f64;
    let s = (t / horizon * cells).clamp(0.0, cells);
    let i = (s.floor() as usize).min(n - 2);
    (i, s - i as f64)
}

/// Samples of a scalar function of time on a uniform grid over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldCurve {
    horizon: f64,
    values: Vec<f64>,
}

impl MeanFieldCurve {
    pub fn new(horizon: f64, values: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("curve horizon must be > 0, got {horizon}")));
        }
        if values.len() < 2 {
            return Err(Error::InvalidInput("a curve needs at least two samples".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("curve samples must be finite".into()));
        }
        Ok(Self { horizon, values })
    }

    pub fn constant(horizon: f64, nodes: usize, value: f64) -> Result<Self> {
        Self::new(horizon, vec![value; nodes.max(2)])
    }

    /// Samples `f` at `nodes` uniform times.
    pub fn from_fn(horizon: f64, nodes: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let nodes = nodes.max(2);
        let dt = horizon / (nodes - 1) as f64;
        Self::new(horizon, (0..nodes).map(|i| f(i as f64 * dt)).collect())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        if i + 1 == self.values.len() {
            self.horizon
        } else {
            self.horizon * i as f64 / (self.values.len() - 1) as f64
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let (i, w) = locate(self.horizon, self.values.len(), t);
        if w == 0.0 {
            self.values[i]
        } else {
            (1.0 - w) * self.values[i] + w * self.values[i + 1]
        }
    }

    /// Resamples onto `nodes` uniform times.
    pub fn resample(&self, nodes: usize) -> MeanFieldCurve {
        if nodes == self.values.len() {
            return self.clone();
        }
        let nodes = nodes.max(2);
        let dt = self.horizon / (nodes - 1) as f64;
        let values = (0..nodes).map(|i| self.at(i as f64 * dt)).collect();
        MeanFieldCurve { horizon: self.horizon, values }
    }

    /// Largest finite-difference quotient `|m(t_{i+1}) - m(t_i)| / dt`.
    pub fn lipschitz(&self) -> f64 {
        let dt = self.horizon / (self.values.len() - 1) as f64;
        self.values
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / dt)
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Sup-norm distance, evaluated on the finer of the two sample grids.
    pub fn sup_distance(&self, other: &MeanFieldCurve) -> f64 {
        let (fine, coarse) = if self.len() >= other.len() { (self, other) } else { (other, self) };
        (0..fine.len())
            .map(|i| (fine.values[i] - coarse.at(fine.time(i))).abs())
            .fold(0.0, f64::max)
    }

    /// Pointwise `(1 - alpha) * self + alpha * other` on this curve's grid.
    pub fn blend(&self, other: &MeanFieldCurve, alpha: f64) -> MeanFieldCurve {
        let values = (0..self.len())
            .map(|i| (1.0 - alpha) * self.values[i] + alpha * other.at(self.time(i)))
            .collect();
        MeanFieldCurve { horizon: self.horizon, values }
    }
}

/// Deterministic market coefficients: short rate `r`, drift `mu` and
/// volatility `sigma`, sampled uniformly on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    horizon: f64,
    rate: Vec<f64>,
    drift: Vec<DVector<f64>>,
    vol: Vec<DMatrix<f64>>,
}

impl MarketModel {
    pub fn from_samples(
        horizon: f64,
        rate: Vec<f64>,
        drift: Vec<DVector<f64>>,
        vol: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be > 0, got {horizon}")));
        }
        let n = rate.len();
        if n < 2 || drift.len() != n || vol.len() != n {
            return Err(Error::InvalidInput(format!(
                "market curves need the same number (>= 2) of samples, got r:{} mu:{} sigma:{}",
                rate.len(),
                drift.len(),
                vol.len()
            )));
        }
        let d = drift[0].len();
        if d == 0 {
            return Err(Error::InvalidInput("at least one risky asset is required".into()));
        }
        for (i, (mu, s)) in drift.iter().zip(&vol).enumerate() {
            if mu.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::InvalidInput(format!(
                    "sample {i}: expected mu in R^{d} and sigma in R^{d}x{d}"
                )));
            }
            if mu.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("sample {i}: non-finite coefficient")));
            }
        }
        if let Some(r) = rate.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return Err(Error::InvalidInput(format!("short rate must be finite and >= 0, got {r}")));
        }
        Ok(Self { horizon, rate, drift, vol })
    }

    /// Time-constant coefficients.
    pub fn constant(horizon: f64, rate: f64, drift: DVector<f64>, vol: DMatrix<f64>) -> Result<Self> {
        Self::from_samples(horizon, vec![rate; 2], vec![drift.clone(), drift], vec![vol.clone(), vol])
    }

    /// One asset with constant scalar coefficients.
    pub fn scalar(horizon: f64, rate: f64, drift: f64, vol: f64) -> Result<Self> {
        Self::constant(
            horizon,
            rate,
            DVector::from_element(1, drift),
            DMatrix::from_element(1, 1, vol),
        )
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_assets(&self) -> usize {
        self.drift[0].len()
    }

    pub fn num_samples(&self) -> usize {
        self.rate.len()
    }

    pub fn sample_time(&self, i: usize) -> f64 {
        if i + 1 == self.rate.len() {
            self.horizon
        } else {
            self.horizon * i as f64 / (self.rate.len() - 1) as f64
        }
    }

    pub fn rate_samples(&self) -> &[f64] {
        &self.rate
    }

    pub fn drift_samples(&self) -> &[DVector<f64>] {
        &self.drift
    }

    pub fn vol_samples(&self) -> &[DMatrix<f64>] {
        &self.vol
    }

    pub fn rate(&self, t: f64) -> f64 {
        let (i, w) = locate(self.horizon, self.rate.len(), t);
        (1.0 - w) * self.rate[i] + w * self.rate[i + 1]
    }

    pub fn drift(&self, t: f64) -> DVector<f64> {
        let (i, w) = locate(self.horizon, self.rate.len(), t);
        &self.drift[i] * (1.0 - w) + &self.drift[i + 1] * w
    }

    pub fn vol(&self, t: f64) -> DMatrix<f64> {
        let (i, w) = locate(self.horizon, self.rate.len(), t);
        &self.vol[i] * (1.0 - w) + &self.vol[i + 1] * w
    }
}

/// Quantities derived from a [`MarketModel`]: risk premium, market price of
/// risk, the discount factor `P0(t) = exp(int_t^T r)` and their extrema.
#[derive(Debug, Clone)]
pub struct DerivedMarket {
    model: MarketModel,
    theta: Vec<DVector<f64>>,
    lambda: Vec<DVector<f64>>,
    /// `int_0^{t_i} r` at the sample nodes (exact for piecewise-linear `r`).
    cum_rate: Vec<f64>,
    p0: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub r_max: f64,
    /// Extreme eigenvalues of `sigma sigma^T` over the sample nodes.
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Computes `theta`, `lambda = sigma^{-1} theta` and `P0` on the model's
/// sample grid.
pub fn derive_market(model: &MarketModel) -> Result<DerivedMarket> {
    let n = model.num_samples();
    let mut theta = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut sigma_min = f64::INFINITY;
    let mut sigma_max = 0.0_f64;
    for i in 0..n {
        let t = model.sample_time(i);
        let s = &model.vol[i];
        let sv = s.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_VOL_CONDITION) {
            return Err(Error::SingularVolatility { t, condition });
        }
        sigma_min = sigma_min.min(smin * smin);
        sigma_max = sigma_max.max(smax * smax);
        let th = model.drift[i].add_scalar(-model.rate[i]);
        let lam = s
            .clone()
            .lu()
            .solve(&th)
            .ok_or(Error::SingularVolatility { t, condition })?;
        theta.push(th);
        lambda.push(lam);
    }
    let norms: Vec<f64> = lambda.iter().map(|l| l.norm()).collect();
    let lambda_min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = norms.iter().copied().fold(0.0, f64::max);
    if !(lambda_min > 0.0) {
        return Err(Error::DegenerateLambda { min_norm: lambda_min });
    }

    // Composite trapezoid; exact for the piecewise-linear rate curve.
    let dt = model.horizon / (n - 1) as f64;
    let mut cum_rate = vec![0.0; n];
    for i in 1..n {
        cum_rate[i] = cum_rate[i - 1] + 0.5 * dt * (model.rate[i - 1] + model.rate[i]);
    }
    let total = cum_rate[n - 1];
    let mut p0: Vec<f64> = cum_rate.iter().map(|c| (total - c).exp()).collect();
    p0[n - 1] = 1.0;
    let p_min = p0.iter().copied().fold(f64::INFINITY, f64::min);
    let p_max = p0.iter().copied().fold(0.0, f64::max);
    let r_max = model.rate.iter().copied().fold(0.0, f64::max);

    Ok(DerivedMarket {
        model: model.clone(),
        theta,
        lambda,
        cum_rate,
        p0,
        lambda_min,
        lambda_max,
        p_min,
        p_max,
        r_max,
        sigma_min,
        sigma_max,
    })
}

impl DerivedMarket {
    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn horizon(&self) -> f64 {
        self.model.horizon
    }

    pub fn num_assets(&self) -> usize {
        self.model.num_assets()
    }

    pub fn theta_samples(&self) -> &[DVector<f64>] {
        &self.theta
    }

    pub fn lambda_samples(&self) -> &[DVector<f64>] {
        &self.lambda
    }

    pub fn p0_samples(&self) -> &[f64] {
        &self.p0
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.model.rate(t)
    }

    pub fn theta(&self, t: f64) -> DVector<f64> {
        self.model.drift(t).add_scalar(-self.model.rate(t))
    }

    pub fn sigma(&self, t: f64) -> DMatrix<f64> {
        self.model.vol(t)
    }

    /// `sigma(t)^{-1} theta(t)` with both factors interpolated at `t`.
    pub fn lambda(&self, t: f64) -> DVector<f64> {
        let (i, w) = locate(self.model.horizon, self.model.num_samples(), t);
        if w == 0.0 {
            return self.lambda[i].clone();
        }
        let s = self.model.vol(t);
        s.lu().solve(&self.theta(t)).unwrap_or_else(|| {
            &self.lambda[i] * (1.0 - w) + &self.lambda[i + 1] * w
        })
    }

    pub fn lambda_norm_sq(&self, t: f64) -> f64 {
        self.lambda(t).norm_squared()
    }

    /// `(sigma(t)^T)^{-1} lambda(t)`, the direction of the equilibrium
    /// dollar allocation.
    pub fn allocation_direction(&self, t: f64) -> DVector<f64> {
        let st = self.model.vol(t).transpose();
        let lam = self.lambda(t);
        st.lu().solve(&lam).expect("volatility checked invertible")
    }

    /// `int_a^b r(s) ds`, exact for the piecewise-linear rate.
    pub fn integrated_rate(&self, a: f64, b: f64) -> f64 {
        self.cum_rate_at(b) - self.cum_rate_at(a)
    }

    fn cum_rate_at(&self, t: f64) -> f64 {
        let n = self.model.num_samples();
        let (i, w) = locate(self.model.horizon, n, t);
        let dt = self.model.horizon / (n - 1) as f64;
        let h = w * dt;
        let r0 = self.model.rate[i];
        let r1 = self.model.rate[i + 1];
        self.cum_rate[i] + h * r0 + 0.5 * h * h * (r1 - r0) / dt
    }

    /// `P0(t) = exp(int_t^T r)`.
    pub fn p0(&self, t: f64) -> f64 {
        let (i, w) = locate(self.model.horizon, self.model.num_samples(), t);
        if w == 0.0 {
            return self.p0[i];
        }
        (self.cum_rate[self.cum_rate.len() - 1] - self.cum_rate_at(t)).exp()
    }
}

/// Risk-tolerance levels above (`gamma1`) and below or at (`gamma2`) the
/// population mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preferences {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Preferences {
    /// Accepts `0 < gamma1 <= gamma2`; equality is allowed for the
    /// constant-coefficient oracle runs.
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1.is_finite() && gamma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "preferences require gamma1 > 0, got gamma1={gamma1}"
            )));
        }
        if gamma2 < gamma1 {
            return Err(Error::InvalidInput(format!(
                "preferences require gamma1 <= gamma2, got gamma1={gamma1} gamma2={gamma2}"
            )));
        }
        Ok(Self { gamma1, gamma2 })
    }

    pub fn constant(gamma: f64) -> Result<Self> {
        Self::new(gamma, gamma)
    }

    pub fn is_constant(&self) -> bool {
        self.gamma1 == self.gamma2
    }
}

/// The discontinuous peer-relative coefficient: `gamma1` strictly above the
/// benchmark `m(t)`, `gamma2` at or below it.
pub fn gamma_piecewise(t: f64, x: f64, m: &MeanFieldCurve, prefs: &Preferences) -> f64 {
    if x > m.at(t) {
        prefs.gamma1
    } else {
        prefs.gamma2
    }
}

/// Law of the initial wealth.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    Uniform { lo: f64, hi: f64 },
    /// Normal(`mean`, `sd`) conditioned on `[lo, hi]`.
    TruncatedNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
    /// Piecewise-linear density through `values` at uniform nodes on `[lo, hi]`,
    /// normalized to unit mass.
    Tabulated { lo: f64, hi: f64, values: Vec<f64> },
}

impl InitialDistribution {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let d = InitialDistribution::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn truncated_normal(mean: f64, sd: f64, lo: f64, hi: f64) -> Result<Self> {
        let d = InitialDistribution::TruncatedNormal { mean, sd, lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn tabulated(lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "tabulated density needs >= 2 finite nonnegative values".into(),
            ));
        }
        let h = (hi - lo) / (values.len() - 1) as f64;
        let mass: f64 = values.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("tabulated density has zero mass".into()));
        }
        let d = InitialDistribution::Tabulated {
            lo,
            hi,
            values: values.into_iter().map(|v| v / mass).collect(),
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support();
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!(
                "initial wealth support must be a bounded interval, got [{lo}, {hi}]"
            )));
        }
        if let InitialDistribution::TruncatedNormal { mean, sd, .. } = self {
            if !(sd.is_finite() && *sd > 0.0 && mean.is_finite()) {
                return Err(Error::InvalidInput("truncated normal needs finite mean and sd > 0".into()));
            }
            let mass = self.normal_mass();
            if !(mass > 1e-300) {
                return Err(Error::InvalidInput("truncation interval carries no mass".into()));
            }
        }
        Ok(())
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            InitialDistribution::Uniform { lo, hi }
            | InitialDistribution::TruncatedNormal { lo, hi, .. }
            | InitialDistribution::Tabulated { lo, hi, .. } => (*lo, *hi),
        }
    }

    fn normal(&self) -> Option<Normal> {
        match self {
            InitialDistribution::TruncatedNormal { mean, sd, .. } => Normal::new(*mean, *sd).ok(),
            _ => None,
        }
    }

    fn normal_mass(&self) -> f64 {
        let (lo, hi) = self.support();
        let n = self.normal().expect("truncated normal");
        n.cdf(hi) - n.cdf(lo)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        match self {
            InitialDistribution::Uniform { .. } => 1.0 / (hi - lo),
            InitialDistribution::TruncatedNormal { .. } => {
                self.normal().expect("truncated normal").pdf(x) / self.normal_mass()
            }
            InitialDistribution::Tabulated { values, .. } => {
                let (i, w) = locate(hi - lo, values.len(), x - lo);
                (1.0 - w) * values[i] + w * values[i + 1]
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match self {
            InitialDistribution::Uniform { .. } => (x - lo) / (hi - lo),
            InitialDistribution::TruncatedNormal { .. } => {
                let n = self.normal().expect("truncated normal");
                ((n.cdf(x) - n.cdf(lo)) / self.normal_mass()).clamp(0.0, 1.0)
            }
            InitialDistribution::Tabulated { values, .. } => {
                let cells = values.len() - 1;
                let h = (hi - lo) / cells as f64;
                let (i, w) = locate(hi - lo, values.len(), x - lo);
                let full: f64 = values[..=i].windows(2).map(|p| 0.5 * h * (p[0] + p[1])).sum();
                let s = w * h;
                let slope = (values[i + 1] - values[i]) / h;
                (full + values[i] * s + 0.5 * slope * s * s).clamp(0.0, 1.0)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let (lo, hi) = self.support();
        match self {
            InitialDistribution::Uniform { .. } => 0.5 * (lo + hi),
            InitialDistribution::TruncatedNormal { mean, sd, .. } => {
                let std = Normal::new(0.0, 1.0).expect("standard normal");
                let a = (lo - mean) / sd;
                let b = (hi - mean) / sd;
                mean + sd * (std.pdf(a) - std.pdf(b)) / self.normal_mass()
            }
            InitialDistribution::Tabulated { values, .. } => {
                // Exact first moment of the piecewise-linear density.
                let h = (hi - lo) / (values.len() - 1) as f64;
                values
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let a = lo + i as f64 * h;
                        h * (w[0] * (a / 2.0 + h / 6.0) + w[1] * (a / 2.0 + h / 3.0))
                    })
                    .sum()
            }
        }
    }

    /// `int_a^b y f(y) dy` over the part of `[a, b]` inside the support.
    pub fn partial_mean(&self, a: f64, b: f64) -> f64 {
        let (lo, hi) = self.support();
        let (a, b) = (a.max(lo), b.min(hi));
        if !(b > a) {
            return 0.0;
        }
        match self {
            InitialDistribution::Uniform { .. } => 0.5 * (b * b - a * a) / (hi - lo),
            InitialDistribution::TruncatedNormal { mean, sd, .. } => {
                let n = self.normal().expect("truncated normal");
                (mean * (n.cdf(b) - n.cdf(a)) - sd * sd * (n.pdf(b) - n.pdf(a))) / self.normal_mass()
            }
            InitialDistribution::Tabulated { values, .. } => {
                let h = (hi - lo) / (values.len() - 1) as f64;
                let mut s = 0.0;
                for (i, w) in values.windows(2).enumerate() {
                    let left = lo + i as f64 * h;
                    let (c, d) = (a.max(left), b.min(left + h));
                    if d <= c {
                        continue;
                    }
                    // f(y) = alpha + beta y on this piece.
                    let beta = (w[1] - w[0]) / h;
                    let alpha = w[0] - beta * left;
                    let prim = |y: f64| alpha * y * y / 2.0 + beta * y * y * y / 3.0;
                    s += prim(d) - prim(c);
                }
                s
            }
        }
    }

    pub fn variance(&self) -> f64 {
        let (lo, hi) = self.support();
        match self {
            InitialDistribution::Uniform { .. } => (hi - lo).powi(2) / 12.0,
            _ => {
                // Composite Simpson on a fine grid; the law is bounded and smooth
                // enough that 4096 panels is far below any tolerance used here.
                let mu = self.mean();
                let n = 4096;
                let h = (hi - lo) / n as f64;
                let f = |x: f64| (x - mu).powi(2) * self.pdf(x);
                let mut s = f(lo) + f(hi);
                for k in 1..n {
                    let x = lo + k as f64 * h;
                    s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
                }
                s * h / 3.0
            }
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Inverse-CDF transform of a uniform draw `q` in `[0, 1)`.
    pub fn quantile(&self, q: f64) -> f64 {
        let (lo, hi) = self.support();
        let q = q.clamp(0.0, 1.0);
        match self {
            InitialDistribution::Uniform { .. } => lo + q * (hi - lo),
            InitialDistribution::TruncatedNormal { .. } => {
                let n = self.normal().expect("truncated normal");
                let target = n.cdf(lo) + q * self.normal_mass();
                n.inverse_cdf(target).clamp(lo, hi)
            }
            InitialDistribution::Tabulated { .. } => {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..100 {
                    let mid = 0.5 * (a + b);
                    if self.cdf(mid) < q {
                        a = mid;
                    } else {
                        b = mid;
                    }
                    if b - a <= 1e-15 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                0.5 * (a + b)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// Coefficient bounds of the regularized problem and of the invariant set
/// of mean curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    /// Lower ellipticity bound `lambda_min^2 gamma1^2 / 2`.
    pub kappa: f64,
    /// Upper ellipticity bound `lambda_max^2 gamma2^2 / 2`.
    pub lambda_bnd: f64,
    /// Drift bound `lambda_max^2 gamma2`.
    pub m_bnd: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub m1_cap: f64,
}

/// Default cap for the sanity check on `u_x`.
pub const DEFAULT_M1_CAP: f64 = 10.0;

pub fn bound_constants(
    dm: &DerivedMarket,
    prefs: &Preferences,
    xi_mean: f64,
    m1_observed: f64,
) -> BoundConstants {
    let horizon = dm.horizon();
    let kappa = 0.5 * dm.lambda_min.powi(2) * prefs.gamma1.powi(2);
    let lambda_bnd = 0.5 * dm.lambda_max.powi(2) * prefs.gamma2.powi(2);
    let m_bnd = dm.lambda_max.powi(2) * prefs.gamma2;
    let c3 = dm.lambda_max.powi(2) / dm.p_min * prefs.gamma2 * (2.0 + m1_observed);
    let c4 = (xi_mean.abs() + c3 * horizon) * (dm.r_max * horizon).exp();
    let c5 = dm.r_max * c4 + c3;
    BoundConstants {
        kappa,
        lambda_bnd,
        m_bnd,
        c3,
        c4,
        c5,
        m1_cap: DEFAULT_M1_CAP,
    }
}
