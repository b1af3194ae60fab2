//! Mollified risk-tolerance coefficient and the regularized PDE coefficients.
//!
//! Convolving the two-level step with a unit-mass kernel `omega_eps` reduces
//! to the kernel's cumulative distribution:
//! `gamma_eps(t, y) = gamma2 + (gamma1 - gamma2) * W_eps(y - m(t))`.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::{DerivedMarket, MeanFieldCurve, Preferences};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `omega(z) = 15/16 (1 - z^2)^2` on `[-1, 1]`; C^1 with a closed-form CDF.
    Quartic,
    /// `omega(z) = c exp(-1 / (1 - z^2))` on `(-1, 1)`; C^infinity.
    Bump,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Quartic => "quartic",
            KernelKind::Bump => "bump",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quartic" | "quartic-polynomial" => Some(KernelKind::Quartic),
            "bump" | "bump-exponential" => Some(KernelKind::Bump),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierKernel {
    kind: KernelKind,
    epsilon: f64,
}

fn bump_raw(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - z * z)).exp()
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn bump_normalizer() -> f64 {
    static NORM: OnceLock<f64> = OnceLock::new();
    *NORM.get_or_init(|| 2.0 * adaptive_simpson(&bump_raw, 0.0, 1.0, 1e-15))
}

impl MollifierKernel {
    pub fn new(kind: KernelKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("mollifier width must be > 0, got {epsilon}")));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn quartic(epsilon: f64) -> Result<Self> {
        Self::new(KernelKind::Quartic, epsilon)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Unit-width profile `omega(z)`.
    pub fn profile(&self, z: f64) -> f64 {
        match self.kind {
            KernelKind::Quartic => {
                if z.abs() >= 1.0 {
                    0.0
                } else {
                    let q = 1.0 - z * z;
                    15.0 / 16.0 * q * q
                }
            }
            KernelKind::Bump => bump_raw(z) / bump_normalizer(),
        }
    }

    /// `sup |omega|`, attained at the origin.
    pub fn profile_max(&self) -> f64 {
        self.profile(0.0)
    }

    /// Scaled kernel `omega_eps(s) = omega(s / eps) / eps`.
    pub fn density(&self, s: f64) -> f64 {
        self.profile(s / self.epsilon) / self.epsilon
    }

    /// Lipschitz constant of `gamma_eps(t, .)`: `(gamma2 - gamma1) sup|omega| / eps`.
    pub fn gamma_lipschitz(&self, prefs: &Preferences) -> f64 {
        (prefs.gamma2 - prefs.gamma1) * self.profile_max() / self.epsilon
    }
}

/// `W_eps(s) = int_{-inf}^s omega_eps`.
pub fn kernel_cdf(kernel: &MollifierKernel, s: f64) -> f64 {
    let z = s / kernel.epsilon;
    if z <= -1.0 {
        return 0.0;
    }
    if z >= 1.0 {
        return 1.0;
    }
    match kernel.kind {
        KernelKind::Quartic => {
            let z2 = z * z;
            0.5 + 15.0 / 16.0 * z * (1.0 - z2 * (2.0 / 3.0 - z2 / 5.0))
        }
        KernelKind::Bump => {
            if z == 0.0 {
                return 0.5;
            }
            // Integrate over the shorter tail for accuracy, then use symmetry.
            let tail = adaptive_simpson(&bump_raw, z.abs(), 1.0, 1e-13) / bump_normalizer();
            if z < 0.0 {
                tail
            } else {
                1.0 - tail
            }
        }
    }
}

/// Mollified coefficient at wealth `y`, given the benchmark value `m_t = m(t)`.
#[inline]
pub fn gamma_eps_at(y: f64, m_t: f64, prefs: &Preferences, kernel: &MollifierKernel) -> f64 {
    if prefs.gamma1 == prefs.gamma2 {
        return prefs.gamma1;
    }
    prefs.gamma2 + (prefs.gamma1 - prefs.gamma2) * kernel_cdf(kernel, y - m_t)
}

/// `gamma_eps(t, y)` for wealth `y`; callers pass `y = u / P0(t)`.
pub fn gamma_eps(
    t: f64,
    y: f64,
    m: &MeanFieldCurve,
    prefs: &Preferences,
    kernel: &MollifierKernel,
) -> f64 {
    gamma_eps_at(y, m.at(t), prefs, kernel)
}

/// Diffusion coefficient `D_eps(t, y) = |lambda(t)|^2 gamma_eps(t, y / P0(t))^2 / 2`,
/// `y` being the raw PDE unknown.
pub fn coeff_d_eps(
    t: f64,
    y: f64,
    dm: &DerivedMarket,
    m: &MeanFieldCurve,
    prefs: &Preferences,
    kernel: &MollifierKernel,
) -> f64 {
    let g = gamma_eps(t, y / dm.p0(t), m, prefs, kernel);
    0.5 * dm.lambda_norm_sq(t) * g * g
}

/// Drift coefficient `V_eps(t, y) = |lambda(t)|^2 gamma_eps(t, y / P0(t))`.
pub fn coeff_v_eps(
    t: f64,
    y: f64,
    dm: &DerivedMarket,
    m: &MeanFieldCurve,
    prefs: &Preferences,
    kernel: &MollifierKernel,
) -> f64 {
    dm.lambda_norm_sq(t) * gamma_eps(t, y / dm.p0(t), m, prefs, kernel)
}
