//! Sectioned `key = value` configuration.

use std::fmt::{self, Write as _};

use mfgmv_core::fixedpoint::{default_epsilon_floor, default_epsilon_schedule, ExpectationEngine, FixedPointConfig};
use mfgmv_core::model::{derive_market, DerivedMarket, InitialDistribution, MarketModel, Preferences};
use mfgmv_core::mollify::KernelKind;
use mfgmv_core::pde::{Advection, SchemeOptions, SpaceTimeGrid};
use mfgmv_core::Error;
use nalgebra::{DMatrix, DVector};

/// Parse failure; `line` is 1-based, 0 when the problem is not tied to a line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            write!(f, "{}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketSection {
    pub horizon: f64,
    pub assets: usize,
    /// One value (constant) or one per sample time.
    pub rate: Vec<f64>,
    /// `assets` values (constant) or `assets` per sample time.
    pub drift: Vec<f64>,
    /// Row-major `assets x assets` matrices, one or one per sample time.
    pub vol: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialSection {
    Uniform { lo: f64, hi: f64 },
    TruncatedNormal { mean: f64, sd: f64, lo: f64, hi: f64 },
    Tabulated { lo: f64, hi: f64, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSection {
    pub nt: usize,
    pub nx: usize,
    pub margin_factor: f64,
    pub theta: f64,
    pub advection: Advection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MollifierSection {
    pub kind: KernelKind,
    /// Explicit widths; the geometric default is used when absent.
    pub schedule: Option<Vec<f64>>,
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSection {
    pub damping: f64,
    pub tol: Option<f64>,
    pub max_iters: usize,
    pub engine: ExpectationEngine,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: String,
    pub log: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub market: MarketSection,
    pub gamma1: f64,
    pub gamma2: f64,
    pub initial: InitialSection,
    pub grid: GridSection,
    pub mollifier: MollifierSection,
    pub fixedpoint: FixedPointSection,
    pub output: OutputSection,
}

/// Everything a run needs, built from an [`EngineConfig`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub dm: DerivedMarket,
    pub prefs: Preferences,
    pub xi: InitialDistribution,
    pub grid: SpaceTimeGrid,
    pub fixed_point: FixedPointConfig,
}

const KEYS: &[(&str, &[&str])] = &[
    ("market", &["horizon", "assets", "rate", "drift", "vol"]),
    ("preferences", &["gamma1", "gamma2"]),
    ("initial", &["kind", "lo", "hi", "mean", "sd", "values"]),
    ("grid", &["nt", "nx", "margin_factor", "theta", "advection"]),
    ("mollifier", &["kind", "schedule", "floor"]),
    ("fixedpoint", &["damping", "tol", "max_iters", "engine", "paths", "seed"]),
    ("output", &["dir", "log"]),
];

/// Raw entries with their line numbers.
struct Entries {
    items: Vec<(String, String, String, usize)>,
}

impl Entries {
    fn find(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.items
            .iter()
            .find(|(s, k, _, _)| s == section && k == key)
            .map(|(_, _, v, l)| (v.as_str(), *l))
    }

    fn required(&self, section: &str, key: &str) -> Result<(&str, usize), ConfigError> {
        self.find(section, key)
            .ok_or_else(|| ConfigError::at(0, format!("missing required key {section}.{key}")))
    }

    fn f64_req(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        let (v, l) = self.required(section, key)?;
        parse_f64(v, l, key)
    }

    fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.find(section, key) {
            Some((v, l)) => parse_f64(v, l, key),
            None => Ok(default),
        }
    }

    fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.find(section, key).map(|(v, l)| parse_f64(v, l, key)).transpose()
    }

    fn usize_req(&self, section: &str, key: &str) -> Result<usize, ConfigError> {
        let (v, l) = self.required(section, key)?;
        parse_int(v, l, key)
    }

    fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.find(section, key) {
            Some((v, l)) => parse_int(v, l, key),
            None => Ok(default),
        }
    }

    fn list_req(&self, section: &str, key: &str) -> Result<(Vec<f64>, usize), ConfigError> {
        let (v, l) = self.required(section, key)?;
        Ok((parse_list(v, l, key)?, l))
    }

    fn str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> (&'a str, usize) {
        self.find(section, key).unwrap_or((default, 0))
    }
}

fn parse_f64(v: &str, line: usize, key: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ConfigError::at(line, format!("{key}: expected a finite number, got '{v}'")))
}

fn parse_int<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T, ConfigError> {
    v.parse::<T>()
        .map_err(|_| ConfigError::at(line, format!("{key}: expected a nonnegative integer, got '{v}'")))
}

fn parse_list(v: &str, line: usize, key: &str) -> Result<Vec<f64>, ConfigError> {
    let out: Vec<f64> = v
        .split(',')
        .map(|s| parse_f64(s.trim(), line, key))
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(ConfigError::at(line, format!("{key}: empty list")));
    }
    Ok(out)
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut items: Vec<(String, String, String, usize)> = Vec::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, "unterminated section header"))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::at(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line, format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim();
        let value = value.trim();
        let sec = section
            .as_deref()
            .ok_or_else(|| ConfigError::at(line, format!("key '{key}' appears before any section")))?;
        let allowed = KEYS.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            return Err(ConfigError::at(line, format!("unknown key '{key}' in [{sec}]")));
        }
        if items.iter().any(|(s, k, _, _)| s == sec && k == key) {
            return Err(ConfigError::at(line, format!("duplicate key '{key}' in [{sec}]")));
        }
        items.push((sec.to_string(), key.to_string(), value.to_string(), line));
    }
    Ok(Entries { items })
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let e = tokenize(text)?;

        let horizon = e.f64_req("market", "horizon")?;
        let assets = e.usize_or("market", "assets", 1)?;
        if assets == 0 {
            let l = e.find("market", "assets").map(|p| p.1).unwrap_or(0);
            return Err(ConfigError::at(l, "assets must be at least 1"));
        }
        let (rate, _) = e.list_req("market", "rate")?;
        let (drift, drift_line) = e.list_req("market", "drift")?;
        let (vol, vol_line) = e.list_req("market", "vol")?;
        if drift.len() % assets != 0 {
            return Err(ConfigError::at(drift_line, format!("drift: length must be a multiple of {assets}")));
        }
        if vol.len() % (assets * assets) != 0 {
            return Err(ConfigError::at(vol_line, format!("vol: length must be a multiple of {}", assets * assets)));
        }
        let market = MarketSection { horizon, assets, rate, drift, vol };

        let gamma1 = e.f64_req("preferences", "gamma1")?;
        let gamma2 = e.f64_req("preferences", "gamma2")?;

        let (kind, kind_line) = e.required("initial", "kind")?;
        let initial = match kind {
            "uniform" => InitialSection::Uniform { lo: e.f64_req("initial", "lo")?, hi: e.f64_req("initial", "hi")? },
            "truncated_normal" => InitialSection::TruncatedNormal {
                mean: e.f64_req("initial", "mean")?,
                sd: e.f64_req("initial", "sd")?,
                lo: e.f64_req("initial", "lo")?,
                hi: e.f64_req("initial", "hi")?,
            },
            "tabulated" => InitialSection::Tabulated {
                lo: e.f64_req("initial", "lo")?,
                hi: e.f64_req("initial", "hi")?,
                values: e.list_req("initial", "values")?.0,
            },
            other => {
                return Err(ConfigError::at(
                    kind_line,
                    format!("kind: expected uniform, truncated_normal or tabulated, got '{other}'"),
                ))
            }
        };

        let (adv, adv_line) = e.str_or("grid", "advection", "upwind");
        let advection = match adv {
            "central" => Advection::Central,
            "upwind" => Advection::Upwind,
            other => return Err(ConfigError::at(adv_line, format!("advection: expected central or upwind, got '{other}'"))),
        };
        let grid = GridSection {
            nt: e.usize_req("grid", "nt")?,
            nx: e.usize_req("grid", "nx")?,
            margin_factor: e.f64_or("grid", "margin_factor", 1.0)?,
            theta: e.f64_or("grid", "theta", 1.0)?,
            advection,
        };

        let (kname, kline) = e.str_or("mollifier", "kind", "quartic");
        let kind = KernelKind::parse(kname)
            .ok_or_else(|| ConfigError::at(kline, format!("kind: unknown mollifier '{kname}'")))?;
        let schedule = e
            .find("mollifier", "schedule")
            .map(|(v, l)| parse_list(v, l, "schedule"))
            .transpose()?;
        let mollifier = MollifierSection { kind, schedule, floor: e.f64_opt("mollifier", "floor")? };

        let defaults = FixedPointConfig::default();
        let (ename, eline) = e.str_or("fixedpoint", "engine", "density");
        let engine = ExpectationEngine::parse(ename)
            .ok_or_else(|| ConfigError::at(eline, format!("engine: expected density or monte_carlo, got '{ename}'")))?;
        let seed = match e.find("fixedpoint", "seed") {
            Some((v, l)) => parse_int(v, l, "seed")?,
            None => defaults.mc_seed,
        };
        let fixedpoint = FixedPointSection {
            damping: e.f64_or("fixedpoint", "damping", defaults.damping)?,
            tol: e.f64_opt("fixedpoint", "tol")?,
            max_iters: e.usize_or("fixedpoint", "max_iters", defaults.max_iters)?,
            engine,
            paths: e.usize_or("fixedpoint", "paths", defaults.mc_paths)?,
            seed,
        };

        let (log, log_line) = e.str_or("output", "log", "info");
        if !matches!(log, "error" | "warn" | "info" | "debug") {
            return Err(ConfigError::at(log_line, format!("log: expected error, warn, info or debug, got '{log}'")));
        }
        let output = OutputSection {
            dir: e.str_or("output", "dir", "out").0.to_string(),
            log: log.to_string(),
        };

        Ok(Self { market, gamma1, gamma2, initial, grid, mollifier, fixedpoint, output })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(0, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
    }

    /// Normalized text form; every key is written explicitly.
    pub fn dump(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let m = &self.market;
        let _ = writeln!(s, "[market]");
        let _ = writeln!(s, "horizon = {:?}", m.horizon);
        let _ = writeln!(s, "assets = {}", m.assets);
        let _ = writeln!(s, "rate = {}", list(&m.rate));
        let _ = writeln!(s, "drift = {}", list(&m.drift));
        let _ = writeln!(s, "vol = {}", list(&m.vol));
        let _ = writeln!(s, "\n[preferences]");
        let _ = writeln!(s, "gamma1 = {:?}", self.gamma1);
        let _ = writeln!(s, "gamma2 = {:?}", self.gamma2);
        let _ = writeln!(s, "\n[initial]");
        match &self.initial {
            InitialSection::Uniform { lo, hi } => {
                let _ = writeln!(s, "kind = uniform\nlo = {lo:?}\nhi = {hi:?}");
            }
            InitialSection::TruncatedNormal { mean, sd, lo, hi } => {
                let _ = writeln!(s, "kind = truncated_normal\nmean = {mean:?}\nsd = {sd:?}\nlo = {lo:?}\nhi = {hi:?}");
            }
            InitialSection::Tabulated { lo, hi, values } => {
                let _ = writeln!(s, "kind = tabulated\nlo = {lo:?}\nhi = {hi:?}\nvalues = {}", list(values));
            }
        }
        let g = &self.grid;
        let adv = match g.advection {
            Advection::Central => "central",
            Advection::Upwind => "upwind",
        };
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(
            s,
            "nt = {}\nnx = {}\nmargin_factor = {:?}\ntheta = {:?}\nadvection = {adv}",
            g.nt, g.nx, g.margin_factor, g.theta
        );
        let _ = writeln!(s, "\n[mollifier]");
        let _ = writeln!(s, "kind = {}", self.mollifier.kind.name());
        if let Some(sched) = &self.mollifier.schedule {
            let _ = writeln!(s, "schedule = {}", list(sched));
        }
        if let Some(floor) = self.mollifier.floor {
            let _ = writeln!(s, "floor = {floor:?}");
        }
        let f = &self.fixedpoint;
        let _ = writeln!(s, "\n[fixedpoint]");
        let _ = writeln!(s, "damping = {:?}", f.damping);
        if let Some(tol) = f.tol {
            let _ = writeln!(s, "tol = {tol:?}");
        }
        let _ = writeln!(
            s,
            "max_iters = {}\nengine = {}\npaths = {}\nseed = {}",
            f.max_iters,
            f.engine.name(),
            f.paths,
            f.seed
        );
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}\nlog = {}", self.output.dir, self.output.log);
        s
    }

    pub fn market_model(&self) -> Result<MarketModel, Error> {
        let m = &self.market;
        let d = m.assets;
        let counts = [m.rate.len(), m.drift.len() / d, m.vol.len() / (d * d)];
        let k = counts.iter().copied().max().unwrap_or(1);
        if counts.iter().any(|&c| c != 1 && c != k) {
            return Err(Error::InvalidInput(format!(
                "market curves have inconsistent sample counts (rate {}, drift {}, vol {})",
                counts[0], counts[1], counts[2]
            )));
        }
        let k = k.max(2);
        let pick = |c: usize, i: usize| if c == 1 { 0 } else { i };
        let rate = (0..k).map(|i| m.rate[pick(counts[0], i)]).collect();
        let drift = (0..k)
            .map(|i| {
                let o = pick(counts[1], i) * d;
                DVector::from_column_slice(&m.drift[o..o + d])
            })
            .collect();
        let vol = (0..k)
            .map(|i| {
                let o = pick(counts[2], i) * d * d;
                DMatrix::from_row_slice(d, d, &m.vol[o..o + d * d])
            })
            .collect();
        MarketModel::from_samples(m.horizon, rate, drift, vol)
    }

    pub fn initial_distribution(&self) -> Result<InitialDistribution, Error> {
        match &self.initial {
            InitialSection::Uniform { lo, hi } => InitialDistribution::uniform(*lo, *hi),
            InitialSection::TruncatedNormal { mean, sd, lo, hi } => InitialDistribution::truncated_normal(*mean, *sd, *lo, *hi),
            InitialSection::Tabulated { lo, hi, values } => InitialDistribution::tabulated(*lo, *hi, values.clone()),
        }
    }

    /// Builds the run; `floor_override` replaces the configured width floor.
    pub fn build(&self, floor_override: Option<f64>) -> Result<Setup, Error> {
        let dm = derive_market(&self.market_model()?)?;
        let prefs = Preferences::new(self.gamma1, self.gamma2)?;
        let xi = self.initial_distribution()?;
        let g = &self.grid;
        let grid = SpaceTimeGrid::for_problem(&dm, &prefs, &xi, g.nt, g.nx, g.margin_factor)?;
        let resolvable = 2.0 * grid.dx() * dm.p_max;
        let floor = floor_override
            .or(self.mollifier.floor)
            .unwrap_or_else(|| default_epsilon_floor(&grid, &dm, &xi));
        if floor < resolvable {
            return Err(Error::DomainTooSmall(format!(
                "width floor {floor} is below 2 dx P_max = {resolvable}; refine the grid or raise the floor"
            )));
        }
        let epsilon_schedule = match &self.mollifier.schedule {
            Some(s) => s.clone(),
            None => default_epsilon_schedule(&xi, floor, 8),
        };
        let f = &self.fixedpoint;
        let fixed_point = FixedPointConfig {
            damping: f.damping,
            tol: f.tol,
            max_iters: f.max_iters,
            epsilon_schedule,
            epsilon_floor: floor,
            kernel: self.mollifier.kind,
            engine: f.engine,
            mc_paths: f.paths,
            mc_seed: f.seed,
            scheme: SchemeOptions { theta: g.theta, advection: g.advection, ..SchemeOptions::default() },
        };
        fixed_point.validate()?;
        Ok(Setup { dm, prefs, xi, grid, fixed_point })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "\
[market]
horizon = 1
rate = 0.02
drift = 0.06
vol = 0.2

[preferences]
gamma1 = 1
gamma2 = 2

[initial]
kind = uniform
lo = 0.5
hi = 1.5

[grid]
nt = 101
nx = 201
";

    #[test]
    fn defaults_fill_optional_keys() {
        let c = EngineConfig::parse(BASIC).unwrap();
        assert_eq!(c.market.assets, 1);
        assert_eq!(c.grid.margin_factor, 1.0);
        assert_eq!(c.fixedpoint.damping, 0.5);
        assert_eq!(c.output.dir, "out");
        assert!(c.mollifier.schedule.is_none());
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let text = BASIC.replace("gamma2 = 2", "gamma_2 = 2");
        let err = EngineConfig::parse(&text).unwrap_err();
        assert_eq!(err.line, 9);
        assert!(err.message.contains("gamma_2"));
    }

    #[test]
    fn malformed_lines() {
        assert_eq!(EngineConfig::parse("horizon = 1").unwrap_err().line, 1);
        assert_eq!(EngineConfig::parse("[bogus]").unwrap_err().line, 1);
        assert_eq!(EngineConfig::parse("[market]\nhorizon 1").unwrap_err().line, 2);
        let text = BASIC.replace("nx = 201", "nx = -3");
        assert_eq!(EngineConfig::parse(&text).unwrap_err().line, 18);
        let missing = BASIC.replace("vol = 0.2\n", "");
        assert!(EngineConfig::parse(&missing).unwrap_err().message.contains("market.vol"));
    }

    #[test]
    fn dump_is_a_normal_form() {
        let c = EngineConfig::parse(BASIC).unwrap();
        let dumped = c.dump();
        let again = EngineConfig::parse(&dumped).unwrap();
        assert_eq!(c, again);
        assert_eq!(dumped, again.dump());
    }

    #[test]
    fn inverted_preferences_are_rejected_at_build() {
        let text = BASIC.replace("gamma2 = 2", "gamma2 = 0.5");
        let err = EngineConfig::parse(&text).unwrap().build(None).unwrap_err();
        assert!(err.to_string().contains("gamma1 <= gamma2"));
    }

    #[test]
    fn low_floor_is_a_domain_error() {
        let c = EngineConfig::parse(BASIC).unwrap();
        assert!(matches!(c.build(Some(1e-4)), Err(Error::DomainTooSmall(_))));
        assert!(c.build(None).is_ok());
    }

    #[test]
    fn sampled_market_curves() {
        let text = BASIC.replace("rate = 0.02", "rate = 0.01, 0.02, 0.03");
        let c = EngineConfig::parse(&text).unwrap();
        let model = c.market_model().unwrap();
        assert_eq!(model.num_samples(), 3);
        let bad = BASIC.replace("rate = 0.02", "rate = 0.01, 0.02").replace("drift = 0.06", "drift = 0.06, 0.07, 0.08");
        assert!(EngineConfig::parse(&bad).unwrap().market_model().is_err());
    }
}
