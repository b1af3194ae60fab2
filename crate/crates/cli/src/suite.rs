//! Experiment manifests: which configurations to solve and validate, and
//! which named checks make up each acceptance criterion.
//!
//! ```text
//! [experiment piecewise]
//! config = piecewise_desk.conf
//! seed = 7
//!
//! [criterion 5]
//! title = mean-field consistency
//! experiment = piecewise
//! checks = fixed_point_residual, monte_carlo_mean
//! runtime = solve, monte_carlo_mean
//! budget_seconds = 60
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use mfgmv_core::validate::{Check, CheckKind, ValidationReport};

use crate::commands::{self, SolveOptions, ValidateOptions};
use crate::config::{ConfigError, EngineConfig};
use crate::store::{self, write_file};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub config: PathBuf,
    pub seed: u64,
    pub core_only: bool,
    /// Re-solve on a single worker and compare output hashes.
    pub determinism: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: String,
    pub title: String,
    pub experiment: String,
    pub checks: Vec<String>,
    /// `solve` or battery check names whose recorded runtimes are summed.
    pub runtime: Vec<String>,
    pub budget_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub experiments: Vec<Experiment>,
    pub criteria: Vec<Criterion>,
}

enum Section {
    Suite,
    Experiment(usize),
    Criterion(usize),
}

fn words(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl Manifest {
    /// Parses manifest text; relative config paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let at = |line: usize, message: String| ConfigError { line, message };
        let mut m = Manifest { name: String::new(), experiments: Vec::new(), criteria: Vec::new() };
        let mut section: Option<Section> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(h) = content.strip_prefix('[') {
                let h = h.strip_suffix(']').ok_or_else(|| at(line, "unterminated section header".into()))?.trim();
                let (kind, name) = h.split_once(' ').map(|(a, b)| (a, b.trim())).unwrap_or((h, ""));
                section = Some(match (kind, name.is_empty()) {
                    ("suite", true) => Section::Suite,
                    ("experiment", false) => {
                        if m.experiments.iter().any(|e| e.name == name) {
                            return Err(at(line, format!("duplicate experiment '{name}'")));
                        }
                        m.experiments.push(Experiment {
                            name: name.to_string(),
                            config: PathBuf::new(),
                            seed: 1,
                            core_only: false,
                            determinism: false,
                        });
                        Section::Experiment(m.experiments.len() - 1)
                    }
                    ("criterion", false) => {
                        if m.criteria.iter().any(|c| c.id == name) {
                            return Err(at(line, format!("duplicate criterion '{name}'")));
                        }
                        m.criteria.push(Criterion {
                            id: name.to_string(),
                            title: String::new(),
                            experiment: String::new(),
                            checks: Vec::new(),
                            runtime: Vec::new(),
                            budget_seconds: None,
                        });
                        Section::Criterion(m.criteria.len() - 1)
                    }
                    _ => return Err(at(line, format!("unknown section [{h}]"))),
                });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(line, format!("expected 'key = value', got '{content}'")))?;
            let flag = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(at(line, format!("{key}: expected true or false, got '{v}'"))),
            };
            match section.as_ref() {
                None => return Err(at(line, format!("key '{key}' appears before any section"))),
                Some(Section::Suite) => match key {
                    "name" => m.name = value.to_string(),
                    _ => return Err(at(line, format!("unknown key '{key}' in [suite]"))),
                },
                Some(Section::Experiment(i)) => {
                    let e = &mut m.experiments[*i];
                    match key {
                        "config" => e.config = base.join(value),
                        "seed" => e.seed = value.parse().map_err(|_| at(line, format!("seed: bad integer '{value}'")))?,
                        "core_only" => e.core_only = flag(value)?,
                        "determinism" => e.determinism = flag(value)?,
                        _ => return Err(at(line, format!("unknown key '{key}' in experiment '{}'", e.name))),
                    }
                }
                Some(Section::Criterion(i)) => {
                    let c = &mut m.criteria[*i];
                    match key {
                        "title" => c.title = value.to_string(),
                        "experiment" => c.experiment = value.to_string(),
                        "checks" => c.checks = words(value),
                        "runtime" => c.runtime = words(value),
                        "budget_seconds" => {
                            c.budget_seconds =
                                Some(value.parse().map_err(|_| at(line, format!("budget_seconds: bad number '{value}'")))?)
                        }
                        _ => return Err(at(line, format!("unknown key '{key}' in criterion '{}'", c.id))),
                    }
                }
            }
        }
        for e in &m.experiments {
            if e.config.as_os_str().is_empty() {
                return Err(at(0, format!("experiment '{}' has no config", e.name)));
            }
        }
        for c in &m.criteria {
            if !m.experiments.iter().any(|e| e.name == c.experiment) {
                return Err(at(0, format!("criterion '{}' references unknown experiment '{}'", c.id, c.experiment)));
            }
            if c.checks.is_empty() {
                return Err(at(0, format!("criterion '{}' lists no checks", c.id)));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: 0, message: format!("cannot read {}: {e}", path.display()) })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| ConfigError { message: format!("{}: {}", path.display(), e.message), ..e })
    }
}

struct Outcome {
    report: ValidationReport,
    solve_seconds: f64,
}

fn run_experiment(e: &Experiment, out: &Path) -> Result<Outcome, CliError> {
    let cfg = EngineConfig::load(&e.config).map_err(CliError::Config)?;
    let dir = out.join(&e.name);
    let solve_opts = SolveOptions { epsilon_floor: None };
    let clock = Instant::now();
    let solved = commands::solve(&cfg, &dir, &solve_opts);
    let solve_seconds = clock.elapsed().as_secs_f64();
    let solve_check = match &solved {
        Ok(_) => Check::flag("solve", CheckKind::Property, true, 0.0, 0.0, ""),
        Err(CliError::InvariantsFailed(v)) => Check::flag("solve", CheckKind::Property, false, v.len() as f64, 0.0, v.join("; ")),
        Err(_) => return Err(solved.err().expect("error branch")),
    };
    let vopts = ValidateOptions { seed: e.seed, paths: None, drift_bias: 0.0, core_only: e.core_only };
    let mut report = commands::validate(&cfg, &dir, &dir, &vopts)?;
    report.push(solve_check);
    report.meta("hash", store::output_hash(&dir)?);
    if e.determinism {
        let rerun = out.join(format!("{}_single_worker", e.name));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|err| CliError::Solution(format!("cannot build worker pool: {err}")))?;
        let again = pool.install(|| commands::solve(&cfg, &rerun, &solve_opts));
        match again {
            Ok(_) | Err(CliError::InvariantsFailed(_)) => {}
            Err(err) => return Err(err),
        }
        let same = store::output_hash(&dir)? == store::output_hash(&rerun)?;
        report.push(Check::flag(
            "determinism",
            CheckKind::Property,
            same,
            if same { 0.0 } else { 1.0 },
            0.0,
            format!("default pool vs {}", rerun.display()),
        ));
    }
    Ok(Outcome { report, solve_seconds })
}

/// Solves and validates every experiment, then grades each criterion.
pub fn run_suite(manifest: &Manifest, out: &Path) -> Result<ValidationReport, CliError> {
    let mut suite = ValidationReport::default();
    suite.meta("suite", &manifest.name);
    if manifest.criteria.is_empty() {
        log::warn!("manifest '{}' lists no criteria; nothing to check", manifest.name);
        return Ok(suite);
    }
    store::create_dir(out)?;
    let clock = Instant::now();
    let mut outcomes: Vec<(&str, Result<Outcome, CliError>)> = Vec::new();
    for e in &manifest.experiments {
        if !manifest.criteria.iter().any(|c| c.experiment == e.name) {
            continue;
        }
        log::info!("experiment {}: {}", e.name, e.config.display());
        let res = run_experiment(e, out);
        if let Err(err) = &res {
            log::error!("code={} experiment {}: {err}", err.code(), e.name);
        }
        outcomes.push((&e.name, res));
    }
    for c in &manifest.criteria {
        let outcome = outcomes.iter().find(|(n, _)| *n == c.experiment).map(|(_, r)| r);
        let check = match outcome {
            Some(Ok(o)) => {
                let mut failing = Vec::new();
                for name in &c.checks {
                    match o.report.get(name) {
                        Some(ch) if ch.passed => {}
                        Some(_) => failing.push(name.clone()),
                        None => failing.push(format!("{name} (missing)")),
                    }
                }
                let runtime: f64 = c
                    .runtime
                    .iter()
                    .map(|k| {
                        if k == "solve" {
                            o.solve_seconds
                        } else {
                            o.report
                                .meta
                                .iter()
                                .find(|(mk, _)| *mk == format!("runtime.{k}"))
                                .and_then(|(_, v)| v.parse().ok())
                                .unwrap_or(0.0)
                        }
                    })
                    .fold(0.0, |acc, v| acc + v);
                if let Some(budget) = c.budget_seconds {
                    if runtime > budget {
                        failing.push(format!("runtime {runtime:.1} s over budget {budget} s"));
                    }
                }
                Check::flag(
                    &format!("criterion_{}", c.id),
                    CheckKind::Property,
                    failing.is_empty(),
                    failing.len() as f64,
                    0.0,
                    format!("{}; runtime {runtime:.2} s; failing: [{}]", c.title, failing.join(", ")),
                )
            }
            _ => Check::flag(
                &format!("criterion_{}", c.id),
                CheckKind::Property,
                false,
                f64::NAN,
                0.0,
                format!("{}; experiment '{}' did not complete", c.title, c.experiment),
            ),
        };
        log::info!("criterion {} {}: {}", c.id, if check.passed { "PASS" } else { "FAIL" }, check.detail);
        suite.push(check);
    }
    for (name, res) in &outcomes {
        if let Ok(o) = res {
            suite.meta(&format!("{name}.solve_seconds"), format!("{:.3}", o.solve_seconds));
            if let Some((_, h)) = o.report.meta.iter().find(|(k, _)| k == "hash") {
                suite.meta(&format!("{name}.hash"), h);
            }
        }
    }
    let total = clock.elapsed().as_secs_f64();
    suite.meta("total_seconds", format!("{total:.1}"));
    if total > 900.0 {
        log::warn!("suite took {total:.0} s, above the 15 minute desk budget");
    }
    write_file(&out.join("suite_report.txt"), suite.to_kv())?;
    write_file(&out.join("suite_report.csv"), suite.to_csv())?;
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_reject() {
        let text = "[suite]\nname = t\n[experiment a]\nconfig = a.conf\nseed = 3\n[criterion 1]\nexperiment = a\nchecks = x, y\nbudget_seconds = 5\n";
        let m = Manifest::parse(text, Path::new("/base")).unwrap();
        assert_eq!(m.experiments[0].config, PathBuf::from("/base/a.conf"));
        assert_eq!(m.criteria[0].checks, vec!["x", "y"]);
        assert_eq!(m.criteria[0].budget_seconds, Some(5.0));
        let bad = text.replace("seed = 3", "sed = 3");
        assert_eq!(Manifest::parse(&bad, Path::new(".")).unwrap_err().line, 5);
        let dangling = text.replace("experiment = a", "experiment = b");
        assert!(Manifest::parse(&dangling, Path::new(".")).is_err());
    }

    #[test]
    fn empty_manifest_passes_vacuously() {
        let m = Manifest::parse("[suite]\nname = empty\n", Path::new(".")).unwrap();
        let r = run_suite(&m, Path::new("/nonexistent/never-created")).unwrap();
        assert!(r.passed());
        assert!(r.checks.is_empty());
    }
}
