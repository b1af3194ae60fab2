use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_CONSTANT: &str = "\
[market]
horizon = 1
rate = 0
drift = 0.04
vol = 0.2

[preferences]
gamma1 = 1
gamma2 = 1

[initial]
kind = uniform
lo = 0.5
hi = 1.5

[grid]
nt = 101
nx = 201

[mollifier]
schedule = 0.2, 0.1

[fixedpoint]
damping = 1
";

const SMALL_PIECEWISE: &str = "\
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
nx = 301

[mollifier]
schedule = 0.2, 0.1

[fixedpoint]
max_iters = 1
";

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.conf");
    std::fs::write(&p, text).unwrap();
    p
}

fn mfgmv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgmv")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn solve_constant(name: &str) -> (PathBuf, PathBuf) {
    let dir = scratch(name);
    let cfg = write_config(&dir, SMALL_CONSTANT);
    let out = dir.join("solution");
    let o = mfgmv(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (cfg, out)
}

#[test]
fn constant_solve_writes_oracle_mean() {
    let (_, out) = solve_constant("solve_ok");
    let text = std::fs::read_to_string(out.join("eps_01/m.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,m"));
    let mut count = 0;
    for line in lines {
        let (ts, ms) = line.split_once(',').unwrap();
        let digits = ms.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
        assert_eq!(digits, 17, "{ms}");
        let (t, m): (f64, f64) = (ts.parse().unwrap(), ms.parse().unwrap());
        assert!((m - (1.0 + 0.04 * t)).abs() <= 2e-3, "t={t} m={m}");
        count += 1;
    }
    assert_eq!(count, 101);
    let b = std::fs::read_to_string(out.join("eps_01/b.csv")).unwrap();
    assert!(b.starts_with("t,b,residual\n"));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("status = complete"));
    assert!(std::fs::read(out.join("eps_00/u.ckpt")).unwrap().starts_with(b"MFGMV1\n"));
}

#[test]
fn inverted_preferences_exit_one() {
    let dir = scratch("prefs");
    let cfg = write_config(&dir, &SMALL_CONSTANT.replace("gamma2 = 1", "gamma2 = 0.5"));
    let o = mfgmv(&["solve", "--config", s(&cfg), "--out", s(&dir.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("ERROR code=InvalidInput"), "{err}");
    assert!(err.contains("gamma1 <= gamma2"), "{err}");
}

#[test]
fn unknown_key_exit_one_with_line() {
    let dir = scratch("typo");
    let cfg = write_config(&dir, &SMALL_CONSTANT.replace("nx = 201", "nxx = 201"));
    let o = mfgmv(&["solve", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("ERROR code=ConfigError") && err.contains("line 18"), "{err}");
}

#[test]
fn floor_below_resolution_exit_one() {
    let dir = scratch("floor");
    let cfg = write_config(&dir, SMALL_CONSTANT);
    let o = mfgmv(&["solve", "--config", s(&cfg), "--out", s(&dir.join("x")), "--epsilon-floor", "1e-4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ERROR code=DomainTooSmall"));
}

#[test]
fn no_convergence_exit_two_keeps_partial_results() {
    let dir = scratch("noconv");
    let cfg = write_config(&dir, SMALL_PIECEWISE);
    let out = dir.join("solution");
    let o = mfgmv(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("ERROR code=NoConvergence"));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("status = partial"));
    assert!(summary.contains("error.code = NoConvergence"));
}

#[test]
fn validate_fresh_constant_solution() {
    let (cfg, out) = solve_constant("validate_ok");
    let o = mfgmv(&["validate", "--config", s(&cfg), "--solution", s(&out), "--core-only", "--paths", "20000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("check.constant_u_oracle.passed = true"));
    assert!(report.contains("passed = true"));
    assert!(std::fs::read_to_string(out.join("report.csv")).unwrap().starts_with("name,kind,value,tolerance,passed,detail\n"));
}

#[test]
fn biased_drift_exit_four_names_martingale() {
    let (cfg, out) = solve_constant("validate_bias");
    let o = mfgmv(&[
        "validate", "--config", s(&cfg), "--solution", s(&out), "--core-only", "--drift-bias", "0.01",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("ERROR code=ChecksFailed") && err.contains("martingale"), "{err}");
}

#[test]
fn corrupted_checkpoint_exit_one() {
    let (cfg, out) = solve_constant("corrupt");
    let ck = out.join("eps_00/u.ckpt");
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0x01;
    std::fs::write(&ck, bytes).unwrap();
    let o = mfgmv(&["validate", "--config", s(&cfg), "--solution", s(&out), "--core-only"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
}

#[test]
fn simulate_is_reproducible_and_rejects_zero_paths() {
    let (cfg, out) = solve_constant("simulate");
    let run = |dir: &str| {
        let target = out.join(dir);
        let o = mfgmv(&[
            "simulate", "--config", s(&cfg), "--solution", s(&out), "--out", s(&target), "--paths", "5000", "--seed", "3",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (std::fs::read(target.join("paths.csv")).unwrap(), std::fs::read(target.join("mean.csv")).unwrap())
    };
    let a = run("sim_a");
    let b = run("sim_b");
    assert_eq!(a, b);
    let mean = String::from_utf8(a.1).unwrap();
    assert!(mean.starts_with("t,m,mc_mean,std_error,within_3se\n"));
    assert_eq!(mean.lines().count(), 12);
    let o = mfgmv(&["simulate", "--config", s(&cfg), "--solution", s(&out), "--paths", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_writes_grids() {
    let (_, out) = solve_constant("export");
    let target = out.join("grids");
    let o = mfgmv(&["export", "--solution", s(&out), "--out", s(&target)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(target.join("eps_00/u.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 101 * 201);
    assert!(text.starts_with("t,x,u,ux\n"));
}

#[test]
fn empty_manifest_passes() {
    let dir = scratch("manifest");
    let m = dir.join("empty.manifest");
    std::fs::write(&m, "[suite]\nname = empty\n").unwrap();
    let o = mfgmv(&["suite", "--manifest", s(&m), "--out", s(&dir.join("out"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("WARN"));
}
