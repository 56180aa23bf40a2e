use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mechanochem"));
    c.env_remove("MECHANOCHEM_OUT_DIR");
    c
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("--out-dir").arg(out).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn tableau_prints_gamma_and_rows() {
    let o = bin().arg("tableau").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("γ=0.2928932188134524"), "{text}");
    for prefix in ["b:", "b̂:"] {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        let sum: f64 = line[prefix.len()..].split_whitespace().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-15, "{prefix} sums to {sum}");
    }
}

#[test]
fn verify_needs_three_levels() {
    let o = bin().args(["verify", "space", "1"]).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least 3 levels"), "{}", stderr(&o));
    let o = bin().args(["verify", "sideways", "3"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn verify_space_writes_rate_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["verify", "space", "3", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("rates_space.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("dofs,h,e_1_w_D,r_1_w_D"));
    assert_eq!(csv, String::from_utf8(o.stdout).unwrap());
}

#[test]
fn empty_config_runs_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "").unwrap();
    let out = dir.path().join("out");
    let o = run_config(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["steps.csv", "interface.csv", "summary.csv", "config.toml", "snapshot_D_0000.vtk", "snapshot_E_0001.vtk"]
    {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let vtk = fs::read_to_string(out.join("snapshot_D_0001.vtk")).unwrap();
    let head: Vec<&str> = vtk.lines().take(4).collect();
    assert_eq!(head[0], "# vtk DataFile Version 3.0");
    assert_eq!(head[2..], ["ASCII", "DATASET UNSTRUCTURED_GRID"]);
    for key in [
        "POINT_DATA",
        "SCALARS w1 double 1",
        "SCALARS w2 double 1",
        "SCALARS u_magnitude double 1",
        "SCALARS p double 1",
    ] {
        assert!(vtk.contains(key), "missing {key}");
    }
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().next().unwrap(), "t,dt,err,accepted,newton_s1,newton_s2,cause");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 4);
}

#[test]
fn poisson_ratio_one_half_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[layers.d]\nnu = 0.5\n").unwrap();
    let o = run_config(&cfg, &dir.path().join("out"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("layers.d.nu"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "t_final = 1.0\n\n[geometry]\nnx = 4\nnz = 3\n").unwrap();
    let o = run_config(&cfg, &dir.path().join("out"), &[]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("line 5") && e.contains("nz"), "{e}");
}

#[test]
fn runs_are_reproducible_and_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "t_final = 3.0\nseed = 11\n[geometry]\nnx = 5\nny_d = 5\nny_e = 2\n").unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run_config(&cfg, &a, &["--snapshot-every", "3"]).status.success());
    assert!(run_config(&cfg, &b, &["--snapshot-every", "3"]).status.success());
    for f in ["steps.csv", "interface.csv", "summary.csv", "snapshot_E_0002.vtk"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // Re-running from the echoed configuration reproduces the run.
    assert!(run_config(&a.join("config.toml"), &c, &[]).status.success());
    assert_eq!(fs::read(a.join("steps.csv")).unwrap(), fs::read(c.join("steps.csv")).unwrap());
    let echo = fs::read_to_string(c.join("config.toml")).unwrap();
    assert!(echo.contains("snapshot_every = 3"));
    // A different seed changes the run.
    let d = dir.path().join("d");
    assert!(run_config(&cfg, &d, &["--seed", "12"]).status.success());
    assert_ne!(fs::read(a.join("summary.csv")).unwrap(), fs::read(d.join("summary.csv")).unwrap());
}

#[test]
fn flags_reach_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "t_final = 0.5\n").unwrap();
    let out = dir.path().join("o");
    let o = run_config(&cfg, &out, &["--mjcontrol", "off", "--sweeps", "2", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    for line in ["mjcontrol = false", "sweeps = 2", "seed = 5"] {
        assert!(echo.lines().any(|l| l == line), "missing {line}");
    }
}

#[test]
fn env_var_sets_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "t_final = 0.2\n[output]\ndir = \"ignored\"\n").unwrap();
    let env_dir = dir.path().join("from_env");
    let o = bin().current_dir(dir.path()).arg("run").arg(&cfg).env("MECHANOCHEM_OUT_DIR", &env_dir).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("steps.csv").exists());
    assert!(!dir.path().join("ignored").exists());
    // The flag wins over the variable.
    let flag_dir = dir.path().join("from_flag");
    let o = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&flag_dir)
        .env("MECHANOCHEM_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("steps.csv").exists());
}

#[test]
fn coarse_pattern_run_grows_the_step() {
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example2.toml");
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo)
        .unwrap()
        .replace("nx = 50", "nx = 20")
        .replace("ny_d = 50", "ny_d = 20")
        .replace("ny_e = 25", "ny_e = 10");
    let cfg = dir.path().join("ex2.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o");
    let o = run_config(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    let accepted: Vec<(f64, f64)> = steps
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[3] == "1")
        .map(|c| (c[0].parse().unwrap(), c[1].parse().unwrap()))
        .collect();
    let last = accepted.last().unwrap();
    assert!((last.0 + last.1 - 500.0).abs() < 1e-9);
    let q = accepted.len() / 4;
    let mean = |s: &[(f64, f64)]| s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
    assert!(mean(&accepted[accepted.len() - q..]) > 2.0 * mean(&accepted[..q]));
}
