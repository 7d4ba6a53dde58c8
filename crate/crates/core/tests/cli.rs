use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"spec_version = 1

[model]
d = 2
sigma2 = 1.0
kappa2 = 2.0
theta0 = [1.0, 1.0]

[run]
T = 15
runs = 100
master_seed = 42

[policy.exponential]
family = "exponential"
n0 = 10
u = 0.5

[policy.constant]
family = "matched_constant"
n0 = 10
u = 0.5

[policy.linear]
family = "matched_linear"
n0 = 10
u = 0.5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_synthboot"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn invoke(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn analytic_output_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.toml", BASE);
    let out = dir.path().join("out");
    let o = invoke(&["analytic", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["exponential_analytic.csv", "exponential_marginal.csv", "gap_vs_cost_analytic.svg"] {
        let produced = std::fs::read_to_string(out.join(name)).unwrap();
        let expected = std::fs::read_to_string(golden(name)).unwrap();
        assert_eq!(produced, expected, "{name}");
    }
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.toml", BASE);
    let c = config.to_str().unwrap();
    let run = |out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec!["simulate", "--config", c, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = invoke(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["policies"].as_array().unwrap().len(), 3);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &["--serial"]);
    let c2 = run("c", &["--seed", "43"]);
    for name in ["exponential_agg.csv", "linear_agg.csv", "constant_agg.csv", "gap_vs_cost.svg"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
        if name.ends_with(".csv") {
            assert_ne!(x, std::fs::read(c2.join(name)).unwrap(), "{name}");
        }
    }
    let d = run("d", &["--no-svg"]);
    assert!(!d.join("gap_vs_cost.svg").exists());
}

#[test]
fn simulated_and_analytic_curves_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "toy.toml", BASE);
    let out = dir.path().join("out");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    assert!(invoke(&["simulate", "--config", c, "--out", o, "--no-svg"]).status.success());
    assert!(invoke(&["analytic", "--config", c, "--out", o, "--no-svg"]).status.success());
    let cmp = invoke(&["compare", "--sim", o, "--analytic", o, "--max-z", "4"]);
    assert!(cmp.status.success(), "{}", stderr(&cmp));
    let report: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    assert_eq!(report["policies"].as_array().unwrap().len(), 3);
    assert!(report["max_z"].as_f64().unwrap() <= 4.0);
}

#[test]
fn config_errors_exit_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (BASE.replace("runs = 100", "runs = 1"), "runs must be at least 2"),
        (BASE.replacen("u = 0.5\n", "rate = 0.5\n", 1), "line 17"),
        (BASE.replacen("\"exponential\"", "\"geometric\"", 1), "geometric"),
        (BASE.replace("spec_version = 1", "spec_version = 2"), "spec_version"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let config = write_config(dir.path(), &format!("bad{i}.toml"), text);
        let o = invoke(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "case {i}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "case {i}: {}", stderr(&o));
    }
    let o = invoke(&["simulate", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(invoke(&["simulate"]).status.code(), Some(1));
    assert_eq!(invoke(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_key_error_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replacen("u = 0.5\n", "rate = 0.5\n", 1);
    let config = write_config(dir.path(), "bad.toml", &text);
    let o = invoke(&["analytic", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("rate"), "{err}");
    assert!(err.contains("line 17"), "{err}");
}

const SPOT: &str = r#"spec_version = 1

[model]
d = 1
sigma2 = 1.0
kappa2 = 2.0
theta0 = [1.0]

[run]
T = 2
runs = 2
master_seed = 0

[policy.fixed]
family = "explicit"
schedule = [10, 10]
"#;

#[test]
fn analytic_marginal_spot_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "spot.toml", SPOT);
    let out = dir.path().join("out");
    let o = invoke(&["analytic", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("fixed_marginal.csv")).unwrap();
    let row = text.lines().nth(2).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], "2");
    let sigma2_t: f64 = fields[4].parse().unwrap();
    assert!((sigma2_t - 0.096296).abs() < 1e-6, "{row}");
    let mu2: f64 = fields[3].parse().unwrap();
    assert!((mu2 - (4.0f64 / 9.0).powi(2)).abs() < 1e-8, "{row}");
}

#[test]
fn analytic_rejects_gradient_descent_off_the_mle_step() {
    let dir = tempfile::tempdir().unwrap();
    let gd = SPOT.replace("master_seed = 0", "master_seed = 0\nupdate = \"gd\"\neta = 0.5");
    let config = write_config(dir.path(), "gd.toml", &gd);
    let o = invoke(&["analytic", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));

    let same = SPOT.replace("master_seed = 0", "master_seed = 0\nupdate = \"gd\"");
    let config = write_config(dir.path(), "gd_mle.toml", &same);
    let o = invoke(&["analytic", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn analytic_constant_policy_plateaus() {
    let dir = tempfile::tempdir().unwrap();
    let text = SPOT
        .replace("T = 2", "T = 60")
        .replace("family = \"explicit\"\nschedule = [10, 10]", "family = \"constant\"\nn0 = 10");
    let config = write_config(dir.path(), "plateau.toml", &text);
    let out = dir.path().join("out");
    let o = invoke(&["analytic", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("fixed_analytic.csv")).unwrap();
    let gaps: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    // Limit gap sqrt(2/3) - sqrt(2 / (3 + 0.12)).
    let limit = (2.0f64 / 3.0).sqrt() - (2.0f64 / 3.12).sqrt();
    assert!((gaps[59] - limit).abs() < 1e-8, "{}", gaps[59]);
    assert!((gaps[58] - gaps[59]).abs() < 1e-8);
}

#[test]
fn sweep_over_n0_lowers_the_constant_floor() {
    let dir = tempfile::tempdir().unwrap();
    let text = SPOT
        .replace("T = 2", "T = 30")
        .replace("runs = 2", "runs = 300")
        .replace("[policy.fixed]\nfamily = \"explicit\"\nschedule = [10, 10]", "[policy.constant]\nfamily = \"constant\"\nn0 = 10")
        + "\n[sweep]\naxis = \"n0\"\nvalues = [5, 10, 20]\n";
    let config = write_config(dir.path(), "sweep.toml", &text);
    let out = dir.path().join("out");
    let o = invoke(&["sweep", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(out.join(format!("sweep_{i}/constant_agg.csv")).exists());
    }
    let summary = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    let gaps: Vec<f64> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(gaps.len(), 3);
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");

    let c = config.to_str().unwrap();
    let o = invoke(&["sweep", "--config", c, "--axis", "policy.constant.u", "--values", "0.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = invoke(&["sweep", "--config", c, "--axis", "policy.constant.family", "--values", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not numeric"), "{}", stderr(&o));
    let empty = text.replace("values = [5, 10, 20]", "values = []");
    let config = write_config(dir.path(), "empty.toml", &empty);
    let o = invoke(&["sweep", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn sweep_over_u_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("runs = 100", "runs = 20");
    let config = write_config(dir.path(), "toy.toml", &text);
    let out = dir.path().join("out");
    let o = invoke(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "policy.exponential.u",
        "--values",
        "0.25,0.5,1.0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 * 3);
    assert!(out.join("sweep_2/gap_vs_cost.svg").exists());
}

#[test]
fn optimal_policy_prints_both_methods() {
    let o = invoke(&["optimal-policy", "--budget", "21", "--horizon", "3", "--sigma2", "1", "--kappa2", "1", "--verify"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("schedule: [3, 6, 12]"), "{text}");
    assert!(text.contains("brute_force: [3, 6, 12]"), "{text}");
    assert!(text.contains("continuous: [3, 6, 12]"), "{text}");

    let o = invoke(&["optimal-policy", "--budget", "2", "--horizon", "3", "--sigma2", "1", "--kappa2", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("budget below one sample per iteration"));

    let o = invoke(&["optimal-policy", "--budget", "100", "--horizon", "1", "--sigma2", "1", "--kappa2", "1"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("schedule: [100]"));

    let o = invoke(&["optimal-policy", "--budget", "500", "--horizon", "3", "--sigma2", "1", "--kappa2", "1", "--verify"]);
    assert_eq!(o.status.code(), Some(1));

    let o = invoke(&[
        "optimal-policy", "--budget", "30", "--horizon", "3", "--sigma2", "1", "--kappa2", "1",
        "--theta0", "100,-100",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("initial_condition: violated"));
}
