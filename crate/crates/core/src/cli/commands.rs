use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use super::config::{set_numeric, ExperimentConfig, LabeledPolicy, SweepSpec};
use super::svg::{self, Chart, Series};
use super::table::{self, AggregateRecord, Source, SweepRecord};
use super::{CliError, Command, SimulateArgs};
use crate::analytic::{
    brute_force_optimal, cost_curve_with, optimal_schedule, DrawExpectation, PolicyEvaluation,
    BRUTE_FORCE_MAX_BUDGET, BRUTE_FORCE_MAX_HORIZON,
};
use crate::engine::{
    monte_carlo_traces, AggregateTrace, Execution, RunConfig, RunTrace, UpdateRule,
};
use crate::gaussian::GaussianSetting;
use crate::gdmodel::GaussianNll;
use crate::policy::{materialize, Schedule};

pub(super) fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => {
            let cfg = load_for_simulation(&args)?;
            let report = simulate(&cfg, &args)?;
            print_json(stdout, &report.json)?;
            report.into_result()
        }
        Command::Analytic {
            config,
            output,
            quadrature,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = &output.out {
                cfg.output.directory = out.clone();
            }
            if let Some(svg) = output.svg_override() {
                cfg.output.emit_svg = svg;
            }
            let draws = if quadrature {
                DrawExpectation::GaussHermite
            } else {
                DrawExpectation::RatioOfExpectations
            };
            let value = analytic(&cfg, draws)?;
            print_json(stdout, &value)
        }
        Command::OptimalPolicy {
            budget,
            horizon,
            sigma2,
            kappa2,
            theta0,
            dim,
            verify,
        } => optimal_policy(budget, horizon, sigma2, kappa2, theta0, dim, verify, stdout),
        Command::Sweep { sim, axis, values } => sweep(&sim, axis, values, stdout),
        Command::Compare {
            sim,
            analytic,
            max_z,
        } => compare(&sim, &analytic, max_z, stdout),
    }
}

fn print_json(stdout: &mut dyn Write, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    writeln!(stdout, "{text}").map_err(|e| CliError::Runtime(format!("cannot write report: {e}")))
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(fail)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(fail)?;
    tmp.write_all(contents).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn load_for_simulation(args: &SimulateArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &SimulateArgs) {
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &args.output.out {
        cfg.output.directory = out.clone();
    }
    if let Some(svg) = args.output.svg_override() {
        cfg.output.emit_svg = svg;
    }
    if args.serial {
        cfg.parallel = false;
    }
}

fn schedule_for(cfg: &ExperimentConfig, policy: &LabeledPolicy) -> Result<Schedule, CliError> {
    let schedule = materialize(&policy.spec, cfg.horizon)
        .map_err(|e| CliError::Validation(format!("policy `{}`: {e}", policy.label)))?;
    if schedule.clamped() {
        log::warn!(
            "policy `{}`: flooring produced empty batches, raised to one sample",
            policy.label
        );
    }
    Ok(schedule)
}

fn run_config(cfg: &ExperimentConfig, schedule: Schedule) -> RunConfig {
    let mut rc = RunConfig::new(
        Arc::new(GaussianNll::new(cfg.setting)),
        cfg.theta0.clone(),
        schedule,
        cfg.update,
    );
    rc.cost = cfg.cost;
    rc.seed = cfg.master_seed;
    rc.draw_cap = cfg.draw_cap;
    rc.eval_samples = cfg.output.eval_samples;
    rc.divergence_cap = cfg.divergence_cap;
    rc
}

struct SimulationReport {
    json: serde_json::Value,
    finals: Vec<AggregateRecord>,
    failures: Vec<String>,
}

impl SimulationReport {
    fn into_result(self) -> Result<(), CliError> {
        if self.failures.is_empty() {
            Ok(())
        } else {
            Err(CliError::Runtime(format!(
                "failed policies: {}",
                self.failures.join(", ")
            )))
        }
    }
}

#[derive(Serialize)]
struct PolicySummary {
    label: String,
    family: String,
    schedule: Vec<usize>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    runs: usize,
    runs_completed: usize,
    runs_diverged: usize,
    runs_draw_cap_hit: usize,
    clipped_rewards: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_gap_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_cum_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<PathBuf>,
}

fn simulate(cfg: &ExperimentConfig, args: &SimulateArgs) -> Result<SimulationReport, CliError> {
    if cfg.runs < 2 {
        return Err(CliError::Validation(format!(
            "[run] runs must be at least 2 for simulate, got {}",
            cfg.runs
        )));
    }
    let execution = if cfg.parallel {
        Execution::Parallel
    } else {
        Execution::Serial
    };
    let mut prepared = Vec::with_capacity(cfg.policies.len());
    for policy in &cfg.policies {
        let rc = run_config(cfg, schedule_for(cfg, policy)?);
        rc.validate()
            .map_err(|e| CliError::Validation(format!("policy `{}`: {e}", policy.label)))?;
        prepared.push((policy, rc));
    }

    let dir = &cfg.output.directory;
    let mut summaries = Vec::new();
    let mut series = Vec::new();
    let mut finals = Vec::new();
    let mut failures = Vec::new();
    for (policy, rc) in prepared {
        log::info!("simulating `{}` ({} runs)", policy.label, cfg.runs);
        let mut summary = PolicySummary {
            label: policy.label.clone(),
            family: rc.schedule.family().to_string(),
            schedule: rc.schedule.counts().to_vec(),
            status: "ok",
            error: None,
            runs: cfg.runs,
            runs_completed: 0,
            runs_diverged: 0,
            runs_draw_cap_hit: 0,
            clipped_rewards: 0,
            final_gap: None,
            final_gap_se: None,
            final_cum_cost: None,
            file: None,
        };
        let traces = match monte_carlo_traces(&rc, cfg.runs, execution) {
            Ok(traces) => traces,
            Err(e) => {
                summary.status = "failed";
                summary.error = Some(e.to_string());
                failures.push(policy.label.clone());
                summaries.push(summary);
                continue;
            }
        };
        let count = |s| traces.iter().filter(|t| t.status == s).count();
        summary.runs_completed = count(crate::engine::RunStatus::Completed);
        summary.runs_diverged = count(crate::engine::RunStatus::Diverged);
        summary.runs_draw_cap_hit = count(crate::engine::RunStatus::DrawCapHit);
        summary.clipped_rewards = traces.iter().map(|t| t.clipped_rewards).sum();
        if args.per_run {
            let path = dir.join(format!("{}_runs.csv", policy.label));
            write_atomic(&path, render_runs(&policy.label, &traces).as_bytes())?;
        }
        let agg = match AggregateTrace::from_traces(&traces) {
            Ok(agg) => agg,
            Err(e) => {
                summary.status = "failed";
                summary.error = Some(e.to_string());
                failures.push(policy.label.clone());
                summaries.push(summary);
                continue;
            }
        };
        if agg.runs_completed < agg.runs {
            log::warn!(
                "policy `{}`: {} of {} runs did not complete",
                policy.label,
                agg.runs - agg.runs_completed,
                agg.runs
            );
        }
        let records = table::records_from_aggregate(&policy.label, &agg);
        let path = dir.join(format!("{}_agg.csv", policy.label));
        write_atomic(&path, table::render_aggregate(&records).as_bytes())?;
        let last = records.last().expect("horizon is at least one").clone();
        summary.final_gap = Some(last.mean_gap);
        summary.final_gap_se = Some(last.se_gap);
        summary.final_cum_cost = Some(last.mean_cum_cost);
        summary.file = Some(path);
        series.push(series_of(&policy.label, &records));
        finals.push(last);
        summaries.push(summary);
    }

    let svg_path = if cfg.output.emit_svg && !series.is_empty() {
        let path = dir.join("gap_vs_cost.svg");
        write_atomic(&path, svg::render(&Chart::gap_vs_cost(series)).as_bytes())?;
        Some(path)
    } else {
        None
    };
    let json = json!({
        "command": "simulate",
        "master_seed": cfg.master_seed,
        "runs": cfg.runs,
        "T": cfg.horizon,
        "policies": summaries,
        "svg": svg_path,
    });
    Ok(SimulationReport {
        json,
        finals,
        failures,
    })
}

fn series_of(label: &str, records: &[AggregateRecord]) -> Series {
    Series {
        label: label.to_string(),
        points: records
            .iter()
            .map(|r| (r.mean_cum_cost, r.mean_gap, r.se_gap))
            .collect(),
    }
}

fn render_runs(label: &str, traces: &[RunTrace]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "policy_label",
        "run",
        "seed",
        "status",
        "T",
        "n_t",
        "N_t",
        "gap",
        "cum_cost",
        "theta",
    ])
    .expect("in-memory write");
    for (i, trace) in traces.iter().enumerate() {
        let status = match trace.status {
            crate::engine::RunStatus::Completed => "completed",
            crate::engine::RunStatus::Diverged => "diverged",
            crate::engine::RunStatus::DrawCapHit => "draw_cap_hit",
        };
        for r in &trace.records {
            let theta: Vec<String> = r.theta_after.iter().map(|v| table::format_real(*v)).collect();
            w.write_record([
                label.to_string(),
                i.to_string(),
                trace.seed.to_string(),
                status.to_string(),
                (r.t + 1).to_string(),
                r.selected.to_string(),
                r.drawn.to_string(),
                table::format_real(r.gap_after),
                table::format_real(r.cum_cost),
                theta.join(","),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// Exact curves apply to the MLE update, and to gradient descent only at
/// `eta = sigma2`, where the two coincide.
fn check_analytic_update(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if let UpdateRule::Gd(gd) = cfg.update {
        let sigma2 = cfg.setting.sigma2();
        if (gd.eta() - sigma2).abs() > 1e-12 * sigma2 {
            return Err(CliError::Validation(format!(
                "analytic curves need the MLE update; gradient descent with eta = {} has no closed form (eta must equal sigma2 = {sigma2})",
                gd.eta()
            )));
        }
    }
    Ok(())
}

fn analytic(cfg: &ExperimentConfig, draws: DrawExpectation) -> Result<serde_json::Value, CliError> {
    check_analytic_update(cfg)?;
    let dir = &cfg.output.directory;
    let mut summaries = Vec::new();
    let mut series = Vec::new();
    for policy in &cfg.policies {
        let schedule = schedule_for(cfg, policy)?;
        let eval = evaluate(cfg, &schedule, draws)
            .map_err(|e| CliError::Validation(format!("policy `{}`: {e}", policy.label)))?;
        let records = table::records_from_evaluation(&policy.label, &eval);
        let agg_path = dir.join(format!("{}_analytic.csv", policy.label));
        write_atomic(&agg_path, table::render_aggregate(&records).as_bytes())?;
        let marginal_path = dir.join(format!("{}_marginal.csv", policy.label));
        write_atomic(
            &marginal_path,
            table::render_marginal(&policy.label, &eval).as_bytes(),
        )?;
        let last = eval.points.last().expect("horizon is at least one");
        summaries.push(json!({
            "label": policy.label,
            "schedule": schedule.counts(),
            "final_gap": last.gap,
            "final_sigma2_T": last.sigma2_t,
            "final_expected_cum_cost": last.expected_cum_cost,
            "files": [agg_path, marginal_path],
        }));
        series.push(series_of(&policy.label, &records));
    }
    let svg_path = if cfg.output.emit_svg && !series.is_empty() {
        let path = dir.join("gap_vs_cost_analytic.svg");
        write_atomic(&path, svg::render(&Chart::gap_vs_cost(series)).as_bytes())?;
        Some(path)
    } else {
        None
    };
    Ok(json!({
        "command": "analytic",
        "T": cfg.horizon,
        "policies": summaries,
        "svg": svg_path,
    }))
}

fn evaluate(
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    draws: DrawExpectation,
) -> Result<PolicyEvaluation, crate::analytic::AnalyticError> {
    cost_curve_with(schedule, &cfg.theta0, &cfg.setting, &cfg.cost, draws)
}

fn format_list(values: impl Iterator<Item = String>) -> String {
    format!("[{}]", values.collect::<Vec<_>>().join(", "))
}

#[allow(clippy::too_many_arguments)]
fn optimal_policy(
    budget: usize,
    horizon: usize,
    sigma2: f64,
    kappa2: f64,
    theta0: Option<Vec<f64>>,
    dim: Option<usize>,
    verify: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let invalid = |e: &dyn std::fmt::Display| CliError::Validation(e.to_string());
    let dim = match (&theta0, dim) {
        (Some(t), Some(d)) if t.len() != d => {
            return Err(CliError::Validation(format!(
                "--theta0 has {} coordinates but --dim is {d}",
                t.len()
            )))
        }
        (_, Some(d)) => d,
        (Some(t), None) => t.len(),
        (None, None) => 1,
    };
    let setting = GaussianSetting::new(dim, sigma2, kappa2).map_err(|e| invalid(&e))?;
    if verify && (budget > BRUTE_FORCE_MAX_BUDGET || horizon > BRUTE_FORCE_MAX_HORIZON) {
        return Err(CliError::Validation(format!(
            "--verify enumerates compositions only for C <= {BRUTE_FORCE_MAX_BUDGET} and T <= {BRUTE_FORCE_MAX_HORIZON}"
        )));
    }
    let alloc =
        optimal_schedule(budget, horizon, &setting, theta0.as_deref()).map_err(|e| invalid(&e))?;
    let mut lines = vec![
        format!(
            "continuous: {}",
            format_list(alloc.continuous.iter().map(|v| table::format_real(*v)))
        ),
        format!("schedule: {}", alloc.schedule),
        format!("sigma2_T: {}", table::format_real(alloc.sigma2_t)),
    ];
    if let Some(holds) = alloc.initial_condition_holds {
        lines.push(format!(
            "initial_condition: {}",
            if holds { "holds" } else { "violated" }
        ));
    }
    if verify {
        let (best, value) = brute_force_optimal(budget, horizon, &setting).map_err(|e| invalid(&e))?;
        lines.push(format!("brute_force: {best}"));
        lines.push(format!("brute_force_sigma2_T: {}", table::format_real(value)));
        lines.push(format!(
            "relative_excess: {}",
            table::format_real(alloc.sigma2_t / value - 1.0)
        ));
    }
    for line in lines {
        writeln!(stdout, "{line}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

/// Reads the config and applies `value` to every key the axis names.
fn sweep_point(src: &str, axis: &str, value: f64) -> Result<ExperimentConfig, CliError> {
    let mut table: toml::Table =
        toml::from_str(src).map_err(|e| CliError::Validation(e.to_string()))?;
    table.remove("sweep");
    if axis.contains('.') {
        set_numeric(&mut table, axis, value)?;
    } else {
        let labels: Vec<String> = table
            .get("policy")
            .and_then(|p| p.as_table())
            .map(|p| {
                p.iter()
                    .filter(|(_, v)| v.get(axis).is_some())
                    .map(|(k, _)| k.clone())
                    .collect()
            })
            .unwrap_or_default();
        if labels.is_empty() {
            return Err(CliError::Validation(format!(
                "sweep axis `{axis}` is not set by any policy; use a dotted key such as `run.T`"
            )));
        }
        for label in labels {
            set_numeric(&mut table, &format!("policy.{label}.{axis}"), value)?;
        }
    }
    Ok(ExperimentConfig::from_table(table)?)
}

fn sweep(
    args: &SimulateArgs,
    axis: Option<String>,
    values: Option<Vec<f64>>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let src = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Validation(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let base = ExperimentConfig::parse(&src)?;
    let spec = match (axis, values, &base.sweep) {
        (Some(axis), Some(values), _) => SweepSpec { axis, values },
        (Some(axis), None, Some(s)) => SweepSpec {
            axis,
            values: s.values.clone(),
        },
        (None, Some(values), Some(s)) => SweepSpec {
            axis: s.axis.clone(),
            values,
        },
        (None, None, Some(s)) => s.clone(),
        _ => {
            return Err(CliError::Validation(
                "sweep needs --axis and --values, or a [sweep] section".to_string(),
            ))
        }
    };
    if spec.values.is_empty() {
        return Err(CliError::Validation("sweep value list is empty".to_string()));
    }
    if spec.values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Validation("sweep values must be finite".to_string()));
    }
    let points = spec
        .values
        .iter()
        .map(|&v| sweep_point(&src, &spec.axis, v))
        .collect::<Result<Vec<_>, _>>()?;

    let mut root = base.output.directory.clone();
    if let Some(out) = &args.output.out {
        root = out.clone();
    }
    let mut summary_rows = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (i, (mut cfg, &value)) in points.into_iter().zip(&spec.values).enumerate() {
        apply_overrides(&mut cfg, args);
        cfg.output.directory = root.join(format!("sweep_{i}"));
        let report = simulate(&cfg, args)?;
        for last in &report.finals {
            summary_rows.push(SweepRecord {
                axis: spec.axis.clone(),
                value,
                last: last.clone(),
            });
        }
        failures.extend(report.failures.iter().map(|l| format!("sweep_{i}/{l}")));
        reports.push(json!({ "value": value, "report": report.json }));
    }
    let summary_path = root.join("sweep_summary.csv");
    write_atomic(&summary_path, table::render_sweep(&summary_rows).as_bytes())?;
    print_json(
        stdout,
        &json!({
            "command": "sweep",
            "axis": spec.axis,
            "points": reports,
            "summary": summary_path,
        }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed policies: {}", failures.join(", "))))
    }
}

fn expand(paths: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_dir() {
            let entries = std::fs::read_dir(path).map_err(|e| {
                CliError::Validation(format!("cannot list {}: {e}", path.display()))
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(suffix))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    Ok(out)
}

fn read_records(paths: &[PathBuf], source: Source) -> Result<Vec<AggregateRecord>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let records = table::parse_aggregate(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        out.extend(records.into_iter().filter(|r| r.source == source));
    }
    Ok(out)
}

fn compare(
    sim: &[PathBuf],
    analytic: &[PathBuf],
    max_z: Option<f64>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let sim = read_records(&expand(sim, "_agg.csv")?, Source::Sim)?;
    let exact: BTreeMap<(String, usize), AggregateRecord> =
        read_records(&expand(analytic, "_analytic.csv")?, Source::Analytic)?
            .into_iter()
            .map(|r| ((r.policy_label.clone(), r.horizon), r))
            .collect();
    let mut per_policy: BTreeMap<String, (usize, f64, usize)> = BTreeMap::new();
    for s in &sim {
        let Some(a) = exact.get(&(s.policy_label.clone(), s.horizon)) else {
            continue;
        };
        let diff = (s.mean_gap - a.mean_gap).abs();
        let z = if s.se_gap > 0.0 {
            diff / s.se_gap
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        let entry = per_policy
            .entry(s.policy_label.clone())
            .or_insert((0, 0.0, s.horizon));
        entry.0 += 1;
        if z > entry.1 {
            entry.1 = z;
            entry.2 = s.horizon;
        }
    }
    if per_policy.is_empty() {
        return Err(CliError::Validation(
            "no (policy_label, T) rows appear in both the simulated and analytic files".to_string(),
        ));
    }
    let overall = per_policy.values().map(|v| v.1).fold(0.0, f64::max);
    let policies: Vec<_> = per_policy
        .iter()
        .map(|(label, (rows, z, t))| {
            json!({ "label": label, "rows": rows, "max_z": finite(*z), "worst_T": t })
        })
        .collect();
    print_json(
        stdout,
        &json!({ "command": "compare", "max_z": finite(overall), "policies": policies }),
    )?;
    match max_z {
        Some(limit) if overall > limit => Err(CliError::Runtime(format!(
            "largest z-score {overall} exceeds {limit}"
        ))),
        _ => Ok(()),
    }
}

fn finite(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}
