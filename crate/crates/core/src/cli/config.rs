//! Experiment configuration files.
//!
//! The format is sectioned key/value (TOML syntax) and versioned by a
//! top-level `spec_version = 1`:
//!
//! ```toml
//! spec_version = 1
//!
//! [model]
//! d = 2
//! sigma2 = 1.0
//! kappa2 = 2.0
//! theta0 = [1.0, 1.0]
//!
//! [run]
//! T = 15
//! runs = 1000
//! master_seed = 42
//! update = "mle"          # or "gd", with `eta` (defaults to sigma2)
//!
//! [cost]
//! c_g = 0.0
//! c_t = 1.0
//!
//! [output]
//! directory = "out"
//! emit_svg = true
//!
//! [policy.exponential]
//! family = "exponential"
//! n0 = 10
//! u = 0.5
//! ```
//!
//! Unknown keys are rejected with the line they appear on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::engine::{CostModel, DrawCap, UpdateRule, DEFAULT_DIVERGENCE_CAP, DEFAULT_EVAL_SAMPLES};
use crate::gaussian::GaussianSetting;
use crate::gdmodel::GdUpdater;
use crate::policy::{LinearNormalization, PolicySpec};

pub const SPEC_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, message: String },
}

impl ConfigError {
    fn invalid(line: Option<usize>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    spec_version: i64,
    model: RawModel,
    run: RawRun,
    #[serde(default)]
    cost: RawCost,
    #[serde(default)]
    output: RawOutput,
    policy: BTreeMap<String, RawPolicy>,
    sweep: Option<RawSweep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    d: usize,
    sigma2: f64,
    kappa2: f64,
    theta0: Vec<f64>,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum RawUpdate {
    Mle,
    Gd,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(rename = "T")]
    horizon: usize,
    runs: usize,
    master_seed: u64,
    max_draws_per_iter: Option<usize>,
    #[serde(default = "default_update")]
    update: RawUpdate,
    eta: Option<f64>,
    #[serde(default = "default_true")]
    parallel: bool,
    divergence_cap: Option<f64>,
}

fn default_update() -> RawUpdate {
    RawUpdate::Mle
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    c_g: f64,
    c_t: f64,
}

impl Default for RawCost {
    fn default() -> Self {
        RawCost { c_g: 0.0, c_t: 1.0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default = "default_directory")]
    directory: String,
    #[serde(default = "default_true")]
    emit_svg: bool,
    #[serde(default = "default_eval_samples")]
    eval_samples: usize,
}

impl Default for RawOutput {
    fn default() -> Self {
        RawOutput {
            directory: default_directory(),
            emit_svg: true,
            eval_samples: DEFAULT_EVAL_SAMPLES,
        }
    }
}

fn default_directory() -> String {
    "out".to_string()
}

fn default_eval_samples() -> usize {
    DEFAULT_EVAL_SAMPLES
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    family: String,
    n0: Option<usize>,
    alpha: Option<f64>,
    u: Option<f64>,
    n: Option<f64>,
    #[serde(rename = "B")]
    batch: Option<usize>,
    schedule: Option<Vec<usize>>,
    normalization: Option<LinearNormalization>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    axis: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPolicy {
    pub label: String,
    pub spec: PolicySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputOptions {
    pub directory: PathBuf,
    pub emit_svg: bool,
    pub eval_samples: usize,
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub setting: GaussianSetting,
    pub theta0: Vec<f64>,
    pub horizon: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub draw_cap: DrawCap,
    pub update: UpdateRule,
    pub parallel: bool,
    pub divergence_cap: f64,
    pub cost: CostModel,
    pub output: OutputOptions,
    /// Sorted by label.
    pub policies: Vec<LabeledPolicy>,
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        raw.validate(&LineIndex(src))
    }

    /// Validates an already-parsed table; errors carry no line numbers.
    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        raw.validate(&LineIndex(""))
    }
}

struct LineIndex<'a>(&'a str);

impl LineIndex<'_> {
    /// 1-based line of `key = ...` inside `[section]` (or of the section
    /// header when `key` is `None`).
    fn find(&self, section: &str, key: Option<&str>) -> Option<usize> {
        let mut current = String::new();
        for (i, line) in self.0.lines().enumerate() {
            let trimmed = line.trim();
            if let Some(header) = trimmed.strip_prefix('[').and_then(|h| h.split(']').next()) {
                current = header.trim().to_string();
                if key.is_none() && current == section {
                    return Some(i + 1);
                }
                continue;
            }
            if let Some(key) = key {
                if current == section {
                    if let Some((k, _)) = trimmed.split_once('=') {
                        if k.trim() == key {
                            return Some(i + 1);
                        }
                    }
                }
            }
        }
        None
    }

    fn key_or_section(&self, section: &str, key: &str) -> Option<usize> {
        self.find(section, Some(key)).or_else(|| self.find(section, None))
    }
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl RawConfig {
    fn validate(self, lines: &LineIndex) -> Result<ExperimentConfig, ConfigError> {
        if self.spec_version != SPEC_VERSION {
            return Err(ConfigError::invalid(
                lines.find("", Some("spec_version")),
                format!(
                    "unsupported spec_version {} (expected {SPEC_VERSION})",
                    self.spec_version
                ),
            ));
        }

        let m = &self.model;
        let setting = GaussianSetting::new(m.d, m.sigma2, m.kappa2)
            .map_err(|e| ConfigError::invalid(lines.find("model", None), e.to_string()))?;
        if m.theta0.len() != m.d {
            return Err(ConfigError::invalid(
                lines.key_or_section("model", "theta0"),
                format!("theta0 has {} entries but d = {}", m.theta0.len(), m.d),
            ));
        }
        if m.theta0.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::invalid(
                lines.key_or_section("model", "theta0"),
                "theta0 must be finite",
            ));
        }

        let r = &self.run;
        if r.horizon == 0 {
            return Err(ConfigError::invalid(
                lines.key_or_section("run", "T"),
                "T must be at least 1",
            ));
        }
        let update = match r.update {
            RawUpdate::Mle => {
                if r.eta.is_some() {
                    return Err(ConfigError::invalid(
                        lines.key_or_section("run", "eta"),
                        "eta is only used with update = \"gd\"",
                    ));
                }
                UpdateRule::Mle
            }
            RawUpdate::Gd => UpdateRule::Gd(
                GdUpdater::new(r.eta.unwrap_or(m.sigma2))
                    .map_err(|e| ConfigError::invalid(lines.key_or_section("run", "eta"), e.to_string()))?,
            ),
        };
        let draw_cap = match r.max_draws_per_iter {
            Some(cap) => DrawCap::Fixed(cap),
            None => DrawCap::default(),
        };
        let divergence_cap = r.divergence_cap.unwrap_or(DEFAULT_DIVERGENCE_CAP);
        if !(divergence_cap > 0.0) {
            return Err(ConfigError::invalid(
                lines.key_or_section("run", "divergence_cap"),
                "divergence_cap must be positive",
            ));
        }

        let cost = CostModel::new(self.cost.c_g, self.cost.c_t)
            .map_err(|e| ConfigError::invalid(lines.find("cost", None), e.to_string()))?;

        if self.output.eval_samples == 0 {
            return Err(ConfigError::invalid(
                lines.key_or_section("output", "eval_samples"),
                "eval_samples must be positive",
            ));
        }

        if self.policy.is_empty() {
            return Err(ConfigError::invalid(None, "at least one [policy.<label>] section is required"));
        }
        let mut policies = Vec::with_capacity(self.policy.len());
        for (label, raw) in self.policy {
            let section = format!("policy.{label}");
            if !valid_label(&label) {
                return Err(ConfigError::invalid(
                    lines.find(&section, None),
                    format!("policy label `{label}` may only contain letters, digits, `_` and `-`"),
                ));
            }
            let spec = raw.into_spec(&section, lines)?;
            if let PolicySpec::Explicit(counts) = &spec {
                if counts.len() != r.horizon {
                    return Err(ConfigError::invalid(
                        lines.key_or_section(&section, "schedule"),
                        format!(
                            "[{section}] schedule has {} entries but T = {}",
                            counts.len(),
                            r.horizon
                        ),
                    ));
                }
            }
            if let PolicySpec::MatchedLinear {
                normalization: LinearNormalization::Verbatim,
                ..
            } = spec
            {
                if r.horizon < 2 {
                    return Err(ConfigError::invalid(
                        lines.find(&section, None),
                        format!("[{section}] verbatim linear normalization needs T >= 2"),
                    ));
                }
            }
            policies.push(LabeledPolicy { label, spec });
        }

        let sweep = match self.sweep {
            Some(s) => {
                if s.values.is_empty() {
                    return Err(ConfigError::invalid(
                        lines.key_or_section("sweep", "values"),
                        "sweep values must not be empty",
                    ));
                }
                Some(SweepSpec {
                    axis: s.axis,
                    values: s.values,
                })
            }
            None => None,
        };

        Ok(ExperimentConfig {
            setting,
            theta0: self.model.theta0,
            horizon: r.horizon,
            runs: r.runs,
            master_seed: r.master_seed,
            draw_cap,
            update,
            parallel: r.parallel,
            divergence_cap,
            cost,
            output: OutputOptions {
                directory: PathBuf::from(self.output.directory),
                emit_svg: self.output.emit_svg,
                eval_samples: self.output.eval_samples,
            },
            policies,
            sweep,
        })
    }
}

const FAMILIES: &str = "constant, polynomial, exponential, explicit, batch_constant, batch_linear, batch_exponential, matched_constant, matched_linear";

impl RawPolicy {
    fn into_spec(self, section: &str, lines: &LineIndex) -> Result<PolicySpec, ConfigError> {
        let family = self.family.as_str();
        let missing = |key: &str| {
            ConfigError::invalid(
                lines.find(section, None),
                format!("[{section}] family `{family}` requires `{key}`"),
            )
        };
        let allowed: &[&str] = match family {
            "constant" => &["n0"],
            "polynomial" => &["n0", "alpha"],
            "exponential" | "matched_constant" => &["n0", "u"],
            "matched_linear" => &["n0", "u", "normalization"],
            "explicit" => &["schedule"],
            "batch_constant" | "batch_linear" => &["n", "B"],
            "batch_exponential" => &["n", "u", "B"],
            other => {
                return Err(ConfigError::invalid(
                    lines.key_or_section(section, "family"),
                    format!("[{section}] unknown policy family `{other}` (expected one of {FAMILIES})"),
                ))
            }
        };
        let present = [
            ("n0", self.n0.is_some()),
            ("alpha", self.alpha.is_some()),
            ("u", self.u.is_some()),
            ("n", self.n.is_some()),
            ("B", self.batch.is_some()),
            ("schedule", self.schedule.is_some()),
            ("normalization", self.normalization.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(ConfigError::invalid(
                    lines.key_or_section(section, key),
                    format!("[{section}] key `{key}` does not apply to family `{family}`"),
                ));
            }
        }
        let spec = match family {
            "constant" => PolicySpec::Constant {
                n0: self.n0.ok_or_else(|| missing("n0"))?,
            },
            "polynomial" => PolicySpec::Polynomial {
                n0: self.n0.ok_or_else(|| missing("n0"))?,
                alpha: self.alpha.ok_or_else(|| missing("alpha"))?,
            },
            "exponential" => PolicySpec::Exponential {
                n0: self.n0.ok_or_else(|| missing("n0"))?,
                u: self.u.ok_or_else(|| missing("u"))?,
            },
            "matched_constant" => PolicySpec::MatchedConstant {
                n0: self.n0.ok_or_else(|| missing("n0"))?,
                u: self.u.ok_or_else(|| missing("u"))?,
            },
            "matched_linear" => PolicySpec::MatchedLinear {
                n0: self.n0.ok_or_else(|| missing("n0"))?,
                u: self.u.ok_or_else(|| missing("u"))?,
                normalization: self.normalization.unwrap_or_default(),
            },
            "explicit" => PolicySpec::Explicit(self.schedule.ok_or_else(|| missing("schedule"))?),
            "batch_constant" => PolicySpec::BatchConstant {
                n: self.n.ok_or_else(|| missing("n"))?,
                batch: self.batch.ok_or_else(|| missing("B"))?,
            },
            "batch_linear" => PolicySpec::BatchLinear {
                n: self.n.ok_or_else(|| missing("n"))?,
                batch: self.batch.ok_or_else(|| missing("B"))?,
            },
            "batch_exponential" => PolicySpec::BatchExponential {
                n: self.n.ok_or_else(|| missing("n"))?,
                u: self.u.ok_or_else(|| missing("u"))?,
                batch: self.batch.ok_or_else(|| missing("B"))?,
            },
            _ => unreachable!("family checked above"),
        };
        spec.validate().map_err(|e| {
            ConfigError::invalid(lines.find(section, None), format!("[{section}] {e}"))
        })?;
        Ok(spec)
    }
}

/// Replaces the numeric value at a dotted path such as `policy.exp.u`.
///
/// Integer keys stay integers, so an integer key only accepts whole values.
pub fn set_numeric(table: &mut toml::Table, path: &str, value: f64) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ConfigError::invalid(None, format!("empty sweep axis `{path}`")))?;
    let mut node = table;
    for part in parts {
        node = node
            .get_mut(part)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| ConfigError::invalid(None, format!("sweep axis `{path}`: no section `{part}`")))?;
    }
    let slot = node
        .get_mut(last)
        .ok_or_else(|| ConfigError::invalid(None, format!("sweep axis `{path}` is not set in the config")))?;
    match slot {
        toml::Value::Integer(_) => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(ConfigError::invalid(
                    None,
                    format!("sweep axis `{path}` is an integer key; {value} is not a whole number"),
                ));
            }
            *slot = toml::Value::Integer(value as i64);
        }
        toml::Value::Float(_) => *slot = toml::Value::Float(value),
        other => {
            return Err(ConfigError::invalid(
                None,
                format!("sweep axis `{path}` is not numeric (found {})", other.type_str()),
            ))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"spec_version = 1

[model]
d = 2
sigma2 = 1.0
kappa2 = 2.0
theta0 = [1.0, 1.0]

[run]
T = 15
runs = 1000
master_seed = 42
update = "mle"

[cost]
c_g = 0.0
c_t = 1.0

[output]
directory = "out"
emit_svg = true

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

    fn with(src: &str, from: &str, to: &str) -> String {
        assert!(src.contains(from), "{from}");
        src.replacen(from, to, 1)
    }

    #[test]
    fn parses_the_toy_config() {
        let cfg = ExperimentConfig::parse(TOY).unwrap();
        assert_eq!(cfg.horizon, 15);
        assert_eq!(cfg.runs, 1000);
        assert_eq!(cfg.setting.rho(), 0.5);
        let labels: Vec<&str> = cfg.policies.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["constant", "exponential", "linear"]);
        assert_eq!(
            cfg.policies[2].spec,
            PolicySpec::MatchedLinear {
                n0: 10,
                u: 0.5,
                normalization: LinearNormalization::Verbatim
            }
        );
        assert_eq!(cfg.update, UpdateRule::Mle);
        assert!(cfg.parallel);
        assert_eq!(cfg.draw_cap, DrawCap::PerSelected(1000));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let src = with(TOY, "n0 = 10\nu = 0.5\n\n[policy.constant]", "n0 = 10\nrate = 0.5\n\n[policy.constant]");
        let err = ExperimentConfig::parse(&src).unwrap_err().to_string();
        assert!(err.contains("rate"), "{err}");
        assert!(err.contains("line 26"), "{err}");
    }

    #[test]
    fn unknown_family_names_value_and_line() {
        let src = with(TOY, "family = \"exponential\"", "family = \"geometric\"");
        let err = ExperimentConfig::parse(&src).unwrap_err().to_string();
        assert!(err.contains("geometric"), "{err}");
        assert!(err.starts_with("line 24:"), "{err}");
    }

    #[test]
    fn semantic_errors() {
        let cases = [
            (with(TOY, "spec_version = 1", "spec_version = 2"), "spec_version"),
            (with(TOY, "theta0 = [1.0, 1.0]", "theta0 = [1.0]"), "theta0"),
            (with(TOY, "T = 15", "T = 0"), "T must"),
            (with(TOY, "kappa2 = 2.0", "kappa2 = 0.0"), "kappa2"),
            (with(TOY, "c_t = 1.0", "c_t = 0.0"), "cost"),
            (with(TOY, "family = \"exponential\"\nn0 = 10", "family = \"exponential\"\nn0 = 0"), "n0"),
            (with(TOY, "family = \"exponential\"\nn0 = 10\nu = 0.5", "family = \"exponential\"\nn0 = 10"), "requires `u`"),
            (with(TOY, "family = \"exponential\"\nn0 = 10", "family = \"exponential\"\nalpha = 1.0\nn0 = 10"), "does not apply"),
            (with(TOY, "update = \"mle\"", "update = \"mle\"\neta = 0.5"), "eta"),
        ];
        for (src, needle) in cases {
            let err = ExperimentConfig::parse(&src).unwrap_err().to_string();
            assert!(err.contains(needle), "expected `{needle}` in `{err}`");
        }
    }

    #[test]
    fn gd_defaults_eta_to_sigma2() {
        let src = with(TOY, "update = \"mle\"", "update = \"gd\"");
        let cfg = ExperimentConfig::parse(&src).unwrap();
        assert_eq!(cfg.update, UpdateRule::Gd(GdUpdater::new(1.0).unwrap()));
    }

    #[test]
    fn explicit_length_must_match_horizon() {
        let src = format!("{TOY}\n[policy.fixed]\nfamily = \"explicit\"\nschedule = [1, 2]\n");
        let err = ExperimentConfig::parse(&src).unwrap_err().to_string();
        assert!(err.contains("T = 15"), "{err}");
    }

    #[test]
    fn sweep_axis_substitution() {
        let mut table: toml::Table = toml::from_str(TOY).unwrap();
        set_numeric(&mut table, "policy.exponential.u", 0.25).unwrap();
        set_numeric(&mut table, "policy.constant.n0", 20.0).unwrap();
        let cfg = ExperimentConfig::from_table(table.clone()).unwrap();
        assert_eq!(cfg.policies[1].spec, PolicySpec::Exponential { n0: 10, u: 0.25 });
        assert_eq!(cfg.policies[0].spec, PolicySpec::MatchedConstant { n0: 20, u: 0.5 });
        assert!(set_numeric(&mut table, "policy.constant.n0", 2.5).is_err());
        assert!(set_numeric(&mut table, "policy.constant.family", 1.0).is_err());
        assert!(set_numeric(&mut table, "policy.nope.u", 1.0).is_err());
        assert!(set_numeric(&mut table, "output.directory", 1.0).is_err());
    }
}
