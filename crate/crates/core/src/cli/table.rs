//! CSV files shared by simulated and analytic curves.
//!
//! Aggregate files have the columns of [`AGGREGATE_HEADER`], one row per
//! iteration count `T` in ascending order. Real numbers are written with nine
//! significant digits, so parsing a file and writing it again reproduces it
//! byte for byte.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::analytic::PolicyEvaluation;
use crate::engine::AggregateTrace;

pub const AGGREGATE_HEADER: [&str; 11] = [
    "policy_label",
    "source",
    "T",
    "n_t",
    "mean_N_t",
    "mean_gap",
    "se_gap",
    "mean_cum_cost",
    "se_cum_cost",
    "runs_completed",
    "runs_diverged",
];

pub const MARGINAL_HEADER: [&str; 8] = [
    "policy_label",
    "T",
    "n_t",
    "mu_norm2",
    "sigma2_T",
    "expected_reward",
    "gap",
    "expected_cum_cost",
];

#[derive(Debug, Error)]
pub enum TableError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("row {row}: column `{column}`: cannot parse `{value}`")]
    Field {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Width {
        row: usize,
        expected: usize,
        found: usize,
    },
}

/// Formats a real with nine significant digits, `%.9g` style.
pub fn format_real(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.is_nan() {
        return "NaN".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exponent) = sci.split_once('e').expect("exponent present");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    if (-5..9).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exponent}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Sim,
    Analytic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Sim => "sim",
            Source::Analytic => "analytic",
        })
    }
}

impl FromStr for Source {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "sim" => Ok(Source::Sim),
            "analytic" => Ok(Source::Analytic),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub policy_label: String,
    pub source: Source,
    pub horizon: usize,
    pub selected: usize,
    pub mean_drawn: f64,
    pub mean_gap: f64,
    pub se_gap: f64,
    pub mean_cum_cost: f64,
    pub se_cum_cost: f64,
    pub runs_completed: usize,
    pub runs_diverged: usize,
}

impl AggregateRecord {
    fn fields(&self) -> [String; 11] {
        [
            self.policy_label.clone(),
            self.source.to_string(),
            self.horizon.to_string(),
            self.selected.to_string(),
            format_real(self.mean_drawn),
            format_real(self.mean_gap),
            format_real(self.se_gap),
            format_real(self.mean_cum_cost),
            format_real(self.se_cum_cost),
            self.runs_completed.to_string(),
            self.runs_diverged.to_string(),
        ]
    }
}

pub fn records_from_aggregate(label: &str, agg: &AggregateTrace) -> Vec<AggregateRecord> {
    agg.rows
        .iter()
        .map(|r| AggregateRecord {
            policy_label: label.to_string(),
            source: Source::Sim,
            horizon: r.horizon,
            selected: r.selected,
            mean_drawn: r.drawn.mean,
            mean_gap: r.gap.mean,
            se_gap: r.gap.se,
            mean_cum_cost: r.cum_cost.mean,
            se_cum_cost: r.cum_cost.se,
            runs_completed: agg.runs_completed,
            runs_diverged: agg.runs_diverged,
        })
        .collect()
}

pub fn records_from_evaluation(label: &str, eval: &PolicyEvaluation) -> Vec<AggregateRecord> {
    eval.points
        .iter()
        .map(|p| AggregateRecord {
            policy_label: label.to_string(),
            source: Source::Analytic,
            horizon: p.horizon,
            selected: p.selected,
            mean_drawn: p.expected_drawn,
            mean_gap: p.gap,
            se_gap: 0.0,
            mean_cum_cost: p.expected_cum_cost,
            se_cum_cost: 0.0,
            runs_completed: 0,
            runs_diverged: 0,
        })
        .collect()
}

fn render<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// Rows sorted by label then `T`.
pub fn render_aggregate(records: &[AggregateRecord]) -> String {
    let mut sorted: Vec<&AggregateRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.policy_label
            .cmp(&b.policy_label)
            .then(a.horizon.cmp(&b.horizon))
    });
    render(AGGREGATE_HEADER, sorted.into_iter().map(|r| r.fields()))
}

fn parse_field<T: FromStr>(row: usize, column: &'static str, value: &str) -> Result<T, TableError> {
    value.parse().map_err(|_| TableError::Field {
        row,
        column,
        value: value.to_string(),
    })
}

pub fn parse_aggregate(text: &str) -> Result<Vec<AggregateRecord>, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != AGGREGATE_HEADER {
        return Err(TableError::Header {
            expected: AGGREGATE_HEADER.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != AGGREGATE_HEADER.len() {
            return Err(TableError::Width {
                row,
                expected: AGGREGATE_HEADER.len(),
                found: record.len(),
            });
        }
        let f = |k: usize| &record[k];
        out.push(AggregateRecord {
            policy_label: f(0).to_string(),
            source: parse_field(row, "source", f(1))?,
            horizon: parse_field(row, "T", f(2))?,
            selected: parse_field(row, "n_t", f(3))?,
            mean_drawn: parse_field(row, "mean_N_t", f(4))?,
            mean_gap: parse_field(row, "mean_gap", f(5))?,
            se_gap: parse_field(row, "se_gap", f(6))?,
            mean_cum_cost: parse_field(row, "mean_cum_cost", f(7))?,
            se_cum_cost: parse_field(row, "se_cum_cost", f(8))?,
            runs_completed: parse_field(row, "runs_completed", f(9))?,
            runs_diverged: parse_field(row, "runs_diverged", f(10))?,
        });
    }
    Ok(out)
}

/// Per-T marginal-law columns for one analytic policy.
pub fn render_marginal(label: &str, eval: &PolicyEvaluation) -> String {
    render(
        MARGINAL_HEADER,
        eval.points.iter().map(|p| {
            [
                label.to_string(),
                p.horizon.to_string(),
                p.selected.to_string(),
                format_real(p.mu_norm2),
                format_real(p.sigma2_t),
                format_real(p.expected_reward),
                format_real(p.gap),
                format_real(p.expected_cum_cost),
            ]
        }),
    )
}

pub const SWEEP_HEADER: [&str; 9] = [
    "axis",
    "value",
    "policy_label",
    "T",
    "n_t",
    "mean_gap",
    "se_gap",
    "mean_cum_cost",
    "runs_completed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub last: AggregateRecord,
}

pub fn render_sweep(records: &[SweepRecord]) -> String {
    render(
        SWEEP_HEADER,
        records.iter().map(|r| {
            [
                r.axis.clone(),
                format_real(r.value),
                r.last.policy_label.clone(),
                r.last.horizon.to_string(),
                r.last.selected.to_string(),
                format_real(r.last.mean_gap),
                format_real(r.last.se_gap),
                format_real(r.last.mean_cum_cost),
                r.last.runs_completed.to_string(),
            ]
        }),
    )
}
