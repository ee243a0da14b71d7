use std::fmt::Write as _;
use std::path::Path;

use super::{CheckpointRecord, ExperimentReport, HarnessError, MeanSe, MetricsSeries};

/// Columns of a per-replication series file.
pub const CSV_HEADER: &[&str] = &[
    "epoch",
    "running_cvar",
    "oracle_var",
    "oracle_cvar",
    "oracle_mean",
    "gap",
    "policy_distance",
    "v",
    "max_abs_q",
    "greedy",
];

const MEAN_HEADER: &[&str] = &[
    "epoch",
    "replications",
    "running_cvar",
    "oracle_var",
    "oracle_cvar",
    "oracle_cvar_se",
    "oracle_mean",
    "gap",
    "gap_se",
    "policy_distance",
    "policy_distance_se",
    "v",
    "max_abs_q",
];

/// Something that can be written as a CSV line.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

/// 17 significant digits, enough to read back the same `f64`.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

impl CsvRow for CheckpointRecord {
    fn header() -> &'static [&'static str] {
        CSV_HEADER
    }

    fn fields(&self) -> Vec<String> {
        let greedy: Vec<String> = self.greedy.iter().map(|a| a.to_string()).collect();
        vec![
            self.epoch.to_string(),
            float(self.running_cvar),
            float(self.oracle.var),
            float(self.oracle.cvar),
            float(self.oracle.mean),
            float(self.gap),
            float(self.policy_distance),
            float(self.v),
            float(self.max_abs_q),
            greedy.join("-"),
        ]
    }
}

/// Cross-replication average at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanRow {
    pub epoch: u64,
    pub replications: usize,
    pub running_cvar: f64,
    pub oracle_var: f64,
    pub oracle_cvar: MeanSe,
    pub oracle_mean: f64,
    pub gap: MeanSe,
    pub policy_distance: f64,
    pub policy_distance_se: f64,
    pub v: f64,
    pub max_abs_q: f64,
}

impl CsvRow for MeanRow {
    fn header() -> &'static [&'static str] {
        MEAN_HEADER
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.replications.to_string(),
            float(self.running_cvar),
            float(self.oracle_var),
            float(self.oracle_cvar.mean),
            float(self.oracle_cvar.se),
            float(self.oracle_mean),
            float(self.gap.mean),
            float(self.gap.se),
            float(self.policy_distance),
            float(self.policy_distance_se),
            float(self.v),
            float(self.max_abs_q),
        ]
    }
}

/// Averages the replications checkpoint by checkpoint. All series must share
/// the same checkpoints, which holds for replications of one experiment.
pub fn series_mean(series: &[MetricsSeries]) -> Vec<MeanRow> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    (0..first.checkpoints.len())
        .map(|k| {
            let at = |f: &dyn Fn(&CheckpointRecord) -> f64| MeanSe::of(series.iter().map(|s| f(&s.checkpoints[k])));
            let distance = at(&|r| r.policy_distance);
            MeanRow {
                epoch: first.checkpoints[k].epoch,
                replications: series.len(),
                running_cvar: at(&|r| r.running_cvar).mean,
                oracle_var: at(&|r| r.oracle.var).mean,
                oracle_cvar: at(&|r| r.oracle.cvar),
                oracle_mean: at(&|r| r.oracle.mean).mean,
                gap: at(&|r| r.gap),
                policy_distance: distance.mean,
                policy_distance_se: distance.se,
                v: at(&|r| r.v).mean,
                max_abs_q: at(&|r| r.max_abs_q).mean,
            }
        })
        .collect()
}

/// Header line then one line per row, every line newline-terminated.
pub fn to_csv<R: CsvRow>(rows: &[R]) -> String {
    let mut out = R::header().join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.fields().join(","));
    }
    out
}

pub fn emit_csv<R: CsvRow>(rows: &[R], path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, to_csv(rows)).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `summary.json`, `rep_<i>.csv` for every successful replication and
/// `series_mean.csv` into `dir`, creating it if needed.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(&report.summary).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), json + "\n").map_err(io)?;
    for s in &report.series {
        emit_csv(&s.checkpoints, &dir.join(format!("rep_{}.csv", s.replication)))?;
    }
    emit_csv(&series_mean(&report.series), &dir.join("series_mean.csv"))
}
