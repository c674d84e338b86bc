//! Result files: CSV with a header row, JSON and JSON lines.

use crate::error::{CliError, CliResult};
use cpamp::experiment::TrialSummary;
use cpamp::inference::PosteriorTable;
use cpamp::model::ModelKind;
use cpamp::se::SeTrajectory;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SE_FORMAT: &str = "cpamp-se-v1";

/// Which recursion produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    /// Denoisers averaged over the change-point prior.
    Ensemble,
    /// Denoisers of the ensemble, statistics at the true configuration.
    Oracle,
}

/// A state-evolution trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeDocument {
    pub format: String,
    pub mode: SeMode,
    pub delta: f64,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub model: ModelKind,
    /// True change points, oracle mode only.
    pub truth: Option<Vec<usize>>,
    pub trajectory: SeTrajectory,
}

/// One trial as recorded in `estimate.json` and `trials.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub delta_index: usize,
    pub delta: f64,
    pub trial: usize,
    pub n: usize,
    pub truth: Vec<usize>,
    pub iterations_run: usize,
    pub summary: TrialSummary,
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> CliResult<()> {
    let mut s = String::new();
    for v in values {
        s.push_str(&serde_json::to_string(v)?);
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Io(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes a CSV table; every row must match the header length.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Columns eta_1..eta_{L-1} (blank when absent), count, log_prob, prob.
pub fn write_posterior_csv(path: &Path, table: &PosteriorTable, l: usize) -> CliResult<()> {
    let slots = l.saturating_sub(1);
    let mut header: Vec<String> = (1..=slots).map(|k| format!("eta_{k}")).collect();
    header.extend(["count", "log_prob", "prob"].map(String::from));
    let file = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(&header)?;
    for i in 0..table.len() {
        let eta = &table.configs[i].eta;
        let mut row: Vec<String> = (0..slots).map(|k| eta.get(k).map(|e| e.to_string()).unwrap_or_default()).collect();
        let log_prob = table.log_prior[i] + table.log_lik[i] - table.log_evidence;
        row.extend([eta.len().to_string(), log_prob.to_string(), table.prob[i].to_string()]);
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?.flush()?;
    Ok(())
}

/// Change points as a space-separated field.
pub fn join(eta: &[usize]) -> String {
    eta.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ")
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpamp::inference::posterior_from_table;
    use cpamp::inference::LogLikTable;
    use cpamp::priors::ChangePointPrior;

    #[test]
    fn mean_sd_matches_hand_values() {
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn posterior_csv_has_one_row_per_candidate() {
        let prior = ChangePointPrior::uniform_over_counts(12, 3, 3, 1).unwrap();
        let rows = nalgebra::DMatrix::from_fn(12, 3, |i, k| [-(i as f64) * 0.1, 0.0, -0.2][k]);
        let post = posterior_from_table(&LogLikTable::from_rows(&rows).unwrap(), &prior).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.csv");
        write_posterior_csv(&path, &post, 3).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["eta_1", "eta_2", "count", "log_prob", "prob"]);
        let recs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), post.len());
        let total: f64 = recs.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let empty = recs.iter().find(|r| &r[2] == "0").unwrap();
        assert_eq!((&empty[0], &empty[1]), ("", ""));
        for r in &recs {
            let lp: f64 = r[3].parse().unwrap();
            let p: f64 = r[4].parse().unwrap();
            assert!((lp.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_quotes_fields_with_commas() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &["a", "b"], &[vec!["x,y".into(), "1".into()]]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n\"x,y\",1\n");
    }
}
