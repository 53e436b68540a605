//! Metrics rows, CSV I/O and paired-run comparison.
//!
//! `metrics.csv` holds one row per participating client per round plus a
//! summary row with `client_id = -1`. In the summary row `lambda`, `nu` and
//! `u` are the sums over participants and `cos_local_global` is their mean.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::RoundReport;
use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 9] =
    ["round", "accuracy", "loss", "client_id", "lambda", "nu", "u", "cos_local_global", "duration_ms"];

pub const SUMMARY_CLIENT_ID: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub client_id: i64,
    pub lambda: f64,
    pub nu: f64,
    pub u: f64,
    pub cos_local_global: f64,
    pub duration_ms: u64,
}

impl MetricsRow {
    pub fn is_summary(&self) -> bool {
        self.client_id == SUMMARY_CLIENT_ID
    }
}

/// Flattens a report into its per-client rows followed by the summary row.
pub fn rows(report: &RoundReport) -> Vec<MetricsRow> {
    let base = |client_id, lambda, nu, u, cos| MetricsRow {
        round: report.round,
        accuracy: report.accuracy,
        loss: report.loss,
        client_id,
        lambda,
        nu,
        u,
        cos_local_global: cos,
        duration_ms: report.duration_ms,
    };
    let mut out: Vec<MetricsRow> =
        report.clients.iter().map(|c| base(c.client_id as i64, c.lambda, c.nu, c.u, c.cos_local_global)).collect();
    let n = report.clients.len().max(1) as f64;
    out.push(base(
        SUMMARY_CLIENT_ID,
        report.clients.iter().map(|c| c.lambda).sum(),
        report.clients.iter().map(|c| c.nu).sum(),
        report.clients.iter().map(|c| c.u).sum(),
        report.clients.iter().map(|c| c.cos_local_global).sum::<f64>() / n,
    ));
    out
}

/// Streams rows to a CSV sink, flushing after every round.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(file)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        inner.write_record(METRICS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write_report(&mut self, report: &RoundReport) -> Result<()> {
        for row in rows(report) {
            self.inner.serialize(row)?;
        }
        self.inner.flush().map_err(|e| Error::io("metrics.csv", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io("metrics.csv", e))?;
        self.inner.into_inner().map_err(|e| Error::io("metrics.csv", e.into_error()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::Schema(format!("{}: unexpected header {}", path.display(), header.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Global accuracy per round, taken from the summary rows.
pub fn accuracy_series(rows: &[MetricsRow]) -> Vec<(u64, f64)> {
    rows.iter().filter(|r| r.is_summary()).map(|r| (r.round, r.accuracy)).collect()
}

/// First round whose accuracy reaches `target`.
pub fn rounds_to_reach(series: &[(u64, f64)], target: f64) -> Option<u64> {
    series.iter().find(|(_, acc)| *acc >= target).map(|(round, _)| *round)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: u64,
    pub rounds_to_threshold: Option<u64>,
}

impl RunStats {
    pub fn from_series(series: &[(u64, f64)], threshold: f64) -> Option<Self> {
        let &(_, final_accuracy) = series.last()?;
        let &(best_round, best_accuracy) =
            series.iter().fold(&series[0], |best, cur| if cur.1 > best.1 { cur } else { best });
        Some(Self {
            rounds: series.len(),
            final_accuracy,
            best_accuracy,
            best_round,
            rounds_to_threshold: rounds_to_reach(series, threshold),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDelta {
    pub round: u64,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub delta: f64,
}

/// Run B measured against run A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Accuracy both runs are timed against; defaults to A's final accuracy.
    pub threshold: f64,
    pub a: RunStats,
    pub b: RunStats,
    pub final_delta: f64,
    pub best_delta: f64,
    pub per_round: Vec<RoundDelta>,
}

pub fn compare(a: &[MetricsRow], b: &[MetricsRow], threshold: Option<f64>) -> Result<Comparison> {
    let sa = accuracy_series(a);
    let sb = accuracy_series(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Schema("a run has no summary rows".into()));
    }
    let rounds_a: Vec<u64> = sa.iter().map(|r| r.0).collect();
    let rounds_b: Vec<u64> = sb.iter().map(|r| r.0).collect();
    if rounds_a != rounds_b {
        return Err(Error::Schema(format!(
            "runs cover different rounds ({} vs {} summary rows)",
            rounds_a.len(),
            rounds_b.len()
        )));
    }
    let threshold = threshold.unwrap_or(sa[sa.len() - 1].1);
    let stats_a = RunStats::from_series(&sa, threshold).expect("non-empty");
    let stats_b = RunStats::from_series(&sb, threshold).expect("non-empty");
    let per_round = sa
        .iter()
        .zip(&sb)
        .map(|(&(round, x), &(_, y))| RoundDelta { round, accuracy_a: x, accuracy_b: y, delta: y - x })
        .collect();
    Ok(Comparison {
        threshold,
        final_delta: stats_b.final_accuracy - stats_a.final_accuracy,
        best_delta: stats_b.best_accuracy - stats_a.best_accuracy,
        a: stats_a,
        b: stats_b,
        per_round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ClientReport;

    fn report(round: u64, accuracy: f64) -> RoundReport {
        RoundReport {
            round,
            accuracy,
            loss: 1.0 - accuracy,
            clients: vec![
                ClientReport { client_id: 0, lambda: 0.4, nu: 0.25, u: 0.2, cos_local_global: 0.9 },
                ClientReport { client_id: 2, lambda: 0.6, nu: 0.75, u: 0.8, cos_local_global: 0.7 },
            ],
            duration_ms: 0,
        }
    }

    fn csv_of(reports: &[RoundReport]) -> String {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        for r in reports {
            w.write_report(r).unwrap();
        }
        String::from_utf8(w.finish().unwrap()).unwrap()
    }

    #[test]
    fn golden_csv() {
        let text = csv_of(&[report(1, 0.5)]);
        let expected = "\
round,accuracy,loss,client_id,lambda,nu,u,cos_local_global,duration_ms
1,0.5,0.5,0,0.4,0.25,0.2,0.9,0
1,0.5,0.5,2,0.6,0.75,0.8,0.7,0
1,0.5,0.5,-1,1.0,1.0,1.0,0.8,0
";
        assert_eq!(text, expected);
    }

    #[test]
    fn compare_identical_runs() {
        let rows: Vec<_> = (1..=4).flat_map(|r| super::rows(&report(r, 0.1 * r as f64))).collect();
        let c = compare(&rows, &rows, None).unwrap();
        assert_eq!(c.final_delta, 0.0);
        assert_eq!(c.best_delta, 0.0);
        assert!(c.per_round.iter().all(|d| d.delta == 0.0));
        assert_eq!(c.a.rounds_to_threshold, Some(4));
    }

    #[test]
    fn compare_reports_deltas_and_speed() {
        let a: Vec<_> = [0.2, 0.4, 0.5].iter().enumerate().flat_map(|(i, &x)| rows(&report(i as u64 + 1, x))).collect();
        let b: Vec<_> = [0.3, 0.5, 0.6].iter().enumerate().flat_map(|(i, &x)| rows(&report(i as u64 + 1, x))).collect();
        let c = compare(&a, &b, None).unwrap();
        assert!((c.final_delta - 0.1).abs() < 1e-12);
        assert_eq!(c.a.rounds_to_threshold, Some(3));
        assert_eq!(c.b.rounds_to_threshold, Some(2));
        assert!(compare(&a, &b[..4], None).is_err());
    }

    #[test]
    fn read_rejects_foreign_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "round,acc\n1,0.5\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Schema(_))));
        std::fs::write(&p, csv_of(&[report(1, 0.5), report(2, 0.6)])).unwrap();
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(accuracy_series(&back), vec![(1, 0.5), (2, 0.6)]);
    }
}
