//! Learning-curve records, their CSV form, and averaging over runs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    TrainLoss,
    ValidLoss,
    TestLoss,
    TestAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TrainLoss,
        Metric::ValidLoss,
        Metric::TestLoss,
        Metric::TestAccuracy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::TrainLoss => "train_loss",
            Metric::ValidLoss => "valid_loss",
            Metric::TestLoss => "test_loss",
            Metric::TestAccuracy => "test_accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown metric `{s}`")))
    }
}

/// Identifies one learning curve, minus the run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CurveKey {
    pub dataset: String,
    pub strategy: String,
    pub prior_task: String,
    pub target_task: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub key: CurveKey,
    /// `None` for a value averaged over runs.
    pub run_id: Option<usize>,
    /// 1-based.
    pub epoch: usize,
    pub metric: Metric,
    pub value: f64,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "dataset",
    "strategy",
    "prior_task",
    "target_task",
    "run_id",
    "epoch",
    "metric",
    "value",
];

/// Comment placed above averaged CSVs.
pub const PADDING_NOTE: &str = "# averaged over runs; a run that halted early contributes its last recorded value to every later epoch";

const MEAN_RUN: &str = "mean";

/// Writes `records` with a header row, after the given `#` comment lines.
pub fn write_csv<W: Write>(out: W, records: &[MetricsRecord], comments: &[&str]) -> Result<()> {
    let mut out = out;
    for c in comments {
        writeln!(out, "{c}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        let run = r
            .run_id
            .map_or_else(|| MEAN_RUN.to_string(), |r| r.to_string());
        w.write_record([
            r.key.dataset.as_str(),
            r.key.strategy.as_str(),
            r.key.prior_task.as_str(),
            r.key.target_task.as_str(),
            run.as_str(),
            r.epoch.to_string().as_str(),
            r.metric.name(),
            r.value.to_string().as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn to_csv_bytes(records: &[MetricsRecord], comments: &[&str]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records, comments)?;
    Ok(buf)
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Usage(format!(
            "unexpected CSV header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Usage(format!("CSV row {}: bad {what}", n + 1));
        let run_id = match &row[4] {
            MEAN_RUN => None,
            r => Some(r.parse().map_err(|_| bad("run_id"))?),
        };
        out.push(MetricsRecord {
            key: CurveKey {
                dataset: row[0].to_string(),
                strategy: row[1].to_string(),
                prior_task: row[2].to_string(),
                target_task: row[3].to_string(),
            },
            run_id,
            epoch: row[5].parse().map_err(|_| bad("epoch"))?,
            metric: row[6].parse()?,
            value: row[7].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

/// Mean over runs per (curve, metric, epoch). Curves run to the longest
/// run's last epoch; past its own last epoch a run repeats its last value.
/// Output is ordered by curve, then epoch, then metric.
pub fn average_runs(records: &[MetricsRecord]) -> Result<Vec<MetricsRecord>> {
    if records.is_empty() {
        return Err(Error::Usage("no records to average".into()));
    }
    // curve -> metric -> run -> epoch -> value
    type Runs = BTreeMap<Option<usize>, BTreeMap<usize, f64>>;
    let mut curves: BTreeMap<CurveKey, BTreeMap<Metric, Runs>> = BTreeMap::new();
    for r in records {
        let slot = curves
            .entry(r.key.clone())
            .or_default()
            .entry(r.metric)
            .or_default()
            .entry(r.run_id)
            .or_default();
        if slot.insert(r.epoch, r.value).is_some() {
            return Err(Error::Usage(format!(
                "duplicate record for {:?} run {:?} epoch {} {}",
                r.key, r.run_id, r.epoch, r.metric
            )));
        }
    }
    let mut out = Vec::new();
    for (key, metrics) in curves {
        let mut rows: BTreeMap<(usize, Metric), f64> = BTreeMap::new();
        for (metric, runs) in metrics {
            let last_epoch = runs
                .values()
                .filter_map(|e| e.keys().next_back())
                .max()
                .copied()
                .unwrap_or(0);
            for epoch in 1..=last_epoch {
                let mut sum = 0.0;
                for (run, values) in &runs {
                    let (_, v) = values.range(..=epoch).next_back().ok_or_else(|| {
                        Error::Usage(format!(
                            "{key:?} run {run:?} has no {metric} value at or before epoch {epoch}"
                        ))
                    })?;
                    sum += v;
                }
                rows.insert((epoch, metric), sum / runs.len() as f64);
            }
        }
        out.extend(
            rows.into_iter()
                .map(|((epoch, metric), value)| MetricsRecord {
                    key: key.clone(),
                    run_id: None,
                    epoch,
                    metric,
                    value,
                }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CurveKey {
        CurveKey {
            dataset: "mnist".into(),
            strategy: "RESET".into(),
            prior_task: "none".into(),
            target_task: "CL".into(),
        }
    }

    fn rec(run: usize, epoch: usize, value: f64) -> MetricsRecord {
        MetricsRecord {
            key: key(),
            run_id: Some(run),
            epoch,
            metric: Metric::TestLoss,
            value,
        }
    }

    #[test]
    fn two_runs_average() {
        let avg = average_runs(&[rec(0, 1, 0.4), rec(1, 1, 0.6)]).unwrap();
        assert_eq!(avg.len(), 1);
        assert!((avg[0].value - 0.5).abs() < 1e-15);
        assert_eq!(avg[0].run_id, None);
    }

    #[test]
    fn single_run_is_identity() {
        let runs = vec![rec(3, 1, 0.25), rec(3, 2, 0.125)];
        let avg = average_runs(&runs).unwrap();
        assert_eq!(
            avg.iter().map(|r| r.value).collect::<Vec<_>>(),
            [0.25, 0.125]
        );
    }

    #[test]
    fn early_halt_pads_with_last_value() {
        let mut runs = Vec::new();
        for e in 1..=100 {
            runs.push(rec(0, e, 1.0 / e as f64));
        }
        for e in 1..=150 {
            runs.push(rec(1, e, 2.0));
        }
        let avg = average_runs(&runs).unwrap();
        assert_eq!(avg.len(), 150);
        assert_eq!(avg[99].value, (0.01 + 2.0) / 2.0);
        for r in &avg[100..] {
            assert_eq!(r.value, (0.01 + 2.0) / 2.0);
        }
    }

    #[test]
    fn empty_input_is_usage_error() {
        assert!(matches!(average_runs(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_round_trip() {
        let mut records = vec![rec(0, 1, 0.1), rec(1, 1, 1e-300), rec(1, 2, 0.3)];
        records.extend(average_runs(&records.clone()).unwrap());
        let bytes = to_csv_bytes(&records, &[PADDING_NOTE]).unwrap();
        let back = read_csv(&bytes[..]).unwrap();
        assert_eq!(back, records);
    }
}
