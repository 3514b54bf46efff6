//! Summaries of metrics files: final accuracies, seed statistics and
//! per-epoch component series for plotting.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use super::mean_sd;
use crate::error::{format_err, invalid, Result};
use crate::metrics::{read_metrics, MetricsRecord};

pub const FINAL_HEADER: [&str; 4] = ["run_id", "seed", "epoch", "accuracy"];
pub const SUMMARY_HEADER: [&str; 4] = ["run_id", "runs", "mean_accuracy", "sd_accuracy"];
pub const SERIES_HEADER: [&str; 10] = [
    "run_id", "seed", "epoch", "split", "site", "bcd", "scd", "wcd", "plain_kl", "ps_pw",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FinalAccuracy {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds; zero for a single seed.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub finals: Vec<FinalAccuracy>,
    pub summary: Vec<RunSummary>,
    pub series: Vec<MetricsRecord>,
}

fn csv_string<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

impl Report {
    pub fn finals_csv(&self) -> String {
        csv_string(
            FINAL_HEADER,
            self.finals
                .iter()
                .map(|f| vec![f.run_id.clone(), f.seed.to_string(), f.epoch.to_string(), format!("{:?}", f.accuracy)]),
        )
    }

    pub fn summary_csv(&self) -> String {
        csv_string(
            SUMMARY_HEADER,
            self.summary
                .iter()
                .map(|s| vec![s.run_id.clone(), s.runs.to_string(), format!("{:?}", s.mean), format!("{:?}", s.sd)]),
        )
    }

    pub fn series_csv(&self) -> String {
        csv_string(
            SERIES_HEADER,
            self.series.iter().flat_map(|r| {
                r.sites.iter().map(move |s| {
                    vec![
                        r.run_id.clone(),
                        r.seed.to_string(),
                        r.epoch.to_string(),
                        r.split.clone(),
                        s.site.clone(),
                        format!("{:?}", s.bcd),
                        format!("{:?}", s.scd),
                        format!("{:?}", s.wcd),
                        format!("{:?}", s.plain_kl),
                        format!("{:?}", s.ps_pw),
                    ]
                })
            }),
        )
    }

    /// Writes `final.csv`, `summary.csv` and `series.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("final.csv"), self.finals_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("series.csv"), self.series_csv())?;
        Ok(())
    }
}

/// Builds a report from already-parsed records.
pub fn summarize(records: Vec<MetricsRecord>) -> Report {
    // final = last epoch of the test split, or of train when no test rows exist
    let mut last: BTreeMap<(String, u64), (bool, &MetricsRecord)> = BTreeMap::new();
    for r in &records {
        let is_test = r.split == "test";
        let entry = last.entry((r.run_id.clone(), r.seed)).or_insert((is_test, r));
        let better = (is_test && !entry.0) || (is_test == entry.0 && r.epoch >= entry.1.epoch);
        if better {
            *entry = (is_test, r);
        }
    }
    let finals: Vec<FinalAccuracy> = last
        .into_iter()
        .map(|((run_id, seed), (_, r))| FinalAccuracy {
            run_id,
            seed,
            epoch: r.epoch,
            accuracy: r.accuracy,
        })
        .collect();
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for f in &finals {
        grouped.entry(&f.run_id).or_default().push(f.accuracy);
    }
    let summary = grouped
        .into_iter()
        .map(|(run_id, acc)| {
            let (mean, sd) = mean_sd(&acc);
            RunSummary {
                run_id: run_id.to_string(),
                runs: acc.len(),
                mean,
                sd,
            }
        })
        .collect();
    Report {
        finals,
        summary,
        series: records,
    }
}

/// Reads and summarizes one or more metrics files.
pub fn report<P: AsRef<Path>>(files: &[P]) -> Result<Report> {
    if files.is_empty() {
        return Err(invalid("report needs at least one metrics file"));
    }
    let mut records = Vec::new();
    for f in files {
        let path = f.as_ref();
        let parsed = read_metrics(File::open(path)?).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
        records.extend(parsed);
    }
    Ok(summarize(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: &str, seed: u64, epoch: usize, split: &str, acc: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: run.into(),
            seed,
            epoch,
            split: split.into(),
            accuracy: acc,
            ce: 0.1,
            sites: Vec::new(),
        }
    }

    #[test]
    fn single_run_single_row() {
        let r = summarize(vec![rec("kd", 1, 0, "train", 0.4), rec("kd", 1, 0, "test", 0.3)]);
        assert_eq!(r.summary.len(), 1);
        assert_eq!(r.finals[0].accuracy, 0.3);
        assert_eq!(r.summary_csv().lines().count(), 2);
    }

    #[test]
    fn two_seed_statistics() {
        let r = summarize(vec![
            rec("kd", 1, 0, "test", 0.5),
            rec("kd", 1, 1, "test", 0.90),
            rec("kd", 2, 1, "test", 0.92),
        ]);
        let s = &r.summary[0];
        assert_eq!(s.runs, 2);
        assert!((s.mean - 0.91).abs() < 1e-12);
        assert!((s.sd - 0.0141).abs() < 1e-4);
    }

    #[test]
    fn empty_list_is_invalid() {
        let none: [&Path; 0] = [];
        assert!(matches!(report(&none), Err(crate::Error::InvalidArgument(_))));
    }
}
