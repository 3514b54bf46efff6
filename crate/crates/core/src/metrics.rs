//! Per-epoch metrics rows and their CSV form.
//!
//! One CSV row per `(epoch, split, site)`. Runs without distillation sites
//! write a single row per `(epoch, split)` with site `none` and zero
//! component columns.

use std::io::{Read, Write};

use crate::error::{format_err, Result};

pub const METRICS_HEADER: [&str; 12] = [
    "run_id", "seed", "epoch", "split", "accuracy", "ce", "site", "bcd", "scd", "wcd", "plain_kl", "ps_pw",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SiteMetrics {
    pub site: String,
    pub bcd: f64,
    pub scd: f64,
    pub wcd: f64,
    pub plain_kl: f64,
    /// Mean teacher `p_s / p_w`.
    pub ps_pw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub ce: f64,
    pub sites: Vec<SiteMetrics>,
}

impl MetricsRecord {
    pub fn site(&self, name: &str) -> Option<&SiteMetrics> {
        self.sites.iter().find(|s| s.site == name)
    }
}

fn fmt(v: f64) -> String {
    // shortest repr that round-trips
    format!("{v:?}")
}

pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let csv_err = |e: csv::Error| format_err(format!("csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        let base = [r.run_id.clone(), r.seed.to_string(), r.epoch.to_string(), r.split.clone(), fmt(r.accuracy), fmt(r.ce)];
        if r.sites.is_empty() {
            let mut row = base.to_vec();
            row.push("none".into());
            row.extend(std::iter::repeat_n("0.0".to_string(), 5));
            w.write_record(&row).map_err(csv_err)?;
        }
        for s in &r.sites {
            let mut row = base.to_vec();
            row.extend([s.site.clone(), fmt(s.bcd), fmt(s.scd), fmt(s.wcd), fmt(s.plain_kl), fmt(s.ps_pw)]);
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_to_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_metrics(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 csv")
}

/// Parses a metrics CSV back into records, regrouping site rows.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| format_err(format!("metrics: {e}")))?;
    if headers.iter().ne(METRICS_HEADER) {
        return Err(format_err("metrics: unexpected header"));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(format!("metrics row {}: {e}", i + 2)))?;
        let num = |col: usize| -> Result<f64> {
            let v: f64 = rec[col]
                .parse()
                .map_err(|_| format_err(format!("metrics row {}: bad number `{}`", i + 2, &rec[col])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format_err(format!("metrics row {}: non-finite value", i + 2)))
            }
        };
        let int = |col: usize| -> Result<u64> {
            rec[col]
                .parse()
                .map_err(|_| format_err(format!("metrics row {}: bad integer `{}`", i + 2, &rec[col])))
        };
        let accuracy = num(4)?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(format_err(format!("metrics row {}: accuracy {accuracy} outside [0, 1]", i + 2)));
        }
        let (run_id, seed, epoch, split) = (rec[0].to_string(), int(1)?, int(2)? as usize, rec[3].to_string());
        let same = out
            .last()
            .is_some_and(|l| l.run_id == run_id && l.seed == seed && l.epoch == epoch && l.split == split);
        if !same {
            out.push(MetricsRecord {
                run_id,
                seed,
                epoch,
                split,
                accuracy,
                ce: num(5)?,
                sites: Vec::new(),
            });
        }
        if &rec[6] != "none" {
            let site = SiteMetrics {
                site: rec[6].to_string(),
                bcd: num(7)?,
                scd: num(8)?,
                wcd: num(9)?,
                plain_kl: num(10)?,
                ps_pw: num(11)?,
            };
            out.last_mut().expect("pushed above").sites.push(site);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sites: Vec<SiteMetrics>) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            seed: 3,
            epoch: 1,
            split: "test".into(),
            accuracy: 0.75,
            ce: 0.1 + 0.2,
            sites,
        }
    }

    #[test]
    fn round_trip() {
        let site = |name: &str| SiteMetrics {
            site: name.into(),
            bcd: 1e-17,
            scd: 0.0,
            wcd: 2.5,
            plain_kl: 3.0,
            ps_pw: 1.0 / 3.0,
        };
        let recs = vec![record(vec![]), record(vec![site("logit"), site("feature0")])];
        let mut recs = recs;
        recs[1].split = "train".into();
        let text = metrics_to_string(&recs);
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_metrics(text.as_bytes()).unwrap(), recs);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_metrics("a,b\n1,2\n".as_bytes()).is_err());
        let mut text = metrics_to_string(&[record(vec![])]);
        text = text.replace("0.75", "1.5");
        assert!(read_metrics(text.as_bytes()).is_err());
        let text = metrics_to_string(&[record(vec![])]).replace("0.75", "abc");
        assert!(read_metrics(text.as_bytes()).is_err());
    }
}
