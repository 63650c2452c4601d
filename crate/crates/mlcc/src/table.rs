//! Benchmark table: one row per roster entry, metric cells aggregated over
//! seeds as mean, median and min–max spread.

use std::path::Path;

use mlcc_core::trainer::RunRecord;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::io::{parse_cell, read_csv, read_json, write_csv, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Stat {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub loss: String,
    pub runs: usize,
    pub map: Stat,
    pub ace: Stat,
    pub ece: Stat,
    pub mce: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<TableRow>,
}

const METRICS: [&str; 4] = ["map", "ace", "ece", "mce"];
const STATS: [&str; 4] = ["mean", "median", "min", "max"];

impl BenchmarkTable {
    /// Groups records by loss name, keeping the order of `names`.
    pub fn build(names: &[String], records: &[RunRecord]) -> Result<Self> {
        let mut rows = Vec::with_capacity(names.len());
        for name in names {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.loss == name).collect();
            if runs.is_empty() {
                return Err(HarnessError::Runtime(format!("no runs for `{name}`")));
            }
            let stat = |f: fn(&RunRecord) -> f64| Stat::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            rows.push(TableRow {
                loss: name.clone(),
                runs: runs.len(),
                map: stat(|r| r.report.map),
                ace: stat(|r| r.report.ace),
                ece: stat(|r| r.report.ece),
                mce: stat(|r| r.report.mce),
            });
        }
        Ok(BenchmarkTable { rows })
    }

    pub fn row(&self, loss: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }

    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["loss".to_string(), "runs".to_string()];
        for m in METRICS {
            for s in STATS {
                h.push(format!("{m}_{s}"));
            }
        }
        h
    }

    fn cells(row: &TableRow) -> Vec<String> {
        let mut out = vec![row.loss.clone(), row.runs.to_string()];
        for st in [row.map, row.ace, row.ece, row.mce] {
            out.extend([st.mean, st.median, st.min, st.max].iter().map(f64::to_string));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self.rows.iter().map(Self::cells).collect();
        write_csv(path, &Self::csv_header(), &rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, records) = read_csv(path)?;
        if header != Self::csv_header() {
            return Err(HarnessError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "unexpected table header".into(),
            });
        }
        let mut rows = Vec::new();
        for (line, r) in records {
            let num = |i: usize| -> Result<f64> { parse_cell(path, line, &r[i]) };
            let stat = |base: usize| -> Result<Stat> {
                Ok(Stat {
                    mean: num(base)?,
                    median: num(base + 1)?,
                    min: num(base + 2)?,
                    max: num(base + 3)?,
                })
            };
            rows.push(TableRow {
                loss: r[0].clone(),
                runs: parse_cell(path, line, &r[1])?,
                map: stat(2)?,
                ace: stat(6)?,
                ece: stat(10)?,
                mce: stat(14)?,
            });
        }
        Ok(BenchmarkTable { rows })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Fixed-width text rendering, `mean (min–max)` per cell.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12}{:>6}", "loss", "runs");
        for m in METRICS {
            s.push_str(&format!("{:>24}", m.to_uppercase()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<12}{:>6}", r.loss, r.runs));
            for st in [r.map, r.ace, r.ece, r.mce] {
                s.push_str(&format!("{:>24}", format!("{:.3} ({:.3}-{:.3})", st.mean, st.min, st.max)));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stat_of_odd_and_even() {
        let s = Stat::of(&[3.0, 1.0, 2.0]);
        assert_eq!((s.mean, s.median, s.min, s.max), (2.0, 2.0, 1.0, 3.0));
        assert_eq!(Stat::of(&[1.0, 4.0]).median, 2.5);
    }

    fn arb_stat() -> impl Strategy<Value = Stat> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64)
            .prop_map(|(mean, median, min, max)| Stat { mean, median, min, max })
    }

    proptest! {
        #[test]
        fn csv_and_json_twins_agree(
            cells in proptest::collection::vec((arb_stat(), arb_stat(), arb_stat(), arb_stat(), 1usize..5), 1..4)
        ) {
            let rows = cells
                .into_iter()
                .enumerate()
                .map(|(i, (map, ace, ece, mce, runs))| TableRow { loss: format!("l{i}"), runs, map, ace, ece, mce })
                .collect();
            let t = BenchmarkTable { rows };
            let dir = tempfile::tempdir().unwrap();
            t.write_csv(&dir.path().join("t.csv")).unwrap();
            t.write_json(&dir.path().join("t.json")).unwrap();
            let from_csv = BenchmarkTable::read_csv(&dir.path().join("t.csv")).unwrap();
            let from_json = BenchmarkTable::read_json(&dir.path().join("t.json")).unwrap();
            prop_assert_eq!(&from_csv, &t);
            prop_assert_eq!(&from_json, &from_csv);
        }
    }
}
