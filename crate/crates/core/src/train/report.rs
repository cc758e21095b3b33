//! Metrics artifacts: `metrics.json` plus two confusion-matrix tables.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const COUNTS_FILE: &str = "confusion_counts.csv";
pub const NORMALIZED_FILE: &str = "confusion_normalized.csv";

fn table<T: Display>(classes: &[String], rows: &[Vec<T>]) -> String {
    let mut out = String::from("true\\pred");
    for c in classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (name, row) in classes.iter().zip(rows) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Writes the three report files under `out_dir` and returns their paths.
pub fn write_report(metrics: &MetricsReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        (METRICS_FILE, serde_json::to_string_pretty(metrics)? + "\n"),
        (COUNTS_FILE, table(&metrics.classes, &metrics.confusion)),
        (
            NORMALIZED_FILE,
            table(&metrics.classes, &metrics.normalized),
        ),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses a table written by [`write_report`] back into rows of numbers.
pub fn read_table(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .skip(1)
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Manifest {
                        path: path.to_path_buf(),
                        line: i + 2,
                        msg: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_class() -> MetricsReport {
        let classes: Vec<String> = ["ang", "hap", "neu", "sad"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let confusion = vec![
            vec![7, 1, 1, 0],
            vec![2, 5, 0, 3],
            vec![0, 0, 4, 0],
            vec![1, 1, 1, 6],
        ];
        MetricsReport::from_confusion(&classes, confusion)
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let m = four_class();
        let dir = tempfile::tempdir().unwrap();
        write_report(&m, dir.path()).unwrap();
        let back = read_metrics(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.wf1.to_bits(), m.wf1.to_bits());
    }

    #[test]
    fn normalized_table_is_counts_over_row_sums() {
        let m = four_class();
        let dir = tempfile::tempdir().unwrap();
        write_report(&m, dir.path()).unwrap();
        let counts = read_table(dir.path().join(COUNTS_FILE)).unwrap();
        let norm = read_table(dir.path().join(NORMALIZED_FILE)).unwrap();
        assert_eq!(norm.len(), 4);
        for (c, n) in counts.iter().zip(&norm) {
            assert_eq!(n.len(), 4);
            let s: f64 = c.iter().sum();
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in c.iter().zip(n) {
                assert_eq!(*b, a / s);
            }
        }
        let header = fs::read_to_string(dir.path().join(NORMALIZED_FILE)).unwrap();
        assert!(header.starts_with("true\\pred,ang,hap,neu,sad\n"));
    }
}
