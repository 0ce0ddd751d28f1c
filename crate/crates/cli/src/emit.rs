//! Output file emission. Every artifact is written to a temporary file in
//! the destination directory and renamed into place, so a crash mid-write
//! never leaves a partial file and re-running a command atomically
//! replaces earlier output.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use prgrad_core::verify::GradCheckReport;
use prgrad_core::angle::AngleEntry;

/// One metrics.csv row. `epoch` is 1-based and rows are contiguous.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f32,
    pub seconds: f64,
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::from("epoch,train_loss,train_acc,test_acc,lr,seconds\n");
    for (i, r) in records.iter().enumerate() {
        if r.epoch != i + 1 {
            bail!("metrics epochs must be contiguous from 1, found {} at row {}", r.epoch, i);
        }
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr, r.seconds
        ));
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    atomic_write(path, metrics_csv(records)?.as_bytes())
}

pub fn angles_csv(entries: &[(usize, AngleEntry)]) -> String {
    let mut out = String::from("epoch,layer,min_abs_sin,mean_abs_cos\n");
    for (epoch, e) in entries {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            epoch, e.layer, e.min_abs_sin, e.mean_abs_cos
        ));
    }
    out
}

pub fn write_angles(path: &Path, entries: &[(usize, AngleEntry)]) -> Result<()> {
    atomic_write(path, angles_csv(entries).as_bytes())
}

pub fn write_gradcheck_reports(path: &Path, reports: &[GradCheckReport]) -> Result<()> {
    let csv = prgrad_core::verify::reports_to_csv(reports);
    atomic_write(path, csv.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_rows_are_contiguous_and_newline_terminated() {
        let recs = vec![
            MetricsRecord { epoch: 1, train_loss: 1.5, train_acc: 0.4, test_acc: 0.35, lr: 0.1, seconds: 2.0 },
            MetricsRecord { epoch: 2, train_loss: 0.9, train_acc: 0.7, test_acc: 0.68, lr: 0.05, seconds: 4.1 },
        ];
        let csv = metrics_csv(&recs).unwrap();
        assert!(csv.starts_with("epoch,train_loss,train_acc,test_acc,lr,seconds\n"));
        assert!(csv.ends_with('\n'));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("1,1.500000,0.400000,0.350000,0.100000,2.000"));
        assert!(!csv.contains(';'));

        let bad = vec![MetricsRecord { epoch: 2, train_loss: 0.0, train_acc: 0.0, test_acc: 0.0, lr: 0.1, seconds: 0.0 }];
        assert!(metrics_csv(&bad).is_err());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        atomic_write(&path, b"old\n").unwrap();
        atomic_write(&path, b"new\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "new\n");
    }

    #[test]
    fn angles_csv_has_expected_shape() {
        let entries = vec![(
            1,
            AngleEntry { layer: String::from("fc1"), min_abs_sin: 0.25, mean_abs_cos: 0.125 },
        )];
        let csv = angles_csv(&entries);
        assert!(csv.starts_with("epoch,layer,min_abs_sin,mean_abs_cos\n"));
        assert!(csv.contains("1,fc1,0.250000,0.125000\n"));
    }
}
