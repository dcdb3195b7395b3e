//! Output layout and small file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use unlearn_core::{Method, Tensor2};

use crate::error::{CliError, CliResult};

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn remain_csv(&self) -> PathBuf {
        self.data_dir().join("remain.csv")
    }

    pub fn forget_csv(&self) -> PathBuf {
        self.data_dir().join("forget.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn unlearn_dir(&self, method: Method) -> PathBuf {
        self.root.join("unlearn").join(method.name())
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn verify_dir(&self) -> PathBuf {
        self.root.join("verify")
    }
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn create_file(path: &Path) -> CliResult<fs::File> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Points as CSV with header `x0,x1,…`; values use the shortest exact form.
pub fn write_points(path: &Path, points: &Tensor2<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record((0..points.cols()).map(|j| format!("x{j}")))?;
    for row in points.iter_rows() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Reads a points CSV with a header row; every row must have the same width.
pub fn read_points(path: &Path) -> CliResult<Tensor2<f64>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in r.records() {
        let record = record?;
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Config(format!("{}: row {} has a non-numeric value {field:?}", path.display(), rows + 1))
            })?;
            if !v.is_finite() {
                return Err(CliError::Config(format!("{}: non-finite value in row {}", path.display(), rows + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if cols == 0 {
        return Err(CliError::Config(format!("{}: no columns", path.display())));
    }
    Ok(Tensor2::from_vec(rows, cols, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let points = Tensor2::from_rows(&[[0.1, -1.0 / 3.0], [1e-300, 2.5]]).unwrap();
        write_points(&path, &points).unwrap();
        assert_eq!(read_points(&path).unwrap(), points);
        assert!(read_text(&path).unwrap().starts_with("x0,x1\n"));
    }

    #[test]
    fn malformed_points_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_text(&path, "x0,x1\n1,abc\n").unwrap();
        assert!(matches!(read_points(&path), Err(CliError::Config(_))));
        write_text(&path, "x0,x1\n1,2\n3\n").unwrap();
        assert!(read_points(&path).is_err());
        write_text(&path, "x0\nNaN\n").unwrap();
        assert!(read_points(&path).is_err());
    }
}
