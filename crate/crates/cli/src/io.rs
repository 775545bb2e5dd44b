//! On-disk formats.
//!
//! Observed entries: Matrix Market coordinate files, 1-based indices.
//! Dense matrices: headerless CSV plus a `<stem>.shape.json` sidecar.
//! Records: pretty JSON. Traces: JSON Lines with a schema version `v`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back yields bit-identical values.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracenorm::linalg::Mat;
use tracenorm::ObservedEntries;

use crate::CliError;

pub const MATRIX_MARKET_HEADER: &str = "%%MatrixMarket matrix coordinate real general";

/// Schema version stamped on every trace line.
pub const TRACE_VERSION: u32 = 1;

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

pub fn write_observed(path: &Path, obs: &ObservedEntries) -> Result<(), CliError> {
    let (n, m) = obs.shape();
    let file = File::create(path).map_err(|e| write_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{MATRIX_MARKET_HEADER}")?;
        writeln!(w, "{n} {m} {}", obs.len())?;
        for (i, j, v) in obs.iter() {
            writeln!(w, "{} {} {v:e}", i + 1, j + 1)?;
        }
        w.flush()
    };
    body().map_err(|e| write_err(path, e))
}

pub fn read_observed(path: &Path) -> Result<ObservedEntries, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let banner = text.lines().next().unwrap_or("").to_ascii_lowercase();
    if !banner.starts_with("%%matrixmarket matrix coordinate") {
        return Err(input_err(path, "line 1: expected a Matrix Market coordinate header"));
    }
    let coo = nalgebra_sparse::io::load_coo_from_matrix_market_str::<f64>(&text).map_err(|e| input_err(path, e))?;
    let triplets = coo.triplet_iter().map(|(i, j, &v)| (i, j, v)).collect();
    ObservedEntries::new(coo.nrows(), coo.ncols(), triplets).map_err(|e| input_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

/// `dir/x.csv` → `dir/x.shape.json`.
pub fn shape_path(csv: &Path) -> PathBuf {
    csv.with_extension("shape.json")
}

pub fn write_dense(path: &Path, a: &Mat) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| write_err(path, e))?;
    for i in 0..a.nrows() {
        if a.ncols() == 0 {
            break;
        }
        let row: Vec<String> = a.row(i).iter().map(|v| format!("{v:e}")).collect();
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))?;
    write_json(
        &shape_path(path),
        &Shape {
            rows: a.nrows(),
            cols: a.ncols(),
        },
    )
}

/// Reads a dense CSV. The sidecar, when present, must agree with the data.
pub fn read_dense(path: &Path) -> Result<Mat, CliError> {
    let sidecar = shape_path(path);
    let shape: Option<Shape> = if sidecar.exists() { Some(read_json(&sidecar)?) } else { None };
    if let Some(s) = shape {
        if s.cols == 0 || s.rows == 0 {
            return Ok(Mat::zeros(s.rows, s.cols));
        }
    }
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_err(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if cols.is_some_and(|c| c != rec.len()) {
            return Err(input_err(path, format!("line {line}: expected {} fields, found {}", cols.unwrap_or(0), rec.len())));
        }
        cols = Some(rec.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| input_err(path, format!("line {line}, column {}: not a number: {field:?}", j + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if let Some(s) = shape {
        if s.rows != rows || s.cols != cols {
            return Err(input_err(
                path,
                format!("shape sidecar says {}x{} but the data is {rows}x{cols}", s.rows, s.cols),
            ));
        }
    }
    Ok(Mat::from_row_slice(rows, cols, &values))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| write_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| input_err(path, e))
}

/// JSON Lines sink. Each line is the serialized event plus `v` and any
/// caller-supplied fields.
pub struct TraceWriter {
    path: PathBuf,
    w: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| write_err(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            w: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, event: &T, extra: &[(&str, serde_json::Value)]) -> Result<(), CliError> {
        let mut value = serde_json::to_value(event).map_err(|e| write_err(&self.path, e))?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("v".into(), TRACE_VERSION.into());
            for (k, v) in extra {
                map.insert((*k).into(), v.clone());
            }
        }
        serde_json::to_writer(&mut self.w, &value).map_err(|e| write_err(&self.path, e))?;
        self.w.write_all(b"\n").map_err(|e| write_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush().map_err(|e| write_err(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let a = Mat::from_row_slice(2, 3, &[0.1 + 0.2, -1e-300, 3.0, f64::MAX, 5e-324, -0.0]);
        write_dense(&p, &a).unwrap();
        let b = read_dense(&p).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_columns_use_the_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        write_dense(&p, &Mat::zeros(4, 0)).unwrap();
        assert_eq!(read_dense(&p).unwrap().shape(), (4, 0));
    }

    #[test]
    fn observed_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.mtx");
        let obs = ObservedEntries::new(3, 2, vec![(2, 1, 0.1 + 0.2), (0, 0, -7.5e-12)]).unwrap();
        write_observed(&p, &obs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general\n3 2 2\n1 1 "));
        let back = read_observed(&p).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n3 2 2\n1 2 0.5\n3 1 oops\n").unwrap();
        let msg = read_observed(&p).unwrap_err().to_string();
        assert!(msg.contains("4:"), "{msg}");

        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3,x\n").unwrap();
        let msg = read_dense(&p).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dup.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n3 2 2\n1 2 0.5\n1 2 1\n").unwrap();
        assert!(matches!(read_observed(&p), Err(CliError::Input(_))));
    }
}
