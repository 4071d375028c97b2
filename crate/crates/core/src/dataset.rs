//! CSV datasets: a header row `x_1,…,x_d,y` with 1-based integer labels.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{FiralError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<DVector<f64>>,
    /// Zero-based class indices.
    pub labels: Vec<usize>,
    pub classes: usize,
}

fn parse_f64(field: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| FiralError::InvalidInput(format!("row {row}: cannot parse {field:?} as a number")))
}

pub fn read_dataset_from(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let d = headers.len().saturating_sub(1);
    if d == 0 || headers.get(d).map(str::trim) != Some("y") {
        return Err(FiralError::InvalidInput("dataset header must be x_1,...,x_d,y".into()));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let x = (0..d).map(|j| parse_f64(&rec[j], row + 1)).collect::<Result<Vec<_>>>()?;
        let y: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| FiralError::InvalidInput(format!("row {}: label {:?} is not a positive integer", row + 1, &rec[d])))?;
        if y == 0 {
            return Err(FiralError::InvalidInput(format!("row {}: labels are 1-based", row + 1)));
        }
        points.push(DVector::from_vec(x));
        labels.push(y - 1);
    }
    if points.is_empty() {
        return Err(FiralError::InvalidInput("dataset has no rows".into()));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    Ok(Dataset { points, labels, classes })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(std::fs::File::open(path)?)
}

pub fn write_dataset_to(writer: impl Write, points: &[DVector<f64>], labels: &[usize]) -> Result<()> {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (x, y) in points.iter().zip(labels) {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        rec.push((y + 1).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric matrix with a header row, one point per row. A trailing
/// `y` column, if present, is ignored.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut cols = headers.len();
    if headers.get(cols.wrapping_sub(1)).map(str::trim) == Some("y") {
        cols -= 1;
    }
    if cols == 0 {
        return Err(FiralError::InvalidInput("matrix file has no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for j in 0..cols {
            data.push(parse_f64(&rec[j], row + 1)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(FiralError::InvalidInput("matrix file has no rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Writes rows of `m` under the header `prefix_1,…,prefix_k`.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=m.ncols()).map(|j| format!("{prefix}_{j}")))?;
    for r in m.row_iter() {
        w.write_record(r.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}
