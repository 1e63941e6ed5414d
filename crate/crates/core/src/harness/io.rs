//! CSV input and output: one observation per row, optional header.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix_mean::MatrixSample;
use crate::regression::RegressionData;
use crate::vector_mean::VectorSample;

/// Numeric rows of a CSV stream. A first line that does not parse as
/// numbers is taken as a header.
pub fn read_rows<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| Error::Csv { line: e.position().map(|p| p.line()).unwrap_or(0), message: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(k as u64 + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if rows.is_empty() && width.is_none() => {
                width = Some(rec.len());
                continue;
            }
            Err(e) => {
                let bad = rec.iter().find(|f| f.parse::<f64>().is_err()).unwrap_or("");
                return Err(Error::Csv { line, message: format!("cannot parse `{bad}` as a number ({e})") });
            }
        };
        if let Some(i) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::Csv { line, message: format!("non-finite value in column {}", i + 1) });
        }
        match width {
            Some(w) if w != row.len() => {
                return Err(Error::Csv { line, message: format!("expected {w} columns, found {}", row.len()) });
            }
            _ => width = Some(row.len()),
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv { line: 0, message: "no data rows".into() });
    }
    Ok(rows)
}

fn open(path: &Path) -> Result<std::fs::File> {
    Ok(std::fs::File::open(path)?)
}

pub fn read_vector_sample<R: Read>(reader: R) -> Result<VectorSample> {
    VectorSample::from_rows(&read_rows(reader)?)
}

pub fn read_vector_file(path: &Path) -> Result<VectorSample> {
    read_vector_sample(open(path)?)
}

/// Rows of `p * q` values, each a row-major matrix.
pub fn read_matrix_sample<R: Read>(reader: R, p: usize, q: usize) -> Result<MatrixSample> {
    let rows = read_rows(reader)?;
    if rows[0].len() != p * q {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected {} = {p} x {q} columns, found {}", p * q, rows[0].len()),
        });
    }
    let n = rows.len();
    MatrixSample::new(rows.into_iter().flatten().collect(), n, p, q)
}

pub fn read_matrix_file(path: &Path, p: usize, q: usize) -> Result<MatrixSample> {
    read_matrix_sample(open(path)?, p, q)
}

/// Design columns followed by the response in the last column.
pub fn read_regression_data<R: Read>(reader: R) -> Result<RegressionData> {
    let rows = read_rows(reader)?;
    if rows[0].len() < 2 {
        return Err(Error::Csv { line: 1, message: "need at least one design column and a response".into() });
    }
    let d = rows[0].len() - 1;
    let n = rows.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for r in rows {
        x.extend_from_slice(&r[..d]);
        y.push(r[d]);
    }
    RegressionData::new(VectorSample::new(x, n, d)?, y)
}

pub fn read_regression_file(path: &Path) -> Result<RegressionData> {
    read_regression_data(open(path)?)
}

/// Writes rows with 17 significant digits, which round-trips every `f64`.
pub fn write_rows<'a, W: Write>(writer: W, rows: impl Iterator<Item = &'a [f64]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in rows {
        w.write_record(r.iter().map(|x| format!("{x:.16e}"))).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_vector_sample<W: Write>(writer: W, sample: &VectorSample) -> Result<()> {
    write_rows(writer, sample.rows())
}

pub fn write_matrix_sample<W: Write>(writer: W, sample: &MatrixSample) -> Result<()> {
    write_rows(writer, (0..sample.n()).map(|i| sample.mat(i)))
}

pub fn write_regression_data<W: Write>(writer: W, data: &RegressionData) -> Result<()> {
    let rows: Vec<Vec<f64>> = data
        .x()
        .rows()
        .zip(data.y())
        .map(|(x, y)| {
            let mut r = x.to_vec();
            r.push(*y);
            r
        })
        .collect();
    write_rows(writer, rows.iter().map(|r| r.as_slice()))
}
