//! Matrix file formats.
//!
//! * CSV: one data point per row, `.` as decimal separator, optional header.
//! * Binary: `b"MFGL"`, version byte `0x01`, `u64` LE rows, `u64` LE cols,
//!   then `rows * cols` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFGL";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    #[default]
    Csv,
    Bin,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Bin => "bin",
        }
    }
}

pub fn read_matrix(path: &Path, format: MatrixFormat, header: bool) -> Result<DMatrix<f64>> {
    match format {
        MatrixFormat::Csv => read_csv(path, header),
        MatrixFormat::Bin => read_bin(path),
    }
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => write_csv(path, m, None),
        MatrixFormat::Bin => write_bin(path, m),
    }
}

pub fn read_csv(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    let file = File::open(path)?;
    read_csv_from(BufReader::new(file), header)
}

pub fn read_csv_from<R: Read>(reader: R, header: bool) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Format(format!(
                    "row {line} has {} fields, expected {c}",
                    rec.len()
                )))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {line}: cannot parse {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Writes with shortest round-trip float formatting, so reading back is exact.
pub fn write_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let file = File::create(path)?;
    write_csv_to(BufWriter::new(file), m, header)
}

pub fn write_csv_to<W: Write>(writer: W, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let io_err = |e: csv::Error| Error::Format(e.to_string());
    if let Some(h) = header {
        wtr.write_record(h).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(m.ncols());
    for row in m.row_iter() {
        buf.clear();
        buf.extend(row.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&buf).map_err(io_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_bin(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path)?;
    read_bin_from(BufReader::new(file))
}

pub fn read_bin_from<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated payload".into()))?;
        values.push(f64::from_le_bytes(word));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_bin_to(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn write_bin_to<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for row in m.row_iter() {
        for v in row.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_vector_csv(path: &Path, name: &str, v: &[f64]) -> Result<()> {
    let m = DMatrix::from_column_slice(v.len(), 1, v);
    write_csv(path, &m, Some(&[name.to_string()]))
}
