//! Run artifacts: fields as CSV or raw binary, log rows as CSV, reports as
//! JSON.
//!
//! The binary layout is `u32 dim`, `u32 points per axis`, then the values as
//! `f64`, all little endian, in the grid's row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::inversion::LogRow;

const AXES: [&str; 3] = ["x", "y", "z"];

/// One line per grid point: coordinates then value, all with 17 significant
/// digits so that reading back is exact.
pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    let grid = field.grid();
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{},value", AXES[..grid.dim()].join(","))?;
    for (i, v) in field.values().iter().enumerate() {
        for c in &grid.point(i)[..grid.dim()] {
            write!(out, "{c:.17e},")?;
        }
        writeln!(out, "{v:.17e}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_field_csv(path: &Path, grid: &Grid) -> Result<Field> {
    let reader = BufReader::new(File::open(path)?);
    let mut values = Vec::with_capacity(grid.len());
    let bad = |line: usize, what: &str| Error::InvalidInput(format!("{}:{}: {what}", path.display(), line + 1));
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(n, "not a number"))?;
        if cols.len() != grid.dim() + 1 {
            return Err(bad(n, "wrong number of columns"));
        }
        let i = values.len();
        if i >= grid.len() {
            return Err(bad(n, "more rows than grid points"));
        }
        let tol = 1e-9 * (1.0 + grid.extent());
        if grid.point(i)[..grid.dim()].iter().zip(&cols).any(|(a, b)| (a - b).abs() > tol) {
            return Err(bad(n, "coordinates do not match the grid"));
        }
        values.push(cols[grid.dim()]);
    }
    Field::new(*grid, values)
}

pub fn write_field_bin(path: &Path, field: &Field) -> Result<()> {
    let grid = field.grid();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(grid.dim() as u32).to_le_bytes())?;
    out.write_all(&(grid.points_per_axis() as u32).to_le_bytes())?;
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_field_bin(path: &Path, grid: &Grid) -> Result<Field> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header = |i: usize| -> Result<usize> {
        let b = bytes
            .get(4 * i..4 * i + 4)
            .ok_or_else(|| Error::InvalidInput(format!("{}: truncated header", path.display())))?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    };
    let (dim, points) = (header(0)?, header(1)?);
    if dim != grid.dim() || points != grid.points_per_axis() {
        return Err(Error::InvalidInput(format!(
            "{}: stored grid {points}^{dim} does not match {}^{}",
            path.display(),
            grid.points_per_axis(),
            grid.dim()
        )));
    }
    let body = &bytes[8..];
    if body.len() != 8 * grid.len() {
        return Err(Error::InvalidInput(format!("{}: expected {} values", path.display(), grid.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Field::new(*grid, values)
}

/// Writes `<stem>.csv` and `<stem>.bin` in `dir`.
pub fn write_field(dir: &Path, stem: &str, field: &Field) -> Result<()> {
    write_field_csv(&dir.join(format!("{stem}.csv")), field)?;
    write_field_bin(&dir.join(format!("{stem}.bin")), field)
}

/// Streams log rows to a CSV file with a header.
pub struct LogWriter {
    inner: csv::Writer<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(csv_error)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}
