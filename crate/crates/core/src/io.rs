//! CSV formats for series, norm tables, eigenfunction weights and spectra.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::points::PointSet;

const UNIFORM_RTOL: f64 = 1e-9;

/// Scientific notation with 17 significant digits, which round-trips any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Buffered CSV writer with the error context of its path.
pub struct CsvOut<'a> {
    path: &'a Path,
    w: BufWriter<File>,
}

impl<'a> CsvOut<'a> {
    pub fn create(path: &'a Path, header: &[&str]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path,
            w: BufWriter::new(f),
        };
        out.line(header.iter().copied())?;
        Ok(out)
    }

    pub fn line<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.w.write_all(b",").map_err(|e| Error::io(self.path, e))?;
            }
            first = false;
            self.w
                .write_all(f.as_ref().as_bytes())
                .map_err(|e| Error::io(self.path, e))?;
        }
        self.w.write_all(b"\n").map_err(|e| Error::io(self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(self.path, e))
    }
}

/// Writes `t,c0,c1,...` with `t = n Δt`.
pub fn write_series_csv(path: &Path, dt: f64, series: &PointSet) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..series.dim()).map(|k| format!("c{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvOut::create(path, &header)?;
    for (n, row) in series.rows().enumerate() {
        out.line(std::iter::once(fmt_f64(n as f64 * dt)).chain(row.iter().map(|&v| fmt_f64(v))))?;
    }
    out.finish()
}

/// Writes rows of a point set under the header `c0,c1,...`.
pub fn write_points_csv(path: &Path, points: &PointSet) -> Result<()> {
    let header: Vec<String> = (0..points.dim()).map(|k| format!("c{k}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvOut::create(path, &header)?;
    for row in points.rows() {
        out.line(row.iter().map(|&v| fmt_f64(v)))?;
    }
    out.finish()
}

/// A numeric table read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedSeries {
    pub series: PointSet,
    /// Sampling interval implied by a `t` column, when present.
    pub dt: Option<f64>,
}

/// Reads a rectangular numeric CSV with a header row. A leading `t` column is
/// checked for uniform spacing (and against `expected_dt` when given) and
/// removed from the returned series.
pub fn ingest_csv(path: &Path, expected_dt: Option<f64>) -> Result<IngestedSeries> {
    let csv_err = |line: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let width = headers.len();
    let has_t = headers.get(0) == Some("t");
    let dim = width - usize::from(has_t);
    if dim == 0 {
        return Err(csv_err(1, "no data columns".into()));
    }
    let mut data = Vec::new();
    let mut times = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != width {
            return Err(csv_err(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(line, format!("`{field}` in column {k} is not a number")))?;
            if has_t && k == 0 {
                times.push(v);
            } else {
                data.push(v);
            }
        }
    }
    if data.is_empty() {
        return Err(csv_err(2, "no data rows".into()));
    }
    let dt = if has_t && times.len() >= 2 {
        let step = times[1] - times[0];
        if !(step > 0.0) {
            return Err(csv_err(3, format!("time step {step} is not positive")));
        }
        for (i, w) in times.windows(2).enumerate() {
            let d = w[1] - w[0];
            if (d - step).abs() > UNIFORM_RTOL * step {
                return Err(csv_err(
                    i + 3,
                    format!("row {} breaks uniform spacing ({d} vs {step})", i + 1),
                ));
            }
        }
        if let Some(e) = expected_dt
            && (step - e).abs() > UNIFORM_RTOL * e
        {
            return Err(csv_err(
                3,
                format!("time step {step} differs from the configured dt {e}"),
            ));
        }
        Some(step)
    } else {
        None
    };
    Ok(IngestedSeries {
        series: PointSet::from_flat(dim, data)?,
        dt,
    })
}

pub fn write_weights_csv(path: &Path, weights: &[Complex64]) -> Result<()> {
    let mut out = CsvOut::create(path, &["n", "re", "im"])?;
    for (n, c) in weights.iter().enumerate() {
        out.line([n.to_string(), fmt_f64(c.re), fmt_f64(c.im)])?;
    }
    out.finish()
}

pub fn read_weights_csv(path: &Path) -> Result<Vec<Complex64>> {
    let table = ingest_csv(path, None)?;
    if table.series.dim() != 3 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "expected columns n,re,im".into(),
        });
    }
    Ok(table
        .series
        .rows()
        .map(|r| Complex64::new(r[1], r[2]))
        .collect())
}

/// Two-column (or wider) table of floats under `header`.
pub fn write_columns_csv(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut out = CsvOut::create(path, header)?;
    let rows = columns.first().map_or(0, |c| c.len());
    for i in 0..rows {
        out.line(columns.iter().map(|c| fmt_f64(c[i])))?;
    }
    out.finish()
}
