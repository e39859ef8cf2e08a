//! Numeric CSV tables: comma separated, header row required, `#` lines are
//! comments, every cell a finite number.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    /// One row per record.
    pub data: DMatrix<f64>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Columns other than `skip`, in order.
    pub fn without(&self, skip: usize) -> Table {
        let keep: Vec<usize> = (0..self.headers.len()).filter(|&j| j != skip).collect();
        Table {
            headers: keep.iter().map(|&j| self.headers[j].clone()).collect(),
            data: self.data.select_columns(&keep),
        }
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |line: u64, message: String| CliError::Csv {
        path: path.display().to_string(),
        line,
        message,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(csv_line(&e), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(bad(1, "missing header row".into()));
    }
    if let Some(h) = headers.iter().find(|h| h.parse::<f64>().is_ok()) {
        return Err(bad(1, format!("header row required, found numeric cell `{h}`")));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| bad(csv_line(&e), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| bad(line, format!("column `{}`: `{cell}` is not a number", headers[j])))?;
            if !v.is_finite() {
                return Err(bad(line, format!("column `{}`: non-finite value `{cell}`", headers[j])));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(bad(1, "no data rows".into()));
    }
    Ok(Table {
        data: DMatrix::from_row_slice(rows, headers.len(), &values),
        headers,
    })
}

fn csv_line(e: &csv::Error) -> u64 {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos: Some(p), .. } => p.line(),
        csv::ErrorKind::Deserialize { pos: Some(p), .. } => p.line(),
        csv::ErrorKind::Utf8 { pos: Some(p), .. } => p.line(),
        _ => 0,
    }
}

/// Writes `# provenance` then a header and rows.
pub fn write_table(
    path: &Path,
    provenance: &str,
    headers: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(file, "# {provenance}").map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| CliError::Validation(format!("{}: {e}", path.display()));
    w.write_record(headers).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}
