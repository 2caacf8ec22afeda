//! Delimited text input and output.
//!
//! Matrices are one row per line, comma- or tab-separated, with an optional
//! header line. Missing values may be written as `NA`. Everything this crate
//! writes is tab-separated, with floats in Rust's shortest round-trip
//! representation so a read/write cycle reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::Dataset;

pub const NA: &str = "NA";

/// A parsed delimited file: optional header plus numeric cells, where `None`
/// marks an `NA` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub rows: Vec<Vec<Option<f64>>>,
}

fn sniff_delimiter(path: &Path) -> Result<u8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(|e| Error::io(path, e))?;
    Ok(if first.contains('\t') { b'\t' } else { b',' })
}

fn parse_cell(token: &str) -> Option<Option<f64>> {
    let t = token.trim();
    if t.eq_ignore_ascii_case(NA) {
        Some(None)
    } else {
        t.parse::<f64>().ok().map(Some)
    }
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let delimiter = sniff_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut header = None;
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let parsed: Option<Vec<Option<f64>>> = record.iter().map(parse_cell).collect();
        match parsed {
            Some(cells) => {
                if let Some(first) = rows.first() {
                    if first.len() != cells.len() {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: line + 1,
                            message: format!("expected {} columns, found {}", first.len(), cells.len()),
                        });
                    }
                }
                rows.push(cells);
            }
            None if line == 0 => header = Some(record.iter().map(|c| c.trim().to_string()).collect()),
            None => {
                let bad = record.iter().find(|c| parse_cell(c).is_none()).unwrap_or_default();
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: format!("cannot parse `{bad}` as a number"),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    Ok(Table { header, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

impl Table {
    fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.rows[0].len())
    }

    fn to_matrix(&self, path: &Path) -> Result<DMatrix<f64>> {
        let (r, c) = self.shape();
        let mut m = DMatrix::zeros(r, c);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                m[(i, j)] = cell.ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1 + self.header.is_some() as usize,
                    message: format!("unexpected {NA} in column {}", j + 1),
                })?;
            }
        }
        Ok(m)
    }
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    read_table(path)?.to_matrix(path)
}

/// Read a 0/1 matrix. Any nonzero value counts as `true`.
pub fn read_bool_matrix(path: impl AsRef<Path>) -> Result<DMatrix<bool>> {
    Ok(read_matrix(path)?.map(|v| v != 0.0))
}

/// Load a dataset. Cells written as `NA` are treated as unobserved; if a mask
/// file is given as well, an entry is observed only if both agree.
pub fn load_dataset(data: impl AsRef<Path>, mask: Option<&Path>) -> Result<Dataset> {
    let data = data.as_ref();
    let table = read_table(data)?;
    let (g, n) = table.shape();
    let y = DMatrix::from_fn(g, n, |i, j| table.rows[i][j].unwrap_or(0.0));
    let mut observed = DMatrix::from_fn(g, n, |i, j| table.rows[i][j].is_some());
    if let Some(mask_path) = mask {
        let m = read_bool_matrix(mask_path)?;
        if m.shape() != (g, n) {
            return Err(Error::Dimension(format!(
                "mask {} is {}x{} but data is {g}x{n}",
                mask_path.display(),
                m.nrows(),
                m.ncols()
            )));
        }
        observed.zip_apply(&m, |o, m| *o = *o && m);
    }
    let dataset = Dataset::with_mask(y, observed)?;
    dataset.check_coverage()?;
    Ok(dataset)
}

pub fn format_f64(x: f64) -> String {
    format!("{x}")
}

/// Write rows of preformatted cells, tab-separated.
pub fn write_rows<I, R>(path: impl AsRef<Path>, header: Option<&[String]>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |cells: &mut dyn Iterator<Item = String>| -> std::io::Result<()> {
        let mut first = true;
        for c in cells {
            if !first {
                w.write_all(b"\t")?;
            }
            w.write_all(c.as_bytes())?;
            first = false;
        }
        w.write_all(b"\n")
    };
    if let Some(h) = header {
        emit(&mut h.iter().cloned()).map_err(|e| Error::io(path, e))?;
    }
    for row in rows {
        emit(&mut row.into_iter()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_rows(path, None, (0..m.nrows()).map(|i| m.row(i).iter().map(|&v| format_f64(v)).collect::<Vec<_>>()))
}

pub fn write_bool_matrix(path: impl AsRef<Path>, m: &DMatrix<bool>) -> Result<()> {
    write_rows(
        path,
        None,
        (0..m.nrows()).map(|i| m.row(i).iter().map(|&v| if v { "1" } else { "0" }.to_string()).collect::<Vec<_>>()),
    )
}

/// Write a dataset as `y.tsv` (masked entries as `NA`) and `mask.tsv`.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let y = data.y();
    write_rows(
        dir.join("y.tsv"),
        None,
        (0..y.nrows()).map(|i| {
            (0..y.ncols())
                .map(|j| if data.is_observed(i, j) { format_f64(y[(i, j)]) } else { NA.to_string() })
                .collect::<Vec<_>>()
        }),
    )?;
    write_bool_matrix(dir.join("mask.tsv"), data.mask())
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Flat `key<TAB>value` metrics file, one pair per line, in the given order.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[(String, f64)]) -> Result<()> {
    write_rows(path, None, metrics.iter().map(|(k, v)| vec![k.clone(), format_f64(*v)]))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (k, v) = l.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected key<TAB>value".into(),
            })?;
            let v = v.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("cannot parse `{v}`"),
            })?;
            Ok((k.to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_csv_with_header_and_na() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        std::fs::write(&p, "s1,s2,s3\n1.5,NA,2\n-1,0.25,3e-2\n").unwrap();
        let d = load_dataset(&p, None).unwrap();
        assert_eq!((d.n_features(), d.n_samples()), (2, 3));
        assert!(!d.is_observed(0, 1));
        assert_eq!(d.y()[(1, 2)], 0.03);
        assert_eq!(d.observed_count(), 5);
    }

    #[test]
    fn mask_file_combines_with_na() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.tsv");
        let m = dir.path().join("m.tsv");
        std::fs::write(&p, "1\t2\n3\tNA\n").unwrap();
        std::fs::write(&m, "0\t1\n1\t1\n").unwrap();
        let d = load_dataset(&p, Some(&m)).unwrap();
        assert_eq!(d.mask(), &DMatrix::from_row_slice(2, 2, &[false, true, true, false]));
    }

    #[test]
    fn rejects_uncovered_rows_and_ragged_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.tsv");
        std::fs::write(&p, "NA\tNA\n1\t2\n").unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::InvalidData(_))));
        std::fs::write(&p, "1\t2\n1\n").unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Parse { .. })));
        std::fs::write(&p, "1\t2\nx\t3\n").unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn matrix_write_read_write_is_byte_identical(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40), cols in 1usize..5) {
            let rows = vals.len().div_ceil(cols);
            let m = DMatrix::from_fn(rows, cols, |i, j| vals[(i * cols + j) % vals.len()]);
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.tsv");
            let b = dir.path().join("b.tsv");
            write_matrix(&a, &m).unwrap();
            let back = read_matrix(&a).unwrap();
            prop_assert_eq!(&back, &m);
            write_matrix(&b, &back).unwrap();
            prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }
}
