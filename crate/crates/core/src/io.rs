//! CSV ingestion and export for data and mask files.

use std::path::Path;

use crate::data::{DataMatrix, MaskMatrix};
use crate::error::{EmflowError, Result};

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Token that marks a missing value, in addition to an empty field.
    pub na_token: String,
    /// Field separator, e.g. `b';'` for the UCI wine files.
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            na_token: "NA".to_string(),
            delimiter: b',',
        }
    }
}

/// Reads a numeric CSV; empty fields and `na_token` become mask bits.
pub fn read_data_csv(
    path: impl AsRef<Path>,
    opts: &CsvOptions,
) -> Result<(DataMatrix, MaskMatrix)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_data_from(file, opts)
}

pub fn read_data_from<R: std::io::Read>(
    reader: R,
    opts: &CsvOptions,
) -> Result<(DataMatrix, MaskMatrix)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .delimiter(opts.delimiter)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names = if opts.has_header {
        Some(
            rdr.headers()?
                .iter()
                .map(str::to_string)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let mut values = Vec::new();
    let mut bits = Vec::new();
    let mut p = None;
    let mut n = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        match p {
            None => p = Some(record.len()),
            Some(p) if p != record.len() => {
                return Err(EmflowError::Parse(format!(
                    "record {} has {} fields, expected {p}",
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() || field == opts.na_token {
                values.push(0.0);
                bits.push(true);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    EmflowError::Parse(format!(
                        "record {}, column {j}: cannot parse '{field}' as a number",
                        line + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(EmflowError::Parse(format!(
                        "record {}, column {j}: non-finite value '{field}'",
                        line + 1
                    )));
                }
                values.push(v);
                bits.push(false);
            }
        }
        n += 1;
    }
    let p = p.ok_or_else(|| EmflowError::Parse("no data records".into()))?;
    let mut data = DataMatrix::new(n, p, values)?;
    if let Some(names) = names {
        data = data.with_feature_names(names)?;
    }
    Ok((data, MaskMatrix::new(n, p, bits)?))
}

/// Writes data; cells flagged in `mask` (if given) are written as `na_token`.
pub fn write_data_csv(
    path: impl AsRef<Path>,
    data: &DataMatrix,
    mask: Option<&MaskMatrix>,
    opts: &CsvOptions,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(opts.delimiter)
        .from_path(path.as_ref())?;
    if opts.has_header {
        let header: Vec<String> = (0..data.p()).map(|j| data.feature_name(j)).collect();
        wtr.write_record(&header)?;
    }
    for i in 0..data.n() {
        let rec: Vec<String> = (0..data.p())
            .map(|j| match mask {
                Some(m) if m.is_missing(i, j) => opts.na_token.clone(),
                _ => format!("{}", data.get(i, j)),
            })
            .collect();
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mask files are header-less CSVs of 0/1 with the data's shape.
pub fn write_mask_csv(path: impl AsRef<Path>, mask: &MaskMatrix) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())?;
    for row in mask.rows() {
        wtr.write_record(row.iter().map(|&b| if b { "1" } else { "0" }))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<MaskMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| match f {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(EmflowError::Parse(format!(
                    "mask record {}: expected 0 or 1, got '{other}'",
                    line + 1
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(EmflowError::Parse("empty mask file".into()));
    }
    MaskMatrix::from_rows(&rows)
}
