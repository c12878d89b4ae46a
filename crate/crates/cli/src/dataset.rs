//! CSV ingestion for ETT-style benchmark files.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ldm_core::TimeSeries;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub path: PathBuf,
    /// Keep only this column (univariate mode).
    pub target_column: Option<String>,
    /// Dropped after validation when present in the header.
    pub date_column: String,
    /// Headerless files get generated column names `c0, c1, ...`.
    pub has_header: bool,
}

impl DatasetSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            target_column: None,
            date_column: "date".to_string(),
            has_header: true,
        }
    }

    pub fn univariate(mut self, column: impl Into<String>) -> Self {
        self.target_column = Some(column.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub path: String,
    pub rows: usize,
    pub columns: Vec<String>,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: TimeSeries,
    pub columns: Vec<String>,
    pub fingerprint: DatasetFingerprint,
}

/// Reads a CSV into a channel-major series. Every retained cell must parse as
/// a finite number; errors name the 1-based data row and the column.
pub fn ingest_csv(src: &DatasetSource) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(&src.path)
        .with_context(|| format!("opening {}", src.path.display()))?
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {}", src.path.display()))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(src.has_header)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = if src.has_header {
        reader.headers()?.iter().map(str::to_string).collect()
    } else {
        Vec::new()
    };

    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r.with_context(|| "row 1")?,
        None => bail!("{}: no data rows", src.path.display()),
    };
    let header = if src.has_header {
        header
    } else {
        (0..first.len()).map(|i| format!("c{i}")).collect()
    };
    let date_idx = header.iter().position(|h| *h == src.date_column);
    let mut keep: Vec<usize> = (0..header.len()).filter(|&i| Some(i) != date_idx).collect();
    if let Some(t) = &src.target_column {
        let idx = header
            .iter()
            .position(|h| h == t)
            .with_context(|| format!("target column '{t}' not in header {header:?}"))?;
        if Some(idx) == date_idx {
            bail!("target column '{t}' is the date column");
        }
        keep = vec![idx];
    }
    if keep.is_empty() {
        bail!("{}: no numeric columns", src.path.display());
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); keep.len()];
    let mut push_row = |row: usize, rec: &csv::StringRecord| -> Result<()> {
        if rec.len() != header.len() {
            bail!("row {row}: expected {} fields, found {}", header.len(), rec.len());
        }
        if let Some(d) = date_idx {
            if rec[d].is_empty() {
                bail!("row {row}, column '{}': empty date", header[d]);
            }
        }
        for (dst, &c) in values.iter_mut().zip(&keep) {
            let cell = &rec[c];
            let v: f64 = cell
                .parse()
                .map_err(|_| anyhow::anyhow!("row {row}, column '{}': '{cell}' is not numeric", header[c]))?;
            if !v.is_finite() {
                bail!("row {row}, column '{}': non-finite value '{cell}'", header[c]);
            }
            dst.push(v);
        }
        Ok(())
    };
    push_row(1, &first)?;
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.with_context(|| format!("row {row}"))?;
        push_row(row, &rec)?;
    }

    let rows = values[0].len();
    let columns: Vec<String> = keep.iter().map(|&c| header[c].clone()).collect();
    let name = src
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        series: TimeSeries::new(values, 1, name)?,
        fingerprint: DatasetFingerprint {
            path: src.path.display().to_string(),
            rows,
            columns: columns.clone(),
            sha256,
        },
        columns,
    })
}

/// Writes a series back out in the ingestion layout (index column instead of
/// dates).
pub fn write_csv(path: &Path, series: &TimeSeries, columns: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["date".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend(series.values().iter().map(|c| c[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
