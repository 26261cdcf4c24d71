//! Observed samples `(Y, D, X, Z)` and their CSV form.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("non-numeric cell at data row {row}, column \"{column}\"")]
    NonNumericCell { row: usize, column: String },
    #[error("file has no header or no data rows")]
    EmptyFile,
    #[error("role map must name exactly one {role:?} column, found {found}")]
    RoleCount { role: ColumnRole, found: usize },
    #[error("column \"{column}\" has {got} rows, expected {expected}")]
    Ragged { column: String, expected: usize, got: usize },
    #[error("non-finite value in column \"{column}\" at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("dataset needs at least one covariate")]
    NoCovariates,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Outcome,
    Treatment,
    Covariate,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub y: String,
    pub d: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

impl ColumnNames {
    /// `y, d, x1..xJ, z1..zM`.
    pub fn default_for(j: usize, m: usize) -> Self {
        Self {
            y: "y".into(),
            d: "d".into(),
            x: (1..=j).map(|i| format!("x{i}")).collect(),
            z: (1..=m).map(|i| format!("z{i}")).collect(),
        }
    }
}

/// Columnar sample. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<f64>,
    x: Matrix,
    z: Option<Matrix>,
    names: ColumnNames,
}

impl Dataset {
    pub fn new(y: Vec<f64>, d: Vec<f64>, x: Matrix, z: Option<Matrix>, names: ColumnNames) -> Result<Self, DataError> {
        let n = y.len();
        let check = |column: &str, len: usize| {
            if len != n {
                Err(DataError::Ragged { column: column.to_string(), expected: n, got: len })
            } else {
                Ok(())
            }
        };
        check(&names.d, d.len())?;
        check("x", x.rows())?;
        if x.cols() == 0 {
            return Err(DataError::NoCovariates);
        }
        if let Some(z) = &z {
            check("z", z.rows())?;
        }
        for (name, col) in [(&names.y, &y), (&names.d, &d)] {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { column: name.clone(), row });
            }
        }
        Ok(Self { y, d, x, z, names })
    }

    /// Dataset with default column names.
    pub fn from_parts(y: Vec<f64>, d: Vec<f64>, x: Matrix, z: Option<Matrix>) -> Result<Self, DataError> {
        let names = ColumnNames::default_for(x.cols(), z.as_ref().map_or(0, Matrix::cols));
        Self::new(y, d, x, z, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn z(&self) -> Option<&Matrix> {
        self.z.as_ref()
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// Copy with the outcome replaced.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self, DataError> {
        Self::new(y, self.d.clone(), self.x.clone(), self.z.clone(), self.names.clone())
    }

    /// Copy with the treatment replaced.
    pub fn with_d(&self, d: Vec<f64>) -> Result<Self, DataError> {
        Self::new(self.y.clone(), d, self.x.clone(), self.z.clone(), self.names.clone())
    }

    /// Copy with the covariate block replaced.
    pub fn with_x(&self, x: Matrix, x_names: Vec<String>) -> Result<Self, DataError> {
        let mut names = self.names.clone();
        names.x = x_names;
        Self::new(self.y.clone(), self.d.clone(), x, self.z.clone(), names)
    }
}

/// Result of [`read_csv`]: the dataset plus header names not in the role map.
#[derive(Debug)]
pub struct CsvRead {
    pub dataset: Dataset,
    pub ignored: Vec<String>,
}

/// Reads a headed CSV, assigning columns by role. Covariates and excluded
/// columns keep their file order.
pub fn read_csv(path: &Path, roles: &HashMap<String, ColumnRole>) -> Result<CsvRead, DataError> {
    for role in [ColumnRole::Outcome, ColumnRole::Treatment] {
        let found = roles.values().filter(|r| **r == role).count();
        if found != 1 {
            return Err(DataError::RoleCount { role, found });
        }
    }
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: display.clone(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|source| DataError::Csv { path: display.clone(), source })?.clone();
    if headers.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let header_names: Vec<String> = headers.iter().map(str::to_string).collect();
    let mut missing: Vec<&String> = roles.keys().filter(|k| !header_names.contains(k)).collect();
    missing.sort();
    if let Some(name) = missing.first() {
        return Err(DataError::MissingColumn((*name).clone()));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header_names.len()];
    let mapped: Vec<bool> = header_names.iter().map(|h| roles.contains_key(h)).collect();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv { path: display.clone(), source })?;
        for (c, cell) in rec.iter().enumerate() {
            if c >= mapped.len() || !mapped[c] {
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DataError::NonNumericCell { row: row + 1, column: header_names[c].clone() })?;
            columns[c].push(v);
        }
    }
    let rows = columns.iter().zip(&mapped).find(|(_, m)| **m).map_or(0, |(c, _)| c.len());
    if rows == 0 {
        return Err(DataError::EmptyFile);
    }

    let mut names = ColumnNames { y: String::new(), d: String::new(), x: vec![], z: vec![] };
    let (mut y, mut d) = (Vec::new(), Vec::new());
    let (mut xs, mut zs): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (vec![], vec![]);
    let mut ignored = Vec::new();
    for (c, name) in header_names.iter().enumerate() {
        let col = std::mem::take(&mut columns[c]);
        if mapped[c] && col.len() != rows {
            return Err(DataError::Ragged { column: name.clone(), expected: rows, got: col.len() });
        }
        match roles.get(name) {
            Some(ColumnRole::Outcome) => {
                names.y = name.clone();
                y = col;
            }
            Some(ColumnRole::Treatment) => {
                names.d = name.clone();
                d = col;
            }
            Some(ColumnRole::Covariate) => {
                names.x.push(name.clone());
                xs.push(col);
            }
            Some(ColumnRole::Excluded) => {
                names.z.push(name.clone());
                zs.push(col);
            }
            None => ignored.push(name.clone()),
        }
    }
    let x = Matrix::from_columns(&as_slices(&xs))?;
    let x = if xs.is_empty() { Matrix::zeros(rows, 0) } else { x };
    let z = if zs.is_empty() { None } else { Some(Matrix::from_columns(&as_slices(&zs))?) };
    let dataset = Dataset::new(y, d, x, z, names)?;
    Ok(CsvRead { dataset, ignored })
}

/// Writes `y, d, x.., z..` with 17 significant digits.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let display = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| DataError::Csv { path: display.clone(), source })?;
    let names = ds.names();
    let mut header = vec![names.y.clone(), names.d.clone()];
    header.extend(names.x.iter().cloned());
    header.extend(names.z.iter().cloned());
    let csv_err = |source| DataError::Csv { path: display.clone(), source };
    w.write_record(&header).map_err(csv_err)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.push(fmt17(ds.y[i]));
        rec.push(fmt17(ds.d[i]));
        rec.extend(ds.x.row(i).iter().map(|v| fmt17(*v)));
        if let Some(z) = &ds.z {
            rec.extend(z.row(i).iter().map(|v| fmt17(*v)));
        }
        w.write_record(&rec).map_err(|source| DataError::Csv { path: display.clone(), source })?;
    }
    w.flush().map_err(|source| DataError::Io { path: display.clone(), source })
}

/// Role map for files produced by [`write_csv`] with default names.
pub fn default_roles(j: usize, m: usize) -> HashMap<String, ColumnRole> {
    let names = ColumnNames::default_for(j, m);
    let mut roles = HashMap::new();
    roles.insert(names.y, ColumnRole::Outcome);
    roles.insert(names.d, ColumnRole::Treatment);
    for x in names.x {
        roles.insert(x, ColumnRole::Covariate);
    }
    for z in names.z {
        roles.insert(z, ColumnRole::Excluded);
    }
    roles
}

fn as_slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
