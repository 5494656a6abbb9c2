//! Time-indexed data tables: the exchange format between simulation, design,
//! identification and detection stages.
//!
//! On disk a table is a UTF-8 CSV whose first column is the integer step index
//! `t`. Column roles are not stored; they are recovered from naming
//! conventions (see [`ColumnKind::infer`]).

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the imposed speed-setpoint column.
pub const SETPOINT: &str = "speed_setpoint";
/// Prefix of Boolean module-activation columns.
pub const BOOLEAN_PREFIX: &str = "X_";
/// Prefix of internal integrator-state columns.
pub const INTERNAL_PREFIX: &str = "int_";
/// Prefix of imposed columns other than the setpoint.
pub const IMPOSED_PREFIX: &str = "U_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    /// A physical (or latent) state variable.
    State,
    /// Integrator state needed to restart a simulation exactly.
    Internal,
    /// Imposed by the driving cycle; identical across runs.
    Imposed,
    /// Module-activation flag, 0.0 or 1.0.
    Boolean,
}

impl ColumnKind {
    pub fn infer(name: &str) -> ColumnKind {
        if name.starts_with(BOOLEAN_PREFIX) {
            ColumnKind::Boolean
        } else if name == SETPOINT || name.starts_with(IMPOSED_PREFIX) {
            ColumnKind::Imposed
        } else if name.starts_with(INTERNAL_PREFIX) {
            ColumnKind::Internal
        } else {
            ColumnKind::State
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
    steps: Vec<usize>,
    /// n × c, column-major so each column is a contiguous slice.
    values: DMatrix<f64>,
}

impl DataTable {
    /// Build a table from columns; roles are inferred from the names.
    pub fn from_columns(steps: Vec<usize>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let kinds = columns.iter().map(|(n, _)| ColumnKind::infer(n)).collect();
        Self::from_columns_with_kinds(steps, columns, kinds)
    }

    pub fn from_columns_with_kinds(
        steps: Vec<usize>,
        columns: Vec<(String, Vec<f64>)>,
        kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        let n = steps.len();
        let c = columns.len();
        if kinds.len() != c {
            return Err(Error::Schema("one kind per column required".into()));
        }
        let mut names = Vec::with_capacity(c);
        let mut flat = Vec::with_capacity(n * c);
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::Schema(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            flat.extend_from_slice(&col);
            names.push(name);
        }
        let table = DataTable {
            names,
            kinds,
            steps,
            values: DMatrix::from_vec(n, c, flat),
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in &self.names {
            if name == "t" {
                return Err(Error::Schema("`t` is reserved for the step index".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{name}`")));
            }
        }
        for (j, kind) in self.kinds.iter().enumerate() {
            if *kind == ColumnKind::Boolean {
                if let Some(v) = self.column_at(j).iter().find(|v| **v != 0.0 && **v != 1.0) {
                    return Err(Error::Schema(format!(
                        "boolean column `{}` contains {v}",
                        self.names[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.index_of(name).map(|j| self.kinds[j])
    }

    pub fn column_at(&self, j: usize) -> &[f64] {
        let n = self.nrows();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index_of(name)
            .map(|j| self.column_at(j))
            .ok_or_else(|| Error::MissingColumns(vec![name.to_string()]))
    }

    pub fn get(&self, row: usize, name: &str) -> Result<f64> {
        Ok(self.column(name)?[row])
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Names of every column of the given kind, in table order.
    pub fn names_of(&self, kind: ColumnKind) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == kind)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Fail with every name in `required` that the table lacks.
    pub fn require(&self, required: &[String]) -> Result<()> {
        let missing: Vec<String> = required
            .iter()
            .filter(|n| self.index_of(n).is_none())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingColumns(missing))
        }
    }

    /// Gather the named columns into an n × k matrix.
    pub fn matrix_of(&self, names: &[String]) -> Result<DMatrix<f64>> {
        self.require(names)?;
        let n = self.nrows();
        let mut m = DMatrix::zeros(n, names.len());
        for (k, name) in names.iter().enumerate() {
            m.column_mut(k).copy_from_slice(self.column(name)?);
        }
        Ok(m)
    }

    pub fn select(&self, names: &[String]) -> Result<DataTable> {
        self.require(names)?;
        let columns = names
            .iter()
            .map(|n| Ok((n.clone(), self.column(n)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        let kinds = names.iter().map(|n| self.kind_of(n).unwrap()).collect();
        DataTable::from_columns_with_kinds(self.steps.clone(), columns, kinds)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> DataTable {
        let end = end.min(self.nrows());
        let start = start.min(end);
        DataTable {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            steps: self.steps[start..end].to_vec(),
            values: self.values.rows(start, end - start).into_owned(),
        }
    }

    /// Append (or replace) a column.
    pub fn with_column(mut self, name: &str, kind: ColumnKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nrows() {
            return Err(Error::Schema(format!(
                "column `{name}` has {} rows, expected {}",
                values.len(),
                self.nrows()
            )));
        }
        if let Some(j) = self.index_of(name) {
            self.values.column_mut(j).copy_from_slice(&values);
            self.kinds[j] = kind;
        } else {
            let c = self.ncols();
            self.values = self.values.insert_column(c, 0.0);
            self.values.column_mut(c).copy_from_slice(&values);
            self.names.push(name.to_string());
            self.kinds.push(kind);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.ncols() + 1);
        for i in 0..self.nrows() {
            record.clear();
            record.push(self.steps[i].to_string());
            for j in 0..self.ncols() {
                let v = self.values[(i, j)];
                record.push(match self.kinds[j] {
                    ColumnKind::Boolean => if v == 1.0 { "1" } else { "0" }.to_string(),
                    _ => format_f64(v),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("t") {
            return Err(Error::Schema("first column must be `t`".into()));
        }
        let names = header[1..].to_vec();
        let mut steps = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |field: &str| {
                Error::Schema(format!("row {line}: cannot parse `{field}` as a number"))
            };
            let t = rec.get(0).unwrap_or_default();
            steps.push(t.trim().parse::<usize>().map_err(|_| parse_err(t))?);
            for (j, col) in cols.iter_mut().enumerate() {
                let field = rec.get(j + 1).unwrap_or_default();
                col.push(field.trim().parse::<f64>().map_err(|_| parse_err(field))?);
            }
        }
        DataTable::from_columns(steps, names.into_iter().zip(cols).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn format_f64(v: f64) -> String {
    // `Debug` for f64 is the shortest round-trip representation and switches
    // to exponent notation for very large/small magnitudes.
    format!("{v:?}")
}
