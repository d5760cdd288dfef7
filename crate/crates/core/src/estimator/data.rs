//! Data sources the estimators can fit: the balanced panel, or a generic
//! in-memory table (used for record-level regressions and tests).

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::panel::Panel;

use super::FeDim;

/// Row-indexed view the fits consume: an outcome, named regressor columns,
/// fixed-effect groupings, and per-row cell/time ids for inference.
pub trait DataSource {
    fn n_rows(&self) -> usize;
    fn outcome(&self, name: &str) -> Result<Vec<f64>>;
    fn column(&self, name: &str) -> Result<&[f64]>;
    fn fe_groups(&self, dim: FeDim) -> Result<Vec<u32>>;
    /// Spatial unit of each row (clusters; Conley centroid lookup).
    fn cell_ids(&self) -> Vec<u32>;
    /// Time index of each row (Conley same-time pairing).
    fn time_ids(&self) -> Vec<u32>;
}

impl DataSource for Panel {
    fn n_rows(&self) -> usize {
        Panel::n_rows(self)
    }

    fn outcome(&self, name: &str) -> Result<Vec<f64>> {
        if name == crate::panel::CRIME {
            Ok(self.crime_f64())
        } else {
            Ok(self.column(name)?.to_vec())
        }
    }

    fn column(&self, name: &str) -> Result<&[f64]> {
        Panel::column(self, name)
    }

    fn fe_groups(&self, dim: FeDim) -> Result<Vec<u32>> {
        Ok(match dim {
            FeDim::CellPeriodDow => self.group_cell_period_dow(),
            FeDim::Day => self.group_day(),
            FeDim::Cell => self.group_cell(),
            FeDim::Period => self.group_period(),
            FeDim::DayOfWeek => self.group_dow(),
        })
    }

    fn cell_ids(&self) -> Vec<u32> {
        (0..Panel::n_rows(self)).map(|r| self.cell_of_row(r)).collect()
    }

    fn time_ids(&self) -> Vec<u32> {
        (0..Panel::n_rows(self)).map(|r| self.dt_of_row(r)).collect()
    }
}

/// A flat table of named f64 columns plus named integer groupings.
///
/// Grouping names `cell`, `day`, `period`, and `dow` back the corresponding
/// [`FeDim`]s; `cell` doubles as the cluster id and `day` (or an explicit
/// `time` grouping) as the time index. Rows without a `cell`/time grouping
/// fall back to singleton ids.
#[derive(Debug, Clone, Default)]
pub struct Table {
    n_rows: usize,
    columns: IndexMap<String, Vec<f64>>,
    groups: IndexMap<String, Vec<u32>>,
}

impl Table {
    pub fn new(n_rows: usize) -> Table {
        Table { n_rows, columns: IndexMap::new(), groups: IndexMap::new() }
    }

    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<&mut Self> {
        if values.len() != self.n_rows {
            return Err(Error::DimensionMismatch { expected: self.n_rows, actual: values.len() });
        }
        if self.columns.insert(name.to_string(), values).is_some() {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
        Ok(self)
    }

    pub fn add_group(&mut self, name: &str, ids: Vec<u32>) -> Result<&mut Self> {
        if ids.len() != self.n_rows {
            return Err(Error::DimensionMismatch { expected: self.n_rows, actual: ids.len() });
        }
        if self.groups.insert(name.to_string(), ids).is_some() {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
        Ok(self)
    }

    fn group(&self, name: &str) -> Result<&[u32]> {
        self.groups
            .get(name)
            .map(|g| g.as_slice())
            .ok_or_else(|| Error::UnknownColumn(format!("grouping `{name}`")))
    }
}

impl DataSource for Table {
    fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn outcome(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column(name)?.to_vec())
    }

    fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    fn fe_groups(&self, dim: FeDim) -> Result<Vec<u32>> {
        match dim {
            FeDim::Cell => Ok(self.group("cell")?.to_vec()),
            FeDim::Day => Ok(self.group("day")?.to_vec()),
            FeDim::Period => Ok(self.group("period")?.to_vec()),
            FeDim::DayOfWeek => Ok(self.group("dow")?.to_vec()),
            FeDim::CellPeriodDow => {
                let cell = self.group("cell")?;
                let period = self.group("period")?;
                let dow = self.group("dow")?;
                Ok((0..self.n_rows)
                    .map(|i| cell[i] * 28 + period[i] * 7 + dow[i])
                    .collect())
            }
        }
    }

    fn cell_ids(&self) -> Vec<u32> {
        match self.groups.get("cell") {
            Some(ids) => ids.clone(),
            None => (0..self.n_rows as u32).collect(),
        }
    }

    fn time_ids(&self) -> Vec<u32> {
        if let Some(t) = self.groups.get("time") {
            return t.clone();
        }
        match self.groups.get("day") {
            Some(ids) => ids.clone(),
            None => (0..self.n_rows as u32).collect(),
        }
    }
}
