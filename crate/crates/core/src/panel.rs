//! The balanced cell x day x period panel and its column constructors.
//!
//! Row layout is fixed: row = ((day_ordinal * 4 + period) * n_cells + cell).
//! The outcome is stored as integers; every other column is a dense f64
//! array. Missing values (heads of temporal lags) are NaN and are excluded
//! from estimation samples downstream.

use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::HexGrid;
use crate::ingest::{Aggregates, N_PERIODS};
use crate::weights::WeightMatrix;

/// Composite fixed-effect key for one observation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedEffectKey {
    /// cell x period x day-of-week composite, in [0, n_cells * 28).
    pub group_a: u32,
    /// Day ordinal, in [0, n_days).
    pub group_b: u32,
}

/// Balanced panel over cells, days, and four daily periods.
#[derive(Debug, Clone)]
pub struct Panel {
    n_cells: usize,
    n_days: usize,
    study_start_date: NaiveDate,
    crime: Vec<u32>,
    columns: IndexMap<String, Vec<f64>>,
}

pub const CRIME: &str = "crime";
pub const BLITZ: &str = "blitz";
pub const BLITZ_SQ: &str = "blitz_sq";
pub const OFFICERS: &str = "officers";
pub const SEIZURES: &str = "seizures";
pub const MOTORCYCLES: &str = "motorcycles";

/// Conventional name for the spatial lag of `blitz`.
pub const W_BLITZ: &str = "w_blitz";

/// Conventional name for temporal lag `j` of `blitz`.
pub fn lag_name(column: &str, j: usize) -> String {
    format!("lag_{column}_{j}")
}

impl Panel {
    /// Assembles the zero-filled balanced panel and populates outcome,
    /// treatment, and treatment covariates from the aggregates.
    pub fn assemble(
        grid: &HexGrid,
        aggregates: &Aggregates,
        study_start_date: NaiveDate,
        n_days: u32,
    ) -> Result<Panel> {
        Panel::assemble_dims(grid.n_cells(), aggregates, study_start_date, n_days)
    }

    /// As [`Panel::assemble`] but with an explicit cell count.
    pub fn assemble_dims(
        n_cells: usize,
        aggregates: &Aggregates,
        study_start_date: NaiveDate,
        n_days: u32,
    ) -> Result<Panel> {
        if n_cells == 0 || n_days == 0 {
            return Err(Error::InvalidParameter("panel needs cells and days".into()));
        }
        let n_rows = n_cells * n_days as usize * N_PERIODS;
        let mut crime = vec![0u32; n_rows];
        let mut blitz = vec![0.0; n_rows];
        let mut officers = vec![0.0; n_rows];
        let mut seizures = vec![0.0; n_rows];
        let mut motorcycles = vec![0.0; n_rows];
        for (&(cell, day, period), slot) in &aggregates.map {
            if cell as usize >= n_cells || day >= n_days {
                return Err(Error::Consistency(format!(
                    "aggregate key (cell {cell}, day {day}) outside panel dimensions"
                )));
            }
            let row = row_index(n_cells, cell as usize, day as usize, period.index());
            crime[row] = slot.violent_count;
            blitz[row] = slot.blitz_hours;
            officers[row] = slot.officers;
            seizures[row] = slot.seizures;
            motorcycles[row] = slot.motorcycles;
        }
        let blitz_sq: Vec<f64> = blitz.iter().map(|&b| b * b).collect();
        let mut columns = IndexMap::new();
        columns.insert(BLITZ.to_string(), blitz);
        columns.insert(BLITZ_SQ.to_string(), blitz_sq);
        columns.insert(OFFICERS.to_string(), officers);
        columns.insert(SEIZURES.to_string(), seizures);
        columns.insert(MOTORCYCLES.to_string(), motorcycles);
        Ok(Panel { n_cells, n_days: n_days as usize, study_start_date, crime, columns })
    }

    /// Builds a panel directly from columns (synthetic data, file import).
    pub fn from_parts(
        n_cells: usize,
        n_days: usize,
        study_start_date: NaiveDate,
        crime: Vec<u32>,
        columns: IndexMap<String, Vec<f64>>,
    ) -> Result<Panel> {
        let n_rows = n_cells * n_days * N_PERIODS;
        if crime.len() != n_rows {
            return Err(Error::DimensionMismatch { expected: n_rows, actual: crime.len() });
        }
        for (name, col) in &columns {
            if col.len() != n_rows {
                return Err(Error::Consistency(format!(
                    "column `{name}` has {} rows, panel has {n_rows}",
                    col.len()
                )));
            }
        }
        Ok(Panel { n_cells, n_days, study_start_date, crime, columns })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_rows(&self) -> usize {
        self.n_cells * self.n_days * N_PERIODS
    }

    pub fn study_start_date(&self) -> NaiveDate {
        self.study_start_date
    }

    pub fn row_index(&self, cell: usize, day: usize, period: usize) -> usize {
        row_index(self.n_cells, cell, day, period)
    }

    pub fn cell_of_row(&self, row: usize) -> u32 {
        (row % self.n_cells) as u32
    }

    /// Flattened day-period index of a row.
    pub fn dt_of_row(&self, row: usize) -> u32 {
        (row / self.n_cells) as u32
    }

    pub fn crime(&self) -> &[u32] {
        &self.crime
    }

    pub fn crime_f64(&self) -> Vec<f64> {
        self.crime.iter().map(|&c| c as f64).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.keys().map(|s| s.as_str()).collect()
    }

    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if name == CRIME || self.columns.contains_key(name) {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
        if values.len() != self.n_rows() {
            return Err(Error::DimensionMismatch { expected: self.n_rows(), actual: values.len() });
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }

    /// Swaps the contents of an existing column (build-phase helper used to
    /// reuse one column slot across weight-matrix variants).
    pub fn replace_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::DimensionMismatch { expected: self.n_rows(), actual: values.len() });
        }
        match self.columns.get_mut(name) {
            Some(slot) => {
                *slot = values;
                Ok(())
            }
            None => Err(Error::UnknownColumn(name.to_string())),
        }
    }

    /// Weekday (Monday = 0) of a day ordinal, from the start date's calendar.
    pub fn dow_of_day(&self, day: usize) -> u32 {
        (self.study_start_date.weekday().num_days_from_monday() + day as u32) % 7
    }

    /// Fixed-effect key of a row under the cell x period x day-of-week /
    /// daily scheme.
    pub fn fe_key(&self, row: usize) -> FixedEffectKey {
        let cell = row % self.n_cells;
        let dt = row / self.n_cells;
        let day = dt / N_PERIODS;
        let period = dt % N_PERIODS;
        FixedEffectKey {
            group_a: (cell * 28 + period * 7 + self.dow_of_day(day) as usize) as u32,
            group_b: day as u32,
        }
    }

    pub fn group_cell_period_dow(&self) -> Vec<u32> {
        (0..self.n_rows()).map(|r| self.fe_key(r).group_a).collect()
    }

    pub fn group_day(&self) -> Vec<u32> {
        (0..self.n_rows()).map(|r| self.fe_key(r).group_b).collect()
    }

    pub fn group_cell(&self) -> Vec<u32> {
        (0..self.n_rows()).map(|r| (r % self.n_cells) as u32).collect()
    }

    pub fn group_period(&self) -> Vec<u32> {
        (0..self.n_rows()).map(|r| ((r / self.n_cells) % N_PERIODS) as u32).collect()
    }

    pub fn group_dow(&self) -> Vec<u32> {
        (0..self.n_rows())
            .map(|r| self.dow_of_day(r / self.n_cells / N_PERIODS))
            .collect()
    }

    /// Temporal lag by `j` day-period slots; rows without a predecessor are
    /// NaN. `j` beyond the panel depth yields an all-missing column.
    pub fn temporal_lag(&self, column: &str, j: usize) -> Result<Vec<f64>> {
        if j == 0 {
            return Err(Error::InvalidParameter("lag must be at least 1".into()));
        }
        let col = self.column(column)?;
        Ok(lag_values(col, self.n_cells, j))
    }

    /// Spatial lag: applies the weight matrix to every (day, period) slice.
    pub fn spatial_lag(&self, w: &WeightMatrix, column: &str) -> Result<Vec<f64>> {
        if w.n_rows() != self.n_cells {
            return Err(Error::DimensionMismatch { expected: self.n_cells, actual: w.n_rows() });
        }
        let col = self.column(column)?;
        let slices: Vec<&[f64]> = col.chunks(self.n_cells).collect();
        let out: Vec<Vec<f64>> = slices
            .par_iter()
            .map(|slice| w.apply(slice).expect("slice length matches cell count"))
            .collect();
        Ok(out.concat())
    }

    /// Elementwise product of two existing columns.
    pub fn interaction(&self, column_a: &str, column_b: &str) -> Result<Vec<f64>> {
        let a = self.column(column_a)?;
        let b = self.column(column_b)?;
        Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect())
    }

    /// Writes the columnar binary blob and its JSON sidecar manifest.
    pub fn write_files(&self, bin: &mut dyn Write, sidecar: &mut dyn Write) -> Result<()> {
        let mut manifest = PanelManifest {
            format_version: 1,
            n_cells: self.n_cells,
            n_days: self.n_days,
            n_periods: N_PERIODS,
            study_start_date: self.study_start_date.to_string(),
            row_layout: "((day_ordinal * 4 + period) * n_cells + cell_id)".into(),
            endianness: "little".into(),
            columns: Vec::new(),
        };
        let mut offset = 0u64;
        manifest.columns.push(ColumnMeta {
            name: CRIME.into(),
            dtype: "u32".into(),
            offset_bytes: offset,
            len: self.crime.len(),
        });
        offset += (self.crime.len() * 4) as u64;
        for (name, col) in &self.columns {
            manifest.columns.push(ColumnMeta {
                name: name.clone(),
                dtype: "f64".into(),
                offset_bytes: offset,
                len: col.len(),
            });
            offset += (col.len() * 8) as u64;
        }
        for &v in &self.crime {
            bin.write_all(&v.to_le_bytes())?;
        }
        for col in self.columns.values() {
            for &v in col {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        serde_json::to_writer_pretty(sidecar, &manifest)?;
        Ok(())
    }

    /// Reads a panel written by [`Panel::write_files`].
    pub fn read_files(bin: &mut dyn Read, sidecar: &mut dyn Read) -> Result<Panel> {
        let manifest: PanelManifest = serde_json::from_reader(sidecar)?;
        if manifest.format_version != 1 {
            return Err(Error::Consistency(format!(
                "unsupported panel format version {}",
                manifest.format_version
            )));
        }
        let start = manifest
            .study_start_date
            .parse::<NaiveDate>()
            .map_err(|e| Error::Consistency(format!("bad start date: {e}")))?;
        let mut blob = Vec::new();
        bin.read_to_end(&mut blob)?;
        let mut crime = Vec::new();
        let mut columns = IndexMap::new();
        for meta in &manifest.columns {
            let bytes = meta.len * if meta.dtype == "u32" { 4 } else { 8 };
            let lo = meta.offset_bytes as usize;
            let hi = lo + bytes;
            if hi > blob.len() {
                return Err(Error::Consistency(format!("column `{}` overruns blob", meta.name)));
            }
            match meta.dtype.as_str() {
                "u32" => {
                    crime = blob[lo..hi]
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                }
                "f64" => {
                    let col: Vec<f64> = blob[lo..hi]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    columns.insert(meta.name.clone(), col);
                }
                other => {
                    return Err(Error::Consistency(format!("unknown column dtype `{other}`")));
                }
            }
        }
        Panel::from_parts(manifest.n_cells, manifest.n_days, start, crime, columns)
    }

    /// Debug CSV export, refused above 10^6 rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.n_rows() >= 1_000_000 {
            return Err(Error::InvalidParameter(format!(
                "CSV export limited to panels under 1e6 rows, this one has {}",
                self.n_rows()
            )));
        }
        write!(out, "cell,day,period,crime")?;
        for name in self.columns.keys() {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for row in 0..self.n_rows() {
            let cell = row % self.n_cells;
            let dt = row / self.n_cells;
            write!(out, "{cell},{},{},{}", dt / N_PERIODS, dt % N_PERIODS, self.crime[row])?;
            for col in self.columns.values() {
                write!(out, ",{}", col[row])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub(crate) fn row_index(n_cells: usize, cell: usize, day: usize, period: usize) -> usize {
    (day * N_PERIODS + period) * n_cells + cell
}

/// Shifts a column back by `j` day-period slots; the first `j * n_cells`
/// rows have no predecessor and become NaN.
pub(crate) fn lag_values(col: &[f64], n_cells: usize, j: usize) -> Vec<f64> {
    let shift = j * n_cells;
    let mut out = vec![f64::NAN; col.len()];
    if shift < col.len() {
        out[shift..].copy_from_slice(&col[..col.len() - shift]);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelManifest {
    format_version: u32,
    n_cells: usize,
    n_days: usize,
    n_periods: usize,
    study_start_date: String,
    row_layout: String,
    endianness: String,
    columns: Vec<ColumnMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ColumnMeta {
    name: String,
    dtype: String,
    offset_bytes: u64,
    len: usize,
}
