//! Record parsing, period-of-day binning, and blitz-hour apportionment.
//!
//! Time is local civil time with no DST handling. Days split into four
//! six-hour periods: dawn [00:00, 06:00), morning [06:00, 12:00), afternoon
//! [12:00, 18:00), night [18:00, 24:00). Intervention hours snap to the
//! half-open 30-minute wall-clock intervals they touch; each touched interval
//! contributes half an hour to the period containing its start.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::grid::HexGrid;

pub const N_PERIODS: usize = 4;

/// Six-hour period of the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Period {
    Dawn = 0,
    Morning = 1,
    Afternoon = 2,
    Night = 3,
}

impl Period {
    pub fn from_index(i: usize) -> Period {
        match i {
            0 => Period::Dawn,
            1 => Period::Morning,
            2 => Period::Afternoon,
            3 => Period::Night,
            _ => panic!("period index {i} out of range"),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Position of a six-hour slot within the study window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeriodIndex {
    /// Days since the study start, 0-based.
    pub day_ordinal: u32,
    pub period: Period,
}

impl PeriodIndex {
    /// Flattened day-period index: day * 4 + period.
    pub fn flat(self) -> u32 {
        self.day_ordinal * N_PERIODS as u32 + self.period as u32
    }
}

/// The study window: `n_days` calendar days starting at `start_date`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start_date: NaiveDate,
    pub n_days: u32,
}

impl StudyWindow {
    pub fn new(start_date: NaiveDate, n_days: u32) -> Result<Self> {
        if n_days == 0 {
            return Err(Error::InvalidParameter("study window needs at least one day".into()));
        }
        Ok(StudyWindow { start_date, n_days })
    }

    pub fn contains(&self, t: NaiveDateTime) -> bool {
        let d = (t.date() - self.start_date).num_days();
        d >= 0 && (d as u64) < self.n_days as u64
    }

    /// Bins a timestamp into its day ordinal and six-hour period.
    pub fn period_of(&self, t: NaiveDateTime) -> Result<PeriodIndex> {
        let d = (t.date() - self.start_date).num_days();
        if d < 0 || d as u64 >= self.n_days as u64 {
            return Err(Error::OutOfWindow(t.to_string()));
        }
        Ok(PeriodIndex {
            day_ordinal: d as u32,
            period: Period::from_index(t.hour() as usize / 6),
        })
    }

    /// Weekday index of the study start, Monday = 0.
    pub fn start_dow(&self) -> u32 {
        self.start_date.weekday().num_days_from_monday()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrimeKind {
    Murder,
    Robbery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrimeEvent {
    pub kind: CrimeKind,
    pub location: GeoPoint,
    pub timestamp: NaiveDateTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlitzType {
    Fixed,
    Mobile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlitzRecord {
    pub location: GeoPoint,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub officers: u32,
    pub police_vehicles: u32,
    pub blitz_type: BlitzType,
    pub vehicles_stopped: u32,
    pub tickets: u32,
    pub seizures: u32,
    pub weapons_found: bool,
    pub drugs_found: bool,
}

impl BlitzRecord {
    pub fn validate(&self) -> Result<()> {
        if self.end <= self.start {
            return Err(Error::InvalidRecord(format!(
                "blitz end {} not after start {}",
                self.end, self.start
            )));
        }
        if (self.end - self.start).num_hours() > 24 {
            return Err(Error::InvalidRecord("blitz longer than 24 hours".into()));
        }
        Ok(())
    }
}

/// Splits a blitz into (period, hours) contributions.
///
/// The blitz is snapped to every half-open 30-minute wall-clock interval it
/// overlaps; each touched interval adds 0.5 h to the period containing its
/// start. Intervals that fall outside the study window are omitted; total
/// hours for an in-window blitz equal 0.5 x touched-interval count. Entries
/// come back in chronological order.
pub fn apportion_blitz_hours(
    window: &StudyWindow,
    b: &BlitzRecord,
) -> Result<Vec<(PeriodIndex, f64)>> {
    b.validate()?;
    let minutes_from_start = |t: NaiveDateTime| -> i64 {
        (t - window.start_date.and_hms_opt(0, 0, 0).unwrap()).num_minutes()
    };
    let start_m = minutes_from_start(b.start);
    let end_m = minutes_from_start(b.end);
    // first touched interval starts at floor(start); the last is the one
    // containing end (an end exactly on a boundary does not touch onward)
    let first = start_m.div_euclid(30) * 30;
    let last = if end_m % 30 == 0 { end_m } else { end_m.div_euclid(30) * 30 + 30 };
    let mut out: Vec<(PeriodIndex, f64)> = Vec::new();
    let mut m = first;
    while m < last {
        let day = m.div_euclid(1440);
        if day >= 0 && (day as u64) < window.n_days as u64 {
            let period = Period::from_index((m.rem_euclid(1440) / 360) as usize);
            let idx = PeriodIndex { day_ordinal: day as u32, period };
            match out.last_mut() {
                Some((prev, h)) if *prev == idx => *h += 0.5,
                _ => out.push((idx, 0.5)),
            }
        }
        m += 30;
    }
    Ok(out)
}

/// Why a record was left out of the aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    OutsideGrid,
    OutsideWindow,
    Malformed,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            DropReason::OutsideGrid => "outside_grid",
            DropReason::OutsideWindow => "outside_window",
            DropReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordSource {
    Crime,
    Blitz,
}

impl RecordSource {
    pub fn code(self) -> &'static str {
        match self {
            RecordSource::Crime => "crime",
            RecordSource::Blitz => "blitz",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEntry {
    pub source: RecordSource,
    /// 0-based index of the record in its input batch (or CSV data row for
    /// malformed rows recorded by the loaders).
    pub record_index: u32,
    pub reason: DropReason,
}

/// Ledger of dropped records, in input order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DropLedger {
    pub entries: Vec<DropEntry>,
}

impl DropLedger {
    pub fn push(&mut self, source: RecordSource, record_index: u32, reason: DropReason) {
        self.entries.push(DropEntry { source, record_index, reason });
    }

    pub fn count(&self, source: RecordSource) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "source,record_index,reason")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.source.code(), e.record_index, e.reason.code())?;
        }
        Ok(())
    }
}

/// Per cell-period sums feeding the panel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellPeriodAggregate {
    /// Murders + robberies.
    pub violent_count: u32,
    /// Apportioned blitz hours, capped at 6 after summing across blitzes.
    pub blitz_hours: f64,
    /// Officers summed over blitzes touching the period.
    pub officers: f64,
    /// Vehicle seizures summed over blitzes touching the period.
    pub seizures: f64,
    /// 1.0 if any touching blitz was mobile.
    pub motorcycles: f64,
}

/// Aggregation output keyed by (cell, day, period).
#[derive(Debug, Clone, Default)]
pub struct Aggregates {
    pub map: BTreeMap<(u32, u32, Period), CellPeriodAggregate>,
    pub ledger: DropLedger,
    /// Crimes that made it into `map`.
    pub crimes_kept: u64,
    pub blitzes_kept: u64,
}

pub const BLITZ_HOURS_CAP: f64 = 6.0;

/// Locates and bins crimes and blitzes into cell-period aggregates.
///
/// Records that cannot be placed go to the drop ledger instead of failing the
/// whole batch: the window is checked first for crimes, then the grid; a
/// blitz is dropped as out-of-window only when none of its touched intervals
/// lies inside the window.
pub fn aggregate(
    grid: &HexGrid,
    window: &StudyWindow,
    crimes: &[CrimeEvent],
    blitzes: &[BlitzRecord],
) -> Aggregates {
    let mut agg = Aggregates::default();
    for (i, c) in crimes.iter().enumerate() {
        let idx = match window.period_of(c.timestamp) {
            Ok(idx) => idx,
            Err(_) => {
                agg.ledger.push(RecordSource::Crime, i as u32, DropReason::OutsideWindow);
                continue;
            }
        };
        let cell = match grid.locate(c.location) {
            Some(cell) => cell,
            None => {
                agg.ledger.push(RecordSource::Crime, i as u32, DropReason::OutsideGrid);
                continue;
            }
        };
        agg.map
            .entry((cell, idx.day_ordinal, idx.period))
            .or_default()
            .violent_count += 1;
        agg.crimes_kept += 1;
    }
    for (i, b) in blitzes.iter().enumerate() {
        let cell = match grid.locate(b.location) {
            Some(cell) => cell,
            None => {
                agg.ledger.push(RecordSource::Blitz, i as u32, DropReason::OutsideGrid);
                continue;
            }
        };
        let parts = match apportion_blitz_hours(window, b) {
            Ok(parts) => parts,
            Err(_) => {
                agg.ledger.push(RecordSource::Blitz, i as u32, DropReason::Malformed);
                continue;
            }
        };
        if parts.is_empty() {
            agg.ledger.push(RecordSource::Blitz, i as u32, DropReason::OutsideWindow);
            continue;
        }
        for (idx, hours) in parts {
            let slot = agg.map.entry((cell, idx.day_ordinal, idx.period)).or_default();
            slot.blitz_hours += hours;
            slot.officers += b.officers as f64;
            slot.seizures += b.seizures as f64;
            if b.blitz_type == BlitzType::Mobile {
                slot.motorcycles = 1.0;
            }
        }
        agg.blitzes_kept += 1;
    }
    for slot in agg.map.values_mut() {
        slot.blitz_hours = slot.blitz_hours.min(BLITZ_HOURS_CAP);
    }
    agg
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M:%S"))
        .ok()
}

/// Loaded batch of records plus the CSV rows the loader had to skip.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// Original 0-based data-row index of each record.
    pub source_rows: Vec<u32>,
    pub malformed: Vec<u32>,
}

/// Reads the `kind,lat,lon,timestamp` crime schema.
pub fn read_crimes_csv<R: std::io::Read>(reader: R) -> Result<Loaded<CrimeEvent>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Loaded { records: Vec::new(), source_rows: Vec::new(), malformed: Vec::new() };
    for (row, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                out.malformed.push(row as u32);
                continue;
            }
        };
        let parsed = (|| -> Option<CrimeEvent> {
            let kind = match rec.get(0)?.trim() {
                "murder" => CrimeKind::Murder,
                "robbery" => CrimeKind::Robbery,
                _ => return None,
            };
            let lat: f64 = rec.get(1)?.trim().parse().ok()?;
            let lon: f64 = rec.get(2)?.trim().parse().ok()?;
            let timestamp = parse_datetime(rec.get(3)?)?;
            let location = GeoPoint::new(lat, lon).ok()?;
            Some(CrimeEvent { kind, location, timestamp })
        })();
        match parsed {
            Some(ev) => {
                out.records.push(ev);
                out.source_rows.push(row as u32);
            }
            None => out.malformed.push(row as u32),
        }
    }
    Ok(out)
}

/// Reads the `lat,lon,start,end,officers,vehicles,type,stopped,tickets,seizures,weapons,drugs`
/// blitz schema (type in {fixed, mobile}, booleans as 0/1).
pub fn read_blitzes_csv<R: std::io::Read>(reader: R) -> Result<Loaded<BlitzRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Loaded { records: Vec::new(), source_rows: Vec::new(), malformed: Vec::new() };
    for (row, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                out.malformed.push(row as u32);
                continue;
            }
        };
        let parsed = (|| -> Option<BlitzRecord> {
            let lat: f64 = rec.get(0)?.trim().parse().ok()?;
            let lon: f64 = rec.get(1)?.trim().parse().ok()?;
            let start = parse_datetime(rec.get(2)?)?;
            let end = parse_datetime(rec.get(3)?)?;
            let officers: u32 = rec.get(4)?.trim().parse().ok()?;
            let police_vehicles: u32 = rec.get(5)?.trim().parse().ok()?;
            let blitz_type = match rec.get(6)?.trim() {
                "fixed" => BlitzType::Fixed,
                "mobile" => BlitzType::Mobile,
                _ => return None,
            };
            let vehicles_stopped: u32 = rec.get(7)?.trim().parse().ok()?;
            let tickets: u32 = rec.get(8)?.trim().parse().ok()?;
            let seizures: u32 = rec.get(9)?.trim().parse().ok()?;
            let weapons_found = match rec.get(10)?.trim() {
                "0" => false,
                "1" => true,
                _ => return None,
            };
            let drugs_found = match rec.get(11)?.trim() {
                "0" => false,
                "1" => true,
                _ => return None,
            };
            let location = GeoPoint::new(lat, lon).ok()?;
            let b = BlitzRecord {
                location,
                start,
                end,
                officers,
                police_vehicles,
                blitz_type,
                vehicles_stopped,
                tickets,
                seizures,
                weapons_found,
                drugs_found,
            };
            b.validate().ok()?;
            Some(b)
        })();
        match parsed {
            Some(b) => {
                out.records.push(b);
                out.source_rows.push(row as u32);
            }
            None => out.malformed.push(row as u32),
        }
    }
    Ok(out)
}
