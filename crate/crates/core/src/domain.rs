//! Shared vocabulary: stop events, trip and stop rows, load bins and time windows.

use std::fmt;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: u32 = 1440;

/// Ordinal occupancy level. The discriminant is the ordinal value used by
/// every error metric, so the order here must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoadLevel {
    Low = 0,
    Medium = 1,
    MediumHigh = 2,
    High = 3,
    VeryHigh = 4,
}

impl LoadLevel {
    pub const ALL: [LoadLevel; 5] = [
        LoadLevel::Low,
        LoadLevel::Medium,
        LoadLevel::MediumHigh,
        LoadLevel::High,
        LoadLevel::VeryHigh,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LoadLevel::Low => "Low",
            LoadLevel::Medium => "Medium",
            LoadLevel::MediumHigh => "Medium-High",
            LoadLevel::High => "High",
            LoadLevel::VeryHigh => "Very-High",
        }
    }
}

impl fmt::Display for LoadLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinScheme {
    /// Agency breakdown used for trip maximum loads.
    Trip,
    /// Breakdown used for loads summed per stop and time window.
    Stop,
}

impl BinScheme {
    /// Inclusive upper bounds of the first four levels.
    fn upper_bounds(self) -> [u32; 4] {
        match self {
            BinScheme::Trip => [6, 12, 54, 75],
            BinScheme::Stop => [5, 11, 16, 29],
        }
    }

    pub fn bin(self, load: u32) -> LoadBin {
        let level = self
            .upper_bounds()
            .iter()
            .position(|&upper| load <= upper)
            .and_then(LoadLevel::from_index)
            .unwrap_or(LoadLevel::VeryHigh);
        LoadBin {
            level,
            scheme: self,
        }
    }

    /// Representative load for a level, used when a predicted bin has to stand
    /// in for an observed load.
    pub fn midpoint(self, level: LoadLevel) -> f64 {
        match (self, level) {
            (BinScheme::Stop, LoadLevel::Low) => 3.0,
            (BinScheme::Stop, LoadLevel::Medium) => 8.5,
            (BinScheme::Stop, LoadLevel::MediumHigh) => 14.0,
            (BinScheme::Stop, LoadLevel::High) => 23.0,
            (BinScheme::Stop, LoadLevel::VeryHigh) => 35.0,
            (BinScheme::Trip, LoadLevel::Low) => 3.0,
            (BinScheme::Trip, LoadLevel::Medium) => 9.5,
            (BinScheme::Trip, LoadLevel::MediumHigh) => 33.5,
            (BinScheme::Trip, LoadLevel::High) => 65.0,
            (BinScheme::Trip, LoadLevel::VeryHigh) => 85.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoadBin {
    pub level: LoadLevel,
    pub scheme: BinScheme,
}

fn checked_load(load: i64) -> Result<u32> {
    if load < 0 {
        return Err(Error::Domain(format!(
            "cannot bin negative load {load}; clean the data first"
        )));
    }
    u32::try_from(load).map_err(|_| Error::Domain(format!("load {load} out of range")))
}

pub fn bin_trip_load(load: i64) -> Result<LoadBin> {
    Ok(BinScheme::Trip.bin(checked_load(load)?))
}

pub fn bin_stop_load(load: i64) -> Result<LoadBin> {
    Ok(BinScheme::Stop.bin(checked_load(load)?))
}

/// Number of windows a day is split into for `width_minutes`.
pub fn windows_per_day(width_minutes: u32) -> u32 {
    MINUTES_PER_DAY.div_ceil(width_minutes.max(1))
}

/// Index of the fixed-width time-of-day window containing `timestamp`.
pub fn time_window_of(timestamp: NaiveDateTime, width_minutes: i64) -> Result<u32> {
    if width_minutes <= 0 {
        return Err(Error::Config(format!(
            "time window width must be positive, got {width_minutes}"
        )));
    }
    let minutes = timestamp.hour() as i64 * 60 + timestamp.minute() as i64;
    Ok((minutes / width_minutes) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LowHigh {
    Low,
    High,
}

pub const LOW_HIGH_THRESHOLD: u32 = 12;

pub fn low_high_of_load(load: u32) -> LowHigh {
    if load < LOW_HIGH_THRESHOLD {
        LowHigh::Low
    } else {
        LowHigh::High
    }
}

/// Low/high split at bin granularity. Under both schemes the first two
/// levels sit (almost) entirely below 12 passengers.
pub fn low_high_of_level(level: LoadLevel) -> LowHigh {
    if level <= LoadLevel::Medium {
        LowHigh::Low
    } else {
        LowHigh::High
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Validity {
    #[default]
    Raw,
    Clean,
}

/// One stop event as logged by the counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApcRecord {
    pub transit_date: NaiveDate,
    pub trip_id: String,
    pub block_id: String,
    pub route_id: String,
    pub direction: String,
    pub vehicle_id: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub scheduled_arrival: NaiveDateTime,
    pub actual_arrival: Option<NaiveDateTime>,
    pub ons: Option<i32>,
    pub offs: Option<i32>,
    pub load: Option<i32>,
    pub scheduled_headway: u32,
    pub zero_load_at_trip_end: bool,
    #[serde(skip)]
    pub validity: Validity,
}

impl ApcRecord {
    /// Best known arrival time: actual if present, otherwise scheduled.
    pub fn arrival(&self) -> NaiveDateTime {
        self.actual_arrival.unwrap_or(self.scheduled_arrival)
    }
}

/// Key identifying one trip inside a time window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripKey {
    pub transit_date: NaiveDate,
    pub trip_id: String,
    pub route_id: String,
    pub direction: String,
    pub time_window: u32,
}

/// Ordinal calendar parts shared by trip and stop rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarParts {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    /// Monday = 0.
    pub day_of_week: u32,
    pub hour: u32,
}

impl CalendarParts {
    pub fn of(date: NaiveDate, time: NaiveDateTime) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
            day: date.day(),
            day_of_week: date.weekday().num_days_from_monday(),
            hour: time.hour(),
        }
    }
}

/// Fused, per-trip row used by the trip-level models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripAggregate {
    pub key: TripKey,
    pub block_id: String,
    pub n_stops: u32,
    pub scheduled_start: NaiveDateTime,
    /// Latest arrival (actual or scheduled) over the trip's stops.
    pub end_time: NaiveDateTime,
    pub mean_temperature: Option<f64>,
    pub mean_humidity: Option<f64>,
    pub mean_precipitation: Option<f64>,
    pub mean_scheduled_headway: f64,
    pub mean_actual_headway: Option<f64>,
    pub mean_traffic_speed: Option<f64>,
    pub max_load: u32,
    pub target_bin: LoadLevel,
    pub is_holiday: bool,
    pub is_school_break: bool,
    pub zero_load_at_trip_end: bool,
    pub calendar: CalendarParts,
}

/// Loads of one (date, route, direction, stop, window) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopObservation {
    pub transit_date: NaiveDate,
    pub route_id: String,
    pub direction: String,
    pub stop_id: String,
    pub stop_sequence: u32,
    pub time_window: u32,
    /// Block, trip and arrival of the first record in the group; used for ordering.
    pub block_id: String,
    pub trip_id: String,
    pub trip_start: NaiveDateTime,
    pub arrival: NaiveDateTime,
    pub n_records: u32,
    pub summed_load: u32,
    pub target_bin: LoadLevel,
    pub temperature: Option<f64>,
    pub humidity: Option<f64>,
    pub precipitation: Option<f64>,
    pub traffic_speed: Option<f64>,
    pub scheduled_headway: f64,
    pub actual_headway: Option<f64>,
    pub is_holiday: bool,
    pub is_school_break: bool,
    pub zero_load_at_trip_end: bool,
    pub calendar: CalendarParts,
}

/// One scored prediction: `y_error = y_true - y_pred` on ordinal levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub y_true: LoadLevel,
    pub y_pred: LoadLevel,
    pub y_error: i8,
}

impl EvalRecord {
    pub fn new(y_true: LoadLevel, y_pred: LoadLevel) -> Self {
        Self {
            y_true,
            y_pred,
            y_error: y_true as i8 - y_pred as i8,
        }
    }
}
