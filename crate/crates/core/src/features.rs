//! Model inputs: raw feature extraction, day-ahead history features, the
//! fitted encoding schema, stop sequences and train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{StopObservation, TripAggregate};
use crate::error::{Error, Result};

pub const PERCENT_CHANGE_EPSILON: f64 = 1e-6;
pub const PERCENT_CHANGE_CAP: f64 = 100.0;
pub const DEFAULT_PAST_TRIPS: usize = 5;

/// `(prev1 - prev2) / max(|prev2|, eps)`, capped to ±100. Null if either input is.
pub fn percent_change(prev2: Option<f64>, prev1: Option<f64>) -> Option<f64> {
    let (a, b) = (prev2?, prev1?);
    let pc = (b - a) / a.abs().max(PERCENT_CHANGE_EPSILON);
    Some(pc.clamp(-PERCENT_CHANGE_CAP, PERCENT_CHANGE_CAP))
}

/// History features of a trip, built from earlier trips on the same route
/// and direction that finished before it started and began within the
/// preceding 24 hours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DayAheadFeatures {
    pub pc_load: Option<f64>,
    pub pc_headway: Option<f64>,
    pub avg_load_p: Option<f64>,
    pub avg_headway_p: Option<f64>,
    /// Number of past trips actually averaged.
    pub p: usize,
}

fn is_eligible_history(past: &TripAggregate, target: &TripAggregate) -> bool {
    past.key.route_id == target.key.route_id
        && past.key.direction == target.key.direction
        && past.end_time < target.scheduled_start
        && past.scheduled_start >= target.scheduled_start - Duration::hours(24)
}

/// `recent` holds the eligible past trips, oldest first.
fn day_ahead_from(recent: &[&TripAggregate]) -> DayAheadFeatures {
    let n = recent.len();
    let (pc_load, pc_headway) = if n >= 2 {
        let (t2, t1) = (recent[n - 2], recent[n - 1]);
        (
            percent_change(Some(t2.max_load as f64), Some(t1.max_load as f64)),
            percent_change(t2.mean_actual_headway, t1.mean_actual_headway),
        )
    } else {
        (None, None)
    };
    let loads: Vec<f64> = recent.iter().map(|t| t.max_load as f64).collect();
    let headways: Vec<f64> = recent.iter().filter_map(|t| t.mean_actual_headway).collect();
    DayAheadFeatures {
        pc_load,
        pc_headway,
        avg_load_p: mean(&loads),
        avg_headway_p: mean(&headways),
        p: n,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn history_order(a: &TripAggregate, b: &TripAggregate) -> std::cmp::Ordering {
    (a.scheduled_start, &a.key.trip_id).cmp(&(b.scheduled_start, &b.key.trip_id))
}

/// Day-ahead features for one target, scanning `history` in any order.
pub fn build_day_ahead_features(history: &[TripAggregate], target: &TripAggregate, p: usize) -> DayAheadFeatures {
    let mut eligible: Vec<&TripAggregate> = history.iter().filter(|t| is_eligible_history(t, target)).collect();
    eligible.sort_by(|a, b| history_order(a, b));
    let start = eligible.len().saturating_sub(p);
    day_ahead_from(&eligible[start..])
}

/// Day-ahead features for every trip, aligned with the input order.
pub fn day_ahead_for_all(trips: &[TripAggregate], p: usize) -> Vec<DayAheadFeatures> {
    let mut lines: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, t) in trips.iter().enumerate() {
        lines.entry((&t.key.route_id, &t.key.direction)).or_default().push(i);
    }
    let mut out = vec![DayAheadFeatures::default(); trips.len()];
    let per_line: Vec<Vec<(usize, DayAheadFeatures)>> = lines
        .into_par_iter()
        .map(|(_, mut idx)| {
            idx.sort_by(|&a, &b| history_order(&trips[a], &trips[b]));
            idx.iter()
                .enumerate()
                .map(|(k, &target)| {
                    let t = &trips[target];
                    let horizon = t.scheduled_start - Duration::hours(24);
                    let mut recent: Vec<&TripAggregate> = Vec::with_capacity(p);
                    for &j in idx[..k].iter().rev() {
                        let past = &trips[j];
                        if past.scheduled_start < horizon || recent.len() == p {
                            break;
                        }
                        if past.end_time < t.scheduled_start {
                            recent.push(past);
                        }
                    }
                    recent.reverse();
                    (target, day_ahead_from(&recent))
                })
                .collect()
        })
        .collect();
    for (i, f) in per_line.into_iter().flatten() {
        out[i] = f;
    }
    out
}

/// Whether the calendar "day" ordinal is the day of month, the weekday, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DayOrdinal {
    DayOfMonth,
    DayOfWeek,
    #[default]
    Both,
}

/// Names of the raw features in extraction order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub numerical: Vec<String>,
    pub one_hot: Vec<String>,
    pub ordinal: Vec<String>,
}

/// One row before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub numerical: Vec<Option<f64>>,
    pub one_hot: Vec<String>,
    pub ordinal: Vec<f64>,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

const CONTEXT_NUMERICAL: [&str; 6] = [
    "temperature",
    "humidity",
    "precipitation",
    "traffic_speed",
    "scheduled_headway",
    "actual_headway",
];
const DAY_AHEAD_NUMERICAL: [&str; 4] = ["pc_load", "pc_headway", "avg_load_p", "avg_headway_p"];
const ONE_HOT: [&str; 5] = [
    "is_holiday",
    "is_school_break",
    "zero_load_at_trip_end",
    "route_direction",
    "time_window",
];
pub const STOP_LOAD: &str = "load";
pub const STOP_LOAD_CHANGE: &str = "load_change";

fn ordinal_names(day: DayOrdinal) -> Vec<String> {
    let mut v = vec!["year", "month"];
    if day != DayOrdinal::DayOfWeek {
        v.push("day");
    }
    if day != DayOrdinal::DayOfMonth {
        v.push("day_of_week");
    }
    v.push("hour");
    names(&v)
}

fn ordinal_values(c: &crate::domain::CalendarParts, day: DayOrdinal) -> Vec<f64> {
    let mut v = vec![c.year as f64, c.month as f64];
    if day != DayOrdinal::DayOfWeek {
        v.push(c.day as f64);
    }
    if day != DayOrdinal::DayOfMonth {
        v.push(c.day_of_week as f64);
    }
    v.push(c.hour as f64);
    v
}

pub fn route_direction(route_id: &str, direction: &str) -> String {
    format!("{route_id}|{direction}")
}

pub fn trip_layout(day_ahead: bool, day: DayOrdinal) -> FeatureLayout {
    let mut numerical = names(&CONTEXT_NUMERICAL);
    if day_ahead {
        numerical.extend(names(&DAY_AHEAD_NUMERICAL));
    }
    FeatureLayout {
        numerical,
        one_hot: names(&ONE_HOT),
        ordinal: ordinal_names(day),
    }
}

pub fn trip_raw(trip: &TripAggregate, day_ahead: Option<&DayAheadFeatures>, day: DayOrdinal) -> RawFeatures {
    let mut numerical = vec![
        trip.mean_temperature,
        trip.mean_humidity,
        trip.mean_precipitation,
        trip.mean_traffic_speed,
        Some(trip.mean_scheduled_headway),
        trip.mean_actual_headway,
    ];
    if let Some(d) = day_ahead {
        numerical.extend([d.pc_load, d.pc_headway, d.avg_load_p, d.avg_headway_p]);
    }
    RawFeatures {
        numerical,
        one_hot: vec![
            trip.is_holiday.to_string(),
            trip.is_school_break.to_string(),
            trip.zero_load_at_trip_end.to_string(),
            route_direction(&trip.key.route_id, &trip.key.direction),
            trip.key.time_window.to_string(),
        ],
        ordinal: ordinal_values(&trip.calendar, day),
    }
}

pub fn stop_layout(day: DayOrdinal) -> FeatureLayout {
    let mut numerical = names(&CONTEXT_NUMERICAL);
    numerical.extend(names(&[STOP_LOAD, STOP_LOAD_CHANGE]));
    FeatureLayout {
        numerical,
        one_hot: names(&ONE_HOT),
        ordinal: ordinal_names(day),
    }
}

/// Stop row features. `load` is the observed summed load, or a stand-in for
/// it when a predicted stop is fed back; `prev_load` is the preceding stop's.
pub fn stop_raw(obs: &StopObservation, load: f64, prev_load: Option<f64>, day: DayOrdinal) -> RawFeatures {
    RawFeatures {
        numerical: vec![
            obs.temperature,
            obs.humidity,
            obs.precipitation,
            obs.traffic_speed,
            Some(obs.scheduled_headway),
            obs.actual_headway,
            Some(load),
            percent_change(prev_load, Some(load)),
        ],
        one_hot: vec![
            obs.is_holiday.to_string(),
            obs.is_school_break.to_string(),
            obs.zero_load_at_trip_end.to_string(),
            route_direction(&obs.route_id, &obs.direction),
            obs.time_window.to_string(),
        ],
        ordinal: ordinal_values(&obs.calendar, day),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalColumn {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotBlock {
    pub name: String,
    pub categories: Vec<String>,
}

/// Encoding parameters fitted on training rows. Column order: numerical
/// features, then one indicator block per categorical feature, then ordinals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub numerical: Vec<NumericalColumn>,
    pub one_hot: Vec<OneHotBlock>,
    pub ordinal: Vec<String>,
}

impl FeatureSchema {
    pub fn fit(layout: &FeatureLayout, rows: &[RawFeatures]) -> Result<Self> {
        check_widths(layout, rows)?;
        let numerical = layout
            .numerical
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let present: Vec<f64> = rows.iter().filter_map(|r| r.numerical[j]).collect();
                if let Some(bad) = present.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        column: name.clone(),
                        row: bad,
                    });
                }
                let m = mean(&present).unwrap_or(0.0);
                let var = mean(&present.iter().map(|v| (v - m) * (v - m)).collect::<Vec<_>>()).unwrap_or(0.0);
                Ok(NumericalColumn {
                    name: name.clone(),
                    mean: m,
                    sd: var.sqrt(),
                })
            })
            .collect::<Result<_>>()?;
        let one_hot = layout
            .one_hot
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let cats: BTreeSet<&str> = rows.iter().map(|r| r.one_hot[j].as_str()).collect();
                OneHotBlock {
                    name: name.clone(),
                    categories: cats.into_iter().map(str::to_string).collect(),
                }
            })
            .collect();
        Ok(Self {
            numerical,
            one_hot,
            ordinal: layout.ordinal.clone(),
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            numerical: self.numerical.iter().map(|c| c.name.clone()).collect(),
            one_hot: self.one_hot.iter().map(|b| b.name.clone()).collect(),
            ordinal: self.ordinal.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.numerical.len() + self.one_hot.iter().map(|b| b.categories.len()).sum::<usize>() + self.ordinal.len()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.numerical.iter().map(|c| c.name.clone()).collect();
        for b in &self.one_hot {
            out.extend(b.categories.iter().map(|c| format!("{}={}", b.name, c)));
        }
        out.extend(self.ordinal.iter().cloned());
        out
    }

    /// Encoded column range of every raw feature, in column order.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0;
        for c in &self.numerical {
            out.push((c.name.clone(), at..at + 1));
            at += 1;
        }
        for b in &self.one_hot {
            out.push((b.name.clone(), at..at + b.categories.len()));
            at += b.categories.len();
        }
        for o in &self.ordinal {
            out.push((o.clone(), at..at + 1));
            at += 1;
        }
        out
    }

    pub fn column_of(&self, numerical_name: &str) -> Option<usize> {
        self.numerical.iter().position(|c| c.name == numerical_name)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        format!("{:x}", Sha256::digest(json))
    }

    pub fn zero_sd_columns(&self) -> Vec<String> {
        self.numerical.iter().filter(|c| c.sd == 0.0).map(|c| c.name.clone()).collect()
    }

    fn encode_into(&self, row: &RawFeatures, out: &mut [f32], unknown: &mut [usize]) {
        let mut at = 0;
        for (c, v) in self.numerical.iter().zip(&row.numerical) {
            out[at] = match v {
                Some(x) if c.sd > 0.0 => ((x - c.mean) / c.sd) as f32,
                _ => 0.0,
            };
            at += 1;
        }
        for (k, (b, v)) in self.one_hot.iter().zip(&row.one_hot).enumerate() {
            let width = b.categories.len();
            out[at..at + width].fill(0.0);
            match b.categories.binary_search_by(|c| c.as_str().cmp(v)) {
                Ok(i) => out[at + i] = 1.0,
                Err(_) => unknown[k] += 1,
            }
            at += width;
        }
        for v in &row.ordinal {
            out[at] = *v as f32;
            at += 1;
        }
    }

    pub fn encode_row(&self, row: &RawFeatures) -> Vec<f32> {
        let mut out = vec![0.0; self.width()];
        let mut unknown = vec![0; self.one_hot.len()];
        self.encode_into(row, &mut out, &mut unknown);
        out
    }
}

fn check_widths(layout: &FeatureLayout, rows: &[RawFeatures]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.numerical.len() != layout.numerical.len()
            || r.one_hot.len() != layout.one_hot.len()
            || r.ordinal.len() != layout.ordinal.len()
        {
            return Err(Error::Shape(format!("row {i} does not match the feature layout")));
        }
    }
    Ok(())
}

/// Problems seen while encoding: unseen categories per block and constant
/// numerical columns that were emitted as zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodeDiagnostics {
    pub unknown_categories: BTreeMap<String, usize>,
    pub zero_sd_columns: Vec<String>,
}

/// Dense row-major matrix of encoded features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// First non-finite cell as (row, column).
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data.iter().position(|v| !v.is_finite()).map(|k| (k / self.cols, k % self.cols))
    }

    /// Writes little-endian f32 values row-major to `path` and a JSON sidecar
    /// with the shape and column names to `path` + ".json".
    pub fn write_binary(&self, path: &Path, columns: &[String], provenance: Option<&serde_json::Value>) -> Result<()> {
        if columns.len() != self.cols {
            return Err(Error::Shape(format!("{} names for {} columns", columns.len(), self.cols)));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = MatrixSidecar {
            rows: self.rows,
            cols: self.cols,
            dtype: "f32-le".into(),
            layout: "row-major".into(),
            columns: columns.to_vec(),
            provenance: provenance.cloned(),
        };
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn read_binary(path: &Path) -> Result<(Matrix, Vec<String>)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: MatrixSidecar = serde_json::from_str(&text)?;
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if bytes.len() % 4 != 0 {
            return Err(Error::Shape(format!("{} is not a whole number of f32 values", path.display())));
        }
        Ok((Matrix::new(sidecar.rows, sidecar.cols, data)?, sidecar.columns))
    }

    pub fn write_csv(&self, path: &Path, columns: &[String], header_comment: Option<&str>) -> Result<()> {
        let mut w = crate::ingest::create_writer(path, header_comment)?;
        w.write_record(columns).map_err(|e| Error::csv(path, e))?;
        for i in 0..self.rows {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    rows: usize,
    cols: usize,
    dtype: String,
    layout: String,
    columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Encodes rows with a fitted schema. Unseen categories give an all-zero
/// block and are counted; nulls become the training mean (zero after scaling).
pub fn encode(rows: &[RawFeatures], schema: &FeatureSchema) -> Result<(Matrix, EncodeDiagnostics)> {
    check_widths(&schema.layout(), rows)?;
    for (i, r) in rows.iter().enumerate() {
        if let Some(j) = r.numerical.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                column: schema.numerical[j].name.clone(),
                row: i,
            });
        }
    }
    let width = schema.width();
    let mut data = vec![0.0f32; rows.len() * width];
    let unknown = data
        .par_chunks_mut(width.max(1))
        .zip(rows.par_iter())
        .map(|(out, row)| {
            let mut unknown = vec![0usize; schema.one_hot.len()];
            schema.encode_into(row, out, &mut unknown);
            unknown
        })
        .reduce(
            || vec![0usize; schema.one_hot.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        );
    let diagnostics = EncodeDiagnostics {
        unknown_categories: schema
            .one_hot
            .iter()
            .zip(unknown)
            .filter(|(_, n)| *n > 0)
            .map(|(b, n)| (b.name.clone(), n))
            .collect(),
        zero_sd_columns: schema.zero_sd_columns(),
    };
    Ok((Matrix::new(rows.len(), width, data)?, diagnostics))
}

/// Stop rows of one (date, block, route, direction), in travel order.
#[derive(Debug, Clone, PartialEq)]
pub struct StopSequence {
    pub transit_date: NaiveDate,
    pub block_id: String,
    pub route_id: String,
    pub direction: String,
    pub rows: Vec<usize>,
}

impl StopSequence {
    /// Maximal runs of one trip inside the sequence.
    pub fn trips<'a>(&'a self, stops: &'a [StopObservation]) -> impl Iterator<Item = &'a [usize]> + 'a {
        self.rows.chunk_by(move |&a, &b| stops[a].trip_id == stops[b].trip_id)
    }
}

/// Orders stop rows by (date, block, route, direction, trip start, trip,
/// stop sequence) and cuts them into sequences. Rows without a block or trip
/// id are dropped with a diagnostic.
pub fn sort_sequences(stops: &[StopObservation]) -> (Vec<StopSequence>, Vec<String>) {
    let mut diagnostics = Vec::new();
    let mut idx: Vec<usize> = Vec::with_capacity(stops.len());
    for (i, s) in stops.iter().enumerate() {
        if s.block_id.is_empty() || s.trip_id.is_empty() {
            diagnostics.push(format!("row {i}: missing block or trip id, excluded from sequences"));
        } else {
            idx.push(i);
        }
    }
    let key = |s: &StopObservation| {
        (
            s.transit_date,
            s.block_id.clone(),
            s.route_id.clone(),
            s.direction.clone(),
            s.trip_start,
            s.trip_id.clone(),
            s.stop_sequence,
        )
    };
    idx.par_sort_by_cached_key(|&i| (key(&stops[i]), i));
    let sequences = idx
        .chunk_by(|&a, &b| {
            let (x, y) = (&stops[a], &stops[b]);
            x.transit_date == y.transit_date && x.block_id == y.block_id && x.route_id == y.route_id && x.direction == y.direction
        })
        .map(|g| {
            let s = &stops[g[0]];
            StopSequence {
                transit_date: s.transit_date,
                block_id: s.block_id.clone(),
                route_id: s.route_id.clone(),
                direction: s.direction.clone(),
                rows: g.to_vec(),
            }
        })
        .collect();
    (sequences, diagnostics)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded uniform split of `n` rows; the training side gets `round(ratio * n)`
/// rows. Both index lists are ascending.
pub fn split_trip_data(n: usize, ratio: f64, seed: u64) -> Result<TripSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} must lie in (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(TripSplit { train, test })
}

/// Last dates of the training and validation periods. Each period is
/// half-open on the left, so a boundary date belongs to the earlier split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopBoundaries {
    pub train_end: NaiveDate,
    pub validation_end: NaiveDate,
}

impl StopBoundaries {
    /// 60/15/25 percent of the whole days in `[first, last]`.
    pub fn from_fractions(first: NaiveDate, last: NaiveDate) -> Self {
        let days = (last - first).num_days() + 1;
        let at = |f: f64| first + Duration::days(((f * days as f64).round() as i64 - 1).max(0));
        Self {
            train_end: at(0.60),
            validation_end: at(0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub boundaries: StopBoundaries,
}

/// Chronological split of rows by date.
pub fn split_stop_data(dates: &[NaiveDate], boundaries: Option<StopBoundaries>) -> Result<StopSplit> {
    let (Some(&first), Some(&last)) = (dates.iter().min(), dates.iter().max()) else {
        return Err(Error::Config("cannot split an empty stop dataset".into()));
    };
    let b = boundaries.unwrap_or_else(|| StopBoundaries::from_fractions(first, last));
    if b.validation_end < b.train_end {
        return Err(Error::Config(format!(
            "validation end {} precedes training end {}",
            b.validation_end, b.train_end
        )));
    }
    let mut split = StopSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        boundaries: b,
    };
    for (i, &d) in dates.iter().enumerate() {
        if d <= b.train_end {
            split.train.push(i);
        } else if d <= b.validation_end {
            split.validation.push(i);
        } else {
            split.test.push(i);
        }
    }
    if split.validation.is_empty() {
        return Err(Error::Config(format!(
            "validation window ({}, {}] contains no rows",
            b.train_end, b.validation_end
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CalendarParts, LoadLevel, TripKey};
    use chrono::NaiveDateTime;
    use proptest::prelude::*;

    fn at(day: u32, h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2021, 3, day).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    fn trip(id: &str, route: &str, start: NaiveDateTime, minutes: i64, load: u32, headway: Option<f64>) -> TripAggregate {
        TripAggregate {
            key: TripKey {
                transit_date: start.date(),
                trip_id: id.into(),
                route_id: route.into(),
                direction: "NORTH".into(),
                time_window: 0,
            },
            block_id: "B1".into(),
            n_stops: 10,
            scheduled_start: start,
            end_time: start + Duration::minutes(minutes),
            mean_temperature: Some(20.0),
            mean_humidity: None,
            mean_precipitation: Some(0.0),
            mean_scheduled_headway: 900.0,
            mean_actual_headway: headway,
            mean_traffic_speed: Some(30.0),
            max_load: load,
            target_bin: LoadLevel::Low,
            is_holiday: false,
            is_school_break: false,
            zero_load_at_trip_end: true,
            calendar: CalendarParts::of(start.date(), start),
        }
    }

    #[test]
    fn percent_change_examples() {
        assert_eq!(percent_change(Some(10.0), Some(15.0)), Some(0.5));
        assert_eq!(percent_change(Some(7.0), Some(7.0)), Some(0.0));
        // 5 / 1e-6 = 5e6, capped.
        assert_eq!(percent_change(Some(0.0), Some(5.0)), Some(100.0));
        assert_eq!(percent_change(Some(0.0), Some(-5.0)), Some(-100.0));
        assert_eq!(percent_change(None, Some(5.0)), None);
        assert_eq!(percent_change(Some(5.0), None), None);
    }

    #[test]
    fn day_ahead_two_prior_trips() {
        let hist = vec![
            trip("a", "55", at(2, 7, 0), 30, 8, Some(600.0)),
            trip("b", "55", at(2, 8, 0), 30, 12, Some(900.0)),
        ];
        let target = trip("c", "55", at(2, 9, 0), 30, 0, None);
        let f = build_day_ahead_features(&hist, &target, 2);
        assert_eq!(f.pc_load, Some(0.5));
        assert_eq!(f.avg_load_p, Some(10.0));
        assert_eq!(f.pc_headway, Some(0.5));
        assert_eq!(f.avg_headway_p, Some(750.0));
        assert_eq!(f.p, 2);
    }

    #[test]
    fn day_ahead_without_history_is_null() {
        let target = trip("c", "55", at(2, 5, 0), 30, 0, None);
        let f = build_day_ahead_features(&[], &target, 5);
        assert_eq!(f, DayAheadFeatures::default());
    }

    #[test]
    fn day_ahead_uses_available_trips_when_fewer_than_p() {
        let hist: Vec<TripAggregate> = [3, 6, 9]
            .iter()
            .enumerate()
            .map(|(k, &l)| trip(&format!("t{k}"), "55", at(2, 6 + k as u32, 0), 30, l, None))
            .collect();
        let target = trip("x", "55", at(2, 12, 0), 30, 0, None);
        let f = build_day_ahead_features(&hist, &target, 4);
        assert_eq!((f.p, f.avg_load_p), (3, Some(6.0)));
        assert_eq!(f.avg_headway_p, None);
        assert_eq!(f.pc_headway, None);
    }

    #[test]
    fn day_ahead_eligibility() {
        let target = trip("x", "55", at(3, 8, 0), 30, 0, None);
        let hist = vec![
            // Still running when the target starts.
            trip("running", "55", at(3, 7, 45), 30, 50, None),
            // Other route.
            trip("other", "56", at(3, 7, 0), 30, 50, None),
            // More than a day earlier.
            trip("old", "55", at(2, 7, 59), 30, 50, None),
            // Later trips.
            trip("later", "55", at(3, 9, 0), 30, 50, None),
            trip("ok", "55", at(2, 8, 0), 30, 4, None),
        ];
        let f = build_day_ahead_features(&hist, &target, 5);
        assert_eq!((f.p, f.avg_load_p), (1, Some(4.0)));
    }

    proptest! {
        #[test]
        fn bulk_day_ahead_matches_single_target_scan(
            spec in prop::collection::vec((0u32..2, 0u32..3, 0u32..24, 0u32..60, 10i64..120, 0u32..80), 1..60),
            p in 1usize..6,
        ) {
            let trips: Vec<TripAggregate> = spec
                .iter()
                .enumerate()
                .map(|(i, &(route, day, h, m, len, load))| {
                    let hw = (load % 3 != 0).then_some(load as f64 * 10.0);
                    trip(&format!("t{i:03}"), &route.to_string(), at(1 + day, h, m), len, load, hw)
                })
                .collect();
            let bulk = day_ahead_for_all(&trips, p);
            for (t, f) in trips.iter().zip(&bulk) {
                prop_assert_eq!(*f, build_day_ahead_features(&trips, t, p));
            }
        }
    }

    fn layout() -> FeatureLayout {
        FeatureLayout {
            numerical: names(&["x", "c"]),
            one_hot: names(&["route_direction"]),
            ordinal: names(&["hour"]),
        }
    }

    fn raw(x: Option<f64>, route: &str, hour: f64) -> RawFeatures {
        RawFeatures {
            numerical: vec![x, Some(5.0)],
            one_hot: vec![route.into()],
            ordinal: vec![hour],
        }
    }

    #[test]
    fn encode_rules() {
        let train = vec![raw(Some(1.0), "55|NORTH", 7.0), raw(Some(3.0), "56|SOUTH", 8.0), raw(None, "55|NORTH", 9.0)];
        let schema = FeatureSchema::fit(&layout(), &train).unwrap();
        assert_eq!(schema.numerical[0].mean, 2.0);
        assert_eq!(schema.numerical[0].sd, 1.0);
        assert_eq!(schema.column_names(), ["x", "c", "route_direction=55|NORTH", "route_direction=56|SOUTH", "hour"]);
        let before = schema.clone();
        let test = vec![
            raw(Some(2.0), "55|NORTH", 7.0),
            raw(None, "56|SOUTH", 23.0),
            raw(Some(4.0), "99|EAST", 7.0),
        ];
        let (m, diag) = encode(&test, &schema).unwrap();
        assert_eq!(schema, before);
        assert_eq!(m.row(0), [0.0, 0.0, 1.0, 0.0, 7.0]);
        assert_eq!(m.row(1), [0.0, 0.0, 0.0, 1.0, 23.0]);
        assert_eq!(m.row(2), [2.0, 0.0, 0.0, 0.0, 7.0]);
        assert_eq!(diag.unknown_categories.get("route_direction"), Some(&1));
        assert_eq!(diag.zero_sd_columns, ["c"]);
        assert_eq!(schema.groups()[2], ("route_direction".to_string(), 2..4));
    }

    #[test]
    fn encode_rejects_non_finite_and_bad_widths() {
        let schema = FeatureSchema::fit(&layout(), &[raw(Some(1.0), "a", 1.0)]).unwrap();
        let err = encode(&[raw(Some(f64::NAN), "a", 1.0)], &schema).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref column, row: 0 } if column == "x"));
        let mut short = raw(Some(1.0), "a", 1.0);
        short.ordinal.clear();
        assert!(matches!(encode(&[short], &schema), Err(Error::Shape(_))));
    }

    #[test]
    fn fingerprint_tracks_schema() {
        let a = FeatureSchema::fit(&layout(), &[raw(Some(1.0), "a", 1.0)]).unwrap();
        let b = FeatureSchema::fit(&layout(), &[raw(Some(1.0), "b", 1.0)]).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    proptest! {
        #[test]
        fn one_hot_blocks_have_exactly_one_indicator(cats in prop::collection::vec(0u8..6, 1..40)) {
            let rows: Vec<RawFeatures> = cats.iter().map(|c| raw(Some(*c as f64), &format!("r{c}"), 0.0)).collect();
            let schema = FeatureSchema::fit(&layout(), &rows).unwrap();
            let (m, diag) = encode(&rows, &schema).unwrap();
            prop_assert!(diag.unknown_categories.is_empty());
            let block = schema.groups()[2].1.clone();
            for i in 0..m.rows {
                let ones: f32 = m.row(i)[block.clone()].iter().sum();
                prop_assert_eq!(ones, 1.0);
            }
        }
    }

    #[test]
    fn matrix_binary_and_csv_roundtrip() {
        let m = Matrix::new(2, 3, vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25, 0.1, 7.0]).unwrap();
        let cols = names(&["a", "b", "c"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        m.write_binary(&path, &cols, Some(&serde_json::json!({"seed": 1}))).unwrap();
        let (back, names_back) = Matrix::read_binary(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(names_back, cols);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        m.write_csv(&dir.path().join("x.csv"), &cols, None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("x.csv")).unwrap();
        assert!(text.starts_with("a,b,c\n1,-0.5,"));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    fn obs(date: u32, block: &str, route: &str, dir: &str, trip: &str, start_h: u32, seq: u32) -> StopObservation {
        let start = at(date, start_h, 0);
        StopObservation {
            transit_date: start.date(),
            route_id: route.into(),
            direction: dir.into(),
            stop_id: format!("S{seq}"),
            stop_sequence: seq,
            time_window: 0,
            block_id: block.into(),
            trip_id: trip.into(),
            trip_start: start,
            arrival: start + Duration::minutes(2 * seq as i64),
            n_records: 1,
            summed_load: seq,
            target_bin: LoadLevel::Low,
            temperature: None,
            humidity: None,
            precipitation: None,
            traffic_speed: None,
            scheduled_headway: 900.0,
            actual_headway: None,
            is_holiday: false,
            is_school_break: false,
            zero_load_at_trip_end: false,
            calendar: CalendarParts::of(start.date(), start),
        }
    }

    #[test]
    fn block_trips_are_ordered_and_split() {
        let mut rows = Vec::new();
        for seq in (1..=3).rev() {
            rows.push(obs(2, "B1", "55", "N", "T2", 9, seq));
            rows.push(obs(2, "B1", "55", "N", "T1", 7, seq));
            rows.push(obs(2, "B1", "55", "S", "T3", 8, seq));
        }
        rows.push(obs(2, "", "55", "N", "T9", 8, 1));
        let (seqs, diag) = sort_sequences(&rows);
        assert_eq!(diag.len(), 1);
        assert_eq!(seqs.len(), 2);
        let north: Vec<(&str, u32)> = seqs[0].rows.iter().map(|&i| (rows[i].trip_id.as_str(), rows[i].stop_sequence)).collect();
        assert_eq!(north, [("T1", 1), ("T1", 2), ("T1", 3), ("T2", 1), ("T2", 2), ("T2", 3)]);
        assert_eq!(seqs[0].trips(&rows).count(), 2);
        assert!(seqs.iter().all(|s| s.rows.iter().all(|&i| rows[i].direction == s.direction && rows[i].route_id == s.route_id)));
    }

    #[test]
    fn sort_matches_brute_force_and_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let rows: Vec<StopObservation> = (0..5000)
            .map(|_| {
                obs(
                    rng.random_range(1..4),
                    &format!("B{}", rng.random_range(0..4)),
                    &format!("{}", rng.random_range(50..53)),
                    ["N", "S"][rng.random_range(0..2)],
                    &format!("T{}", rng.random_range(0..20)),
                    rng.random_range(5..22),
                    rng.random_range(1..30),
                )
            })
            .collect();
        let (seqs, _) = sort_sequences(&rows);
        let flat: Vec<usize> = seqs.iter().flat_map(|s| s.rows.iter().copied()).collect();
        let mut brute: Vec<usize> = (0..rows.len()).collect();
        brute.sort_by(|&a, &b| {
            let (x, y) = (&rows[a], &rows[b]);
            x.transit_date
                .cmp(&y.transit_date)
                .then_with(|| x.block_id.cmp(&y.block_id))
                .then_with(|| x.route_id.cmp(&y.route_id))
                .then_with(|| x.direction.cmp(&y.direction))
                .then_with(|| x.trip_start.cmp(&y.trip_start))
                .then_with(|| x.trip_id.cmp(&y.trip_id))
                .then_with(|| x.stop_sequence.cmp(&y.stop_sequence))
                .then_with(|| a.cmp(&b))
        });
        assert_eq!(flat, brute);
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let (again, _) = sort_sequences(&shuffled);
        let a: Vec<Vec<(&str, u32)>> = seqs.iter().map(|s| s.rows.iter().map(|&i| (rows[i].trip_id.as_str(), rows[i].stop_sequence)).collect()).collect();
        let b: Vec<Vec<(&str, u32)>> = again.iter().map(|s| s.rows.iter().map(|&i| (shuffled[i].trip_id.as_str(), shuffled[i].stop_sequence)).collect()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn trip_split_sizes() {
        let s = split_trip_data(430_404, 0.7, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (301_283, 129_121));
        let all = split_trip_data(50, 1.0, 3).unwrap();
        assert_eq!((all.train.len(), all.test.len()), (50, 0));
        assert_eq!(split_trip_data(100, 0.7, 9).unwrap(), split_trip_data(100, 0.7, 9).unwrap());
        assert_ne!(split_trip_data(100, 0.7, 9).unwrap(), split_trip_data(100, 0.7, 10).unwrap());
        assert!(split_trip_data(10, 0.0, 1).is_err());
        assert!(split_trip_data(10, 1.5, 1).is_err());
    }

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn stop_split_with_published_boundaries() {
        let b = StopBoundaries {
            train_end: d(2021, 6, 30),
            validation_end: d(2021, 10, 31),
        };
        let dates = [d(2021, 7, 15), d(2021, 6, 30), d(2020, 1, 1), d(2021, 10, 31), d(2021, 11, 1)];
        let s = split_stop_data(&dates, Some(b)).unwrap();
        assert_eq!(s.train, [1, 2]);
        assert_eq!(s.validation, [0, 3]);
        assert_eq!(s.test, [4]);
        let no_validation = [d(2021, 1, 1), d(2021, 12, 1)];
        assert!(split_stop_data(&no_validation, Some(b)).is_err());
        assert!(split_stop_data(&[], None).is_err());
    }

    #[test]
    fn stop_split_default_fractions() {
        let dates: Vec<NaiveDate> = (0..100).map(|k| d(2021, 1, 1) + Duration::days(k)).collect();
        let s = split_stop_data(&dates, None).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 15, 25));
    }
}
