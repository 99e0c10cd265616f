//! CSV readers and writers for the five input datasets.
//!
//! Every reader is lossless: each data row either yields a record or a fatal
//! [`RowDiagnostic`]. Recoverable problems in optional fields become nulls
//! plus a non-fatal diagnostic. Lines starting with `#` are comments, which
//! lets pipeline outputs carry a provenance header and still be re-read.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::domain::ApcRecord;
use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub column: Option<String>,
    pub reason: String,
    pub fatal: bool,
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub diagnostics: Vec<RowDiagnostic>,
    pub data_rows: usize,
}

impl<T> Parsed<T> {
    pub fn fatal_rows(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.fatal).count()
    }
}

/// Column names of the APC export. Agencies name these differently, so each
/// canonical field can be remapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApcSchema {
    pub transit_date: String,
    pub trip_id: String,
    pub block_id: String,
    pub route_id: String,
    pub direction: String,
    pub vehicle_id: String,
    pub stop_id: String,
    pub stop_sequence: String,
    pub scheduled_arrival: String,
    pub actual_arrival: String,
    pub ons: String,
    pub offs: String,
    pub load: String,
    pub scheduled_headway: String,
    pub zero_load_at_trip_end: String,
}

impl Default for ApcSchema {
    fn default() -> Self {
        Self {
            transit_date: "transit_date".into(),
            trip_id: "trip_id".into(),
            block_id: "block_id".into(),
            route_id: "route_id".into(),
            direction: "direction".into(),
            vehicle_id: "vehicle_id".into(),
            stop_id: "stop_id".into(),
            stop_sequence: "stop_sequence".into(),
            scheduled_arrival: "scheduled_arrival".into(),
            actual_arrival: "actual_arrival".into(),
            ons: "ons".into(),
            offs: "offs".into(),
            load: "load".into(),
            scheduled_headway: "scheduled_headway".into(),
            zero_load_at_trip_end: "zero_load_at_trip_end".into(),
        }
    }
}

impl ApcSchema {
    fn columns(&self) -> [&str; 15] {
        [
            &self.transit_date,
            &self.trip_id,
            &self.block_id,
            &self.route_id,
            &self.direction,
            &self.vehicle_id,
            &self.stop_id,
            &self.stop_sequence,
            &self.scheduled_arrival,
            &self.actual_arrival,
            &self.ons,
            &self.offs,
            &self.load,
            &self.scheduled_headway,
            &self.zero_load_at_trip_end,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherObservation {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamp: NaiveDateTime,
    pub temperature: f64,
    pub humidity: f64,
    pub precipitation_intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSegmentReading {
    pub segment_id: String,
    pub geometry: Arc<Vec<GeoPoint>>,
    pub timestamp: NaiveDateTime,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarEntry {
    pub date: NaiveDate,
    pub is_school_break: bool,
    pub is_national_holiday: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtfsRoute {
    pub route_id: String,
    pub route_short_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtfsTrip {
    pub route_id: String,
    pub trip_id: String,
    pub direction_id: String,
    pub block_id: String,
    pub shape_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtfsStopTime {
    pub trip_id: String,
    /// Seconds after service-day midnight; may exceed 24h for late trips.
    pub arrival_secs: u32,
    pub stop_id: String,
    pub stop_sequence: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtfsStop {
    pub stop_id: String,
    pub stop_lat: f64,
    pub stop_lon: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtfsBundle {
    pub routes: Vec<GtfsRoute>,
    pub trips: Vec<GtfsTrip>,
    /// Sorted by (trip_id, stop_sequence).
    pub stop_times: Vec<GtfsStopTime>,
    pub stops: Vec<GtfsStop>,
    /// shape_id -> ordered polyline.
    pub shapes: BTreeMap<String, Vec<GeoPoint>>,
}

impl GtfsBundle {
    pub fn stop_index(&self) -> HashMap<&str, &GtfsStop> {
        self.stops.iter().map(|s| (s.stop_id.as_str(), s)).collect()
    }

    pub fn trip_index(&self) -> HashMap<&str, &GtfsTrip> {
        self.trips.iter().map(|t| (t.trip_id.as_str(), t)).collect()
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "t" | "y" => Some(true),
        "false" | "0" | "no" | "f" | "n" => Some(false),
        _ => None,
    }
}

/// `HH:MM:SS`, hours may exceed 23.
pub fn parse_gtfs_time(s: &str) -> Option<u32> {
    let mut parts = s.trim().split(':');
    let h: u32 = parts.next()?.trim().parse().ok()?;
    let m: u32 = parts.next()?.trim().parse().ok()?;
    let sec: u32 = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() || m >= 60 || sec >= 60 {
        return None;
    }
    Some(h * 3600 + m * 60 + sec)
}

pub fn format_gtfs_time(secs: u32) -> String {
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

pub(crate) fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file))
}

/// Header lookup that turns a missing mandatory column into an error.
struct Columns {
    path: PathBuf,
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(path: &Path, reader: &mut csv::Reader<File>) -> Result<Self> {
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            index,
        })
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

fn field(record: &csv::StringRecord, idx: usize) -> &str {
    record.get(idx).unwrap_or("").trim()
}

/// Collects per-row problems. A row with any fatal problem is not emitted.
struct RowCheck<'a> {
    row: usize,
    diagnostics: &'a mut Vec<RowDiagnostic>,
    fatal: bool,
}

impl<'a> RowCheck<'a> {
    fn new(row: usize, diagnostics: &'a mut Vec<RowDiagnostic>) -> Self {
        Self {
            row,
            diagnostics,
            fatal: false,
        }
    }

    fn push(&mut self, column: Option<&str>, reason: impl Into<String>, fatal: bool) {
        // At most one fatal diagnostic per row keeps the losslessness count exact.
        if fatal && self.fatal {
            return;
        }
        self.fatal |= fatal;
        self.diagnostics.push(RowDiagnostic {
            row: self.row,
            column: column.map(str::to_string),
            reason: reason.into(),
            fatal,
        });
    }

    fn required<T>(&mut self, column: &str, raw: &str, parse: impl Fn(&str) -> Option<T>) -> Option<T> {
        if raw.is_empty() {
            self.push(Some(column), "missing mandatory value", true);
            return None;
        }
        let parsed = parse(raw);
        if parsed.is_none() {
            self.push(Some(column), format!("unparseable value `{raw}`"), true);
        }
        parsed
    }

    fn optional<T>(&mut self, column: &str, raw: &str, parse: impl Fn(&str) -> Option<T>) -> Option<T> {
        if raw.is_empty() {
            return None;
        }
        let parsed = parse(raw);
        if parsed.is_none() {
            self.push(Some(column), format!("unparseable value `{raw}`, treated as null"), false);
        }
        parsed
    }
}

fn nonempty(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

pub fn parse_apc_file(path: &Path, schema: &ApcSchema) -> Result<Parsed<ApcRecord>> {
    let mut reader = open_reader(path)?;
    let cols = Columns::new(path, &mut reader)?;
    let idx: Vec<usize> = schema
        .columns()
        .iter()
        .map(|c| cols.require(c))
        .collect::<Result<_>>()?;
    let names = schema.columns();

    let mut out = Parsed {
        records: Vec::new(),
        diagnostics: Vec::new(),
        data_rows: 0,
    };
    let mut raw = csv::StringRecord::new();
    loop {
        let row = out.data_rows + 1;
        match reader.read_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(Error::csv(path, e));
                }
                out.data_rows += 1;
                RowCheck::new(row, &mut out.diagnostics).push(None, e.to_string(), true);
                continue;
            }
        }
        out.data_rows += 1;
        let f = |i: usize| field(&raw, idx[i]);
        let mut check = RowCheck::new(row, &mut out.diagnostics);

        let transit_date = check.required(names[0], f(0), parse_date);
        let trip_id = check.required(names[1], f(1), nonempty);
        let block_id = f(2).to_string();
        let route_id = check.required(names[3], f(3), nonempty);
        let direction = check.required(names[4], f(4), nonempty);
        let vehicle_id = f(5).to_string();
        let stop_id = check.required(names[6], f(6), nonempty);
        let stop_sequence = check.required(names[7], f(7), |s| s.parse::<u32>().ok().filter(|&v| v >= 1));
        let scheduled_arrival = check.required(names[8], f(8), parse_timestamp);
        let actual_arrival = check.optional(names[9], f(9), parse_timestamp);
        let ons = check.optional(names[10], f(10), |s| s.parse::<i32>().ok());
        let offs = check.optional(names[11], f(11), |s| s.parse::<i32>().ok());
        let load = check.optional(names[12], f(12), |s| s.parse::<i32>().ok());
        let scheduled_headway = check
            .optional(names[13], f(13), |s| s.parse::<u32>().ok())
            .unwrap_or(0);
        let zero_load_at_trip_end = check
            .optional(names[14], f(14), parse_bool)
            .unwrap_or(false);
        for (name, v) in [(names[10], ons), (names[11], offs)] {
            if v.is_some_and(|v| v < 0) {
                check.push(Some(name), "negative count", false);
            }
        }
        if check.fatal {
            continue;
        }
        out.records.push(ApcRecord {
            transit_date: transit_date.unwrap(),
            trip_id: trip_id.unwrap(),
            block_id,
            route_id: route_id.unwrap(),
            direction: direction.unwrap(),
            vehicle_id,
            stop_id: stop_id.unwrap(),
            stop_sequence: stop_sequence.unwrap(),
            scheduled_arrival: scheduled_arrival.unwrap(),
            actual_arrival,
            ons,
            offs,
            load,
            scheduled_headway,
            zero_load_at_trip_end,
            validity: Default::default(),
        });
    }
    Ok(out)
}

pub(crate) fn create_writer(path: &Path, header_comment: Option<&str>) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(comment) = header_comment {
        for line in comment.lines() {
            writeln!(buf, "# {line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(csv::Writer::from_writer(buf))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes records with the default schema; the inverse of [`parse_apc_file`].
pub fn write_apc_file(path: &Path, records: &[ApcRecord], header_comment: Option<&str>) -> Result<()> {
    let mut w = create_writer(path, header_comment)?;
    let schema = ApcSchema::default();
    w.write_record(schema.columns()).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.write_record([
            r.transit_date.format(DATE_FORMAT).to_string(),
            r.trip_id.clone(),
            r.block_id.clone(),
            r.route_id.clone(),
            r.direction.clone(),
            r.vehicle_id.clone(),
            r.stop_id.clone(),
            r.stop_sequence.to_string(),
            format_timestamp(r.scheduled_arrival),
            opt(r.actual_arrival.map(format_timestamp)),
            opt(r.ons),
            opt(r.offs),
            opt(r.load),
            r.scheduled_headway.to_string(),
            r.zero_load_at_trip_end.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_weather_one(path: &Path) -> Result<Parsed<WeatherObservation>> {
    let mut reader = open_reader(path)?;
    let cols = Columns::new(path, &mut reader)?;
    let names = [
        "station_id",
        "latitude",
        "longitude",
        "timestamp",
        "temperature",
        "humidity",
        "precipitation_intensity",
    ];
    let idx: Vec<usize> = names.iter().map(|c| cols.require(c)).collect::<Result<_>>()?;
    let mut out = Parsed {
        records: Vec::new(),
        diagnostics: Vec::new(),
        data_rows: 0,
    };
    let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    for (i, rec) in reader.records().enumerate() {
        out.data_rows += 1;
        let row = i + 1;
        let mut check = RowCheck::new(row, &mut out.diagnostics);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                check.push(None, e.to_string(), true);
                continue;
            }
        };
        let f = |k: usize| field(&rec, idx[k]);
        let station_id = check.required(names[0], f(0), nonempty);
        let latitude = check.required(names[1], f(1), num);
        let longitude = check.required(names[2], f(2), num);
        let timestamp = check.required(names[3], f(3), parse_timestamp);
        let temperature = check.required(names[4], f(4), num);
        let humidity = check.required(names[5], f(5), num);
        let precipitation = check.required(names[6], f(6), num);
        if timestamp.is_some_and(|t| t.minute() != 0 || t.second() != 0) {
            check.push(Some(names[3]), "not aligned to a whole hour", true);
        }
        if humidity.is_some_and(|h| !(0.0..=1.0).contains(&h)) {
            check.push(Some(names[5]), "humidity outside [0, 1]", true);
        }
        if precipitation.is_some_and(|p| p < 0.0) {
            check.push(Some(names[6]), "negative precipitation", true);
        }
        if check.fatal {
            continue;
        }
        out.records.push(WeatherObservation {
            station_id: station_id.unwrap(),
            latitude: latitude.unwrap(),
            longitude: longitude.unwrap(),
            timestamp: timestamp.unwrap(),
            temperature: temperature.unwrap(),
            humidity: humidity.unwrap(),
            precipitation_intensity: precipitation.unwrap(),
        });
    }
    Ok(out)
}

pub fn parse_weather_file(path: &Path) -> Result<Parsed<WeatherObservation>> {
    parse_weather_one(path)
}

/// Parses several weather sources, keeping the first-listed observation for
/// each (station, hour). Dropped duplicates are reported as non-fatal
/// diagnostics against the later file's row numbers.
pub fn parse_weather_files(paths: &[PathBuf]) -> Result<Parsed<WeatherObservation>> {
    let mut seen = HashSet::new();
    let mut merged = Parsed {
        records: Vec::new(),
        diagnostics: Vec::new(),
        data_rows: 0,
    };
    for path in paths {
        let parsed = parse_weather_one(path)?;
        merged.data_rows += parsed.data_rows;
        merged.diagnostics.extend(parsed.diagnostics);
        for obs in parsed.records {
            if seen.insert((obs.station_id.clone(), obs.timestamp)) {
                merged.records.push(obs);
            } else {
                merged.diagnostics.push(RowDiagnostic {
                    row: 0,
                    column: None,
                    reason: format!(
                        "{}: duplicate observation for station {} at {} ignored",
                        path.display(),
                        obs.station_id,
                        format_timestamp(obs.timestamp)
                    ),
                    fatal: false,
                });
            }
        }
    }
    Ok(merged)
}

pub fn write_weather_file(path: &Path, obs: &[WeatherObservation], header_comment: Option<&str>) -> Result<()> {
    let mut w = create_writer(path, header_comment)?;
    w.write_record([
        "station_id",
        "latitude",
        "longitude",
        "timestamp",
        "temperature",
        "humidity",
        "precipitation_intensity",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for o in obs {
        w.write_record([
            o.station_id.clone(),
            o.latitude.to_string(),
            o.longitude.to_string(),
            format_timestamp(o.timestamp),
            o.temperature.to_string(),
            o.humidity.to_string(),
            o.precipitation_intensity.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `lat lon;lat lon;...`
pub fn parse_geometry(s: &str) -> Option<Vec<GeoPoint>> {
    let points: Option<Vec<GeoPoint>> = s
        .split(';')
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let lat = it.next()?.parse().ok()?;
            let lon = it.next()?.parse().ok()?;
            it.next().is_none().then_some(GeoPoint { lat, lon })
        })
        .collect();
    points.filter(|p| !p.is_empty())
}

pub fn format_geometry(points: &[GeoPoint]) -> String {
    points
        .iter()
        .map(|p| format!("{} {}", p.lat, p.lon))
        .collect::<Vec<_>>()
        .join(";")
}

/// Traffic rows carry the segment geometry on (at least) the first row of
/// each segment; later rows may leave it empty.
pub fn parse_traffic_file(path: &Path) -> Result<Parsed<TrafficSegmentReading>> {
    let mut reader = open_reader(path)?;
    let cols = Columns::new(path, &mut reader)?;
    let names = ["segment_id", "geometry", "timestamp", "speed"];
    let idx: Vec<usize> = names.iter().map(|c| cols.require(c)).collect::<Result<_>>()?;
    let mut geometries: HashMap<String, Arc<Vec<GeoPoint>>> = HashMap::new();
    let mut out = Parsed {
        records: Vec::new(),
        diagnostics: Vec::new(),
        data_rows: 0,
    };
    for (i, rec) in reader.records().enumerate() {
        out.data_rows += 1;
        let mut check = RowCheck::new(i + 1, &mut out.diagnostics);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                check.push(None, e.to_string(), true);
                continue;
            }
        };
        let f = |k: usize| field(&rec, idx[k]);
        let segment_id = check.required(names[0], f(0), nonempty);
        let timestamp = check.required(names[2], f(2), parse_timestamp);
        let speed = check.required(names[3], f(3), |s| {
            s.parse::<f64>().ok().filter(|v| v.is_finite())
        });
        if timestamp.is_some_and(|t| t.minute() % 5 != 0 || t.second() != 0) {
            check.push(Some(names[2]), "not 5-minute aligned", true);
        }
        if speed.is_some_and(|s| s < 0.0) {
            check.push(Some(names[3]), "negative speed", true);
        }
        let geometry = match (segment_id.as_ref(), f(1)) {
            (Some(id), "") => match geometries.get(id) {
                Some(g) => Some(g.clone()),
                None => {
                    check.push(Some(names[1]), "segment geometry never given", true);
                    None
                }
            },
            (Some(id), raw) => match parse_geometry(raw) {
                Some(points) => Some(
                    geometries
                        .entry(id.clone())
                        .or_insert_with(|| Arc::new(points))
                        .clone(),
                ),
                None => {
                    check.push(Some(names[1]), format!("unparseable geometry `{raw}`"), true);
                    None
                }
            },
            (None, _) => None,
        };
        if check.fatal {
            continue;
        }
        out.records.push(TrafficSegmentReading {
            segment_id: segment_id.unwrap(),
            geometry: geometry.unwrap(),
            timestamp: timestamp.unwrap(),
            speed: speed.unwrap(),
        });
    }
    Ok(out)
}

pub fn write_traffic_file(path: &Path, readings: &[TrafficSegmentReading], header_comment: Option<&str>) -> Result<()> {
    let mut w = create_writer(path, header_comment)?;
    w.write_record(["segment_id", "geometry", "timestamp", "speed"])
        .map_err(|e| Error::csv(path, e))?;
    let mut described = HashSet::new();
    for r in readings {
        let geometry = if described.insert(r.segment_id.as_str()) {
            format_geometry(&r.geometry)
        } else {
            String::new()
        };
        w.write_record([
            r.segment_id.clone(),
            geometry,
            format_timestamp(r.timestamp),
            r.speed.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_calendar_file(path: &Path) -> Result<Parsed<CalendarEntry>> {
    let mut reader = open_reader(path)?;
    let cols = Columns::new(path, &mut reader)?;
    let names = ["date", "is_school_break", "is_national_holiday"];
    let idx: Vec<usize> = names.iter().map(|c| cols.require(c)).collect::<Result<_>>()?;
    let mut out = Parsed {
        records: Vec::new(),
        diagnostics: Vec::new(),
        data_rows: 0,
    };
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        out.data_rows += 1;
        let mut check = RowCheck::new(i + 1, &mut out.diagnostics);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                check.push(None, e.to_string(), true);
                continue;
            }
        };
        let f = |k: usize| field(&rec, idx[k]);
        let date = check.required(names[0], f(0), parse_date);
        let school = check.required(names[1], f(1), parse_bool);
        let holiday = check.required(names[2], f(2), parse_bool);
        if let Some(d) = date {
            if !seen.insert(d) {
                check.push(Some(names[0]), "duplicate calendar date", true);
            }
        }
        if check.fatal {
            continue;
        }
        out.records.push(CalendarEntry {
            date: date.unwrap(),
            is_school_break: school.unwrap(),
            is_national_holiday: holiday.unwrap(),
        });
    }
    Ok(out)
}

pub fn write_calendar_file(path: &Path, entries: &[CalendarEntry], header_comment: Option<&str>) -> Result<()> {
    let mut w = create_writer(path, header_comment)?;
    w.write_record(["date", "is_school_break", "is_national_holiday"])
        .map_err(|e| Error::csv(path, e))?;
    for e in entries {
        w.write_record([
            e.date.format(DATE_FORMAT).to_string(),
            e.is_school_break.to_string(),
            e.is_national_holiday.to_string(),
        ])
        .map_err(|err| Error::csv(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct GtfsRow<'a> {
    cols: &'a Columns,
    rec: &'a csv::StringRecord,
}

impl GtfsRow<'_> {
    fn get(&self, name: &str) -> &str {
        self.cols.optional(name).map_or("", |k| field(self.rec, k))
    }
}

/// Reads a GTFS table with all-or-nothing semantics: any malformed row fails
/// the whole bundle.
fn read_gtfs_table<T>(
    path: &Path,
    required: &[&str],
    mut build: impl FnMut(&GtfsRow<'_>) -> Option<T>,
) -> Result<Vec<T>> {
    let mut reader = open_reader(path)?;
    let cols = Columns::new(path, &mut reader)?;
    for c in required {
        cols.require(c)?;
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = GtfsRow { cols: &cols, rec: &rec };
        match build(&row) {
            Some(v) => out.push(v),
            None => {
                return Err(Error::FatalRow {
                    path: path.to_path_buf(),
                    row: i + 1,
                    reason: "malformed GTFS row".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn parse_gtfs(dir: &Path) -> Result<GtfsBundle> {
    let routes = read_gtfs_table(&dir.join("routes.txt"), &["route_id"], |r| {
        Some(GtfsRoute {
            route_id: nonempty(r.get("route_id"))?,
            route_short_name: r.get("route_short_name").to_string(),
        })
    })?;
    let trips = read_gtfs_table(&dir.join("trips.txt"), &["route_id", "trip_id"], |r| {
        Some(GtfsTrip {
            route_id: nonempty(r.get("route_id"))?,
            trip_id: nonempty(r.get("trip_id"))?,
            direction_id: r.get("direction_id").to_string(),
            block_id: r.get("block_id").to_string(),
            shape_id: r.get("shape_id").to_string(),
        })
    })?;
    let mut stop_times = read_gtfs_table(
        &dir.join("stop_times.txt"),
        &["trip_id", "arrival_time", "stop_id", "stop_sequence"],
        |r| {
            Some(GtfsStopTime {
                trip_id: nonempty(r.get("trip_id"))?,
                arrival_secs: parse_gtfs_time(r.get("arrival_time"))?,
                stop_id: nonempty(r.get("stop_id"))?,
                stop_sequence: r.get("stop_sequence").parse().ok()?,
            })
        },
    )?;
    let stops = read_gtfs_table(&dir.join("stops.txt"), &["stop_id", "stop_lat", "stop_lon"], |r| {
        Some(GtfsStop {
            stop_id: nonempty(r.get("stop_id"))?,
            stop_lat: r.get("stop_lat").parse().ok()?,
            stop_lon: r.get("stop_lon").parse().ok()?,
        })
    })?;
    let shape_path = dir.join("shapes.txt");
    let mut shape_points = if shape_path.exists() {
        read_gtfs_table(
            &shape_path,
            &["shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"],
            |r| {
                Some((
                    nonempty(r.get("shape_id"))?,
                    r.get("shape_pt_sequence").parse::<u32>().ok()?,
                    GeoPoint {
                        lat: r.get("shape_pt_lat").parse().ok()?,
                        lon: r.get("shape_pt_lon").parse().ok()?,
                    },
                ))
            },
        )?
    } else {
        Vec::new()
    };
    shape_points.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let mut shapes: BTreeMap<String, Vec<GeoPoint>> = BTreeMap::new();
    for (id, _, p) in shape_points {
        shapes.entry(id).or_default().push(p);
    }

    let route_ids: HashSet<&str> = routes.iter().map(|r| r.route_id.as_str()).collect();
    for t in &trips {
        if !route_ids.contains(t.route_id.as_str()) {
            return Err(Error::Referential(format!(
                "trip {} references unknown route {}",
                t.trip_id, t.route_id
            )));
        }
        if !t.shape_id.is_empty() && !shapes.contains_key(&t.shape_id) {
            return Err(Error::Referential(format!(
                "trip {} references unknown shape {}",
                t.trip_id, t.shape_id
            )));
        }
    }
    let trip_ids: HashSet<&str> = trips.iter().map(|t| t.trip_id.as_str()).collect();
    let stop_ids: HashSet<&str> = stops.iter().map(|s| s.stop_id.as_str()).collect();
    for st in &stop_times {
        if !trip_ids.contains(st.trip_id.as_str()) {
            return Err(Error::Referential(format!(
                "stop_time references unknown trip {}",
                st.trip_id
            )));
        }
        if !stop_ids.contains(st.stop_id.as_str()) {
            return Err(Error::Referential(format!(
                "stop_time of trip {} references unknown stop {}",
                st.trip_id, st.stop_id
            )));
        }
    }
    stop_times.sort_by(|a, b| (&a.trip_id, a.stop_sequence).cmp(&(&b.trip_id, b.stop_sequence)));
    for pair in stop_times.windows(2) {
        if pair[0].trip_id == pair[1].trip_id && pair[0].stop_sequence == pair[1].stop_sequence {
            return Err(Error::Referential(format!(
                "trip {} repeats stop_sequence {}",
                pair[0].trip_id, pair[0].stop_sequence
            )));
        }
    }
    Ok(GtfsBundle {
        routes,
        trips,
        stop_times,
        stops,
        shapes,
    })
}

pub fn write_gtfs(dir: &Path, gtfs: &GtfsBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("routes.txt");
    let mut w = create_writer(&p, None)?;
    w.write_record(["route_id", "route_short_name"]).map_err(|e| Error::csv(&p, e))?;
    for r in &gtfs.routes {
        w.write_record([&r.route_id, &r.route_short_name]).map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("trips.txt");
    let mut w = create_writer(&p, None)?;
    w.write_record(["route_id", "trip_id", "direction_id", "block_id", "shape_id"])
        .map_err(|e| Error::csv(&p, e))?;
    for t in &gtfs.trips {
        w.write_record([&t.route_id, &t.trip_id, &t.direction_id, &t.block_id, &t.shape_id])
            .map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("stop_times.txt");
    let mut w = create_writer(&p, None)?;
    w.write_record(["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"])
        .map_err(|e| Error::csv(&p, e))?;
    for st in &gtfs.stop_times {
        let t = format_gtfs_time(st.arrival_secs);
        w.write_record([&st.trip_id, &t, &t, &st.stop_id, &st.stop_sequence.to_string()])
            .map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("stops.txt");
    let mut w = create_writer(&p, None)?;
    w.write_record(["stop_id", "stop_lat", "stop_lon"]).map_err(|e| Error::csv(&p, e))?;
    for s in &gtfs.stops {
        w.write_record([s.stop_id.clone(), s.stop_lat.to_string(), s.stop_lon.to_string()])
            .map_err(|e| Error::csv(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("shapes.txt");
    let mut w = create_writer(&p, None)?;
    w.write_record(["shape_id", "shape_pt_lat", "shape_pt_lon", "shape_pt_sequence"])
        .map_err(|e| Error::csv(&p, e))?;
    for (id, points) in &gtfs.shapes {
        for (i, pt) in points.iter().enumerate() {
            w.write_record([id.clone(), pt.lat.to_string(), pt.lon.to_string(), (i + 1).to_string()])
                .map_err(|e| Error::csv(&p, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))
}
