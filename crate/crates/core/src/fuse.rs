//! Context joins (weather, traffic, calendar, actual headway) and the trip-
//! and stop-level aggregations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    bin_stop_load, bin_trip_load, time_window_of, ApcRecord, CalendarParts, LoadLevel, StopObservation, TripAggregate,
    TripKey,
};
use crate::error::{Error, Result};
use crate::geo::{haversine_m, LocalProjection, METERS_PER_MILE};
use crate::ingest::{
    create_writer, open_reader, CalendarEntry, GeoPoint, GtfsBundle, TrafficSegmentReading, WeatherObservation,
};

pub const WEATHER_FALLBACK_HOURS: i64 = 3;
pub const TRAFFIC_SLOT_MINUTES: i64 = 5;
pub const TRAFFIC_FALLBACK_MINUTES: i64 = 15;

/// An APC record with the joined context columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRecord {
    pub apc: ApcRecord,
    pub temperature: Option<f64>,
    pub humidity: Option<f64>,
    pub precipitation: Option<f64>,
    pub traffic_speed: Option<f64>,
    pub is_holiday: bool,
    pub is_school_break: bool,
    pub actual_headway: Option<f64>,
}

impl FusedRecord {
    pub fn new(apc: ApcRecord) -> Self {
        Self {
            apc,
            temperature: None,
            humidity: None,
            precipitation: None,
            traffic_speed: None,
            is_holiday: false,
            is_school_break: false,
            actual_headway: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Issue {
    UnknownStop,
    WeatherFallback,
    WeatherMissing,
    UnknownShape,
    TrafficFallback,
    TrafficMissing,
    CalendarMissing,
}

impl Issue {
    pub fn name(self) -> &'static str {
        match self {
            Issue::UnknownStop => "unknown_stop",
            Issue::WeatherFallback => "weather_fallback",
            Issue::WeatherMissing => "weather_missing",
            Issue::UnknownShape => "unknown_shape",
            Issue::TrafficFallback => "traffic_fallback",
            Issue::TrafficMissing => "traffic_missing",
            Issue::CalendarMissing => "calendar_missing",
        }
    }
}

/// Counts of join problems plus a few examples of each kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub counts: BTreeMap<Issue, usize>,
    pub examples: Vec<String>,
}

impl Diagnostics {
    const MAX_EXAMPLES_PER_KIND: usize = 5;

    pub fn record(&mut self, issue: Issue, detail: impl FnOnce() -> String) {
        let n = self.counts.entry(issue).or_default();
        *n += 1;
        if *n <= Self::MAX_EXAMPLES_PER_KIND {
            self.examples.push(format!("{}: {}", issue.name(), detail()));
        }
    }

    pub fn count(&self, issue: Issue) -> usize {
        self.counts.get(&issue).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: Diagnostics) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_default() += v;
        }
        self.examples.extend(other.examples);
    }
}

pub type Cell = (i64, i64);

/// Square cells of one mile in a local planar projection, each listing the
/// traffic segments whose geometry passes through it.
#[derive(Debug, Clone)]
pub struct GridIndex {
    projection: LocalProjection,
    cell_m: f64,
    cells: BTreeMap<Cell, Vec<usize>>,
    segment_ids: Vec<String>,
}

impl GridIndex {
    pub fn new(projection: LocalProjection, cell_m: f64, segments: &BTreeMap<String, Arc<Vec<GeoPoint>>>) -> Self {
        let mut cells: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
        let segment_ids: Vec<String> = segments.keys().cloned().collect();
        for (i, geometry) in segments.values().enumerate() {
            for cell in polyline_cells(&projection, cell_m, geometry) {
                cells.entry(cell).or_default().push(i);
            }
        }
        Self {
            projection,
            cell_m,
            cells,
            segment_ids,
        }
    }

    /// One-mile grid anchored at the centroid of the network's stops.
    pub fn for_network(gtfs: &GtfsBundle, segments: &BTreeMap<String, Arc<Vec<GeoPoint>>>) -> Self {
        let projection = LocalProjection::centered_on(gtfs.stops.iter().map(|s| GeoPoint {
            lat: s.stop_lat,
            lon: s.stop_lon,
        }));
        Self::new(projection, METERS_PER_MILE, segments)
    }

    pub fn cell_of(&self, p: GeoPoint) -> Cell {
        let (x, y) = self.projection.project(p);
        ((x / self.cell_m).floor() as i64, (y / self.cell_m).floor() as i64)
    }

    pub fn segments_in(&self, cell: Cell) -> &[usize] {
        self.cells.get(&cell).map_or(&[], Vec::as_slice)
    }

    pub fn segment_id(&self, index: usize) -> &str {
        &self.segment_ids[index]
    }

    pub fn segment_count(&self) -> usize {
        self.segment_ids.len()
    }

    /// Indices of segments sharing a cell with the polyline, ascending.
    pub fn segments_along(&self, polyline: &[GeoPoint]) -> Vec<usize> {
        let set: BTreeSet<usize> = polyline_cells(&self.projection, self.cell_m, polyline)
            .into_iter()
            .flat_map(|c| self.segments_in(c).iter().copied())
            .collect();
        set.into_iter().collect()
    }
}

/// Every cell a polyline passes through. Each edge is cut at its grid-line
/// crossings and the midpoint of every piece names one cell.
pub fn polyline_cells(projection: &LocalProjection, cell_m: f64, polyline: &[GeoPoint]) -> BTreeSet<Cell> {
    let pts: Vec<(f64, f64)> = polyline
        .iter()
        .map(|&p| {
            let (x, y) = projection.project(p);
            (x / cell_m, y / cell_m)
        })
        .collect();
    let mut out = BTreeSet::new();
    if let Some(&(x, y)) = pts.first() {
        out.insert((x.floor() as i64, y.floor() as i64));
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let mut ts = vec![0.0, 1.0];
        for (a, b) in [(x0, x1), (y0, y1)] {
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                let mut k = lo.floor() + 1.0;
                while k < hi {
                    ts.push((k - a) / (b - a));
                    k += 1.0;
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        for pair in ts.windows(2) {
            let t = 0.5 * (pair[0] + pair[1]);
            if pair[1] - pair[0] <= 0.0 {
                continue;
            }
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            out.insert((x.floor() as i64, y.floor() as i64));
        }
        out.insert((x1.floor() as i64, y1.floor() as i64));
    }
    out
}

/// Hourly observations per station.
#[derive(Debug, Clone)]
pub struct WeatherIndex {
    stations: Vec<(String, GeoPoint)>,
    readings: HashMap<(usize, NaiveDateTime), [f64; 3]>,
}

impl WeatherIndex {
    pub fn new(observations: &[WeatherObservation]) -> Self {
        let mut located: BTreeMap<&str, GeoPoint> = BTreeMap::new();
        for o in observations {
            located.entry(&o.station_id).or_insert(GeoPoint {
                lat: o.latitude,
                lon: o.longitude,
            });
        }
        let stations: Vec<(String, GeoPoint)> = located.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let position: HashMap<&str, usize> = stations.iter().enumerate().map(|(i, (s, _))| (s.as_str(), i)).collect();
        let mut readings = HashMap::with_capacity(observations.len());
        for o in observations {
            readings
                .entry((position[o.station_id.as_str()], o.timestamp))
                .or_insert([o.temperature, o.humidity, o.precipitation_intensity]);
        }
        Self { stations, readings }
    }

    /// Nearest station by great-circle distance; ties go to the lower id.
    pub fn nearest_station(&self, p: GeoPoint) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, at)) in self.stations.iter().enumerate() {
            let d = haversine_m(p, *at);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn station_id(&self, index: usize) -> &str {
        &self.stations[index].0
    }

    /// Observation at the hour containing `at`, else the closest hour within
    /// three hours, earlier first. The flag reports whether a fallback was used.
    pub fn lookup(&self, station: usize, at: NaiveDateTime) -> Option<([f64; 3], bool)> {
        let hour = floor_to(at, 60);
        if let Some(v) = self.readings.get(&(station, hour)) {
            return Some((*v, false));
        }
        for k in 1..=WEATHER_FALLBACK_HOURS {
            for sign in [-1, 1] {
                if let Some(v) = self.readings.get(&(station, hour + Duration::hours(sign * k))) {
                    return Some((*v, true));
                }
            }
        }
        None
    }
}

/// Five-minute speed readings per segment.
#[derive(Debug, Clone)]
pub struct TrafficIndex {
    readings: HashMap<(usize, NaiveDateTime), f64>,
}

impl TrafficIndex {
    pub fn new(grid: &GridIndex, readings: &[TrafficSegmentReading]) -> Self {
        let position: HashMap<&str, usize> = (0..grid.segment_count()).map(|i| (grid.segment_id(i), i)).collect();
        let mut map = HashMap::with_capacity(readings.len());
        for r in readings {
            if let Some(&i) = position.get(r.segment_id.as_str()) {
                map.entry((i, r.timestamp)).or_insert(r.speed);
            }
        }
        Self { readings: map }
    }

    /// Reading in the slot containing `at`, else the nearest earlier slot up to
    /// fifteen minutes back.
    pub fn lookup(&self, segment: usize, at: NaiveDateTime) -> Option<(f64, bool)> {
        let slot = floor_to(at, TRAFFIC_SLOT_MINUTES);
        (0..=TRAFFIC_FALLBACK_MINUTES / TRAFFIC_SLOT_MINUTES).find_map(|k| {
            self.readings
                .get(&(segment, slot - Duration::minutes(k * TRAFFIC_SLOT_MINUTES)))
                .map(|&v| (v, k > 0))
        })
    }
}

fn floor_to(at: NaiveDateTime, minutes: i64) -> NaiveDateTime {
    let since_midnight = at.time().num_seconds_from_midnight() as i64 / 60;
    at.date().and_hms_opt(0, 0, 0).unwrap_or(at) + Duration::minutes(since_midnight - since_midnight % minutes)
}

/// Immutable lookups shared by every join.
#[derive(Debug, Clone)]
pub struct FuseContext {
    stop_station: HashMap<String, usize>,
    weather: WeatherIndex,
    trip_segments: HashMap<String, Arc<Vec<usize>>>,
    traffic: TrafficIndex,
    calendar: HashMap<NaiveDate, CalendarEntry>,
    pub grid: GridIndex,
}

impl FuseContext {
    pub fn new(
        gtfs: &GtfsBundle,
        weather: &[WeatherObservation],
        traffic: &[TrafficSegmentReading],
        calendar: &[CalendarEntry],
    ) -> Self {
        let mut geometries: BTreeMap<String, Arc<Vec<GeoPoint>>> = BTreeMap::new();
        for r in traffic {
            geometries
                .entry(r.segment_id.clone())
                .or_insert_with(|| r.geometry.clone());
        }
        let grid = GridIndex::for_network(gtfs, &geometries);
        let weather_index = WeatherIndex::new(weather);
        let stop_station = gtfs
            .stops
            .iter()
            .filter_map(|s| {
                let p = GeoPoint {
                    lat: s.stop_lat,
                    lon: s.stop_lon,
                };
                weather_index.nearest_station(p).map(|i| (s.stop_id.clone(), i))
            })
            .collect();
        let shape_segments: HashMap<&str, Arc<Vec<usize>>> = gtfs
            .shapes
            .iter()
            .map(|(id, pts)| (id.as_str(), Arc::new(grid.segments_along(pts))))
            .collect();
        let trip_segments = gtfs
            .trips
            .iter()
            .filter_map(|t| shape_segments.get(t.shape_id.as_str()).map(|s| (t.trip_id.clone(), s.clone())))
            .collect();
        let traffic_index = TrafficIndex::new(&grid, traffic);
        Self {
            stop_station,
            weather: weather_index,
            trip_segments,
            traffic: traffic_index,
            calendar: calendar.iter().map(|c| (c.date, c.clone())).collect(),
            grid,
        }
    }

    pub fn station_for_stop(&self, stop_id: &str) -> Option<&str> {
        self.stop_station.get(stop_id).map(|&i| self.weather.station_id(i))
    }

    pub fn segments_for_trip(&self, trip_id: &str) -> Option<&[usize]> {
        self.trip_segments.get(trip_id).map(|v| v.as_slice())
    }
}

fn tally(issues: Vec<Option<(Issue, String)>>) -> Diagnostics {
    let mut d = Diagnostics::default();
    for (issue, detail) in issues.into_iter().flatten() {
        d.record(issue, || detail);
    }
    d
}

fn describe(r: &ApcRecord) -> String {
    format!("{} {} stop {}", r.transit_date, r.trip_id, r.stop_id)
}

pub fn join_weather(records: &mut [FusedRecord], ctx: &FuseContext) -> Diagnostics {
    let issues = records
        .par_iter_mut()
        .map(|r| {
            let Some(&station) = ctx.stop_station.get(&r.apc.stop_id) else {
                return Some((Issue::UnknownStop, describe(&r.apc)));
            };
            match ctx.weather.lookup(station, r.apc.scheduled_arrival) {
                Some(([t, h, p], fallback)) => {
                    r.temperature = Some(t);
                    r.humidity = Some(h);
                    r.precipitation = Some(p);
                    fallback.then(|| (Issue::WeatherFallback, describe(&r.apc)))
                }
                None => {
                    r.temperature = None;
                    r.humidity = None;
                    r.precipitation = None;
                    Some((Issue::WeatherMissing, describe(&r.apc)))
                }
            }
        })
        .collect();
    tally(issues)
}

pub fn join_traffic(records: &mut [FusedRecord], ctx: &FuseContext) -> Diagnostics {
    let issues = records
        .par_iter_mut()
        .map(|r| {
            let Some(segments) = ctx.segments_for_trip(&r.apc.trip_id) else {
                r.traffic_speed = None;
                return Some((Issue::UnknownShape, describe(&r.apc)));
            };
            let (mut sum, mut n, mut fallback) = (0.0, 0usize, false);
            for &s in segments {
                if let Some((v, fb)) = ctx.traffic.lookup(s, r.apc.scheduled_arrival) {
                    sum += v;
                    n += 1;
                    fallback |= fb;
                }
            }
            if n == 0 {
                r.traffic_speed = None;
                return Some((Issue::TrafficMissing, describe(&r.apc)));
            }
            r.traffic_speed = Some(sum / n as f64);
            fallback.then(|| (Issue::TrafficFallback, describe(&r.apc)))
        })
        .collect();
    tally(issues)
}

pub fn join_calendar(records: &mut [FusedRecord], ctx: &FuseContext) -> Diagnostics {
    let issues = records
        .par_iter_mut()
        .map(|r| match ctx.calendar.get(&r.apc.transit_date) {
            Some(c) => {
                r.is_holiday = c.is_national_holiday;
                r.is_school_break = c.is_school_break;
                None
            }
            None => {
                r.is_holiday = false;
                r.is_school_break = false;
                Some((Issue::CalendarMissing, r.apc.transit_date.to_string()))
            }
        })
        .collect();
    tally(issues)
}

/// Seconds since the previous vehicle reached the same stop on the same
/// route, direction and service date. The first vehicle and records without
/// an actual arrival get no headway.
pub fn compute_actual_headway(records: &mut [FusedRecord]) {
    let mut order: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].apc.actual_arrival.is_some())
        .collect();
    order.par_sort_by(|&a, &b| {
        let (x, y) = (&records[a].apc, &records[b].apc);
        (&x.transit_date, &x.route_id, &x.direction, &x.stop_id, x.actual_arrival, &x.trip_id, a).cmp(&(
            &y.transit_date,
            &y.route_id,
            &y.direction,
            &y.stop_id,
            y.actual_arrival,
            &y.trip_id,
            b,
        ))
    });
    for r in records.iter_mut() {
        r.actual_headway = None;
    }
    for w in order.windows(2) {
        let (prev, cur) = (&records[w[0]].apc, &records[w[1]].apc);
        let same_group = prev.transit_date == cur.transit_date
            && prev.route_id == cur.route_id
            && prev.direction == cur.direction
            && prev.stop_id == cur.stop_id;
        if same_group {
            if let (Some(a), Some(b)) = (prev.actual_arrival, cur.actual_arrival) {
                records[w[1]].actual_headway = Some((b - a).num_seconds() as f64);
            }
        }
    }
}

/// Runs every join on clean records.
pub fn fuse_records(records: Vec<ApcRecord>, ctx: &FuseContext) -> (Vec<FusedRecord>, Diagnostics) {
    let mut fused: Vec<FusedRecord> = records.into_par_iter().map(FusedRecord::new).collect();
    let mut diag = join_weather(&mut fused, ctx);
    diag.merge(join_traffic(&mut fused, ctx));
    diag.merge(join_calendar(&mut fused, ctx));
    compute_actual_headway(&mut fused);
    (fused, diag)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn load_of(r: &ApcRecord) -> u32 {
    r.load.unwrap_or(0).max(0) as u32
}

/// One trip row: maximum load, mean weather, headway and traffic, and the
/// first stop's values for everything else. `None` for an empty group.
pub fn aggregate_trip(records: &[&FusedRecord], window_minutes: u32) -> Result<Option<TripAggregate>> {
    let Some(first) = records.iter().min_by_key(|r| (r.apc.stop_sequence, r.apc.scheduled_arrival)) else {
        return Ok(None);
    };
    let a = &first.apc;
    let max_load = records.iter().map(|r| load_of(&r.apc)).max().unwrap_or(0);
    let end_time = records.iter().map(|r| r.apc.arrival()).max().unwrap_or(a.scheduled_arrival);
    Ok(Some(TripAggregate {
        key: TripKey {
            transit_date: a.transit_date,
            trip_id: a.trip_id.clone(),
            route_id: a.route_id.clone(),
            direction: a.direction.clone(),
            time_window: time_window_of(a.scheduled_arrival, window_minutes as i64)?,
        },
        block_id: a.block_id.clone(),
        n_stops: records.len() as u32,
        scheduled_start: a.scheduled_arrival,
        end_time,
        mean_temperature: mean(records.iter().filter_map(|r| r.temperature)),
        mean_humidity: mean(records.iter().filter_map(|r| r.humidity)),
        mean_precipitation: mean(records.iter().filter_map(|r| r.precipitation)),
        mean_scheduled_headway: mean(records.iter().map(|r| r.apc.scheduled_headway as f64)).unwrap_or(0.0),
        mean_actual_headway: mean(records.iter().filter_map(|r| r.actual_headway)),
        mean_traffic_speed: mean(records.iter().filter_map(|r| r.traffic_speed)),
        max_load,
        target_bin: bin_trip_load(max_load as i64)?.level,
        is_holiday: first.is_holiday,
        is_school_break: first.is_school_break,
        zero_load_at_trip_end: a.zero_load_at_trip_end,
        calendar: CalendarParts::of(a.transit_date, a.scheduled_arrival),
    }))
}

/// Groups records per (transit date, trip id) and aggregates each group.
/// Rows come out ordered by (date, scheduled start, trip id).
pub fn aggregate_trips(records: &[FusedRecord], window_minutes: u32) -> Result<Vec<TripAggregate>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.par_sort_by(|&a, &b| {
        let (x, y) = (&records[a].apc, &records[b].apc);
        (x.transit_date, &x.trip_id, x.stop_sequence, a).cmp(&(y.transit_date, &y.trip_id, y.stop_sequence, b))
    });
    let groups: Vec<&[usize]> = order
        .chunk_by(|&a, &b| records[a].apc.transit_date == records[b].apc.transit_date && records[a].apc.trip_id == records[b].apc.trip_id)
        .collect();
    let mut trips = groups
        .par_iter()
        .map(|g| {
            let group: Vec<&FusedRecord> = g.iter().map(|&i| &records[i]).collect();
            aggregate_trip(&group, window_minutes)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    trips.par_sort_by(|a, b| {
        (a.key.transit_date, a.scheduled_start, &a.key.trip_id).cmp(&(b.key.transit_date, b.scheduled_start, &b.key.trip_id))
    });
    Ok(trips)
}

/// Grouping key of a stop row. The window comes from the best known arrival.
pub fn stop_group_key(r: &ApcRecord, window_minutes: u32) -> Result<(NaiveDate, String, String, String, u32)> {
    Ok((
        r.transit_date,
        r.route_id.clone(),
        r.direction.clone(),
        r.stop_id.clone(),
        time_window_of(r.arrival(), window_minutes as i64)?,
    ))
}

/// Stop rows: loads summed over each (date, route, direction, stop, window)
/// group with context averaged. Ordered by the group key.
pub fn aggregate_stops(records: &[FusedRecord], window_minutes: u32) -> Result<Vec<StopObservation>> {
    let windows: Vec<u32> = records
        .par_iter()
        .map(|r| time_window_of(r.apc.arrival(), window_minutes as i64))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let key = |i: usize| {
        let r = &records[i].apc;
        (r.transit_date, &r.route_id, &r.direction, &r.stop_id, windows[i])
    };
    order.par_sort_by(|&a, &b| {
        (key(a), records[a].apc.arrival(), &records[a].apc.trip_id, a).cmp(&(
            key(b),
            records[b].apc.arrival(),
            &records[b].apc.trip_id,
            b,
        ))
    });
    let mut trip_start: HashMap<(NaiveDate, &str), NaiveDateTime> = HashMap::new();
    for r in records {
        let e = trip_start
            .entry((r.apc.transit_date, r.apc.trip_id.as_str()))
            .or_insert(r.apc.scheduled_arrival);
        *e = (*e).min(r.apc.scheduled_arrival);
    }
    let groups: Vec<&[usize]> = order.chunk_by(|&a, &b| key(a) == key(b)).collect();
    groups
        .par_iter()
        .map(|g| {
            let first = &records[g[0]];
            let a = &first.apc;
            let group = || g.iter().map(|&i| &records[i]);
            let summed_load: u32 = group().map(|r| load_of(&r.apc)).sum();
            Ok(StopObservation {
                transit_date: a.transit_date,
                route_id: a.route_id.clone(),
                direction: a.direction.clone(),
                stop_id: a.stop_id.clone(),
                stop_sequence: a.stop_sequence,
                time_window: windows[g[0]],
                block_id: a.block_id.clone(),
                trip_id: a.trip_id.clone(),
                trip_start: trip_start[&(a.transit_date, a.trip_id.as_str())],
                arrival: a.arrival(),
                n_records: g.len() as u32,
                summed_load,
                target_bin: bin_stop_load(summed_load as i64)?.level,
                temperature: mean(group().filter_map(|r| r.temperature)),
                humidity: mean(group().filter_map(|r| r.humidity)),
                precipitation: mean(group().filter_map(|r| r.precipitation)),
                traffic_speed: mean(group().filter_map(|r| r.traffic_speed)),
                scheduled_headway: mean(group().map(|r| r.apc.scheduled_headway as f64)).unwrap_or(0.0),
                actual_headway: mean(group().filter_map(|r| r.actual_headway)),
                is_holiday: first.is_holiday,
                is_school_break: first.is_school_break,
                zero_load_at_trip_end: a.zero_load_at_trip_end,
                calendar: CalendarParts::of(a.transit_date, a.arrival()),
            })
        })
        .collect()
}

/// Row layout of trips.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TripRow {
    transit_date: NaiveDate,
    trip_id: String,
    route_id: String,
    direction: String,
    time_window: u32,
    block_id: String,
    n_stops: u32,
    scheduled_start: NaiveDateTime,
    end_time: NaiveDateTime,
    mean_temperature: Option<f64>,
    mean_humidity: Option<f64>,
    mean_precipitation: Option<f64>,
    mean_scheduled_headway: f64,
    mean_actual_headway: Option<f64>,
    mean_traffic_speed: Option<f64>,
    max_load: u32,
    target_bin: usize,
    is_holiday: bool,
    is_school_break: bool,
    zero_load_at_trip_end: bool,
    year: i32,
    month: u32,
    day: u32,
    day_of_week: u32,
    hour: u32,
}

impl From<&TripAggregate> for TripRow {
    fn from(t: &TripAggregate) -> Self {
        Self {
            transit_date: t.key.transit_date,
            trip_id: t.key.trip_id.clone(),
            route_id: t.key.route_id.clone(),
            direction: t.key.direction.clone(),
            time_window: t.key.time_window,
            block_id: t.block_id.clone(),
            n_stops: t.n_stops,
            scheduled_start: t.scheduled_start,
            end_time: t.end_time,
            mean_temperature: t.mean_temperature,
            mean_humidity: t.mean_humidity,
            mean_precipitation: t.mean_precipitation,
            mean_scheduled_headway: t.mean_scheduled_headway,
            mean_actual_headway: t.mean_actual_headway,
            mean_traffic_speed: t.mean_traffic_speed,
            max_load: t.max_load,
            target_bin: t.target_bin.index(),
            is_holiday: t.is_holiday,
            is_school_break: t.is_school_break,
            zero_load_at_trip_end: t.zero_load_at_trip_end,
            year: t.calendar.year,
            month: t.calendar.month,
            day: t.calendar.day,
            day_of_week: t.calendar.day_of_week,
            hour: t.calendar.hour,
        }
    }
}

impl TripRow {
    fn into_aggregate(self) -> Option<TripAggregate> {
        Some(TripAggregate {
            key: TripKey {
                transit_date: self.transit_date,
                trip_id: self.trip_id,
                route_id: self.route_id,
                direction: self.direction,
                time_window: self.time_window,
            },
            block_id: self.block_id,
            n_stops: self.n_stops,
            scheduled_start: self.scheduled_start,
            end_time: self.end_time,
            mean_temperature: self.mean_temperature,
            mean_humidity: self.mean_humidity,
            mean_precipitation: self.mean_precipitation,
            mean_scheduled_headway: self.mean_scheduled_headway,
            mean_actual_headway: self.mean_actual_headway,
            mean_traffic_speed: self.mean_traffic_speed,
            max_load: self.max_load,
            target_bin: LoadLevel::from_index(self.target_bin)?,
            is_holiday: self.is_holiday,
            is_school_break: self.is_school_break,
            zero_load_at_trip_end: self.zero_load_at_trip_end,
            calendar: CalendarParts {
                year: self.year,
                month: self.month,
                day: self.day,
                day_of_week: self.day_of_week,
                hour: self.hour,
            },
        })
    }
}

/// Row layout of stops.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StopRow {
    transit_date: NaiveDate,
    route_id: String,
    direction: String,
    stop_id: String,
    stop_sequence: u32,
    time_window: u32,
    block_id: String,
    trip_id: String,
    trip_start: NaiveDateTime,
    arrival: NaiveDateTime,
    n_records: u32,
    summed_load: u32,
    target_bin: usize,
    temperature: Option<f64>,
    humidity: Option<f64>,
    precipitation: Option<f64>,
    traffic_speed: Option<f64>,
    scheduled_headway: f64,
    actual_headway: Option<f64>,
    is_holiday: bool,
    is_school_break: bool,
    zero_load_at_trip_end: bool,
    year: i32,
    month: u32,
    day: u32,
    day_of_week: u32,
    hour: u32,
}

impl From<&StopObservation> for StopRow {
    fn from(s: &StopObservation) -> Self {
        Self {
            transit_date: s.transit_date,
            route_id: s.route_id.clone(),
            direction: s.direction.clone(),
            stop_id: s.stop_id.clone(),
            stop_sequence: s.stop_sequence,
            time_window: s.time_window,
            block_id: s.block_id.clone(),
            trip_id: s.trip_id.clone(),
            trip_start: s.trip_start,
            arrival: s.arrival,
            n_records: s.n_records,
            summed_load: s.summed_load,
            target_bin: s.target_bin.index(),
            temperature: s.temperature,
            humidity: s.humidity,
            precipitation: s.precipitation,
            traffic_speed: s.traffic_speed,
            scheduled_headway: s.scheduled_headway,
            actual_headway: s.actual_headway,
            is_holiday: s.is_holiday,
            is_school_break: s.is_school_break,
            zero_load_at_trip_end: s.zero_load_at_trip_end,
            year: s.calendar.year,
            month: s.calendar.month,
            day: s.calendar.day,
            day_of_week: s.calendar.day_of_week,
            hour: s.calendar.hour,
        }
    }
}

impl StopRow {
    fn into_observation(self) -> Option<StopObservation> {
        Some(StopObservation {
            transit_date: self.transit_date,
            route_id: self.route_id,
            direction: self.direction,
            stop_id: self.stop_id,
            stop_sequence: self.stop_sequence,
            time_window: self.time_window,
            block_id: self.block_id,
            trip_id: self.trip_id,
            trip_start: self.trip_start,
            arrival: self.arrival,
            n_records: self.n_records,
            summed_load: self.summed_load,
            target_bin: LoadLevel::from_index(self.target_bin)?,
            temperature: self.temperature,
            humidity: self.humidity,
            precipitation: self.precipitation,
            traffic_speed: self.traffic_speed,
            scheduled_headway: self.scheduled_headway,
            actual_headway: self.actual_headway,
            is_holiday: self.is_holiday,
            is_school_break: self.is_school_break,
            zero_load_at_trip_end: self.zero_load_at_trip_end,
            calendar: CalendarParts {
                year: self.year,
                month: self.month,
                day: self.day,
                day_of_week: self.day_of_week,
                hour: self.hour,
            },
        })
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>, header_comment: Option<&str>) -> Result<()> {
    let mut w = create_writer(path, header_comment)?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<R, T>(path: &Path, convert: impl Fn(R) -> Option<T>) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let mut reader = open_reader(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<R>().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        out.push(convert(row).ok_or_else(|| Error::FatalRow {
            path: path.to_path_buf(),
            row: i + 1,
            reason: "target_bin outside 0..=4".into(),
        })?);
    }
    Ok(out)
}

/// Column order: transit_date, trip_id, route_id, direction, time_window,
/// block_id, n_stops, scheduled_start, end_time, mean_temperature,
/// mean_humidity, mean_precipitation, mean_scheduled_headway,
/// mean_actual_headway, mean_traffic_speed, max_load, target_bin (0-4),
/// is_holiday, is_school_break, zero_load_at_trip_end, year, month, day,
/// day_of_week (Monday = 0), hour.
pub fn write_trips_csv(path: &Path, trips: &[TripAggregate], header_comment: Option<&str>) -> Result<()> {
    write_rows(path, trips.iter().map(TripRow::from), header_comment)
}

pub fn read_trips_csv(path: &Path) -> Result<Vec<TripAggregate>> {
    read_rows(path, TripRow::into_aggregate)
}

/// Column order: transit_date, route_id, direction, stop_id, stop_sequence,
/// time_window, block_id, trip_id, trip_start, arrival, n_records,
/// summed_load, target_bin (0-4), temperature, humidity, precipitation,
/// traffic_speed, scheduled_headway, actual_headway, is_holiday,
/// is_school_break, zero_load_at_trip_end, year, month, day, day_of_week,
/// hour.
pub fn write_stops_csv(path: &Path, stops: &[StopObservation], header_comment: Option<&str>) -> Result<()> {
    write_rows(path, stops.iter().map(StopRow::from), header_comment)
}

pub fn read_stops_csv(path: &Path) -> Result<Vec<StopObservation>> {
    read_rows(path, StopRow::into_observation)
}
