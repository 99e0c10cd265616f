//! Seeded synthetic city: network, timetable, context data, ground-truth
//! ridership and APC-style corruption.
//!
//! Demand is multiplicative Poisson so every driver the models are expected
//! to pick up (route, hour, month, weekday, holiday, rain and a persistent
//! per-route daily level) is really present in the data:
//!
//! `rate = base[route] * weight[stop] * hour[h] * month[m] * weekday * holiday
//!         * shock[route, day] / (1 + rain_dampening * precipitation)`
//!
//! Weather is a sinusoidal annual and diurnal temperature cycle with a
//! regional rain process. Traffic speed dips at the two rush hours.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clean::ValidityRule;
use crate::domain::ApcRecord;
use crate::error::{Error, Result};
use crate::geo::{LocalProjection, METERS_PER_MILE};
use crate::ingest::{
    CalendarEntry, GeoPoint, GtfsBundle, GtfsRoute, GtfsStop, GtfsStopTime, GtfsTrip,
    TrafficSegmentReading, WeatherObservation, DATE_FORMAT,
};

pub const OUTBOUND: &str = "OUTBOUND";
pub const INBOUND: &str = "INBOUND";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// SD of the symmetric additive integer noise on ons/offs.
    pub count_noise_sd: f64,
    pub p_large_negative_load: f64,
    pub p_count_imbalance: f64,
    pub p_null_arrivals: f64,
    pub p_null_offs: f64,
    pub p_duplicate_trip: f64,
    pub p_shuffle_sequence: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            count_noise_sd: 1.0,
            p_large_negative_load: 0.015,
            p_count_imbalance: 0.015,
            p_null_arrivals: 0.015,
            p_null_offs: 0.015,
            p_duplicate_trip: 0.015,
            p_shuffle_sequence: 0.015,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            count_noise_sd: 0.0,
            p_large_negative_load: 0.0,
            p_count_imbalance: 0.0,
            p_null_arrivals: 0.0,
            p_null_offs: 0.0,
            p_duplicate_trip: 0.0,
            p_shuffle_sequence: 0.0,
        }
    }

    fn rule_probabilities(&self) -> [(ValidityRule, f64); 6] {
        [
            (ValidityRule::R1, self.p_large_negative_load),
            (ValidityRule::R2, self.p_count_imbalance),
            (ValidityRule::R3, self.p_null_arrivals),
            (ValidityRule::R4, self.p_null_offs),
            (ValidityRule::R5, self.p_duplicate_trip),
            (ValidityRule::R6, self.p_shuffle_sequence),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.count_noise_sd >= 0.0 && self.count_noise_sd.is_finite()) {
            return Err(Error::Config("noise.count_noise_sd must be >= 0".into()));
        }
        let mut total = 0.0;
        for (rule, p) in self.rule_probabilities() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("noise probability for {rule} must lie in [0, 1]")));
            }
            total += p;
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "noise probabilities sum to {total}; each trip gets at most one corruption"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_routes: usize,
    pub n_directions_per_route: usize,
    pub min_stops_per_trip: usize,
    pub max_stops_per_trip: usize,
    /// Minutes after service-day midnight; the default span is 04:00 to 01:30 next day.
    pub service_start_minutes: u32,
    pub service_end_minutes: u32,
    pub headway_minutes: u32,
    pub minutes_between_stops: f64,
    pub layover_minutes: u32,
    pub start_date: NaiveDate,
    pub n_days: u32,
    /// Per-route Poisson mean boardings per stop; drawn from
    /// `[base_rate_min, base_rate_max]` when not given explicitly.
    pub route_base_rates: Option<Vec<f64>>,
    pub base_rate_min: f64,
    pub base_rate_max: f64,
    pub hour_multipliers: Vec<f64>,
    pub month_multipliers: Vec<f64>,
    pub weekend_multiplier: f64,
    pub holiday_multiplier: f64,
    pub school_break_multiplier: f64,
    pub rain_dampening: f64,
    /// Log-scale SD of the persistent per-route daily demand level.
    pub daily_shock_sd: f64,
    /// Day-over-day AR(1) coefficient of that level.
    pub daily_shock_persistence: f64,
    /// Fraction of trips that do not force everyone off at the last stop.
    pub through_trip_fraction: f64,
    pub delay_sd_seconds: f64,
    pub n_weather_stations: usize,
    pub n_traffic_segments: usize,
    /// Fraction of 5-minute traffic readings dropped to mimic feed gaps.
    pub traffic_gap_fraction: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    pub network_radius_miles: f64,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_routes: 30,
            n_directions_per_route: 2,
            min_stops_per_trip: 10,
            max_stops_per_trip: 40,
            service_start_minutes: 4 * 60,
            service_end_minutes: 25 * 60 + 30,
            headway_minutes: 90,
            minutes_between_stops: 2.0,
            layover_minutes: 10,
            start_date: NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(),
            n_days: 60,
            route_base_rates: None,
            base_rate_min: 0.3,
            base_rate_max: 3.5,
            hour_multipliers: vec![
                0.3, 0.2, 0.2, 0.2, 0.4, 0.7, 1.2, 1.8, 1.6, 1.1, 0.9, 1.0, 1.1, 1.0, 1.1, 1.4,
                1.8, 1.7, 1.2, 0.9, 0.7, 0.6, 0.5, 0.4,
            ],
            month_multipliers: vec![0.85, 0.9, 1.0, 1.05, 1.05, 0.9, 0.85, 0.95, 1.1, 1.1, 1.0, 0.85],
            weekend_multiplier: 0.65,
            holiday_multiplier: 0.5,
            school_break_multiplier: 0.85,
            rain_dampening: 0.15,
            daily_shock_sd: 0.3,
            daily_shock_persistence: 0.8,
            through_trip_fraction: 0.1,
            delay_sd_seconds: 30.0,
            n_weather_stations: 4,
            n_traffic_segments: 30,
            traffic_gap_fraction: 0.02,
            center_lat: 36.1627,
            center_lon: -86.7816,
            network_radius_miles: 8.0,
            noise: NoiseConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_routes == 0 {
            return cfg("synth.n_routes must be >= 1".into());
        }
        if !(1..=2).contains(&self.n_directions_per_route) {
            return cfg("synth.n_directions_per_route must be 1 or 2".into());
        }
        if self.min_stops_per_trip < 2 || self.min_stops_per_trip > self.max_stops_per_trip {
            return cfg("synth stops-per-trip range must satisfy 2 <= min <= max".into());
        }
        if self.headway_minutes == 0 || self.n_days == 0 {
            return cfg("synth.headway_minutes and synth.n_days must be positive".into());
        }
        let longest = (self.max_stops_per_trip - 1) as f64 * self.minutes_between_stops;
        let span = self.service_end_minutes as f64 - self.service_start_minutes as f64;
        if span < longest {
            return cfg(format!(
                "service span of {span} minutes is shorter than one trip ({longest} minutes)"
            ));
        }
        if self.hour_multipliers.len() != 24 || self.month_multipliers.len() != 12 {
            return cfg("synth needs 24 hour multipliers and 12 month multipliers".into());
        }
        let scalars = [
            self.base_rate_min,
            self.base_rate_max,
            self.weekend_multiplier,
            self.holiday_multiplier,
            self.school_break_multiplier,
            self.rain_dampening,
            self.daily_shock_sd,
            self.delay_sd_seconds,
            self.minutes_between_stops,
        ];
        let multipliers = self.hour_multipliers.iter().chain(&self.month_multipliers);
        if scalars.iter().chain(multipliers).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return cfg("synth rates and multipliers must be finite and >= 0".into());
        }
        if self.base_rate_min > self.base_rate_max {
            return cfg("synth.base_rate_min exceeds base_rate_max".into());
        }
        if let Some(rates) = &self.route_base_rates {
            if rates.len() != self.n_routes || rates.iter().any(|r| !(*r >= 0.0)) {
                return cfg("synth.route_base_rates needs one non-negative rate per route".into());
            }
        }
        for (name, p) in [
            ("daily_shock_persistence", self.daily_shock_persistence),
            ("through_trip_fraction", self.through_trip_fraction),
            ("traffic_gap_fraction", self.traffic_gap_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("synth.{name} must lie in [0, 1]"));
            }
        }
        self.noise.validate()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_days)
            .map(|d| self.start_date + Duration::days(d as i64))
            .collect()
    }
}

/// One scheduled trip of the daily timetable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripPlan {
    pub trip_id: String,
    pub route_index: usize,
    pub route_id: String,
    pub direction: String,
    pub block_id: String,
    pub vehicle_id: String,
    pub shape_id: String,
    /// (stop_id, seconds after service-day midnight)
    pub stops: Vec<(String, u32)>,
    pub zero_load_at_trip_end: bool,
}

impl TripPlan {
    pub fn departure_secs(&self) -> u32 {
        self.stops[0].1
    }

    pub fn arrival_secs(&self) -> u32 {
        self.stops[self.stops.len() - 1].1
    }
}

/// Everything `generate_city` produces: the published datasets plus the
/// hidden demand parameters the day simulator draws from.
#[derive(Debug, Clone)]
pub struct City {
    pub config: SynthConfig,
    pub gtfs: GtfsBundle,
    pub calendar: Vec<CalendarEntry>,
    pub weather: Vec<WeatherObservation>,
    pub traffic: Vec<TrafficSegmentReading>,
    pub trips: Vec<TripPlan>,
    pub route_base_rates: Vec<f64>,
    stop_weights: HashMap<String, f64>,
    /// [route][day index] multiplicative daily level.
    route_day_level: Vec<Vec<f64>>,
    /// Regional precipitation (mm/h) per hour since the first date's midnight.
    regional_rain: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent RNG for one service date, derived from `seed` and the date.
pub fn day_rng(seed: u64, date: NaiveDate) -> ChaCha8Rng {
    let day = date.num_days_from_ce() as u64;
    ChaCha8Rng::seed_from_u64(seed ^ day.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn poisson(rng: &mut impl Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u32).unwrap_or(0)
}

/// Fixed-date US federal holidays plus the floating ones that matter for
/// transit demand.
pub fn is_national_holiday(date: NaiveDate) -> bool {
    let (m, d) = (date.month(), date.day());
    let nth_weekday = |weekday: Weekday, n: u32| {
        date.weekday() == weekday && (d - 1) / 7 + 1 == n
    };
    let last_weekday = |weekday: Weekday| date.weekday() == weekday && d + 7 > days_in_month(date);
    matches!((m, d), (1, 1) | (7, 4) | (11, 11) | (12, 25) | (6, 19))
        || (m == 1 && nth_weekday(Weekday::Mon, 3))
        || (m == 2 && nth_weekday(Weekday::Mon, 3))
        || (m == 5 && last_weekday(Weekday::Mon))
        || (m == 9 && nth_weekday(Weekday::Mon, 1))
        || (m == 11 && nth_weekday(Weekday::Thu, 4))
}

fn days_in_month(date: NaiveDate) -> u32 {
    let (y, m) = (date.year(), date.month());
    let next = if m == 12 {
        NaiveDate::from_ymd_opt(y + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(y, m + 1, 1)
    };
    next.unwrap().pred_opt().unwrap().day()
}

pub fn is_school_break(date: NaiveDate) -> bool {
    let (m, d) = (date.month(), date.day());
    (m == 12 && d >= 20)
        || (m == 1 && d <= 5)
        || (m == 3 && (13..=21).contains(&d))
        || (m == 6 || m == 7)
        || (m == 8 && d <= 5)
        || (m == 11 && (22..=28).contains(&d))
}

fn service_midnight(date: NaiveDate) -> NaiveDateTime {
    date.and_hms_opt(0, 0, 0).unwrap()
}

pub fn generate_city(config: &SynthConfig) -> Result<City> {
    config.validate()?;
    let seed = config.seed;
    let center = GeoPoint {
        lat: config.center_lat,
        lon: config.center_lon,
    };
    let proj = LocalProjection::new(center);
    let radius_m = config.network_radius_miles * METERS_PER_MILE;

    // Network layout.
    let mut rng = stream_rng(seed, 1);
    let mut routes = Vec::new();
    let mut stops = Vec::new();
    let mut shapes = BTreeMap::new();
    let mut route_stops: Vec<Vec<String>> = Vec::new();
    let mut stop_weights = HashMap::new();
    let mut stop_xy: Vec<(f64, f64)> = Vec::new();
    for r in 0..config.n_routes {
        let route_id = format!("R{:02}", r + 1);
        routes.push(GtfsRoute {
            route_id: route_id.clone(),
            route_short_name: format!("{}", r + 1),
        });
        let n_stops = rng.random_range(config.min_stops_per_trip..=config.max_stops_per_trip);
        let angle = std::f64::consts::TAU * r as f64 / config.n_routes as f64 + rng.random_range(-0.2..0.2);
        let far = radius_m * rng.random_range(0.5..1.0);
        let near = radius_m * rng.random_range(0.05..0.5);
        let a = (far * angle.cos(), far * angle.sin());
        let back = angle + std::f64::consts::PI + rng.random_range(-0.5..0.5);
        let b = (near * back.cos(), near * back.sin());
        let mut ids = Vec::with_capacity(n_stops);
        let mut outbound = Vec::with_capacity(n_stops);
        for k in 0..n_stops {
            let t = k as f64 / (n_stops - 1) as f64;
            let jitter = 150.0;
            let x = a.0 + (b.0 - a.0) * t + rng.random_range(-jitter..jitter);
            let y = a.1 + (b.1 - a.1) * t + rng.random_range(-jitter..jitter);
            let p = proj.unproject(x, y);
            let stop_id = format!("{route_id}-S{:02}", k + 1);
            stop_weights.insert(stop_id.clone(), rng.random_range(0.4..1.6));
            stops.push(GtfsStop {
                stop_id: stop_id.clone(),
                stop_lat: p.lat,
                stop_lon: p.lon,
            });
            stop_xy.push((x, y));
            ids.push(stop_id);
            outbound.push(p);
        }
        shapes.insert(format!("{route_id}-{OUTBOUND}"), outbound.clone());
        if config.n_directions_per_route == 2 {
            outbound.reverse();
            shapes.insert(format!("{route_id}-{INBOUND}"), outbound);
        }
        route_stops.push(ids);
    }
    let route_base_rates = match &config.route_base_rates {
        Some(r) => r.clone(),
        None => (0..config.n_routes)
            .map(|_| rng.random_range(config.base_rate_min..=config.base_rate_max))
            .collect(),
    };

    // Timetable and blocks.
    let mut rng = stream_rng(seed, 2);
    let mut trips = Vec::new();
    let headway = config.headway_minutes;
    for (r, ids) in route_stops.iter().enumerate() {
        let route_id = &routes[r].route_id;
        let run = ((ids.len() - 1) as f64 * config.minutes_between_stops).ceil() as u32;
        let half = (run + config.layover_minutes).div_ceil(headway) * headway;
        let directions: &[&str] = if config.n_directions_per_route == 2 {
            &[OUTBOUND, INBOUND]
        } else {
            &[OUTBOUND]
        };
        let cycle = half * directions.len() as u32;
        let vehicles = cycle / headway;
        for v in 0..vehicles {
            let block_id = format!("{route_id}-B{:02}", v + 1);
            let vehicle_id = format!("V{}{:02}", r + 1, v + 1);
            let slots_per_half = half / headway;
            let (mut dir_idx, first) = if v < slots_per_half {
                (0usize, v * headway)
            } else {
                (1usize, (v - slots_per_half) * headway)
            };
            let mut dep = config.service_start_minutes + first;
            while dep + run <= config.service_end_minutes {
                let direction = directions[dir_idx % directions.len()];
                let order: Vec<&String> = if direction == OUTBOUND {
                    ids.iter().collect()
                } else {
                    ids.iter().rev().collect()
                };
                let stops = order
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        let secs = dep as f64 * 60.0 + k as f64 * config.minutes_between_stops * 60.0;
                        ((*s).clone(), secs.round() as u32)
                    })
                    .collect();
                trips.push(TripPlan {
                    trip_id: format!("{route_id}-{}-{:04}", &direction[..1], dep),
                    route_index: r,
                    route_id: route_id.clone(),
                    direction: direction.to_string(),
                    block_id: block_id.clone(),
                    vehicle_id: vehicle_id.clone(),
                    shape_id: format!("{route_id}-{direction}"),
                    stops,
                    zero_load_at_trip_end: rng.random::<f64>() >= config.through_trip_fraction,
                });
                dep += half;
                dir_idx += 1;
            }
        }
    }
    trips.sort_by(|a, b| (a.route_index, a.departure_secs(), &a.trip_id).cmp(&(b.route_index, b.departure_secs(), &b.trip_id)));

    let mut gtfs_trips = Vec::with_capacity(trips.len());
    let mut stop_times = Vec::new();
    for t in &trips {
        gtfs_trips.push(GtfsTrip {
            route_id: t.route_id.clone(),
            trip_id: t.trip_id.clone(),
            direction_id: if t.direction == OUTBOUND { "0".into() } else { "1".into() },
            block_id: t.block_id.clone(),
            shape_id: t.shape_id.clone(),
        });
        for (k, (stop_id, secs)) in t.stops.iter().enumerate() {
            stop_times.push(GtfsStopTime {
                trip_id: t.trip_id.clone(),
                arrival_secs: *secs,
                stop_id: stop_id.clone(),
                stop_sequence: k as u32 + 1,
            });
        }
    }
    stop_times.sort_by(|a, b| (&a.trip_id, a.stop_sequence).cmp(&(&b.trip_id, b.stop_sequence)));
    let gtfs = GtfsBundle {
        routes,
        trips: gtfs_trips,
        stop_times,
        stops,
        shapes,
    };

    let dates = config.dates();
    let calendar = dates
        .iter()
        .map(|&date| CalendarEntry {
            date,
            is_school_break: is_school_break(date),
            is_national_holiday: is_national_holiday(date),
        })
        .collect();

    // Persistent per-route daily demand level, AR(1) in log space.
    let mut rng = stream_rng(seed, 3);
    let sd = config.daily_shock_sd;
    let phi = config.daily_shock_persistence;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let route_day_level = (0..config.n_routes)
        .map(|_| {
            let mut z = sd * normal.sample(&mut rng);
            dates
                .iter()
                .map(|_| {
                    let level = (z - sd * sd / 2.0).exp();
                    z = phi * z + (1.0 - phi * phi).sqrt() * sd * normal.sample(&mut rng);
                    level
                })
                .collect()
        })
        .collect();

    // Regional rain: two-state Markov chain per hour, one extra day for
    // service running past midnight.
    let mut rng = stream_rng(seed, 4);
    let hours = (dates.len() + 1) * 24;
    let intensity = Exp::new(0.5).unwrap();
    let mut raining = false;
    let mut regional_rain = Vec::with_capacity(hours);
    for _ in 0..hours {
        let flip: f64 = rng.random();
        raining = if raining { flip >= 0.2 } else { flip < 0.03 };
        regional_rain.push(if raining { intensity.sample(&mut rng) } else { 0.0 });
    }

    let first_midnight = service_midnight(config.start_date);
    let weather = generate_weather(config, &proj, radius_m, &regional_rain, first_midnight);
    let traffic = generate_traffic(config, &proj, &stop_xy, &regional_rain, first_midnight);

    Ok(City {
        config: config.clone(),
        gtfs,
        calendar,
        weather,
        traffic,
        trips,
        route_base_rates,
        stop_weights,
        route_day_level,
        regional_rain,
    })
}

fn generate_weather(
    config: &SynthConfig,
    proj: &LocalProjection,
    radius_m: f64,
    regional_rain: &[f64],
    first_midnight: NaiveDateTime,
) -> Vec<WeatherObservation> {
    let mut rng = stream_rng(config.seed, 5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let stations: Vec<(String, GeoPoint, f64, f64)> = (0..config.n_weather_stations)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / config.n_weather_stations.max(1) as f64 + 0.3;
            let d = radius_m * rng.random_range(0.2..0.9);
            let p = proj.unproject(d * angle.cos(), d * angle.sin());
            let temp_offset = rng.random_range(-1.0..1.0);
            let rain_scale = rng.random_range(0.6..1.4);
            (format!("W{:02}", i + 1), p, temp_offset, rain_scale)
        })
        .collect();
    let mut out = Vec::with_capacity(stations.len() * regional_rain.len());
    let mut anomaly = vec![0.0; stations.len()];
    for (h, &rain) in regional_rain.iter().enumerate() {
        let ts = first_midnight + Duration::hours(h as i64);
        let doy = ts.ordinal() as f64;
        let hour = (h % 24) as f64;
        for (s, (id, p, offset, rain_scale)) in stations.iter().enumerate() {
            anomaly[s] = 0.9 * anomaly[s] + 0.5 * normal.sample(&mut rng);
            let seasonal = 15.0 + 11.0 * (std::f64::consts::TAU * (doy - 105.0) / 365.25).sin();
            let diurnal = 5.0 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin();
            let temperature = seasonal + diurnal + offset + anomaly[s] - 2.0 * rain.min(3.0);
            let precipitation = rain * rain_scale;
            let humidity = (0.6 - 0.15 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin()
                + 0.25 * (precipitation > 0.0) as u8 as f64)
                .clamp(0.05, 1.0);
            out.push(WeatherObservation {
                station_id: id.clone(),
                latitude: p.lat,
                longitude: p.lon,
                timestamp: ts,
                temperature: round_to(temperature, 2),
                humidity: round_to(humidity, 3),
                precipitation_intensity: round_to(precipitation, 3),
            });
        }
    }
    out
}

fn generate_traffic(
    config: &SynthConfig,
    proj: &LocalProjection,
    stop_xy: &[(f64, f64)],
    regional_rain: &[f64],
    first_midnight: NaiveDateTime,
) -> Vec<TrafficSegmentReading> {
    let mut rng = stream_rng(config.seed, 6);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let segments: Vec<(String, Arc<Vec<GeoPoint>>, f64)> = (0..config.n_traffic_segments)
        .map(|i| {
            let (cx, cy) = stop_xy[rng.random_range(0..stop_xy.len())];
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(0.3..1.2) * METERS_PER_MILE;
            let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            let geometry = vec![
                proj.unproject(cx - dx, cy - dy),
                proj.unproject(cx, cy),
                proj.unproject(cx + dx, cy + dy),
            ];
            let free_flow = rng.random_range(28.0..60.0);
            (format!("G{:03}", i + 1), Arc::new(geometry), free_flow)
        })
        .collect();
    let slots = regional_rain.len() * 12;
    let mut out = Vec::with_capacity(segments.len() * slots);
    for slot in 0..slots {
        let ts = first_midnight + Duration::minutes(slot as i64 * 5);
        let hour = (slot % 288) as f64 / 12.0;
        let rush = (-((hour - 8.0) / 1.0).powi(2)).exp() + (-((hour - 17.5) / 1.2).powi(2)).exp();
        let rain = regional_rain[slot / 12];
        for (id, geometry, free_flow) in &segments {
            let noise = 2.0 * normal.sample(&mut rng);
            let gap = rng.random::<f64>() < config.traffic_gap_fraction;
            if gap {
                continue;
            }
            let speed = (free_flow * (1.0 - 0.35 * rush) * (1.0 - 0.05 * rain.min(4.0)) + noise).max(3.0);
            out.push(TrafficSegmentReading {
                segment_id: id.clone(),
                geometry: geometry.clone(),
                timestamp: ts,
                speed: round_to(speed, 2),
            });
        }
    }
    out
}

fn round_to(v: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    (v * f).round() / f
}

impl City {
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.config.dates()
    }

    fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let idx = (date - self.config.start_date).num_days();
        (0..self.config.n_days as i64).contains(&idx).then_some(idx as usize)
    }

    pub fn rain_at(&self, ts: NaiveDateTime) -> f64 {
        let h = (ts - service_midnight(self.config.start_date)).num_hours();
        usize::try_from(h)
            .ok()
            .and_then(|h| self.regional_rain.get(h).copied())
            .unwrap_or(0.0)
    }

    /// Expected boardings per stop visit before the stop weight, for a
    /// route at a given time.
    pub fn demand_multiplier(&self, route_index: usize, date: NaiveDate, ts: NaiveDateTime) -> f64 {
        use chrono::Timelike;
        let c = &self.config;
        let day = self.day_index(date).unwrap_or(0);
        let mut m = self.route_base_rates[route_index]
            * c.hour_multipliers[ts.hour() as usize]
            * c.month_multipliers[date.month0() as usize]
            * self.route_day_level[route_index][day];
        if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            m *= c.weekend_multiplier;
        }
        if is_national_holiday(date) {
            m *= c.holiday_multiplier;
        }
        if is_school_break(date) {
            m *= c.school_break_multiplier;
        }
        m / (1.0 + c.rain_dampening * self.rain_at(ts))
    }

    pub fn stop_weight(&self, stop_id: &str) -> f64 {
        self.stop_weights.get(stop_id).copied().unwrap_or(1.0)
    }
}

/// Ground-truth stop events for one service day, in (trip, stop) order.
pub fn simulate_service_day(city: &City, date: NaiveDate, rng: &mut impl Rng) -> Result<Vec<ApcRecord>> {
    if city.day_index(date).is_none() {
        return Err(Error::Config(format!(
            "date {} outside the synthetic calendar",
            date.format(DATE_FORMAT)
        )));
    }
    let midnight = service_midnight(date);
    let delay_noise = Normal::new(10.0, city.config.delay_sd_seconds.max(1e-9)).unwrap();
    let mut records = Vec::new();
    for plan in &city.trips {
        let n = plan.stops.len();
        let mut load: i64 = 0;
        let mut delay = 60.0 + 60.0 * rng.random::<f64>();
        let mut last_actual: Option<NaiveDateTime> = None;
        for (k, (stop_id, secs)) in plan.stops.iter().enumerate() {
            let scheduled = midnight + Duration::seconds(*secs as i64);
            delay += delay_noise.sample(rng);
            let mut actual = scheduled + Duration::seconds(delay.round() as i64);
            if let Some(prev) = last_actual {
                actual = actual.max(prev);
            }
            last_actual = Some(actual);

            let last = k + 1 == n;
            let offs = if k == 0 {
                0
            } else if last && plan.zero_load_at_trip_end {
                load
            } else {
                let frac = k as f64 / (n - 1) as f64;
                let p = (0.05 + 0.6 * frac.powf(1.5)).min(1.0);
                Binomial::new(load as u64, p).map(|b| b.sample(rng) as i64).unwrap_or(0)
            };
            let ons = if last {
                0
            } else {
                let mean = city.demand_multiplier(plan.route_index, date, scheduled) * city.stop_weight(stop_id);
                poisson(rng, mean) as i64
            };
            load = load - offs + ons;
            records.push(ApcRecord {
                transit_date: date,
                trip_id: plan.trip_id.clone(),
                block_id: plan.block_id.clone(),
                route_id: plan.route_id.clone(),
                direction: plan.direction.clone(),
                vehicle_id: plan.vehicle_id.clone(),
                stop_id: stop_id.clone(),
                stop_sequence: k as u32 + 1,
                scheduled_arrival: scheduled,
                actual_arrival: Some(actual),
                ons: Some(ons as i32),
                offs: Some(offs as i32),
                load: Some(load as i32),
                scheduled_headway: city.config.headway_minutes * 60,
                zero_load_at_trip_end: plan.zero_load_at_trip_end,
                validity: Default::default(),
            });
        }
    }
    Ok(records)
}

/// Simulates every date in parallel; each date uses its own RNG stream so
/// the result does not depend on scheduling.
pub fn simulate_days(city: &City, dates: &[NaiveDate]) -> Result<Vec<ApcRecord>> {
    let days: Vec<Vec<ApcRecord>> = dates
        .par_iter()
        .map(|&date| simulate_service_day(city, date, &mut day_rng(city.config.seed, date)))
        .collect::<Result<_>>()?;
    Ok(days.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CorruptionEntry {
    pub transit_date: NaiveDate,
    pub trip_id: String,
    /// 0 for the first occurrence of (date, trip_id); duplicates count up.
    pub instance: u32,
    pub rule: ValidityRule,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptionLog {
    pub entries: Vec<CorruptionEntry>,
}

impl CorruptionLog {
    pub fn write_csv(&self, path: &Path, header_comment: Option<&str>) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut body = String::new();
        if let Some(c) = header_comment {
            for line in c.lines() {
                body.push_str("# ");
                body.push_str(line);
                body.push('\n');
            }
        }
        body.push_str("transit_date,trip_id,instance,rule\n");
        for e in &self.entries {
            body.push_str(&format!(
                "{},{},{},{}\n",
                e.transit_date.format(DATE_FORMAT),
                e.trip_id,
                e.instance,
                e.rule
            ));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let bad = || Error::FatalRow {
                path: path.to_path_buf(),
                row: i + 1,
                reason: "malformed corruption log row".into(),
            };
            entries.push(CorruptionEntry {
                transit_date: crate::ingest::parse_date(rec.get(0).ok_or_else(bad)?).ok_or_else(bad)?,
                trip_id: rec.get(1).ok_or_else(bad)?.to_string(),
                instance: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                rule: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            });
        }
        Ok(Self { entries })
    }
}

/// Adds counter noise to every trip and corrupts a random subset of trips so
/// each corrupted trip breaks exactly one validity rule. Input must be
/// grouped by trip in stop order, as produced by [`simulate_service_day`].
pub fn inject_noise(records: &[ApcRecord], noise: &NoiseConfig, rng: &mut impl Rng) -> Result<(Vec<ApcRecord>, CorruptionLog)> {
    noise.validate()?;
    let mut out = Vec::with_capacity(records.len());
    let mut log = CorruptionLog::default();
    let normal = Normal::new(0.0, noise.count_noise_sd.max(1e-12)).unwrap();
    let mut start = 0;
    while start < records.len() {
        let mut end = start + 1;
        while end < records.len()
            && records[end].trip_id == records[start].trip_id
            && records[end].transit_date == records[start].transit_date
        {
            end += 1;
        }
        let mut trip = records[start..end].to_vec();
        if noise.count_noise_sd > 0.0 {
            apply_count_noise(&mut trip, |r| normal.sample(r).round() as i32, rng);
        }

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (rule, p) in noise.rule_probabilities() {
            acc += p;
            if u < acc {
                chosen = Some(rule);
                break;
            }
        }
        let date = trip[0].transit_date;
        let trip_id = trip[0].trip_id.clone();
        let mut duplicate = None;
        let applied = match chosen {
            None => false,
            Some(ValidityRule::R1) => {
                let k = if trip.len() > 1 { rng.random_range(0..trip.len() - 1) } else { 0 };
                trip[k].load = Some(-rng.random_range(6..=40));
                true
            }
            Some(ValidityRule::R2) => {
                let total_ons: i32 = trip.iter().filter_map(|r| r.ons).sum();
                let k = rng.random_range(0..trip.len());
                let extra = total_ons / 2 + 3;
                trip[k].ons = trip[k].ons.map(|v| v + extra);
                true
            }
            Some(ValidityRule::R3) => {
                trip.iter_mut().for_each(|r| r.actual_arrival = None);
                true
            }
            Some(ValidityRule::R4) => {
                trip.iter_mut().for_each(|r| r.offs = None);
                true
            }
            Some(ValidityRule::R5) => {
                duplicate = Some(trip.clone());
                true
            }
            Some(ValidityRule::R6) => {
                let pairs: Vec<(usize, usize)> = (0..trip.len())
                    .flat_map(|i| (i + 1..trip.len()).map(move |j| (i, j)))
                    .filter(|&(i, j)| trip[i].actual_arrival < trip[j].actual_arrival)
                    .collect();
                if pairs.is_empty() {
                    false
                } else {
                    let (i, j) = pairs[rng.random_range(0..pairs.len())];
                    let a = trip[i].actual_arrival;
                    trip[i].actual_arrival = trip[j].actual_arrival;
                    trip[j].actual_arrival = a;
                    true
                }
            }
        };
        if applied {
            let rule = chosen.unwrap();
            log.entries.push(CorruptionEntry {
                transit_date: date,
                trip_id,
                instance: u32::from(rule == ValidityRule::R5),
                rule,
            });
        }
        out.extend(trip);
        if let Some(copy) = duplicate {
            out.extend(copy);
        }
        start = end;
    }
    Ok((out, log))
}

/// Perturbs ons/offs and re-derives the recorded load the way a counter
/// would. Offs are capped so the running load never drops below -5, and a
/// trip that must end empty gets its last alightings forced to match, so
/// counter noise alone never breaks a validity rule.
fn apply_count_noise<R: Rng>(trip: &mut [ApcRecord], mut draw: impl FnMut(&mut R) -> i32, rng: &mut R) {
    let n = trip.len();
    let mut running: i32 = 0;
    for (k, r) in trip.iter_mut().enumerate() {
        let (Some(ons), Some(offs)) = (r.ons, r.offs) else {
            continue;
        };
        let mut ons = (ons + draw(rng)).max(0);
        let mut offs = (offs + draw(rng)).max(0);
        if k + 1 == n && r.zero_load_at_trip_end {
            ons = ons.max(-running);
            offs = running + ons;
        } else {
            offs = offs.min(running + ons + 5);
        }
        running += ons - offs;
        r.ons = Some(ons);
        r.offs = Some(offs);
        r.load = Some(running);
    }
}

/// Writes the synthetic city in the formats the ingest module reads.
pub fn write_city(dir: &Path, city: &City, apc: &[ApcRecord], log: &CorruptionLog, header_comment: Option<&str>) -> Result<()> {
    use crate::ingest::{write_apc_file, write_calendar_file, write_gtfs, write_traffic_file, write_weather_file};
    write_apc_file(&dir.join("apc.csv"), apc, header_comment)?;
    write_weather_file(&dir.join("weather.csv"), &city.weather, header_comment)?;
    write_traffic_file(&dir.join("traffic.csv"), &city.traffic, header_comment)?;
    write_calendar_file(&dir.join("calendar.csv"), &city.calendar, header_comment)?;
    write_gtfs(&dir.join("gtfs"), &city.gtfs)?;
    log.write_csv(&dir.join("corruption_log.csv"), header_comment)
}
