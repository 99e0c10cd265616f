//! Statistical comparison models.
//!
//! The trip baseline bins the largest past maximum load of matching trips
//! within a lookback window. At stop level, the rolling baseline repeats the
//! current stop's bin and the statistical baseline bins the mean or maximum
//! of the stop's past loads. All lookups read only dates strictly before the
//! query date; when nothing matches, the baseline abstains (`None`).

use std::collections::HashMap;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::domain::{BinScheme, LoadLevel, StopObservation, TripAggregate};

/// Matching key: route, direction, time window, weekday and, at stop
/// level, the stop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryKey {
    pub route_id: String,
    pub direction: String,
    pub time_window: u32,
    pub day_of_week: u32,
    pub stop_id: Option<String>,
}

impl HistoryKey {
    pub fn of_trip(t: &TripAggregate) -> Self {
        Self {
            route_id: t.key.route_id.clone(),
            direction: t.key.direction.clone(),
            time_window: t.key.time_window,
            day_of_week: t.calendar.day_of_week,
            stop_id: None,
        }
    }

    pub fn of_stop(o: &StopObservation) -> Self {
        Self {
            route_id: o.route_id.clone(),
            direction: o.direction.clone(),
            time_window: o.time_window,
            day_of_week: o.calendar.day_of_week,
            stop_id: Some(o.stop_id.clone()),
        }
    }
}

/// Past loads per key, sorted by date. Built once, then read-only.
#[derive(Debug, Clone, Default)]
pub struct HistoryIndex {
    entries: HashMap<HistoryKey, Vec<(NaiveDate, u32)>>,
}

impl HistoryIndex {
    pub fn from_entries(items: impl IntoIterator<Item = (HistoryKey, NaiveDate, u32)>) -> Self {
        let mut entries: HashMap<HistoryKey, Vec<(NaiveDate, u32)>> = HashMap::new();
        for (k, d, load) in items {
            entries.entry(k).or_default().push((d, load));
        }
        for v in entries.values_mut() {
            v.sort_unstable();
        }
        Self { entries }
    }

    /// Trip maximum loads.
    pub fn from_trips(trips: &[TripAggregate]) -> Self {
        Self::from_entries(trips.iter().map(|t| (HistoryKey::of_trip(t), t.key.transit_date, t.max_load)))
    }

    /// Stop summed loads.
    pub fn from_stops(stops: &[StopObservation]) -> Self {
        Self::from_entries(stops.iter().map(|o| (HistoryKey::of_stop(o), o.transit_date, o.summed_load)))
    }

    pub fn n_keys(&self) -> usize {
        self.entries.len()
    }

    /// Entries dated in `[since, before)`; `since = None` reaches back to the
    /// start of the history.
    pub fn loads(&self, key: &HistoryKey, before: NaiveDate, since: Option<NaiveDate>) -> &[(NaiveDate, u32)] {
        let Some(v) = self.entries.get(key) else {
            return &[];
        };
        let hi = v.partition_point(|(d, _)| *d < before);
        let lo = since.map_or(0, |s| v[..hi].partition_point(|(d, _)| *d < s));
        &v[lo..hi]
    }
}

/// Largest maximum load among matching trips exactly `lookback_weeks` weeks
/// before the trip's date.
pub fn trip_baseline_load(history: &HistoryIndex, trip: &TripAggregate, lookback_weeks: u32) -> Option<u32> {
    let day = trip.key.transit_date.checked_sub_days(Days::new(7 * lookback_weeks as u64))?;
    let past = history.loads(&HistoryKey::of_trip(trip), day.succ_opt()?, Some(day));
    past.iter().map(|&(_, l)| l).max()
}

/// Bin of [`trip_baseline_load`].
pub fn trip_baseline(history: &HistoryIndex, trip: &TripAggregate, lookback_weeks: u32) -> Option<LoadLevel> {
    trip_baseline_load(history, trip, lookback_weeks).map(|m| BinScheme::Trip.bin(m).level)
}

/// The current stop's bin for the next stop; abstains further ahead.
pub fn rolling_stop_baseline(current: LoadLevel, horizon: usize) -> Option<LoadLevel> {
    (horizon == 1).then_some(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMode {
    Mean,
    Max,
}

impl StatMode {
    pub fn name(self) -> &'static str {
        match self {
            StatMode::Mean => "mean",
            StatMode::Max => "max",
        }
    }
}

/// Integer mean, rounded half up.
pub fn mean_half_up(values: &[u32]) -> Option<u32> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as u64;
    let sum: u64 = values.iter().map(|&v| v as u64).sum();
    Some(((2 * sum + n) / (2 * n)) as u32)
}

/// Bin of the mean or maximum of the stop's past loads in its matching
/// (route, direction, window, weekday) slot.
pub fn statistical_stop_baseline(history: &HistoryIndex, obs: &StopObservation, mode: StatMode) -> Option<LoadLevel> {
    let past: Vec<u32> = history
        .loads(&HistoryKey::of_stop(obs), obs.transit_date, None)
        .iter()
        .map(|&(_, l)| l)
        .collect();
    let v = match mode {
        StatMode::Mean => mean_half_up(&past)?,
        StatMode::Max => *past.iter().max()?,
    };
    Some(BinScheme::Stop.bin(v).level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CalendarParts, TripKey};
    use chrono::{Datelike, NaiveDateTime};
    use proptest::prelude::*;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, 1).unwrap() + Days::new(d as u64)
    }

    fn at(d: NaiveDate) -> NaiveDateTime {
        d.and_hms_opt(8, 0, 0).unwrap()
    }

    fn trip(d: NaiveDate, load: u32) -> TripAggregate {
        TripAggregate {
            key: TripKey {
                transit_date: d,
                trip_id: format!("t{}", d),
                route_id: "55".into(),
                direction: "NORTH".into(),
                time_window: 16,
            },
            block_id: "b".into(),
            n_stops: 10,
            scheduled_start: at(d),
            end_time: at(d),
            mean_temperature: None,
            mean_humidity: None,
            mean_precipitation: None,
            mean_scheduled_headway: 900.0,
            mean_actual_headway: None,
            mean_traffic_speed: None,
            max_load: load,
            target_bin: BinScheme::Trip.bin(load).level,
            is_holiday: false,
            is_school_break: false,
            zero_load_at_trip_end: true,
            calendar: CalendarParts::of(d, at(d)),
        }
    }

    fn stop(d: NaiveDate, load: u32) -> StopObservation {
        StopObservation {
            transit_date: d,
            route_id: "3".into(),
            direction: "0".into(),
            stop_id: "s1".into(),
            stop_sequence: 4,
            time_window: 30,
            block_id: "b".into(),
            trip_id: "t".into(),
            trip_start: at(d),
            arrival: at(d),
            n_records: 1,
            summed_load: load,
            target_bin: BinScheme::Stop.bin(load).level,
            temperature: None,
            humidity: None,
            precipitation: None,
            traffic_speed: None,
            scheduled_headway: 600.0,
            actual_headway: None,
            is_holiday: false,
            is_school_break: false,
            zero_load_at_trip_end: true,
            calendar: CalendarParts::of(d, at(d)),
        }
    }

    #[test]
    fn trip_baseline_bins_the_past_maximum() {
        let q = trip(day(28), 0);
        let h = HistoryIndex::from_trips(&[trip(day(21), 5), trip(day(14), 11), trip(day(14), 2)]);
        assert_eq!(trip_baseline(&h, &q, 2), Some(LoadLevel::Medium));
        assert_eq!(trip_baseline(&h, &q, 1), Some(LoadLevel::Low));
        let h = HistoryIndex::from_trips(&[trip(day(21), 60)]);
        assert_eq!(trip_baseline(&h, &q, 1), Some(LoadLevel::High));
        assert_eq!(trip_baseline(&HistoryIndex::default(), &q, 4), None);
    }

    #[test]
    fn trip_baseline_matches_weekday_and_window() {
        let q = trip(day(28), 0);
        let mut other_day = trip(day(27), 80);
        other_day.calendar = CalendarParts::of(day(27), at(day(27)));
        let mut other_window = trip(day(21), 80);
        other_window.key.time_window = 17;
        let h = HistoryIndex::from_trips(&[other_day, other_window, trip(day(21), 3)]);
        assert_eq!(trip_baseline(&h, &q, 1), Some(LoadLevel::Low));
    }

    #[test]
    fn lookback_window_edges() {
        let q = trip(day(28), 0);
        // Only the day exactly k weeks back counts; nearer weeks and the
        // same day do not.
        let h = HistoryIndex::from_trips(&[trip(day(0), 90), trip(day(28), 90), trip(day(21), 1)]);
        assert_eq!(trip_baseline(&h, &q, 4), Some(LoadLevel::VeryHigh));
        assert_eq!(trip_baseline(&h, &q, 1), Some(LoadLevel::Low));
        assert_eq!(trip_baseline(&h, &q, 2), None);
    }

    #[test]
    fn rolling_abstains_beyond_next_stop() {
        assert_eq!(rolling_stop_baseline(LoadLevel::Low, 1), Some(LoadLevel::Low));
        assert_eq!(rolling_stop_baseline(LoadLevel::VeryHigh, 1), Some(LoadLevel::VeryHigh));
        assert_eq!(rolling_stop_baseline(LoadLevel::Medium, 2), None);
    }

    #[test]
    fn statistical_baseline_modes() {
        let h = HistoryIndex::from_stops(&[stop(day(0), 4), stop(day(7), 6)]);
        let q = stop(day(14), 0);
        assert_eq!(statistical_stop_baseline(&h, &q, StatMode::Mean), Some(LoadLevel::Low));
        assert_eq!(statistical_stop_baseline(&h, &q, StatMode::Max), Some(LoadLevel::Medium));
        let mut unseen = q.clone();
        unseen.stop_id = "s9".into();
        assert_eq!(statistical_stop_baseline(&h, &unseen, StatMode::Mean), None);
        assert_eq!(mean_half_up(&[5, 6]), Some(6));
        assert_eq!(mean_half_up(&[5, 5, 6]), Some(5));
    }

    proptest! {
        #[test]
        fn future_records_never_change_baselines(
            past in prop::collection::vec((0u32..28, 0u32..100), 0..20),
            future in prop::collection::vec((28u32..60, 0u32..100), 1..20),
            weeks in prop::sample::select(vec![1u32, 2, 4]),
        ) {
            let q = trip(day(28), 0);
            let qs = stop(day(28), 0);
            let mk_t = |v: &[(u32, u32)]| v.iter().map(|&(d, l)| trip(day(d), l)).collect::<Vec<_>>();
            let mk_s = |v: &[(u32, u32)]| v.iter().map(|&(d, l)| stop(day(d), l)).collect::<Vec<_>>();
            let all: Vec<(u32, u32)> = past.iter().chain(&future).copied().collect();
            let (ht, hta) = (HistoryIndex::from_trips(&mk_t(&past)), HistoryIndex::from_trips(&mk_t(&all)));
            prop_assert_eq!(trip_baseline(&ht, &q, weeks), trip_baseline(&hta, &q, weeks));
            let (hs, hsa) = (HistoryIndex::from_stops(&mk_s(&past)), HistoryIndex::from_stops(&mk_s(&all)));
            for mode in [StatMode::Mean, StatMode::Max] {
                prop_assert_eq!(statistical_stop_baseline(&hs, &qs, mode), statistical_stop_baseline(&hsa, &qs, mode));
            }
        }

        #[test]
        fn trip_baseline_matches_brute_force(
            hist in prop::collection::vec((0u32..56, 0u32..100), 0..30),
            weeks in prop::sample::select(vec![1u32, 2, 4]),
        ) {
            let trips: Vec<TripAggregate> = hist.iter().map(|&(d, l)| trip(day(d), l)).collect();
            let q = trip(day(56), 0);
            let expected = trips
                .iter()
                .filter(|t| t.calendar.day_of_week == q.calendar.day_of_week)
                .filter(|t| {
                    let gap = (q.key.transit_date - t.key.transit_date).num_days();
                    gap == 7 * weeks as i64
                })
                .map(|t| t.max_load)
                .max()
                .map(|m| crate::domain::bin_trip_load(m as i64).unwrap().level);
            prop_assert_eq!(trip_baseline(&HistoryIndex::from_trips(&trips), &q, weeks), expected);
            prop_assert_eq!(q.key.transit_date.weekday(), day(0).weekday());
        }
    }
}
