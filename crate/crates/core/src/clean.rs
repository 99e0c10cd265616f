//! Trip-level validity rules and occupancy derivation.
//!
//! Counters report stop events, but validity is decided per trip: one bad
//! event discards the whole trip. Invalid trips are never repaired.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ApcRecord, Validity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ValidityRule {
    /// Some recorded load is below the minimum (default -5).
    R1,
    /// Trip-level ons/offs imbalance above the threshold (default 0.2).
    R2,
    /// Every actual arrival is null.
    R3,
    /// Every offs count is null.
    R4,
    /// Exact duplicate of an earlier trip on the same date.
    R5,
    /// Actual arrivals go backwards along the stop sequence.
    R6,
}

impl ValidityRule {
    pub const ALL: [ValidityRule; 6] = [
        ValidityRule::R1,
        ValidityRule::R2,
        ValidityRule::R3,
        ValidityRule::R4,
        ValidityRule::R5,
        ValidityRule::R6,
    ];

    pub fn description(self) -> &'static str {
        match self {
            ValidityRule::R1 => "recorded occupancy below minimum",
            ValidityRule::R2 => "ons/offs imbalance above threshold",
            ValidityRule::R3 => "all actual arrival times null",
            ValidityRule::R4 => "all offs null",
            ValidityRule::R5 => "duplicate of a prior trip",
            ValidityRule::R6 => "stop events out of chronological order",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for ValidityRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", *self as u8 + 1)
    }
}

impl FromStr for ValidityRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ValidityRule::ALL
            .into_iter()
            .find(|r| r.to_string() == s.trim())
            .ok_or_else(|| Error::Domain(format!("unknown validity rule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RuleSet(u8);

impl RuleSet {
    pub fn insert(&mut self, rule: ValidityRule) {
        self.0 |= rule.bit();
    }

    pub fn contains(self, rule: ValidityRule) -> bool {
        self.0 & rule.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ValidityRule> {
        ValidityRule::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

impl FromIterator<ValidityRule> for RuleSet {
    fn from_iter<I: IntoIterator<Item = ValidityRule>>(iter: I) -> Self {
        let mut s = RuleSet::default();
        iter.into_iter().for_each(|r| s.insert(r));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripVerdict {
    Valid,
    Invalid(RuleSet),
}

impl TripVerdict {
    fn from_rules(rules: RuleSet) -> Self {
        if rules.is_empty() {
            TripVerdict::Valid
        } else {
            TripVerdict::Invalid(rules)
        }
    }

    pub fn is_valid(self) -> bool {
        self == TripVerdict::Valid
    }

    pub fn rules(self) -> RuleSet {
        match self {
            TripVerdict::Valid => RuleSet::default(),
            TripVerdict::Invalid(r) => r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanThresholds {
    /// R1 fires when any recorded load is strictly below this.
    pub min_load: i32,
    /// R2 fires when the imbalance ratio is strictly above this.
    pub max_imbalance: f64,
}

impl Default for CleanThresholds {
    fn default() -> Self {
        Self {
            min_load: -5,
            max_imbalance: 0.2,
        }
    }
}

/// Trip-level conservation error.
///
/// `|Σons - Σoffs - expected_net| / max(Σons, Σoffs, 1)` where the expected
/// net change is zero for trips that must end empty and the recorded final
/// load otherwise. `None` when every offs is null (that is R4's domain); any
/// other missing count makes the error infinite.
pub fn imbalance_ratio(records: &[ApcRecord]) -> Option<f64> {
    if records.iter().all(|r| r.offs.is_none()) {
        return None;
    }
    let mut ons_sum = 0i64;
    let mut offs_sum = 0i64;
    for r in records {
        match (r.ons, r.offs) {
            (Some(on), Some(off)) => {
                ons_sum += on as i64;
                offs_sum += off as i64;
            }
            _ => return Some(f64::INFINITY),
        }
    }
    let last = records.iter().max_by_key(|r| r.stop_sequence)?;
    let expected_net = if last.zero_load_at_trip_end {
        0
    } else {
        last.load.unwrap_or(0) as i64
    };
    let denom = ons_sum.max(offs_sum).max(1) as f64;
    Some((ons_sum - offs_sum - expected_net).abs() as f64 / denom)
}

/// Rules decidable from one trip's own records (everything except R5).
pub fn check_rules(records: &[ApcRecord], thresholds: &CleanThresholds) -> RuleSet {
    let mut rules = RuleSet::default();
    if records.is_empty() {
        rules.insert(ValidityRule::R3);
        return rules;
    }
    if records.iter().any(|r| r.load.is_some_and(|l| l < thresholds.min_load)) {
        rules.insert(ValidityRule::R1);
    }
    if imbalance_ratio(records).is_some_and(|ratio| ratio > thresholds.max_imbalance) {
        rules.insert(ValidityRule::R2);
    }
    if records.iter().all(|r| r.actual_arrival.is_none()) {
        rules.insert(ValidityRule::R3);
    }
    if records.iter().all(|r| r.offs.is_none()) {
        rules.insert(ValidityRule::R4);
    }
    let mut ordered: Vec<&ApcRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.stop_sequence);
    let arrivals: Vec<_> = ordered.iter().filter_map(|r| r.actual_arrival).collect();
    if arrivals.windows(2).any(|w| w[1] < w[0]) {
        rules.insert(ValidityRule::R6);
    }
    rules
}

/// Payload compared for exact-duplicate detection.
type Payload = Vec<(String, u32, Option<i32>, Option<i32>, chrono::NaiveDateTime)>;

fn payload(records: &[ApcRecord]) -> Payload {
    let mut p: Payload = records
        .iter()
        .map(|r| (r.stop_id.clone(), r.stop_sequence, r.ons, r.offs, r.scheduled_arrival))
        .collect();
    p.sort_by_key(|e| e.1);
    p
}

/// Classifies one trip given the earlier-seen trips with the same date and trip id.
pub fn classify_trip(records: &[ApcRecord], earlier: &[&[ApcRecord]], thresholds: &CleanThresholds) -> TripVerdict {
    let mut rules = check_rules(records, thresholds);
    if !records.is_empty() {
        let mine = payload(records);
        if earlier.iter().any(|e| payload(e) == mine) {
            rules.insert(ValidityRule::R5);
        }
    }
    TripVerdict::from_rules(rules)
}

/// All records of one trip occurrence, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TripInstance {
    pub transit_date: NaiveDate,
    pub trip_id: String,
    /// 0 for the first occurrence of (date, trip_id).
    pub instance: u32,
    pub records: Vec<ApcRecord>,
}

/// Groups records by (date, trip_id). A record whose stop_sequence already
/// appeared in an occurrence starts (or joins) a later occurrence, which is
/// how repeated uploads of the same trip are told apart. Occurrences are
/// returned in order of their first record.
pub fn group_trip_instances(records: impl IntoIterator<Item = ApcRecord>) -> Vec<TripInstance> {
    let mut instances: Vec<TripInstance> = Vec::new();
    let mut seen_seqs: Vec<std::collections::HashSet<u32>> = Vec::new();
    let mut by_key: HashMap<(NaiveDate, String), Vec<usize>> = HashMap::new();
    for r in records {
        let slots = by_key.entry((r.transit_date, r.trip_id.clone())).or_default();
        let target = slots.iter().copied().find(|&i| !seen_seqs[i].contains(&r.stop_sequence));
        let idx = match target {
            Some(i) => i,
            None => {
                let i = instances.len();
                instances.push(TripInstance {
                    transit_date: r.transit_date,
                    trip_id: r.trip_id.clone(),
                    instance: slots.len() as u32,
                    records: Vec::new(),
                });
                seen_seqs.push(Default::default());
                slots.push(i);
                i
            }
        };
        seen_seqs[idx].insert(r.stop_sequence);
        instances[idx].records.push(r);
    }
    instances
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub trips_in: usize,
    pub trips_out: usize,
    pub records_in: usize,
    pub records_out: usize,
    /// Trips rejected, counted once per violated rule.
    pub rejected_by_rule: BTreeMap<String, usize>,
    /// Trips rejected, counted once.
    pub rejected_trips: usize,
    pub fraction_clean: f64,
    /// Stops whose derived load had to be clamped at zero.
    pub clamp_events: usize,
}

impl CleanReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rule,description,rejected_trips\n");
        for rule in ValidityRule::ALL {
            let n = self.rejected_by_rule.get(&rule.to_string()).copied().unwrap_or(0);
            s.push_str(&format!("{rule},{},{n}\n", rule.description()));
        }
        s.push_str(&format!("ANY,rejected trips (deduplicated),{}\n", self.rejected_trips));
        s.push_str(&format!("CLEAN,clean trips,{}\n", self.trips_out));
        s.push_str(&format!("TOTAL,trips in,{}\n", self.trips_in));
        s.push_str(&format!("CLAMP,derived loads clamped at zero,{}\n", self.clamp_events));
        s
    }
}

/// One rejected trip occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub transit_date: NaiveDate,
    pub trip_id: String,
    pub instance: u32,
    pub rules: RuleSet,
}

#[derive(Debug, Clone)]
pub struct CleanOutput {
    /// Surviving records, trip by trip in stop order, marked clean.
    pub records: Vec<ApcRecord>,
    pub report: CleanReport,
    pub rejections: Vec<Rejection>,
}

/// Removes every trip with at least one rule violation. Per-trip rules run
/// in parallel; duplicates are resolved in file order, so the later copy is
/// always the one rejected.
pub fn filter_trips(records: Vec<ApcRecord>, thresholds: &CleanThresholds) -> CleanOutput {
    let records_in = records.len();
    let instances = group_trip_instances(records);
    let mut verdicts: Vec<RuleSet> = instances
        .par_iter()
        .map(|t| check_rules(&t.records, thresholds))
        .collect();

    let mut seen: HashMap<(NaiveDate, &str), Vec<Payload>> = HashMap::new();
    for (t, rules) in instances.iter().zip(verdicts.iter_mut()) {
        if t.records.is_empty() {
            continue;
        }
        let p = payload(&t.records);
        let prior = seen.entry((t.transit_date, t.trip_id.as_str())).or_default();
        if prior.contains(&p) {
            rules.insert(ValidityRule::R5);
        } else {
            prior.push(p);
        }
    }

    let mut report = CleanReport {
        trips_in: instances.len(),
        records_in,
        ..Default::default()
    };
    for rule in ValidityRule::ALL {
        report.rejected_by_rule.insert(rule.to_string(), 0);
    }
    let mut rejections = Vec::new();
    let mut kept = Vec::new();
    for (t, rules) in instances.into_iter().zip(verdicts) {
        if rules.is_empty() {
            kept.push(t);
        } else {
            for rule in rules.iter() {
                *report.rejected_by_rule.get_mut(&rule.to_string()).unwrap() += 1;
            }
            rejections.push(Rejection {
                transit_date: t.transit_date,
                trip_id: t.trip_id,
                instance: t.instance,
                rules,
            });
        }
    }
    report.rejected_trips = rejections.len();
    report.trips_out = kept.len();
    report.fraction_clean = if report.trips_in == 0 {
        1.0
    } else {
        report.trips_out as f64 / report.trips_in as f64
    };

    let mut out = Vec::with_capacity(records_in);
    for t in kept {
        let mut recs = t.records;
        recs.sort_by_key(|r| r.stop_sequence);
        recs.iter_mut().for_each(|r| r.validity = Validity::Clean);
        out.extend(recs);
    }
    report.records_out = out.len();
    CleanOutput {
        records: out,
        report,
        rejections,
    }
}

/// Filters, then re-derives every surviving trip's loads from its counts,
/// recording clamp events in the report.
pub fn clean_records(records: Vec<ApcRecord>, thresholds: &CleanThresholds) -> CleanOutput {
    let mut out = filter_trips(records, thresholds);
    let trips = split_trips(std::mem::take(&mut out.records));
    let derived: Vec<(Vec<ApcRecord>, usize)> = trips
        .into_par_iter()
        .map(|mut recs| {
            let clamps = derive_load(&mut recs);
            (recs, clamps)
        })
        .collect();
    for (recs, clamps) in derived {
        out.report.clamp_events += clamps;
        out.records.extend(recs);
    }
    out
}

/// Splits a stream that is already grouped trip by trip.
fn split_trips(records: Vec<ApcRecord>) -> Vec<Vec<ApcRecord>> {
    let mut trips: Vec<Vec<ApcRecord>> = Vec::new();
    for r in records {
        match trips.last_mut() {
            Some(t) if t[0].trip_id == r.trip_id && t[0].transit_date == r.transit_date
                && t.last().is_some_and(|l| l.stop_sequence < r.stop_sequence) =>
            {
                t.push(r)
            }
            _ => trips.push(vec![r]),
        }
    }
    trips
}

/// Recomputes occupancy from boardings and alightings, in stop order:
/// `load_k = max(0, load_{k-1} + ons_k - offs_k)`, starting from zero.
/// Returns how many stops needed the clamp. Marks records clean.
pub fn derive_load(trip: &mut [ApcRecord]) -> usize {
    trip.sort_by_key(|r| r.stop_sequence);
    let mut load: i64 = 0;
    let mut clamps = 0;
    for r in trip.iter_mut() {
        load += r.ons.unwrap_or(0) as i64 - r.offs.unwrap_or(0) as i64;
        if load < 0 {
            load = 0;
            clamps += 1;
        }
        r.load = Some(load as i32);
        r.validity = Validity::Clean;
    }
    clamps
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDateTime};

    fn trip(loads: &[i32]) -> Vec<ApcRecord> {
        let t0 = NaiveDate::from_ymd_opt(2021, 4, 6).unwrap().and_hms_opt(8, 0, 0).unwrap();
        let mut running = 0;
        loads
            .iter()
            .enumerate()
            .map(|(k, &load)| {
                let ons = (load - running).max(0);
                let offs = (running - load).max(0);
                running = load;
                rec(k as u32 + 1, t0 + Duration::minutes(2 * k as i64), Some(ons), Some(offs), Some(load))
            })
            .collect()
    }

    fn rec(seq: u32, at: NaiveDateTime, ons: Option<i32>, offs: Option<i32>, load: Option<i32>) -> ApcRecord {
        ApcRecord {
            transit_date: at.date(),
            trip_id: "T1".into(),
            block_id: "B1".into(),
            route_id: "55".into(),
            direction: "NORTH".into(),
            vehicle_id: "V1".into(),
            stop_id: format!("S{seq}"),
            stop_sequence: seq,
            scheduled_arrival: at,
            actual_arrival: Some(at),
            ons,
            offs,
            load,
            scheduled_headway: 900,
            zero_load_at_trip_end: false,
            validity: Validity::Raw,
        }
    }

    fn verdict(records: &[ApcRecord]) -> TripVerdict {
        classify_trip(records, &[], &CleanThresholds::default())
    }

    #[test]
    fn r1_is_a_strict_bound() {
        let mut t = trip(&[2, 4, 3, 0]);
        t[1].load = Some(-6);
        assert!(verdict(&t).rules().contains(ValidityRule::R1));
        t[1].load = Some(-5);
        assert!(!verdict(&t).rules().contains(ValidityRule::R1));
    }

    #[test]
    fn imbalance_uses_final_load_for_through_trips() {
        // Σons = 10, Σoffs = 5, final load 5.
        let t0 = NaiveDate::from_ymd_opt(2021, 4, 6).unwrap().and_hms_opt(8, 0, 0).unwrap();
        let t = vec![
            rec(1, t0, Some(10), Some(0), Some(10)),
            rec(2, t0 + Duration::minutes(2), Some(0), Some(5), Some(5)),
        ];
        // Brute force: |10 - 5 - 5| / max(10, 5, 1) = 0.
        assert_eq!(imbalance_ratio(&t), Some(0.0));
        assert!(verdict(&t).is_valid());

        // Same counts on a trip that must end empty is off by half.
        let mut z = t.clone();
        z.iter_mut().for_each(|r| r.zero_load_at_trip_end = true);
        assert_eq!(imbalance_ratio(&z), Some(0.5));
        assert_eq!(verdict(&z), TripVerdict::Invalid([ValidityRule::R2].into_iter().collect()));
    }

    #[test]
    fn null_rules_and_ordering() {
        let mut t = trip(&[1, 2, 0]);
        t.iter_mut().for_each(|r| r.actual_arrival = None);
        assert_eq!(verdict(&t).rules(), [ValidityRule::R3].into_iter().collect());

        let mut t = trip(&[1, 2, 0]);
        t.iter_mut().for_each(|r| r.offs = None);
        assert_eq!(verdict(&t).rules(), [ValidityRule::R4].into_iter().collect());

        let mut t = trip(&[1, 2, 0]);
        let a = t[0].actual_arrival;
        t[0].actual_arrival = t[2].actual_arrival;
        t[2].actual_arrival = a;
        assert_eq!(verdict(&t).rules(), [ValidityRule::R6].into_iter().collect());

        // Missing arrivals in the middle are not an ordering violation.
        let mut t = trip(&[1, 2, 0]);
        t[1].actual_arrival = None;
        assert!(verdict(&t).is_valid());

        assert_eq!(verdict(&[]), TripVerdict::Invalid([ValidityRule::R3].into_iter().collect()));
    }

    #[test]
    fn partial_null_counts_fail_conservation() {
        let mut t = trip(&[1, 2, 0]);
        t[1].ons = None;
        assert_eq!(verdict(&t).rules(), [ValidityRule::R2].into_iter().collect());
    }

    #[test]
    fn duplicates_reject_the_later_copy() {
        let t = trip(&[3, 1, 0]);
        assert_eq!(
            classify_trip(&t, &[&t], &CleanThresholds::default()).rules(),
            [ValidityRule::R5].into_iter().collect()
        );
        let mut input = t.clone();
        input.extend(t.clone());
        let out = filter_trips(input, &CleanThresholds::default());
        assert_eq!(out.report.trips_in, 2);
        assert_eq!(out.report.trips_out, 1);
        assert_eq!(out.rejections[0].instance, 1);
        assert_eq!(out.records.len(), 3);
    }

    #[test]
    fn one_bad_stop_drops_the_whole_trip() {
        let mut t = trip(&(0..40).map(|k| (k % 7) as i32).collect::<Vec<_>>());
        t[17].load = Some(-9);
        let out = filter_trips(t, &CleanThresholds::default());
        assert!(out.records.is_empty());
        assert_eq!(out.report.rejected_trips, 1);
        assert_eq!(out.report.rejected_by_rule["R1"], 1);
    }

    #[test]
    fn clean_input_passes_unchanged() {
        let mut input = trip(&[2, 5, 1, 0]);
        let mut other = trip(&[4, 4, 0]);
        other.iter_mut().for_each(|r| r.trip_id = "T2".into());
        input.extend(other);
        let out = filter_trips(input.clone(), &CleanThresholds::default());
        assert_eq!(out.report.rejected_trips, 0);
        assert_eq!(out.records.len(), input.len());
        for (a, b) in out.records.iter().zip(&input) {
            assert_eq!((a.load, a.ons, a.offs), (b.load, b.ons, b.offs));
            assert_eq!(a.validity, Validity::Clean);
        }
        assert_eq!(out.report.fraction_clean, 1.0);
    }

    #[test]
    fn derive_load_examples() {
        let t0 = NaiveDate::from_ymd_opt(2021, 4, 6).unwrap().and_hms_opt(8, 0, 0).unwrap();
        let mk = |ons: &[i32], offs: &[i32]| -> Vec<ApcRecord> {
            ons.iter()
                .zip(offs)
                .enumerate()
                .map(|(k, (&a, &b))| rec(k as u32 + 1, t0, Some(a), Some(b), None))
                .collect()
        };
        let loads = |t: &[ApcRecord]| t.iter().map(|r| r.load.unwrap()).collect::<Vec<_>>();

        let mut t = mk(&[3, 2, 0], &[0, 1, 4]);
        assert_eq!(derive_load(&mut t), 0);
        assert_eq!(loads(&t), [3, 4, 0]);

        let mut t = mk(&[0, 1], &[2, 0]);
        assert_eq!(derive_load(&mut t), 1);
        assert_eq!(loads(&t), [0, 1]);

        let mut t = mk(&[0, 0, 0], &[0, 0, 0]);
        assert_eq!(derive_load(&mut t), 0);
        assert_eq!(loads(&t), [0, 0, 0]);
    }

    #[test]
    fn rule_names_roundtrip() {
        for r in ValidityRule::ALL {
            assert_eq!(r.to_string().parse::<ValidityRule>().unwrap(), r);
        }
        assert!("R7".parse::<ValidityRule>().is_err());
    }
}
