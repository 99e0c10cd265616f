use chrono::Days;
use tlf_core::baselines::{trip_baseline, HistoryIndex};
use tlf_core::clean::{clean_records, CleanThresholds};
use tlf_core::fuse::{aggregate_trips, fuse_records, FuseContext};
use tlf_core::synth::{generate_city, simulate_days, NoiseConfig, SynthConfig};

/// With demand that does not drift, looking further back adds no signal.
#[test]
fn lookback_length_barely_matters_under_stationary_demand() {
    let cfg = SynthConfig {
        n_routes: 8,
        n_days: 70,
        month_multipliers: vec![1.0; 12],
        holiday_multiplier: 1.0,
        school_break_multiplier: 1.0,
        rain_dampening: 0.0,
        daily_shock_sd: 0.0,
        noise: NoiseConfig::zero(),
        ..SynthConfig::default()
    };
    let city = generate_city(&cfg).unwrap();
    let apc = simulate_days(&city, &city.dates()).unwrap();
    let clean = clean_records(apc, &CleanThresholds::default()).records;
    let ctx = FuseContext::new(&city.gtfs, &city.weather, &city.traffic, &city.calendar);
    let (fused, _) = fuse_records(clean, &ctx);
    let trips = aggregate_trips(&fused, 15).unwrap();
    let history = HistoryIndex::from_trips(&trips);

    let first_scored = cfg.start_date + Days::new(35);
    let scored: Vec<_> = trips.iter().filter(|t| t.key.transit_date >= first_scored).collect();
    let accuracy: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&w| {
            let (mut hit, mut n) = (0, 0);
            for t in &scored {
                if let Some(p) = trip_baseline(&history, t, w) {
                    n += 1;
                    hit += usize::from(p == t.target_bin);
                }
            }
            assert!(n * 10 >= scored.len() * 9, "{w} weeks: only {n} of {} predicted", scored.len());
            hit as f64 / n as f64
        })
        .collect();
    let spread = accuracy.iter().cloned().fold(f64::MIN, f64::max) - accuracy.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.02, "accuracies {accuracy:?}");
}
