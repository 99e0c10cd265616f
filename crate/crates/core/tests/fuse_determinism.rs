use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlf_core::clean::{clean_records, CleanThresholds};
use tlf_core::fuse::{aggregate_stops, aggregate_trips, fuse_records, write_stops_csv, write_trips_csv, FuseContext};
use tlf_core::synth::{generate_city, inject_noise, simulate_days, SynthConfig};

#[test]
fn fused_output_does_not_depend_on_worker_count() {
    let cfg = SynthConfig {
        n_routes: 6,
        n_days: 5,
        ..SynthConfig::default()
    };
    let city = generate_city(&cfg).unwrap();
    let apc = simulate_days(&city, &city.dates()).unwrap();
    let (noisy, _) = inject_noise(&apc, &cfg.noise, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let clean = clean_records(noisy, &CleanThresholds::default()).records;
    let ctx = FuseContext::new(&city.gtfs, &city.weather, &city.traffic, &city.calendar);
    let dir = tempfile::tempdir().unwrap();

    let outputs: Vec<(Vec<u8>, Vec<u8>)> = [1, 4]
        .iter()
        .map(|&threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (fused, _) = fuse_records(clean.clone(), &ctx);
                let trips = aggregate_trips(&fused, 15).unwrap();
                let stops = aggregate_stops(&fused, 15).unwrap();
                let (t, s) = (dir.path().join(format!("t{threads}.csv")), dir.path().join(format!("s{threads}.csv")));
                write_trips_csv(&t, &trips, None).unwrap();
                write_stops_csv(&s, &stops, None).unwrap();
                (std::fs::read(t).unwrap(), std::fs::read(s).unwrap())
            })
        })
        .collect();
    assert!(outputs[0].0.len() > 1000 && outputs[0].1.len() > 1000);
    assert!(outputs[0] == outputs[1], "fused output differs between 1 and 4 workers");
}
