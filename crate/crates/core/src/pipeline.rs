//! End-to-end stages driven by one config file.
//!
//! Each `run_*` function reads the previous stage's files under the output
//! directory and writes its own. Every file carries the pipeline version,
//! the SHA-256 of the canonical config JSON, and the config itself.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{rolling_stop_baseline, statistical_stop_baseline, trip_baseline_load, HistoryIndex, StatMode};
use crate::clean::{clean_records, CleanThresholds};
use crate::domain::{BinScheme, LoadLevel, StopObservation, TripAggregate};
use crate::error::{Error, Result};
use crate::eval::{horizon_error_counts, Comparison, EvalReport, HorizonTally, ModelSection, Scored};
use crate::features::{
    day_ahead_for_all, encode, sort_sequences, split_stop_data, split_trip_data, stop_layout, stop_raw, trip_layout,
    trip_raw, DayOrdinal, FeatureLayout, FeatureSchema, RawFeatures, StopBoundaries,
};
use crate::fuse::{
    aggregate_stops, aggregate_trips, fuse_records, read_stops_csv, read_trips_csv, write_stops_csv, write_trips_csv,
    Diagnostics, FuseContext,
};
use crate::gbt::{self, GbtEnsemble, GbtGrid, GbtHyperparams, TrainingData};
use crate::ingest::{
    create_writer, parse_apc_file, parse_calendar_file, parse_gtfs, parse_traffic_file, parse_weather_file,
    write_apc_file, ApcSchema, Parsed, RowDiagnostic, DATE_FORMAT,
};
use crate::seq2seq::{self, InputScaler, Seq2SeqConfig, Seq2SeqModel, SequenceSample, SparseVec};
use crate::synth::{generate_city, inject_noise, simulate_days, write_city, SynthConfig};

pub const VERSION: &str = concat!("tlf ", env!("CARGO_PKG_VERSION"));
/// RNG stream of the corruption injector; the city itself uses others.
const NOISE_STREAM: u64 = 0x6E6F_6973_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    TripDayahead,
    TripAnyday,
    Stop,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::TripDayahead, Level::TripAnyday, Level::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Level::TripDayahead => "trip-dayahead",
            Level::TripAnyday => "trip-anyday",
            Level::Stop => "stop",
        }
    }

    fn model_file(self) -> &'static str {
        match self {
            Level::TripDayahead => "trip-dayahead.json",
            Level::TripAnyday => "trip-anyday.json",
            Level::Stop => "stop.model",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown level `{s}` (expected trip-dayahead, trip-anyday or stop)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Past same-route trips averaged by the day-ahead features.
    pub past_trips: usize,
    pub day_ordinal: DayOrdinal,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            past_trips: crate::features::DEFAULT_PAST_TRIPS,
            day_ordinal: DayOrdinal::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub trip_train_ratio: f64,
    /// Explicit stop-level boundaries; both or neither. Without them the date
    /// range is split 60/15/25.
    pub stop_train_end: Option<NaiveDate>,
    pub stop_validation_end: Option<NaiveDate>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            trip_train_ratio: 0.7,
            stop_train_end: None,
            stop_validation_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtConfig {
    /// Used as is without a grid, otherwise as the base of every grid point.
    pub params: GbtHyperparams,
    pub grid: Option<GbtGrid>,
    pub cv_folds: usize,
    /// Cap on training rows used by the grid search.
    pub grid_max_rows: Option<usize>,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            params: GbtHyperparams::default(),
            grid: Some(GbtGrid::default()),
            cv_folds: 5,
            grid_max_rows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopModelConfig {
    pub network: Seq2SeqConfig,
    pub max_train_samples: Option<usize>,
    pub max_validation_samples: Option<usize>,
}

impl Default for StopModelConfig {
    fn default() -> Self {
        Self {
            network: Seq2SeqConfig::default(),
            max_train_samples: Some(50_000),
            max_validation_samples: Some(10_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trip_lookback_weeks: Vec<u32>,
    pub stat_modes: Vec<StatMode>,
    /// Cap on next-stop test samples.
    pub max_eval_samples: Option<usize>,
    pub horizon_trips: usize,
    pub max_horizon: usize,
    pub min_trip_stops: usize,
    pub importance: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trip_lookback_weeks: vec![1, 2, 4],
            stat_modes: vec![StatMode::Mean, StatMode::Max],
            max_eval_samples: Some(100_000),
            horizon_trips: 5000,
            max_horizon: 5,
            min_trip_stops: 10,
            importance: true,
        }
    }
}

/// Everything a run depends on. Component seeds are replaced by `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Directory with apc.csv, weather.csv, traffic.csv, calendar.csv and
    /// gtfs/. Defaults to the synth output under `out_dir`.
    pub input_dir: Option<PathBuf>,
    pub window_minutes: u32,
    pub apc_schema: ApcSchema,
    pub synth: SynthConfig,
    pub clean: CleanThresholds,
    pub features: FeatureConfig,
    pub split: SplitConfig,
    pub gbt: GbtConfig,
    pub stop_model: StopModelConfig,
    pub evaluation: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            input_dir: None,
            window_minutes: 15,
            apc_schema: ApcSchema::default(),
            synth: SynthConfig::default(),
            clean: CleanThresholds::default(),
            features: FeatureConfig::default(),
            split: SplitConfig::default(),
            gbt: GbtConfig::default(),
            stop_model: StopModelConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_minutes: Option<u32>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.window_minutes {
            self.window_minutes = w;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.synth.seed = self.seed;
        self.gbt.params.seed = self.seed;
        self.stop_model.network.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(1..=1440).contains(&self.window_minutes) {
            return bad("window_minutes must lie in 1..=1440");
        }
        if self.features.past_trips == 0 {
            return bad("features.past_trips must be >= 1");
        }
        if !(self.split.trip_train_ratio > 0.0 && self.split.trip_train_ratio < 1.0) {
            return bad("split.trip_train_ratio must lie in (0, 1)");
        }
        if self.split.stop_train_end.is_some() != self.split.stop_validation_end.is_some() {
            return bad("split.stop_train_end and split.stop_validation_end must be given together");
        }
        if self.gbt.cv_folds < 2 {
            return bad("gbt.cv_folds must be >= 2");
        }
        if self.evaluation.max_horizon == 0 {
            return bad("evaluation.max_horizon must be >= 1");
        }
        if self.evaluation.trip_lookback_weeks.contains(&0) {
            return bad("evaluation.trip_lookback_weeks entries must be >= 1");
        }
        self.gbt.params.validate()?;
        self.stop_model.network.validate()?;
        self.synth.validate()
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.input_dir.clone().unwrap_or_else(|| self.out_dir.join("raw"))
    }
    fn clean_dir(&self) -> PathBuf {
        self.out_dir.join("clean")
    }
    fn fuse_dir(&self) -> PathBuf {
        self.out_dir.join("fuse")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }
    pub fn eval_dir(&self, level: Level) -> PathBuf {
        self.out_dir.join("eval").join(level.name())
    }
    pub fn model_path(&self, level: Level) -> PathBuf {
        self.models_dir().join(level.model_file())
    }
    pub fn clean_apc_path(&self) -> PathBuf {
        self.clean_dir().join("apc_clean.csv")
    }
    pub fn trips_path(&self) -> PathBuf {
        self.fuse_dir().join("trips.csv")
    }
    pub fn stops_path(&self) -> PathBuf {
        self.fuse_dir().join("stops.csv")
    }

    fn stop_boundaries(&self) -> Option<StopBoundaries> {
        Some(StopBoundaries {
            train_end: self.split.stop_train_end?,
            validation_end: self.split.stop_validation_end?,
        })
    }
}

/// Version, config hash and config of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
}

const HEADER_CONFIG: &str = "config=";

impl Provenance {
    pub fn of(cfg: &PipelineConfig) -> Self {
        let json = serde_json::to_string(cfg).expect("config serializes");
        Self {
            version: VERSION.to_string(),
            config_sha256: format!("{:x}", Sha256::digest(json.as_bytes())),
            config: cfg.clone(),
        }
    }

    /// Two comment lines for CSV files.
    pub fn header(&self) -> String {
        format!(
            "{} config-sha256={}\n{HEADER_CONFIG}{}",
            self.version,
            self.config_sha256,
            serde_json::to_string(&self.config).expect("config serializes")
        )
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// Reads the provenance embedded in any output: a JSON document or JSON
    /// header line with a `provenance` field, or the two header lines inside
    /// `#` or `<!-- -->` comments.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.first() == Some(&b'{') {
            let v: serde_json::Value = serde_json::from_slice(&bytes).or_else(|_| {
                let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
                serde_json::from_slice(&bytes[..end])
            })?;
            let p = v
                .get("provenance")
                .filter(|p| !p.is_null())
                .ok_or_else(|| Error::Config(format!("{}: no provenance field", path.display())))?;
            return Ok(serde_json::from_value(p.clone())?);
        }
        let text = String::from_utf8_lossy(&bytes);
        let mut version = None;
        for line in text.lines() {
            let body = line.trim().trim_start_matches('#').trim_start_matches("<!--").trim_end_matches("-->").trim();
            if let Some(cfg) = body.strip_prefix(HEADER_CONFIG) {
                if let Some((v, hash)) = version.take() {
                    return Ok(Self {
                        version: v,
                        config_sha256: hash,
                        config: serde_json::from_str(cfg)?,
                    });
                }
            } else if let Some((v, h)) = body.split_once(" config-sha256=") {
                version = Some((v.to_string(), h.to_string()));
            }
        }
        Err(Error::Config(format!("{}: no provenance header", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing input {}; run `tlf {stage}` first",
            path.display()
        )))
    }
}

fn seeded_subset(mut idx: Vec<usize>, cap: Option<usize>, seed: u64, stream: u64) -> Vec<usize> {
    if let Some(cap) = cap.filter(|&c| c < idx.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

fn diagnostics_json(d: &Diagnostics) -> serde_json::Value {
    let counts: BTreeMap<&str, usize> = d.counts.iter().map(|(k, v)| (k.name(), *v)).collect();
    serde_json::json!({ "counts": counts, "examples": d.examples })
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub provenance: Provenance,
    pub routes: usize,
    pub days: usize,
    pub scheduled_trips_per_day: usize,
    pub apc_records: usize,
    pub corruptions: BTreeMap<String, usize>,
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let t0 = Instant::now();
    let prov = Provenance::of(cfg);
    let city = generate_city(&cfg.synth)?;
    let dates = city.dates();
    let apc = simulate_days(&city, &dates)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(NOISE_STREAM);
    let (noisy, log) = inject_noise(&apc, &cfg.synth.noise, &mut rng)?;
    let dir = cfg.out_dir.join("raw");
    write_city(&dir, &city, &noisy, &log, Some(&prov.header()))?;
    let mut corruptions = BTreeMap::new();
    for e in &log.entries {
        *corruptions.entry(e.rule.to_string()).or_insert(0) += 1;
    }
    let summary = SynthSummary {
        provenance: prov,
        routes: city.gtfs.routes.len(),
        days: dates.len(),
        scheduled_trips_per_day: city.trips.len(),
        apc_records: noisy.len(),
        corruptions,
    };
    write_json(&dir.join("synth_summary.json"), &summary)?;
    log::info!(
        "synth: {} routes x {} days, {} APC records, {} corrupted trips in {:.1}s",
        summary.routes,
        summary.days,
        summary.apc_records,
        log.entries.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(summary)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    pub data_rows: usize,
    pub records: usize,
    pub fatal_rows: usize,
    pub warnings: usize,
    pub first_diagnostics: Vec<RowDiagnostic>,
}

impl FileReport {
    fn of<T>(file: &str, p: &Parsed<T>) -> Self {
        Self {
            file: file.to_string(),
            data_rows: p.data_rows,
            records: p.records.len(),
            fatal_rows: p.fatal_rows(),
            warnings: p.diagnostics.len() - p.fatal_rows(),
            first_diagnostics: p.diagnostics.iter().take(10).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub provenance: Provenance,
    pub files: Vec<FileReport>,
    pub gtfs_routes: usize,
    pub gtfs_trips: usize,
    pub gtfs_stops: usize,
    pub gtfs_shapes: usize,
}

struct Context {
    gtfs: crate::ingest::GtfsBundle,
    weather: Parsed<crate::ingest::WeatherObservation>,
    traffic: Parsed<crate::ingest::TrafficSegmentReading>,
    calendar: Parsed<crate::ingest::CalendarEntry>,
}

fn read_context(raw: &Path) -> Result<Context> {
    Ok(Context {
        gtfs: parse_gtfs(&raw.join("gtfs"))?,
        weather: parse_weather_file(&raw.join("weather.csv"))?,
        traffic: parse_traffic_file(&raw.join("traffic.csv"))?,
        calendar: parse_calendar_file(&raw.join("calendar.csv"))?,
    })
}

pub fn run_ingest(cfg: &PipelineConfig) -> Result<IngestReport> {
    let t0 = Instant::now();
    let raw = cfg.raw_dir();
    let apc = parse_apc_file(&raw.join("apc.csv"), &cfg.apc_schema)?;
    let ctx = read_context(&raw)?;
    let report = IngestReport {
        provenance: Provenance::of(cfg),
        files: vec![
            FileReport::of("apc.csv", &apc),
            FileReport::of("weather.csv", &ctx.weather),
            FileReport::of("traffic.csv", &ctx.traffic),
            FileReport::of("calendar.csv", &ctx.calendar),
        ],
        gtfs_routes: ctx.gtfs.routes.len(),
        gtfs_trips: ctx.gtfs.trips.len(),
        gtfs_stops: ctx.gtfs.stops.len(),
        gtfs_shapes: ctx.gtfs.shapes.len(),
    };
    write_json(&cfg.out_dir.join("ingest").join("ingest_report.json"), &report)?;
    log::info!(
        "ingest: {} APC rows ({} fatal) in {:.1}s",
        apc.data_rows,
        apc.fatal_rows(),
        t0.elapsed().as_secs_f64()
    );
    Ok(report)
}

// ---------------------------------------------------------------- clean

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSummary {
    pub provenance: Provenance,
    pub fatal_rows: usize,
    pub report: crate::clean::CleanReport,
}

pub fn run_clean(cfg: &PipelineConfig) -> Result<CleanSummary> {
    let t0 = Instant::now();
    let prov = Provenance::of(cfg);
    let header = prov.header();
    let parsed = parse_apc_file(&cfg.raw_dir().join("apc.csv"), &cfg.apc_schema)?;
    let fatal_rows = parsed.fatal_rows();
    let out = clean_records(parsed.records, &cfg.clean);
    let dir = cfg.clean_dir();
    write_apc_file(&cfg.clean_apc_path(), &out.records, Some(&header))?;
    let path = dir.join("clean_report.csv");
    let body: String = header.lines().map(|l| format!("# {l}\n")).collect::<String>() + &out.report.to_csv();
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("rejections.csv");
    let mut w = create_writer(&path, Some(&header))?;
    w.write_record(["transit_date", "trip_id", "instance", "rules"])
        .map_err(|e| Error::csv(&path, e))?;
    for r in &out.rejections {
        let rules: Vec<String> = r.rules.iter().map(|x| x.to_string()).collect();
        w.write_record([
            r.transit_date.format(DATE_FORMAT).to_string(),
            r.trip_id.clone(),
            r.instance.to_string(),
            rules.join("|"),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let summary = CleanSummary {
        provenance: prov,
        fatal_rows,
        report: out.report,
    };
    write_json(&dir.join("clean_report.json"), &summary)?;
    log::info!(
        "clean: {} of {} trips kept ({} records) in {:.1}s",
        summary.report.trips_out,
        summary.report.trips_in,
        summary.report.records_out,
        t0.elapsed().as_secs_f64()
    );
    Ok(summary)
}

// ---------------------------------------------------------------- fuse

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub provenance: Provenance,
    pub records: usize,
    pub trips: usize,
    pub stop_observations: usize,
    pub diagnostics: serde_json::Value,
}

pub fn run_fuse(cfg: &PipelineConfig) -> Result<FuseSummary> {
    let t0 = Instant::now();
    let prov = Provenance::of(cfg);
    let header = prov.header();
    let apc_path = cfg.clean_apc_path();
    require(&apc_path, "clean")?;
    let apc = parse_apc_file(&apc_path, &ApcSchema::default())?;
    let ctx = read_context(&cfg.raw_dir())?;
    let fuse_ctx = FuseContext::new(&ctx.gtfs, &ctx.weather.records, &ctx.traffic.records, &ctx.calendar.records);
    let n = apc.records.len();
    let (fused, diag) = fuse_records(apc.records, &fuse_ctx);
    let trips = aggregate_trips(&fused, cfg.window_minutes)?;
    let stops = aggregate_stops(&fused, cfg.window_minutes)?;
    write_trips_csv(&cfg.trips_path(), &trips, Some(&header))?;
    write_stops_csv(&cfg.stops_path(), &stops, Some(&header))?;
    let summary = FuseSummary {
        provenance: prov,
        records: n,
        trips: trips.len(),
        stop_observations: stops.len(),
        diagnostics: diagnostics_json(&diag),
    };
    write_json(&cfg.fuse_dir().join("fuse_report.json"), &summary)?;
    log::info!(
        "fuse: {} records -> {} trips, {} stop observations in {:.1}s",
        n,
        summary.trips,
        summary.stop_observations,
        t0.elapsed().as_secs_f64()
    );
    Ok(summary)
}

// ---------------------------------------------------------------- trip models

/// A trained trip-level model with its encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripModel {
    pub provenance: Provenance,
    pub level: Level,
    pub window_minutes: u32,
    pub past_trips: usize,
    pub day_ordinal: DayOrdinal,
    pub schema: FeatureSchema,
    pub model: GbtEnsemble,
}

impl TripModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.model.version != gbt::MODEL_VERSION {
            return Err(Error::Config(format!(
                "{}: model version {} is not supported",
                path.display(),
                m.model.version
            )));
        }
        m.model.ensure_fingerprint(&m.schema.fingerprint())?;
        Ok(m)
    }
}

fn layout_fingerprint(layout: &FeatureLayout) -> String {
    format!("{:x}", Sha256::digest(serde_json::to_vec(layout).expect("layout serializes")))
}

/// Fails unless the model was trained on the feature layout the current
/// config produces.
fn check_layout(schema: &FeatureSchema, layout: &FeatureLayout) -> Result<()> {
    let model_layout = schema.layout();
    if &model_layout != layout {
        return Err(Error::Fingerprint {
            model: layout_fingerprint(&model_layout),
            data: layout_fingerprint(layout),
        });
    }
    Ok(())
}

/// Raw trip features for every trip, with day-ahead features when asked.
pub fn trip_features(trips: &[TripAggregate], day_ahead: bool, features: &FeatureConfig) -> (FeatureLayout, Vec<RawFeatures>) {
    let layout = trip_layout(day_ahead, features.day_ordinal);
    let da = if day_ahead {
        day_ahead_for_all(trips, features.past_trips)
    } else {
        Vec::new()
    };
    let raw = trips
        .par_iter()
        .enumerate()
        .map(|(i, t)| trip_raw(t, da.get(i), features.day_ordinal))
        .collect();
    (layout, raw)
}

fn level_is_day_ahead(level: Level) -> Result<bool> {
    match level {
        Level::TripDayahead => Ok(true),
        Level::TripAnyday => Ok(false),
        Level::Stop => Err(Error::Config("stop level is not a trip model".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub provenance: Provenance,
    pub level: Level,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub final_train_metric: f64,
    pub details: serde_json::Value,
}

fn fit_trip_model(cfg: &PipelineConfig, level: Level, trips: &[TripAggregate], rows: &[usize]) -> Result<(TripModel, Vec<f64>, Option<gbt::GridSearchResult>)> {
    let day_ahead = level_is_day_ahead(level)?;
    let (layout, raw) = trip_features(trips, day_ahead, &cfg.features);
    let train_raw: Vec<RawFeatures> = rows.iter().map(|&i| raw[i].clone()).collect();
    let schema = FeatureSchema::fit(&layout, &train_raw)?;
    let (m, _) = encode(&train_raw, &schema)?;
    let targets: Vec<f64> = rows.iter().map(|&i| trips[i].max_load as f64).collect();
    let data = TrainingData::with_names(&m, &schema.column_names())?;
    let all: Vec<usize> = (0..m.rows).collect();
    let mut params = cfg.gbt.params.clone();
    let mut search = None;
    if let Some(grid) = &cfg.gbt.grid {
        let grid_rows = seeded_subset(all.clone(), cfg.gbt.grid_max_rows, cfg.seed, 2);
        let res = gbt::grid_search(&data, &targets, &grid_rows, grid, &params, cfg.gbt.cv_folds, cfg.seed)?;
        params = res.best.clone();
        search = Some(res);
    }
    let fp = schema.fingerprint();
    let out = gbt::fit_rows(&data, &targets, &all, &[], &params, &fp)?;
    let model = TripModel {
        provenance: Provenance::of(cfg),
        level,
        window_minutes: cfg.window_minutes,
        past_trips: cfg.features.past_trips,
        day_ordinal: cfg.features.day_ordinal,
        schema,
        model: out.model,
    };
    Ok((model, out.train_rmse, search))
}

fn train_trip(cfg: &PipelineConfig, level: Level) -> Result<TrainSummary> {
    require(&cfg.trips_path(), "fuse")?;
    let prov = Provenance::of(cfg);
    let header = prov.header();
    let trips = read_trips_csv(&cfg.trips_path())?;
    let split = split_trip_data(trips.len(), cfg.split.trip_train_ratio, cfg.seed)?;
    let (model, curve, search) = fit_trip_model(cfg, level, &trips, &split.train)?;
    let dir = cfg.models_dir();
    model.save(&cfg.model_path(level))?;

    let path = dir.join(format!("{}_train_curve.csv", level.name()));
    let mut w = create_writer(&path, Some(&header))?;
    w.write_record(["n_trees", "train_rmse"]).map_err(|e| Error::csv(&path, e))?;
    for (k, r) in curve.iter().enumerate() {
        w.write_record([k.to_string(), r.to_string()]).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if let Some(res) = &search {
        let path = dir.join(format!("{}_grid_search.csv", level.name()));
        let mut w = create_writer(&path, Some(&header))?;
        w.write_record(["max_depth", "n_trees", "learning_rate", "mean_rmse", "sd_rmse", "best"])
            .map_err(|e| Error::csv(&path, e))?;
        for row in &res.table {
            w.write_record([
                row.params.max_depth.to_string(),
                row.params.n_trees.to_string(),
                row.params.learning_rate.to_string(),
                row.score.mean_rmse.to_string(),
                row.score.sd_rmse.to_string(),
                (row.params == res.best).to_string(),
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let summary = TrainSummary {
        provenance: prov,
        level,
        train_rows: split.train.len(),
        validation_rows: 0,
        final_train_metric: curve.last().copied().unwrap_or(f64::NAN),
        details: serde_json::json!({
            "params": model.model.params,
            "n_features": model.model.n_features,
            "schema_fingerprint": model.model.schema_fingerprint,
        }),
    };
    write_json(&dir.join(format!("{}_train_summary.json", level.name())), &summary)?;
    Ok(summary)
}

/// Trip-level test predictions of `model` on `rows`: (raw score, bin).
pub fn predict_trips(model: &TripModel, trips: &[TripAggregate], raw: &[RawFeatures], rows: &[usize]) -> Result<Vec<(f64, LoadLevel)>> {
    let sel: Vec<RawFeatures> = rows.iter().map(|&i| raw[i].clone()).collect();
    let (m, diag) = encode(&sel, &model.schema)?;
    if !diag.unknown_categories.is_empty() {
        log::warn!("unseen categories at inference: {:?}", diag.unknown_categories);
    }
    let _ = trips;
    let scores = model.model.predict(&m)?;
    scores
        .into_iter()
        .map(|s| Ok((s, gbt::raw_to_trip_bin(s)?)))
        .collect()
}

fn evaluate_trip(cfg: &PipelineConfig, level: Level, model_path: &Path, with_baselines: bool) -> Result<EvalReport> {
    require(&cfg.trips_path(), "fuse")?;
    let model = TripModel::load(model_path)?;
    let day_ahead = level_is_day_ahead(level)?;
    let trips = read_trips_csv(&cfg.trips_path())?;
    let (layout, raw) = trip_features(&trips, day_ahead, &cfg.features);
    check_layout(&model.schema, &layout)?;
    let split = split_trip_data(trips.len(), cfg.split.trip_train_ratio, cfg.seed)?;
    let preds = predict_trips(&model, &trips, &raw, &split.test)?;
    let items: Vec<Scored> = split
        .test
        .iter()
        .zip(&preds)
        .map(|(&i, &(score, bin))| Scored {
            transit_date: trips[i].key.transit_date,
            time_window: trips[i].key.time_window,
            truth: trips[i].target_bin,
            pred: Some(bin),
            raw_truth: Some(trips[i].max_load as f64),
            raw_pred: Some(score),
        })
        .collect();
    let model_section = ModelSection::compute(level.name(), &items);
    let mut sections = vec![model_section.clone()];
    let mut comparisons = Vec::new();
    if with_baselines {
        let history = HistoryIndex::from_trips(&trips);
        for &w in &cfg.evaluation.trip_lookback_weeks {
            let name = format!("baseline-{w}w");
            let b_items: Vec<Scored> = split
                .test
                .par_iter()
                .zip(&items)
                .map(|(&i, it)| {
                    let load = trip_baseline_load(&history, &trips[i], w);
                    Scored {
                        pred: load.map(|l| BinScheme::Trip.bin(l).level),
                        raw_pred: load.map(f64::from),
                        ..it.clone()
                    }
                })
                .collect();
            let sec = ModelSection::compute(&name, &b_items);
            comparisons.push(Comparison::of(&model_section, &items, &sec, &b_items));
            sections.push(sec);
        }
    }
    let report = EvalReport {
        level: level.name().to_string(),
        provenance: Some(Provenance::of(cfg).json()),
        sections,
        comparisons,
        horizons: Vec::new(),
    };
    let dir = cfg.eval_dir(level);
    let header = Provenance::of(cfg).header();
    report.write(&dir, Some(&header))?;
    if cfg.evaluation.importance {
        let sel: Vec<RawFeatures> = split.test.iter().map(|&i| raw[i].clone()).collect();
        let (m, _) = encode(&sel, &model.schema)?;
        let targets: Vec<f64> = split.test.iter().map(|&i| trips[i].max_load as f64).collect();
        let imp = gbt::permutation_importance(&model.model, &m, &targets, &model.schema.groups(), cfg.seed)?;
        let path = dir.join("feature_importance.csv");
        let mut w = create_writer(&path, Some(&header))?;
        w.write_record(["feature", "rmse_increase"]).map_err(|e| Error::csv(&path, e))?;
        for i in &imp {
            w.write_record([i.feature.clone(), i.importance.to_string()])
                .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- stop model

/// Stop rows cut into trip runs in travel order, with next-stop samples.
pub struct StopData {
    pub stops: Vec<StopObservation>,
    pub runs: Vec<Vec<usize>>,
    /// (run, position of the target stop); the past stops precede it.
    pub samples: Vec<(usize, usize)>,
}

impl StopData {
    pub fn new(stops: Vec<StopObservation>, past_stops: usize) -> Self {
        let (sequences, diagnostics) = sort_sequences(&stops);
        if !diagnostics.is_empty() {
            log::warn!("{} stop rows excluded from sequences", diagnostics.len());
        }
        let runs: Vec<Vec<usize>> = sequences
            .iter()
            .flat_map(|s| s.trips(&stops).map(|r| r.to_vec()).collect::<Vec<_>>())
            .collect();
        let samples = runs
            .iter()
            .enumerate()
            .flat_map(|(r, run)| (past_stops..run.len()).map(move |p| (r, p)))
            .collect();
        Self { stops, runs, samples }
    }

    pub fn row(&self, run: usize, pos: usize) -> &StopObservation {
        &self.stops[self.runs[run][pos]]
    }

    /// Raw features of the stop at `pos` of `run` using observed loads.
    pub fn raw(&self, run: usize, pos: usize, day: DayOrdinal) -> RawFeatures {
        let obs = self.row(run, pos);
        let prev = (pos > 0).then(|| self.row(run, pos - 1).summed_load as f64);
        stop_raw(obs, obs.summed_load as f64, prev, day)
    }

    pub fn sample_dates(&self) -> Vec<NaiveDate> {
        self.samples.iter().map(|&(r, _)| self.stops[self.runs[r][0]].transit_date).collect()
    }
}

/// Encodes every row the chosen samples read, keyed by (run, position).
fn encode_rows(
    data: &StopData,
    samples: &[(usize, usize)],
    n: usize,
    encode_one: impl Fn(&RawFeatures) -> SparseVec + Sync,
    day: DayOrdinal,
) -> HashMap<(usize, usize), SparseVec> {
    let mut keys: Vec<(usize, usize)> = samples
        .iter()
        .flat_map(|&(r, p)| (p - n..p).map(move |q| (r, q)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.par_iter()
        .map(|&(r, p)| ((r, p), encode_one(&data.raw(r, p, day))))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn build_samples(data: &StopData, samples: &[(usize, usize)], n: usize, enc: &HashMap<(usize, usize), SparseVec>) -> Vec<SequenceSample> {
    samples
        .iter()
        .map(|&(r, p)| SequenceSample {
            past: (p - n..p).map(|q| enc[&(r, q)].clone()).collect(),
            target: data.row(r, p).target_bin,
        })
        .collect()
}

fn train_stop(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let t0 = Instant::now();
    require(&cfg.stops_path(), "fuse")?;
    let prov = Provenance::of(cfg);
    let header = prov.header();
    let net = cfg.stop_model.network.clone();
    let n = net.past_stops;
    let day = cfg.features.day_ordinal;
    let data = StopData::new(read_stops_csv(&cfg.stops_path())?, n);
    let split = split_stop_data(&data.sample_dates(), cfg.stop_boundaries())?;
    let pick = |idx: &[usize], cap, stream| -> Vec<(usize, usize)> {
        seeded_subset(idx.to_vec(), cap, cfg.seed, stream)
            .into_iter()
            .map(|i| data.samples[i])
            .collect()
    };
    let train_idx = pick(&split.train, cfg.stop_model.max_train_samples, 3);
    let val_idx = pick(&split.validation, cfg.stop_model.max_validation_samples, 4);
    if train_idx.is_empty() {
        return Err(Error::Config("no stop-level training samples; trips may be shorter than past_stops".into()));
    }

    let mut train_rows: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&(r, p)| (p - n..p).map(move |q| (r, q)))
        .collect();
    train_rows.sort_unstable();
    train_rows.dedup();
    let layout = stop_layout(day);
    let fit_rows: Vec<RawFeatures> = train_rows.par_iter().map(|&(r, p)| data.raw(r, p, day)).collect();
    let schema = FeatureSchema::fit(&layout, &fit_rows)?;
    let encoded: Vec<Vec<f32>> = fit_rows.par_iter().map(|r| schema.encode_row(r)).collect();
    let scaler = InputScaler::fit(schema.width(), encoded.iter().map(|v| v.as_slice()));
    drop((fit_rows, encoded));

    let enc_fn = |raw: &RawFeatures| scaler.apply(&schema.encode_row(raw));
    let both: Vec<(usize, usize)> = train_idx.iter().chain(&val_idx).copied().collect();
    let enc = encode_rows(&data, &both, n, enc_fn, day);
    let train_samples = build_samples(&data, &train_idx, n, &enc);
    let val_samples = build_samples(&data, &val_idx, n, &enc);
    drop(enc);
    log::info!(
        "stop model: {} training and {} validation samples, width {}",
        train_samples.len(),
        val_samples.len(),
        schema.width()
    );
    let out = seq2seq::train(&train_samples, &val_samples, &net)?;
    let model = Seq2SeqModel {
        version: seq2seq::MODEL_VERSION,
        config: net,
        schema_fingerprint: schema.fingerprint(),
        schema,
        day_ordinal: day,
        scaler,
        params: out.params,
        provenance: Some(prov.json()),
    };
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    model.save(&cfg.model_path(Level::Stop))?;

    let path = dir.join("stop_loss_curve.csv");
    let mut w = create_writer(&path, Some(&header))?;
    w.write_record(["epoch", "train_loss", "train_accuracy", "validation_loss", "validation_accuracy"])
        .map_err(|e| Error::csv(&path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &out.curve {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_accuracy.to_string(),
            opt(e.validation_loss),
            opt(e.validation_accuracy),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let summary = TrainSummary {
        provenance: prov,
        level: Level::Stop,
        train_rows: train_samples.len(),
        validation_rows: val_samples.len(),
        final_train_metric: out.curve.last().map(|e| e.train_loss).unwrap_or(f64::NAN),
        details: serde_json::json!({
            "best_epoch": out.best_epoch,
            "epochs_run": out.curve.len(),
            "boundaries": split.boundaries,
            "n_params": model.params.n_params(),
        }),
    };
    write_json(&dir.join("stop_train_summary.json"), &summary)?;
    log::info!("stop model trained in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(summary)
}

fn load_stop_model(cfg: &PipelineConfig, path: &Path) -> Result<Seq2SeqModel> {
    let model = Seq2SeqModel::load(path)?;
    if model.schema.fingerprint() != model.schema_fingerprint {
        return Err(Error::Fingerprint {
            model: model.schema_fingerprint.clone(),
            data: model.schema.fingerprint(),
        });
    }
    check_layout(&model.schema, &stop_layout(cfg.features.day_ordinal))?;
    Ok(model)
}

/// Future-stop predictions for one run: truth and model bin per horizon.
struct HorizonCase {
    truth: Vec<LoadLevel>,
    model: Vec<LoadLevel>,
    rolling_seed: LoadLevel,
    stat: Vec<Vec<Option<LoadLevel>>>,
}

fn evaluate_stop(cfg: &PipelineConfig, model_path: &Path, with_baselines: bool) -> Result<EvalReport> {
    require(&cfg.stops_path(), "fuse")?;
    let model = load_stop_model(cfg, model_path)?;
    let n = model.config.past_stops;
    let day = model.day_ordinal;
    let ev = &cfg.evaluation;
    let data = StopData::new(read_stops_csv(&cfg.stops_path())?, n);
    let split = split_stop_data(&data.sample_dates(), cfg.stop_boundaries())?;
    let test: Vec<(usize, usize)> = seeded_subset(split.test.clone(), ev.max_eval_samples, cfg.seed, 5)
        .into_iter()
        .map(|i| data.samples[i])
        .collect();
    let enc = encode_rows(&data, &test, n, |r| model.encode(r), day);
    let samples = build_samples(&data, &test, n, &enc);
    let preds: Vec<LoadLevel> = samples
        .par_iter()
        .map(|s| model.params.predict(&s.past))
        .collect::<Result<_>>()?;
    let base = |pred: Option<LoadLevel>, (r, p): (usize, usize)| {
        let obs = data.row(r, p);
        Scored {
            transit_date: obs.transit_date,
            time_window: obs.time_window,
            truth: obs.target_bin,
            pred,
            raw_truth: None,
            raw_pred: None,
        }
    };
    let items: Vec<Scored> = test.iter().zip(&preds).map(|(&k, &p)| base(Some(p), k)).collect();
    let model_section = ModelSection::compute("lstm", &items);
    let mut sections = vec![model_section.clone()];
    let mut comparisons = Vec::new();
    let history = with_baselines.then(|| HistoryIndex::from_stops(&data.stops));
    if let Some(history) = &history {
        let rolling: Vec<Scored> = test
            .iter()
            .map(|&(r, p)| base(rolling_stop_baseline(data.row(r, p - 1).target_bin, 1), (r, p)))
            .collect();
        let mut named = vec![("rolling".to_string(), rolling)];
        for &mode in &ev.stat_modes {
            let v: Vec<Scored> = test
                .par_iter()
                .map(|&(r, p)| base(statistical_stop_baseline(history, data.row(r, p), mode), (r, p)))
                .collect();
            named.push((format!("statistical-{}", mode.name()), v));
        }
        for (name, b_items) in named {
            let sec = ModelSection::compute(&name, &b_items);
            comparisons.push(Comparison::of(&model_section, &items, &sec, &b_items));
            sections.push(sec);
        }
    }

    // Horizon protocol: seed with the first N stops of a test trip and
    // predict the next `max_horizon`.
    let h = ev.max_horizon;
    let need = ev.min_trip_stops.max(n + h);
    let test_dates: std::collections::BTreeSet<NaiveDate> =
        split.test.iter().map(|&i| data.stops[data.runs[data.samples[i].0][0]].transit_date).collect();
    let candidates: Vec<usize> = (0..data.runs.len())
        .filter(|&r| data.runs[r].len() >= need && test_dates.contains(&data.row(r, 0).transit_date))
        .collect();
    let chosen: Vec<usize> = seeded_subset(candidates, Some(ev.horizon_trips), cfg.seed, 6);
    let cases: Vec<HorizonCase> = chosen
        .par_iter()
        .map(|&r| {
            let seed: Vec<SparseVec> = (0..n).map(|p| model.encode(&data.raw(r, p, day))).collect();
            let planned: Vec<Option<RawFeatures>> = (n..n + h - 1).map(|p| Some(stop_raw(data.row(r, p), 0.0, None, day))).collect();
            let last = data.row(r, n - 1).summed_load as f64;
            let model_bins = seq2seq::predict_horizon(&model, &seed, last, &planned, h)?;
            let stat = match &history {
                Some(hist) => ev
                    .stat_modes
                    .iter()
                    .map(|&m| (n..n + h).map(|p| statistical_stop_baseline(hist, data.row(r, p), m)).collect())
                    .collect(),
                None => Vec::new(),
            };
            Ok(HorizonCase {
                truth: (n..n + h).map(|p| data.row(r, p).target_bin).collect(),
                model: model_bins,
                rolling_seed: data.row(r, n - 1).target_bin,
                stat,
            })
        })
        .collect::<Result<_>>()?;
    let mut horizons: Vec<HorizonTally> = vec![horizon_error_counts("lstm", &cases, h, |c| {
        c.truth.iter().zip(&c.model).map(|(&t, &p)| (t, Some(p))).collect()
    })];
    if with_baselines {
        horizons.push(horizon_error_counts("rolling", &cases, h, |c| {
            c.truth
                .iter()
                .enumerate()
                .map(|(k, &t)| (t, rolling_stop_baseline(c.rolling_seed, k + 1)))
                .collect()
        }));
        for (m, mode) in ev.stat_modes.iter().enumerate() {
            horizons.push(horizon_error_counts(&format!("statistical-{}", mode.name()), &cases, h, |c| {
                c.truth.iter().zip(&c.stat[m]).map(|(&t, &p)| (t, p)).collect()
            }));
        }
    }
    let report = EvalReport {
        level: Level::Stop.name().to_string(),
        provenance: Some(Provenance::of(cfg).json()),
        sections,
        comparisons,
        horizons,
    };
    report.write(&cfg.eval_dir(Level::Stop), Some(&Provenance::of(cfg).header()))?;
    Ok(report)
}

// ---------------------------------------------------------------- commands

pub fn run_train(cfg: &PipelineConfig, level: Level) -> Result<TrainSummary> {
    let t0 = Instant::now();
    let out = match level {
        Level::Stop => train_stop(cfg),
        _ => train_trip(cfg, level),
    }?;
    log::info!(
        "train {level}: {} rows in {:.1}s",
        out.train_rows,
        t0.elapsed().as_secs_f64()
    );
    Ok(out)
}

pub fn run_evaluate(cfg: &PipelineConfig, level: Level, model_path: Option<&Path>, with_baselines: bool) -> Result<EvalReport> {
    let t0 = Instant::now();
    let default = cfg.model_path(level);
    let path = model_path.unwrap_or(&default);
    require(path, "train")?;
    let report = match level {
        Level::Stop => evaluate_stop(cfg, path, with_baselines),
        _ => evaluate_trip(cfg, level, path, with_baselines),
    }?;
    log::info!("evaluate {level} in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(report)
}

/// Writes predictions for a query file in the fused trips or stops format.
/// Trip rows get the predicted bin and the raw regression score; stop rows
/// get the next-stop bin and its probability for every stop preceded by
/// enough stops of its trip. Day-ahead features are computed from the
/// query file itself.
pub fn run_predict(cfg: &PipelineConfig, level: Level, model_path: Option<&Path>, query: &Path, out: &Path) -> Result<usize> {
    let default = cfg.model_path(level);
    let model_path = model_path.unwrap_or(&default);
    require(model_path, "train")?;
    let header = Provenance::of(cfg).header();
    let mut w = create_writer(out, Some(&header))?;
    let csv_err = |e| Error::csv(out, e);
    let mut count = 0;
    match level {
        Level::Stop => {
            let model = load_stop_model(cfg, model_path)?;
            let n = model.config.past_stops;
            let data = StopData::new(read_stops_csv(query)?, n);
            let enc = encode_rows(&data, &data.samples, n, |r| model.encode(r), model.day_ordinal);
            let samples = build_samples(&data, &data.samples, n, &enc);
            let probs: Vec<[f64; 5]> = samples
                .par_iter()
                .map(|s| model.params.forward(&s.past))
                .collect::<Result<_>>()?;
            w.write_record(["transit_date", "trip_id", "stop_id", "stop_sequence", "time_window", "predicted_bin", "probability"])
                .map_err(csv_err)?;
            for (&(r, p), pr) in data.samples.iter().zip(&probs) {
                let obs = data.row(r, p);
                let bin = seq2seq::argmax(pr);
                w.write_record([
                    obs.transit_date.format(DATE_FORMAT).to_string(),
                    obs.trip_id.clone(),
                    obs.stop_id.clone(),
                    obs.stop_sequence.to_string(),
                    obs.time_window.to_string(),
                    bin.name().to_string(),
                    pr[bin.index()].to_string(),
                ])
                .map_err(csv_err)?;
                count += 1;
            }
        }
        _ => {
            let model = TripModel::load(model_path)?;
            let trips = read_trips_csv(query)?;
            let features = FeatureConfig {
                past_trips: model.past_trips,
                day_ordinal: cfg.features.day_ordinal,
            };
            let (layout, raw) = trip_features(&trips, level_is_day_ahead(level)?, &features);
            check_layout(&model.schema, &layout)?;
            let all: Vec<usize> = (0..trips.len()).collect();
            let preds = predict_trips(&model, &trips, &raw, &all)?;
            w.write_record(["transit_date", "trip_id", "route_id", "direction", "time_window", "predicted_bin", "raw_score"])
                .map_err(csv_err)?;
            for (t, (score, bin)) in trips.iter().zip(&preds) {
                w.write_record([
                    t.key.transit_date.format(DATE_FORMAT).to_string(),
                    t.key.trip_id.clone(),
                    t.key.route_id.clone(),
                    t.key.direction.clone(),
                    t.key.time_window.to_string(),
                    bin.name().to_string(),
                    score.to_string(),
                ])
                .map_err(csv_err)?;
                count += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub level: String,
    pub model: String,
    pub evaluated: usize,
    pub abstained: usize,
    pub exact: usize,
    pub rmse: f64,
    pub f1: f64,
}

/// Collects every evaluation report under the output directory into
/// `report/summary.json` and `report/summary.md`.
pub fn run_report(cfg: &PipelineConfig) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut horizon_lines = Vec::new();
    for level in Level::ALL {
        let path = cfg.eval_dir(level).join("report.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        for s in &report.sections {
            rows.push(SummaryRow {
                level: level.name().to_string(),
                model: s.name.clone(),
                evaluated: s.evaluated,
                abstained: s.abstained,
                exact: s.abs_error_counts[0],
                rmse: s.rmse,
                f1: s.low_high.f1,
            });
        }
        for t in &report.horizons {
            let errs: Vec<String> = t
                .rows
                .iter()
                .map(|r| format!("{} ({} abstained)", r.errors(), r.abstained))
                .collect();
            horizon_lines.push(format!("| {} | {} |", t.name, errs.join(" | ")));
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no evaluation reports found; run `tlf evaluate` first".into()));
    }
    let prov = Provenance::of(cfg);
    let dir = cfg.out_dir.join("report");
    write_json(&dir.join("summary.json"), &serde_json::json!({ "provenance": prov, "rows": rows }))?;
    let mut md = format!(
        "<!--\n{}\n-->\n# Evaluation summary\n\n| level | model | evaluated | abstained | exact | bin RMSE | low/high F1 |\n|---|---|---|---|---|---|---|\n",
        prov.header()
    );
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} |\n",
            r.level, r.model, r.evaluated, r.abstained, r.exact, r.rmse, r.f1
        ));
    }
    if !horizon_lines.is_empty() {
        let h = cfg.evaluation.max_horizon;
        md.push_str("\n## Errors per future stop\n\n| model |");
        for k in 1..=h {
            md.push_str(&format!(" +{k} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(h));
        md.push('\n');
        for l in horizon_lines {
            md.push_str(&l);
            md.push('\n');
        }
    }
    let path = dir.join("summary.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = PipelineConfig::from_json(r#"{"seed": 1, "widow_minutes": 15}"#).unwrap_err();
        assert!(err.to_string().contains("widow_minutes"), "{err}");
        let err = PipelineConfig::from_json(r#"{"gbt": {"params": {"depth": 3}}}"#).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.clean.min_load, -5);
        assert_eq!(cfg.clean.max_imbalance, 0.2);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_propagate_seed() {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&Overrides {
            seed: Some(99),
            window_minutes: Some(30),
            out_dir: Some("elsewhere".into()),
        });
        assert_eq!((cfg.seed, cfg.synth.seed, cfg.gbt.params.seed, cfg.stop_model.network.seed), (99, 99, 99, 99));
        assert_eq!(cfg.window_minutes, 30);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn invalid_values_name_their_key() {
        let mut cfg = PipelineConfig::default();
        cfg.split.trip_train_ratio = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("trip_train_ratio"));
        let mut cfg = PipelineConfig::default();
        cfg.split.stop_train_end = NaiveDate::from_ymd_opt(2021, 1, 1);
        assert!(cfg.validate().unwrap_err().to_string().contains("stop_validation_end"));
    }

    #[test]
    fn provenance_header_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 3;
        let prov = Provenance::of(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut w = create_writer(&path, Some(&prov.header())).unwrap();
        w.write_record(["a", "b"]).unwrap();
        w.flush().unwrap();
        drop(w);
        assert_eq!(Provenance::read(&path).unwrap(), prov);
        let jpath = dir.path().join("x.json");
        write_json(&jpath, &serde_json::json!({"provenance": prov, "x": 1})).unwrap();
        assert_eq!(Provenance::read(&jpath).unwrap(), prov);
        assert_eq!(prov.config_sha256, Provenance::of(&cfg).config_sha256);
        cfg.seed = 4;
        assert_ne!(prov.config_sha256, Provenance::of(&cfg).config_sha256);
    }

    #[test]
    fn level_names_parse() {
        for l in Level::ALL {
            assert_eq!(l.name().parse::<Level>().unwrap(), l);
        }
        assert!("trip".parse::<Level>().is_err());
    }
}
