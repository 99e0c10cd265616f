//! Metrics and report output.
//!
//! Errors are `y_true - y_pred` on ordinal bin indices. Abstentions are
//! counted but never enter a metric's denominator.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{low_high_of_level, EvalRecord, LoadLevel, LowHigh};
use crate::error::{Error, Result};
use crate::ingest::create_writer;
use crate::svg;

const N: usize = 5;

/// One prediction request. `pred = None` means the model abstained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub transit_date: NaiveDate,
    pub time_window: u32,
    pub truth: LoadLevel,
    pub pred: Option<LoadLevel>,
    pub raw_truth: Option<f64>,
    pub raw_pred: Option<f64>,
}

impl Scored {
    pub fn record(&self) -> Option<EvalRecord> {
        self.pred.map(|p| EvalRecord::new(self.truth, p))
    }
}

/// Signed error counts; `counts[e + 4]` holds error `e`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub counts: [usize; 9],
}

impl ErrorHistogram {
    pub fn count(&self, error: i8) -> usize {
        self.counts[(error + 4) as usize]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Counts of |error| = 0..=4.
    pub fn abs_counts(&self) -> [usize; N] {
        let mut out = [0; N];
        for e in -4i8..=4 {
            out[e.unsigned_abs() as usize] += self.count(e);
        }
        out
    }
}

pub fn ordinal_errors(records: &[EvalRecord]) -> ErrorHistogram {
    let mut h = ErrorHistogram::default();
    for r in records {
        h.counts[(r.y_error + 4) as usize] += 1;
    }
    h
}

fn rmse_of(sq_sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sq_sum / n as f64).sqrt()
    }
}

/// Root mean squared difference of `(truth, prediction)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> f64 {
    rmse_of(pairs.iter().map(|(t, p)| (t - p) * (t - p)).sum(), pairs.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRmse {
    pub time_window: u32,
    pub n: usize,
    pub rmse: f64,
}

/// RMSE per time window; windows without pairs are absent.
pub fn rmse_by_window(items: &[(u32, f64, f64)]) -> Vec<WindowRmse> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for &(w, t, p) in items {
        let e = acc.entry(w).or_default();
        e.0 += (t - p) * (t - p);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(time_window, (sq, n))| WindowRmse {
            time_window,
            n,
            rmse: rmse_of(sq, n),
        })
        .collect()
}

/// Low-vs-high classification metrics with High as the positive class.
/// Undefined ratios are reported as 0 with their flag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowHighMetrics {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

pub fn low_high_metrics(records: &[EvalRecord]) -> LowHighMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        match (low_high_of_level(r.y_true), low_high_of_level(r.y_pred)) {
            (LowHigh::High, LowHigh::High) => tp += 1,
            (LowHigh::Low, LowHigh::High) => fp += 1,
            (LowHigh::High, LowHigh::Low) => fn_ += 1,
            (LowHigh::Low, LowHigh::Low) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { (0.0, true) } else { (a as f64 / b as f64, false) };
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let f1_undefined = precision + recall == 0.0;
    let f1 = if f1_undefined {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    LowHighMetrics {
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    }
}

/// `matrix[true][pred]`.
pub fn confusion(records: &[EvalRecord]) -> [[usize; N]; N] {
    let mut m = [[0; N]; N];
    for r in records {
        m[r.y_true.index()][r.y_pred.index()] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthCounts {
    /// `YYYY-MM`.
    pub month: String,
    pub evaluated: usize,
    pub abs_counts: [usize; N],
}

pub fn monthly_consistency(items: &[(NaiveDate, EvalRecord)]) -> Vec<MonthCounts> {
    let mut acc: BTreeMap<(i32, u32), [usize; N]> = BTreeMap::new();
    for (d, r) in items {
        acc.entry((d.year(), d.month())).or_default()[r.y_error.unsigned_abs() as usize] += 1;
    }
    acc.into_iter()
        .map(|((y, m), abs_counts)| MonthCounts {
            month: format!("{y:04}-{m:02}"),
            evaluated: abs_counts.iter().sum(),
            abs_counts,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub evaluated: usize,
    pub abstained: usize,
    pub abs_counts: [usize; N],
}

impl HorizonRow {
    pub fn errors(&self) -> usize {
        self.evaluated - self.abs_counts[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonTally {
    pub name: String,
    pub rows: Vec<HorizonRow>,
}

/// Tallies error magnitudes per future-stop index. `predict` returns, for
/// one item, `(truth, prediction)` for horizons 1, 2, ...; entries past
/// `max_horizon` are ignored.
pub fn horizon_error_counts<T, F>(name: &str, items: &[T], max_horizon: usize, predict: F) -> HorizonTally
where
    T: Sync,
    F: Fn(&T) -> Vec<(LoadLevel, Option<LoadLevel>)> + Sync,
{
    let blank = || {
        (1..=max_horizon)
            .map(|horizon| HorizonRow {
                horizon,
                evaluated: 0,
                abstained: 0,
                abs_counts: [0; N],
            })
            .collect::<Vec<_>>()
    };
    let parts: Vec<Vec<HorizonRow>> = items
        .par_chunks(64)
        .map(|chunk| {
            let mut rows = blank();
            for item in chunk {
                for (row, (truth, pred)) in rows.iter_mut().zip(predict(item)) {
                    match pred {
                        Some(p) => {
                            row.evaluated += 1;
                            row.abs_counts[EvalRecord::new(truth, p).y_error.unsigned_abs() as usize] += 1;
                        }
                        None => row.abstained += 1,
                    }
                }
            }
            rows
        })
        .collect();
    let mut rows = blank();
    for part in parts {
        for (r, p) in rows.iter_mut().zip(part) {
            r.evaluated += p.evaluated;
            r.abstained += p.abstained;
            for k in 0..N {
                r.abs_counts[k] += p.abs_counts[k];
            }
        }
    }
    HorizonTally {
        name: name.to_string(),
        rows,
    }
}

/// All metrics of one model on one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub name: String,
    pub queries: usize,
    pub evaluated: usize,
    pub abstained: usize,
    pub histogram: ErrorHistogram,
    pub abs_error_counts: [usize; N],
    pub rmse: f64,
    pub rmse_by_window: Vec<WindowRmse>,
    pub raw_rmse: Option<f64>,
    pub raw_rmse_by_window: Option<Vec<WindowRmse>>,
    pub low_high: LowHighMetrics,
    pub confusion: [[usize; N]; N],
    pub monthly: Vec<MonthCounts>,
}

impl ModelSection {
    pub fn compute(name: &str, items: &[Scored]) -> Self {
        let evaluated: Vec<(&Scored, EvalRecord)> = items.iter().filter_map(|s| s.record().map(|r| (s, r))).collect();
        let records: Vec<EvalRecord> = evaluated.iter().map(|(_, r)| *r).collect();
        let histogram = ordinal_errors(&records);
        let bins: Vec<(u32, f64, f64)> = evaluated
            .iter()
            .map(|(s, r)| (s.time_window, r.y_true.index() as f64, r.y_pred.index() as f64))
            .collect();
        let raw: Vec<(u32, f64, f64)> = evaluated
            .iter()
            .filter_map(|(s, _)| Some((s.time_window, s.raw_truth?, s.raw_pred?)))
            .collect();
        let (raw_rmse, raw_rmse_by_window) = if raw.is_empty() {
            (None, None)
        } else {
            let pairs: Vec<(f64, f64)> = raw.iter().map(|&(_, t, p)| (t, p)).collect();
            (Some(rmse(&pairs)), Some(rmse_by_window(&raw)))
        };
        let pairs: Vec<(f64, f64)> = bins.iter().map(|&(_, t, p)| (t, p)).collect();
        let dated: Vec<(NaiveDate, EvalRecord)> = evaluated.iter().map(|(s, r)| (s.transit_date, *r)).collect();
        Self {
            name: name.to_string(),
            queries: items.len(),
            evaluated: records.len(),
            abstained: items.len() - records.len(),
            abs_error_counts: histogram.abs_counts(),
            histogram,
            rmse: rmse(&pairs),
            rmse_by_window: rmse_by_window(&bins),
            raw_rmse,
            raw_rmse_by_window,
            low_high: low_high_metrics(&records),
            confusion: confusion(&records),
            monthly: monthly_consistency(&dated),
        }
    }
}

/// Ratios of a model's correct (error 0) and mistaken counts to a
/// baseline's (1.4 means 40% more), plus bin RMSE of both on the queries
/// where neither abstained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    pub correct_ratio: Option<f64>,
    pub mistake_ratio: Option<f64>,
    pub shared: usize,
    pub model_rmse_shared: f64,
    pub baseline_rmse_shared: f64,
    /// RMSE of raw values on rows where both sides give one.
    pub raw_shared: usize,
    pub model_raw_rmse_shared: Option<f64>,
    pub baseline_raw_rmse_shared: Option<f64>,
}

impl Comparison {
    /// `model_items` and `baseline_items` describe the same queries in the
    /// same order.
    pub fn of(model: &ModelSection, model_items: &[Scored], baseline: &ModelSection, baseline_items: &[Scored]) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let correct = |s: &ModelSection| s.abs_error_counts[0];
        let wrong = |s: &ModelSection| s.evaluated - s.abs_error_counts[0];
        let (mut m, mut b) = (Vec::new(), Vec::new());
        let (mut mr, mut br) = (Vec::new(), Vec::new());
        for (x, y) in model_items.iter().zip(baseline_items) {
            if let (Some(p), Some(q)) = (x.pred, y.pred) {
                m.push((x.truth.index() as f64, p.index() as f64));
                b.push((y.truth.index() as f64, q.index() as f64));
            }
            if let (Some(t), Some(p), Some(q)) = (x.raw_truth, x.raw_pred, y.raw_pred) {
                mr.push((t, p));
                br.push((t, q));
            }
        }
        let raw = |v: &[(f64, f64)]| (!v.is_empty()).then(|| rmse(v));
        Self {
            model: model.name.clone(),
            baseline: baseline.name.clone(),
            correct_ratio: ratio(correct(model), correct(baseline)),
            mistake_ratio: ratio(wrong(model), wrong(baseline)),
            shared: m.len(),
            model_rmse_shared: rmse(&m),
            baseline_rmse_shared: rmse(&b),
            raw_shared: mr.len(),
            model_raw_rmse_shared: raw(&mr),
            baseline_raw_rmse_shared: raw(&br),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: String,
    pub provenance: Option<serde_json::Value>,
    pub sections: Vec<ModelSection>,
    pub comparisons: Vec<Comparison>,
    pub horizons: Vec<HorizonTally>,
}

impl EvalReport {
    pub fn section(&self, name: &str) -> Option<&ModelSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Writes `report.json`, figure CSVs and SVG plots into `dir`.
    pub fn write(&self, dir: &Path, header: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        let path = dir.join("report.json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

        let path = dir.join("error_histogram.csv");
        let mut w = create_writer(&path, header)?;
        let csv_err = |e| Error::csv(&path, e);
        w.write_record(["model", "y_error", "count"]).map_err(csv_err)?;
        for s in &self.sections {
            for e in -4i8..=4 {
                w.write_record([s.name.clone(), e.to_string(), s.histogram.count(e).to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("rmse_by_window.csv");
        let mut w = create_writer(&path, header)?;
        let csv_err = |e| Error::csv(&path, e);
        w.write_record(["model", "time_window", "n", "rmse", "raw_rmse"]).map_err(csv_err)?;
        for s in &self.sections {
            let raw: BTreeMap<u32, f64> = s
                .raw_rmse_by_window
                .iter()
                .flatten()
                .map(|r| (r.time_window, r.rmse))
                .collect();
            for r in &s.rmse_by_window {
                w.write_record([
                    s.name.clone(),
                    r.time_window.to_string(),
                    r.n.to_string(),
                    r.rmse.to_string(),
                    raw.get(&r.time_window).map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("confusion.csv");
        let mut w = create_writer(&path, header)?;
        let csv_err = |e| Error::csv(&path, e);
        w.write_record(["model", "y_true", "y_pred", "count"]).map_err(csv_err)?;
        for s in &self.sections {
            for (t, row) in s.confusion.iter().enumerate() {
                for (p, c) in row.iter().enumerate() {
                    w.write_record([s.name.clone(), level_name(t), level_name(p), c.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("monthly_errors.csv");
        let mut w = create_writer(&path, header)?;
        let csv_err = |e| Error::csv(&path, e);
        w.write_record(["model", "month", "evaluated", "abs0", "abs1", "abs2", "abs3", "abs4"])
            .map_err(csv_err)?;
        for s in &self.sections {
            for m in &s.monthly {
                let mut rec = vec![s.name.clone(), m.month.clone(), m.evaluated.to_string()];
                rec.extend(m.abs_counts.iter().map(|c| c.to_string()));
                w.write_record(rec).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        if !self.horizons.is_empty() {
            let path = dir.join("horizon_errors.csv");
            let mut w = create_writer(&path, header)?;
            let csv_err = |e| Error::csv(&path, e);
            w.write_record(["model", "horizon", "evaluated", "abstained", "abs0", "abs1", "abs2", "abs3", "abs4"])
                .map_err(csv_err)?;
            for t in &self.horizons {
                for r in &t.rows {
                    let mut rec = vec![
                        t.name.clone(),
                        r.horizon.to_string(),
                        r.evaluated.to_string(),
                        r.abstained.to_string(),
                    ];
                    rec.extend(r.abs_counts.iter().map(|c| c.to_string()));
                    w.write_record(rec).map_err(csv_err)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }

        self.write_svgs(dir, header)
    }

    fn write_svgs(&self, dir: &Path, header: Option<&str>) -> Result<()> {
        let comment = header.map(|h| format!("<!-- {} -->\n", h.replace("--", "- -"))).unwrap_or_default();
        let save = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, format!("{body}{comment}")).map_err(|e| Error::io(&path, e))
        };
        let categories: Vec<String> = (-4..=4).map(|e: i8| e.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = self
            .sections
            .iter()
            .map(|s| (s.name.clone(), s.histogram.counts.iter().map(|&c| c as f64).collect()))
            .collect();
        save("error_histogram.svg", svg::grouped_bars("Prediction error counts", &categories, &series))?;
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .sections
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.rmse_by_window.iter().map(|r| (r.time_window as f64, r.rmse)).collect(),
                )
            })
            .collect();
        save("rmse_by_window.svg", svg::lines("RMSE by time window", "time window", &series))?;
        let labels: Vec<&str> = LoadLevel::ALL.iter().map(|l| l.name()).collect();
        for s in &self.sections {
            let cells: Vec<Vec<usize>> = s.confusion.iter().map(|r| r.to_vec()).collect();
            save(
                &format!("confusion_{}.svg", file_safe(&s.name)),
                svg::heatmap(&format!("Confusion: {}", s.name), &labels, &cells),
            )?;
        }
        if !self.horizons.is_empty() {
            let max_h = self.horizons.iter().map(|t| t.rows.len()).max().unwrap_or(0);
            let categories: Vec<String> = (1..=max_h).map(|h| h.to_string()).collect();
            let series: Vec<(String, Vec<f64>)> = self
                .horizons
                .iter()
                .map(|t| (t.name.clone(), t.rows.iter().map(|r| r.errors() as f64).collect()))
                .collect();
            save("horizon_errors.svg", svg::grouped_bars("Errors per future stop", &categories, &series))?;
        }
        Ok(())
    }
}

fn level_name(i: usize) -> String {
    LoadLevel::from_index(i).map(|l| l.name().to_string()).unwrap_or_default()
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use LoadLevel::*;

    /// Ten hand-enumerated (truth, prediction) pairs.
    fn fixture() -> Vec<EvalRecord> {
        [
            (High, High),
            (VeryHigh, Low),
            (Low, Low),
            (Medium, Low),
            (Low, Medium),
            (MediumHigh, High),
            (High, MediumHigh),
            (High, Medium),
            (VeryHigh, VeryHigh),
            (Low, High),
        ]
        .iter()
        .map(|&(t, p)| EvalRecord::new(t, p))
        .collect()
    }

    #[test]
    fn ten_pair_histogram() {
        let h = ordinal_errors(&fixture());
        // errors: 0, 4, 0, 1, -1, -1, 1, 2, 0, -3
        let expected = [0, 1, 0, 2, 3, 2, 1, 0, 1];
        assert_eq!(h.counts, expected);
        assert_eq!(h.abs_counts(), [3, 4, 1, 1, 1]);
        assert_eq!(h.total(), 10);
        assert_eq!(ordinal_errors(&[EvalRecord::new(VeryHigh, Low)]).count(4), 1);
    }

    #[test]
    fn ten_pair_confusion() {
        let m = confusion(&fixture());
        let expected = [
            [1, 1, 0, 1, 0],
            [1, 0, 0, 0, 0],
            [0, 0, 0, 1, 0],
            [0, 1, 1, 1, 0],
            [1, 0, 0, 0, 1],
        ];
        assert_eq!(m, expected);
        assert_eq!(m.iter().flatten().sum::<usize>(), 10);
    }

    #[test]
    fn ten_pair_low_high() {
        // High = MediumHigh and above.
        // tp: (H,H) (MH,H) (H,MH) (VH,VH) = 4; fp: (L,H) = 1;
        // fn: (VH,L) (H,M) = 2; tn: (L,L) (M,L) (L,M) = 3.
        let m = low_high_metrics(&fixture());
        assert_eq!(
            (m.true_positive, m.false_positive, m.false_negative, m.true_negative),
            (4, 1, 2, 3)
        );
        assert_eq!(m.precision, 0.8);
        assert_eq!(m.recall, 4.0 / 6.0);
        assert!((m.f1 - 2.0 * 0.8 * (4.0 / 6.0) / (0.8 + 4.0 / 6.0)).abs() < 1e-9);
        assert!((m.f1 - 8.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn low_high_closed_forms() {
        let all_high: Vec<EvalRecord> = [High, High, Low, Low].iter().map(|&t| EvalRecord::new(t, High)).collect();
        let m = low_high_metrics(&all_high);
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let none_pos = low_high_metrics(&[EvalRecord::new(High, Low)]);
        assert!(none_pos.precision_undefined && none_pos.precision == 0.0 && none_pos.f1 == 0.0);
        let perfect = low_high_metrics(&[EvalRecord::new(High, High), EvalRecord::new(Low, Low)]);
        assert_eq!(perfect.f1, 1.0);
    }

    #[test]
    fn rmse_fixtures() {
        assert_eq!(rmse(&[(1.0, 1.0), (3.0, 3.0)]), 0.0);
        assert_eq!(rmse(&[(1.0, 2.0), (3.0, 2.0), (0.0, 1.0)]), 1.0);
        // window 5: errors 1, 1, 2 -> sqrt(2); window 6: errors 0, 3, 3 -> sqrt(6)
        let items = [
            (5, 0.0, 1.0),
            (6, 2.0, 2.0),
            (5, 2.0, 1.0),
            (6, 4.0, 1.0),
            (5, 4.0, 2.0),
            (6, 0.0, 3.0),
        ];
        let r = rmse_by_window(&items);
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].time_window, r[0].n), (5, 3));
        assert!((r[0].rmse - 2f64.sqrt()).abs() < 1e-12);
        assert!((r[1].rmse - 6f64.sqrt()).abs() < 1e-12);
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn monthly_fixture() {
        let f = fixture();
        let dates = [
            date(2021, 1, 3),
            date(2021, 1, 9),
            date(2021, 2, 1),
            date(2021, 2, 28),
            date(2021, 2, 2),
            date(2021, 3, 1),
            date(2021, 3, 5),
            date(2021, 3, 6),
            date(2021, 3, 7),
            date(2021, 1, 1),
        ];
        let items: Vec<(NaiveDate, EvalRecord)> = dates.iter().copied().zip(f).collect();
        let m = monthly_consistency(&items);
        let got: Vec<(&str, usize, [usize; 5])> = m.iter().map(|c| (c.month.as_str(), c.evaluated, c.abs_counts)).collect();
        assert_eq!(
            got,
            vec![
                ("2021-01", 3, [1, 0, 0, 1, 1]),
                ("2021-02", 3, [1, 2, 0, 0, 0]),
                ("2021-03", 4, [1, 2, 1, 0, 0]),
            ]
        );
    }

    #[test]
    fn horizon_tally_matches_brute_force() {
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as usize
        };
        let trips: Vec<Vec<(LoadLevel, Option<LoadLevel>)>> = (0..100)
            .map(|_| {
                (0..3 + next() % 5)
                    .map(|_| {
                        let t = LoadLevel::from_index(next() % 5).unwrap();
                        let p = (next() % 4 != 0).then(|| LoadLevel::from_index(next() % 5).unwrap());
                        (t, p)
                    })
                    .collect()
            })
            .collect();
        let tally = horizon_error_counts("m", &trips, 5, |t| t.clone());
        for h in 1..=5 {
            let mut abs = [0usize; 5];
            let mut abstained = 0;
            for t in &trips {
                match t.get(h - 1) {
                    Some(&(truth, Some(p))) => abs[(truth as i32 - p as i32).unsigned_abs() as usize] += 1,
                    Some(&(_, None)) => abstained += 1,
                    None => {}
                }
            }
            let row = &tally.rows[h - 1];
            assert_eq!(row.abs_counts, abs);
            assert_eq!(row.abstained, abstained);
            assert_eq!(row.evaluated, abs.iter().sum::<usize>());
        }
    }

    #[test]
    fn section_counts_and_report_files() {
        let f = fixture();
        let mut items: Vec<Scored> = f
            .iter()
            .enumerate()
            .map(|(i, r)| Scored {
                transit_date: date(2021, 1 + (i % 2) as u32, 1),
                time_window: 30 + (i % 3) as u32,
                truth: r.y_true,
                pred: Some(r.y_pred),
                raw_truth: Some(i as f64),
                raw_pred: Some(i as f64 + 1.0),
            })
            .collect();
        items.push(Scored {
            pred: None,
            ..items[0].clone()
        });
        let s = ModelSection::compute("gbt", &items);
        assert_eq!((s.queries, s.evaluated, s.abstained), (11, 10, 1));
        assert_eq!(s.histogram.total(), s.confusion.iter().flatten().sum::<usize>());
        assert_eq!(s.raw_rmse, Some(1.0));
        let mut base_items = items.clone();
        for b in base_items.iter_mut().skip(5) {
            b.pred = None;
        }
        let base = ModelSection::compute("baseline", &base_items);
        let c = Comparison::of(&s, &items, &base, &base_items);
        assert_eq!(c.correct_ratio, Some(3.0 / 2.0));
        assert_eq!(c.shared, 5);
        assert_eq!(c.model_rmse_shared, c.baseline_rmse_shared);
        let report = EvalReport {
            level: "trip-anyday".into(),
            provenance: None,
            sections: vec![s, base],
            comparisons: vec![c],
            horizons: vec![horizon_error_counts("m", &[vec![(Low, Some(Low))]], 2, |t| t.clone())],
        };
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path(), Some("config sha256 abc")).unwrap();
        for f in [
            "report.json",
            "error_histogram.csv",
            "rmse_by_window.csv",
            "confusion.csv",
            "monthly_errors.csv",
            "horizon_errors.csv",
            "error_histogram.svg",
            "rmse_by_window.svg",
            "confusion_gbt.svg",
            "horizon_errors.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    fn level() -> impl Strategy<Value = LoadLevel> {
        (0usize..5).prop_map(|i| LoadLevel::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn totals_agree_and_f1_identity_holds(pairs in prop::collection::vec((level(), level()), 0..200)) {
            let recs: Vec<EvalRecord> = pairs.iter().map(|&(t, p)| EvalRecord::new(t, p)).collect();
            let h = ordinal_errors(&recs);
            let c = confusion(&recs);
            prop_assert_eq!(h.total(), recs.len());
            prop_assert_eq!(c.iter().flatten().sum::<usize>(), recs.len());
            for (t, row) in c.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), recs.iter().filter(|r| r.y_true.index() == t).count());
            }
            let m = low_high_metrics(&recs);
            if !m.f1_undefined {
                let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((f1 - m.f1).abs() <= 1e-9);
            }
        }

        #[test]
        fn rmse_is_permutation_invariant(
            pairs in prop::collection::vec((0u32..5, 0u32..5), 1..100),
            seed in any::<u64>(),
        ) {
            let v: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
            let mut w = v.clone();
            let mut s = seed;
            for i in (1..w.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                w.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert!((rmse(&v) - rmse(&w)).abs() < 1e-12);
        }
    }
}
