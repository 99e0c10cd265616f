//! Gradient-boosted regression trees with squared-error loss.
//!
//! Splits are found by exact greedy search over every distinct value of
//! every column. Trees grow level by level: each level makes one pass over
//! each presorted column, so the cost per level does not depend on the
//! number of open nodes. Columns holding exactly two values (one-hot
//! indicators) are scanned through their minority rows only.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{bin_trip_load, LoadLevel};
use crate::error::{Error, Result};
use crate::features::Matrix;

pub const MODEL_VERSION: u32 = 1;
pub const MIN_TRAINING_ROWS: usize = 10;
const MIN_GAIN: f64 = 1e-12;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtHyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtHyperparams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbtHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning_rate {} must lie in (0, 1]", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample {} must lie in (0, 1]", self.subsample)));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::Config("min_samples_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f32]) -> f64 {
        self.predict_with(|f| row[f])
    }

    fn predict_with(&self, x: impl Fn(usize) -> f32) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x(feature) <= threshold { left } else { right },
            }
        }
    }

    pub fn features_used(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

/// A fitted model: `base_score + learning_rate * sum(tree outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbtEnsemble {
    pub version: u32,
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub schema_fingerprint: String,
    pub params: GbtHyperparams,
    pub trees: Vec<Tree>,
}

impl GbtEnsemble {
    pub fn predict_row(&self, row: &[f32]) -> f64 {
        self.predict_row_first(row, self.trees.len())
    }

    fn predict_row_first(&self, row: &[f32], n_trees: usize) -> f64 {
        let sum: f64 = self.trees[..n_trees].iter().map(|t| t.predict(row)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict(&self, m: &Matrix) -> Result<Vec<f64>> {
        self.check_width(m)?;
        Ok((0..m.rows).into_par_iter().map(|i| self.predict_row(m.row(i))).collect())
    }

    /// Predictions using only the first `n_trees` trees.
    pub fn predict_first(&self, m: &Matrix, n_trees: usize) -> Result<Vec<f64>> {
        self.check_width(m)?;
        let n = n_trees.min(self.trees.len());
        Ok((0..m.rows).into_par_iter().map(|i| self.predict_row_first(m.row(i), n)).collect())
    }

    /// Regression then binning: clamp at zero, round half up, bin.
    pub fn predict_bins(&self, m: &Matrix) -> Result<Vec<LoadLevel>> {
        self.predict(m)?.into_iter().map(raw_to_trip_bin).collect()
    }

    fn check_width(&self, m: &Matrix) -> Result<()> {
        if m.cols != self.n_features {
            return Err(Error::Shape(format!(
                "model expects {} features, matrix has {}",
                self.n_features, m.cols
            )));
        }
        Ok(())
    }

    pub fn ensure_fingerprint(&self, data_fingerprint: &str) -> Result<()> {
        if self.schema_fingerprint != data_fingerprint {
            return Err(Error::Fingerprint {
                model: self.schema_fingerprint.clone(),
                data: data_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn raw_to_trip_bin(raw: f64) -> Result<LoadLevel> {
    let load = (raw.max(0.0) + 0.5).floor();
    Ok(bin_trip_load(load as i64)?.level)
}

enum ColumnIndex {
    Constant,
    /// Two distinct values; `listed` holds the rows with the rarer one.
    Binary {
        low: f32,
        high: f32,
        listed: Vec<u32>,
        listed_is_high: bool,
    },
    /// Row indices sorted by value.
    Dense(Vec<u32>),
}

/// Column-major copy of a matrix with per-column search indices. Built once
/// and shared by every fit on any subset of its rows.
pub struct TrainingData {
    n_rows: usize,
    columns: Vec<Vec<f32>>,
    index: Vec<ColumnIndex>,
}

impl TrainingData {
    pub fn new(m: &Matrix) -> Result<Self> {
        if let Some((row, col)) = m.find_non_finite() {
            return Err(Error::NonFinite {
                column: format!("column {col}"),
                row,
            });
        }
        Self::build(m)
    }

    /// Like `new`, naming a non-finite column by its schema name.
    pub fn with_names(m: &Matrix, names: &[String]) -> Result<Self> {
        if let Some((row, col)) = m.find_non_finite() {
            return Err(Error::NonFinite {
                column: names.get(col).cloned().unwrap_or_else(|| format!("column {col}")),
                row,
            });
        }
        Self::build(m)
    }

    fn build(m: &Matrix) -> Result<Self> {
        if m.rows >= NONE as usize {
            return Err(Error::Shape("too many rows".into()));
        }
        let columns: Vec<Vec<f32>> = (0..m.cols)
            .into_par_iter()
            .map(|j| (0..m.rows).map(|i| m.get(i, j)).collect())
            .collect();
        let index = columns.par_iter().map(|c| index_column(c)).collect();
        Ok(Self {
            n_rows: m.rows,
            columns,
            index,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }
}

fn index_column(c: &[f32]) -> ColumnIndex {
    let first = match c.first() {
        Some(&v) => v,
        None => return ColumnIndex::Constant,
    };
    let mut second = None;
    let mut many = false;
    for &v in c {
        if v != first {
            match second {
                None => second = Some(v),
                Some(s) if s != v => {
                    many = true;
                    break;
                }
                _ => {}
            }
        }
    }
    match (second, many) {
        (None, _) => ColumnIndex::Constant,
        (Some(s), false) => {
            let (low, high) = if first < s { (first, s) } else { (s, first) };
            let n_high = c.iter().filter(|&&v| v == high).count();
            let listed_is_high = n_high * 2 <= c.len();
            let want = if listed_is_high { high } else { low };
            ColumnIndex::Binary {
                low,
                high,
                listed: (0..c.len() as u32).filter(|&i| c[i as usize] == want).collect(),
                listed_is_high,
            }
        }
        (Some(_), true) => {
            let mut order: Vec<u32> = (0..c.len() as u32).collect();
            order.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            ColumnIndex::Dense(order)
        }
    }
}

fn midpoint(a: f32, b: f32) -> f32 {
    let m = ((a as f64 + b as f64) / 2.0) as f32;
    if m >= a && m < b {
        m
    } else {
        a
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f32,
}

#[derive(Clone, Copy)]
struct Open {
    node: usize,
    sum: f64,
    count: usize,
}

fn gain(sl: f64, nl: usize, sr: f64, nr: usize, s: f64, n: usize) -> f64 {
    sl * sl / nl as f64 + sr * sr / nr as f64 - s * s / n as f64
}

/// Best split per open node for one column.
fn best_for_column(
    j: usize,
    data: &TrainingData,
    residual: &[f64],
    slot: &[u32],
    open: &[Open],
    min_leaf: usize,
) -> Vec<Option<Candidate>> {
    let col = &data.columns[j];
    let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
    let mut consider = |k: usize, sl: f64, nl: usize, threshold: f32| {
        let o = open[k];
        let nr = o.count - nl;
        if nl < min_leaf || nr < min_leaf {
            return;
        }
        let g = gain(sl, nl, o.sum - sl, nr, o.sum, o.count);
        if g > MIN_GAIN && best[k].is_none_or(|b| g > b.gain) {
            best[k] = Some(Candidate {
                gain: g,
                feature: j,
                threshold,
            });
        }
    };
    match &data.index[j] {
        ColumnIndex::Constant => {}
        ColumnIndex::Binary {
            low,
            high,
            listed,
            listed_is_high,
        } => {
            let mut sum = vec![0.0; open.len()];
            let mut cnt = vec![0usize; open.len()];
            for &r in listed {
                let k = slot[r as usize];
                if k != NONE {
                    sum[k as usize] += residual[r as usize];
                    cnt[k as usize] += 1;
                }
            }
            let threshold = midpoint(*low, *high);
            for k in 0..open.len() {
                let (sl, nl) = if *listed_is_high {
                    (open[k].sum - sum[k], open[k].count - cnt[k])
                } else {
                    (sum[k], cnt[k])
                };
                if nl > 0 && nl < open[k].count {
                    consider(k, sl, nl, threshold);
                }
            }
        }
        ColumnIndex::Dense(order) => {
            let mut sum = vec![0.0; open.len()];
            let mut cnt = vec![0usize; open.len()];
            let mut last = vec![0.0f32; open.len()];
            for &r in order {
                let k = slot[r as usize];
                if k == NONE {
                    continue;
                }
                let (k, r) = (k as usize, r as usize);
                let v = col[r];
                if cnt[k] > 0 && v != last[k] {
                    consider(k, sum[k], cnt[k], midpoint(last[k], v));
                }
                sum[k] += residual[r];
                cnt[k] += 1;
                last[k] = v;
            }
        }
    }
    best
}

/// Grows one tree on the rows whose `slot` is 0, using residuals as targets.
fn grow_tree(data: &TrainingData, residual: &[f64], rows: &[u32], params: &GbtHyperparams) -> Tree {
    let mut slot = vec![NONE; data.n_rows];
    let (mut sum, mut count) = (0.0, 0usize);
    for &r in rows {
        slot[r as usize] = 0;
        sum += residual[r as usize];
        count += 1;
    }
    let mut nodes = vec![Node::Leaf {
        value: if count > 0 { sum / count as f64 } else { 0.0 },
    }];
    let mut open = vec![Open { node: 0, sum, count }];
    for _depth in 0..params.max_depth {
        if open.is_empty() {
            break;
        }
        let per_column: Vec<Vec<Option<Candidate>>> = (0..data.n_features())
            .into_par_iter()
            .map(|j| best_for_column(j, data, residual, &slot, &open, params.min_samples_leaf))
            .collect();
        // Lowest feature index wins ties because columns are folded in order.
        let mut chosen: Vec<Option<Candidate>> = vec![None; open.len()];
        for column in &per_column {
            for (k, c) in column.iter().enumerate() {
                if let Some(c) = c {
                    if chosen[k].is_none_or(|b| c.gain > b.gain) {
                        chosen[k] = Some(*c);
                    }
                }
            }
        }
        let mut next_open = Vec::new();
        let mut remap = vec![(NONE, NONE); open.len()];
        for (k, c) in chosen.iter().enumerate() {
            if let Some(c) = c {
                let (left, right) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[open[k].node] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
                remap[k] = (next_open.len() as u32, next_open.len() as u32 + 1);
                next_open.push(Open {
                    node: left,
                    sum: 0.0,
                    count: 0,
                });
                next_open.push(Open {
                    node: right,
                    sum: 0.0,
                    count: 0,
                });
            }
        }
        if next_open.is_empty() {
            break;
        }
        for &r in rows {
            let r = r as usize;
            let k = slot[r];
            if k == NONE {
                continue;
            }
            let k = k as usize;
            slot[r] = match chosen[k] {
                Some(c) => {
                    let s = if data.columns[c.feature][r] <= c.threshold {
                        remap[k].0
                    } else {
                        remap[k].1
                    };
                    next_open[s as usize].sum += residual[r];
                    next_open[s as usize].count += 1;
                    s
                }
                None => NONE,
            };
        }
        for o in &next_open {
            nodes[o.node] = Node::Leaf {
                value: o.sum / o.count as f64,
            };
        }
        open = next_open;
    }
    Tree { nodes }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64 + 1);
    rng
}

fn rmse(pred: &[f64], targets: &[f64], rows: &[u32]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let sse: f64 = rows
        .iter()
        .map(|&r| {
            let e = pred[r as usize] - targets[r as usize];
            e * e
        })
        .sum();
    (sse / rows.len() as f64).sqrt()
}

/// Result of a fit: the model plus the training RMSE after each tree
/// (entry 0 is the base score alone).
pub struct FitOutcome {
    pub model: GbtEnsemble,
    pub train_rmse: Vec<f64>,
    /// RMSE on `eval_rows` after each tree, if any were given.
    pub eval_rmse: Vec<f64>,
}

/// Fits on `rows` of `data`, optionally tracking RMSE on `eval_rows`.
pub fn fit_rows(
    data: &TrainingData,
    targets: &[f64],
    rows: &[usize],
    eval_rows: &[usize],
    params: &GbtHyperparams,
    schema_fingerprint: &str,
) -> Result<FitOutcome> {
    params.validate()?;
    if targets.len() != data.n_rows {
        return Err(Error::Shape(format!(
            "{} targets for {} matrix rows",
            targets.len(),
            data.n_rows
        )));
    }
    if rows.len() < MIN_TRAINING_ROWS {
        return Err(Error::Shape(format!(
            "need at least {MIN_TRAINING_ROWS} training rows, got {}",
            rows.len()
        )));
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            column: "target".into(),
            row: i,
        });
    }
    let train: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let eval: Vec<u32> = eval_rows.iter().map(|&r| r as u32).collect();
    let base_score = train.iter().map(|&r| targets[r as usize]).sum::<f64>() / train.len() as f64;
    let mut model = GbtEnsemble {
        version: MODEL_VERSION,
        base_score,
        learning_rate: params.learning_rate,
        n_features: data.n_features(),
        schema_fingerprint: schema_fingerprint.to_string(),
        params: params.clone(),
        trees: Vec::new(),
    };
    let mut tree_sum = vec![0.0; data.n_rows];
    let mut pred = vec![base_score; data.n_rows];
    let mut train_rmse = vec![rmse(&pred, targets, &train)];
    let mut eval_rmse = if eval.is_empty() {
        Vec::new()
    } else {
        vec![rmse(&pred, targets, &eval)]
    };
    let degenerate = train.iter().all(|&r| targets[r as usize] == targets[train[0] as usize]);
    if degenerate {
        return Ok(FitOutcome {
            model,
            train_rmse,
            eval_rmse,
        });
    }
    let mut residual = vec![0.0; data.n_rows];
    let tracked: Vec<u32> = train.iter().chain(eval.iter()).copied().collect();
    for t in 0..params.n_trees {
        for &r in &train {
            residual[r as usize] = targets[r as usize] - pred[r as usize];
        }
        let sample: Vec<u32> = if params.subsample < 1.0 {
            let mut rng = tree_rng(params.seed, t);
            let k = ((params.subsample * train.len() as f64).round() as usize).max(1);
            let mut s = train.clone();
            s.shuffle(&mut rng);
            s.truncate(k);
            s.sort_unstable();
            s
        } else {
            train.clone()
        };
        let tree = grow_tree(data, &residual, &sample, params);
        for &r in &tracked {
            let r = r as usize;
            tree_sum[r] += tree.predict_with(|f| data.columns[f][r]);
            pred[r] = base_score + params.learning_rate * tree_sum[r];
        }
        model.trees.push(tree);
        train_rmse.push(rmse(&pred, targets, &train));
        if !eval.is_empty() {
            eval_rmse.push(rmse(&pred, targets, &eval));
        }
    }
    Ok(FitOutcome {
        model,
        train_rmse,
        eval_rmse,
    })
}

/// Fits on every row of `m`.
pub fn fit(m: &Matrix, targets: &[f64], params: &GbtHyperparams, schema_fingerprint: &str) -> Result<GbtEnsemble> {
    let data = TrainingData::new(m)?;
    let rows: Vec<usize> = (0..m.rows).collect();
    Ok(fit_rows(&data, targets, &rows, &[], params, schema_fingerprint)?.model)
}

/// Seeded assignment of rows to `k` folds of sizes differing by at most one.
pub fn fold_assignment(rows: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    if rows.len() < k {
        return Err(Error::Config(format!("{} rows cannot fill {k} folds", rows.len())));
    }
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, r) in shuffled.into_iter().enumerate() {
        folds[i % k].push(r);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    pub fold_rmse: Vec<f64>,
}

impl CvScore {
    fn from_folds(fold_rmse: Vec<f64>) -> Self {
        let n = fold_rmse.len() as f64;
        let mean = fold_rmse.iter().sum::<f64>() / n;
        let var = fold_rmse.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean_rmse: mean,
            sd_rmse: var.sqrt(),
            fold_rmse,
        }
    }
}

/// Validation RMSE curves (entry t = after t trees) for each fold.
fn fold_curves(
    data: &TrainingData,
    targets: &[f64],
    folds: &[Vec<usize>],
    params: &GbtHyperparams,
) -> Result<Vec<Vec<f64>>> {
    (0..folds.len())
        .into_par_iter()
        .map(|i| {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let mut train = train;
            train.sort_unstable();
            Ok(fit_rows(data, targets, &train, &folds[i], params, "")?.eval_rmse)
        })
        .collect()
}

fn curve_at(curve: &[f64], n_trees: usize) -> f64 {
    curve[n_trees.min(curve.len() - 1)]
}

pub fn cross_validate(
    data: &TrainingData,
    targets: &[f64],
    rows: &[usize],
    params: &GbtHyperparams,
    k: usize,
    seed: u64,
) -> Result<CvScore> {
    let folds = fold_assignment(rows, k, seed)?;
    let curves = fold_curves(data, targets, &folds, params)?;
    Ok(CvScore::from_folds(curves.iter().map(|c| curve_at(c, params.n_trees)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtGrid {
    pub max_depth: Vec<usize>,
    pub n_trees: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for GbtGrid {
    fn default() -> Self {
        Self {
            max_depth: vec![3, 6, 9],
            n_trees: vec![100, 300],
            learning_rate: vec![0.05, 0.1, 0.3],
        }
    }
}

impl GbtGrid {
    pub fn points(&self, base: &GbtHyperparams) -> Vec<GbtHyperparams> {
        let mut out = Vec::new();
        for &max_depth in &self.max_depth {
            for &n_trees in &self.n_trees {
                for &learning_rate in &self.learning_rate {
                    out.push(GbtHyperparams {
                        max_depth,
                        n_trees,
                        learning_rate,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: GbtHyperparams,
    pub score: CvScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: GbtHyperparams,
    pub table: Vec<GridRow>,
}

/// CV scores this close are treated as equal; differences below it are
/// rounding noise between fits that reach the same function.
pub const SCORE_TIE_TOLERANCE: f64 = 1e-12;

/// Exhaustive k-fold search. Points differing only in tree count share one
/// fit per fold, read off at each count. Ties go to fewer trees, then to
/// shallower trees.
pub fn grid_search(
    data: &TrainingData,
    targets: &[f64],
    rows: &[usize],
    grid: &GbtGrid,
    base: &GbtHyperparams,
    k: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    let points = grid.points(base);
    if points.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    for p in &points {
        p.validate()?;
    }
    let folds = fold_assignment(rows, k, seed)?;
    let mut families: Vec<(usize, u64)> = points.iter().map(|p| (p.max_depth, p.learning_rate.to_bits())).collect();
    families.sort_unstable();
    families.dedup();
    let curves: Vec<Vec<Vec<f64>>> = families
        .par_iter()
        .map(|&(depth, lr)| {
            let n_trees = points
                .iter()
                .filter(|p| p.max_depth == depth && p.learning_rate.to_bits() == lr)
                .map(|p| p.n_trees)
                .max()
                .unwrap_or(1);
            let params = GbtHyperparams {
                max_depth: depth,
                learning_rate: f64::from_bits(lr),
                n_trees,
                ..base.clone()
            };
            fold_curves(data, targets, &folds, &params)
        })
        .collect::<Result<_>>()?;
    let table: Vec<GridRow> = points
        .into_iter()
        .map(|p| {
            let fam = families
                .binary_search(&(p.max_depth, p.learning_rate.to_bits()))
                .unwrap_or(0);
            let score = CvScore::from_folds(curves[fam].iter().map(|c| curve_at(c, p.n_trees)).collect());
            GridRow { params: p, score }
        })
        .collect();
    let mut best = &table[0];
    for row in &table[1..] {
        let (a, b) = (row.score.mean_rmse, best.score.mean_rmse);
        let tie = (a - b).abs() <= SCORE_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0);
        let simpler = (row.params.n_trees, row.params.max_depth) < (best.params.n_trees, best.params.max_depth);
        if (!tie && a < b) || (tie && simpler) {
            best = row;
        }
    }
    Ok(GridSearchResult {
        best: best.params.clone(),
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: String,
    pub importance: f64,
}

pub const PERMUTATION_REPEATS: usize = 5;

/// RMSE increase when the columns of one feature group are shuffled
/// together, averaged over five shuffles. Sorted by decreasing importance.
pub fn permutation_importance(
    model: &GbtEnsemble,
    m: &Matrix,
    targets: &[f64],
    groups: &[(String, Range<usize>)],
    seed: u64,
) -> Result<Vec<Importance>> {
    let base_pred = model.predict(m)?;
    let all: Vec<u32> = (0..m.rows as u32).collect();
    let base = rmse(&base_pred, targets, &all);
    let mut out: Vec<Importance> = groups
        .par_iter()
        .enumerate()
        .map(|(g, (name, cols))| {
            let mut total = 0.0;
            for rep in 0..PERMUTATION_REPEATS {
                let mut rng = tree_rng(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), rep);
                let mut perm: Vec<usize> = (0..m.rows).collect();
                perm.shuffle(&mut rng);
                let mut row = vec![0.0f32; m.cols];
                let pred: Vec<f64> = (0..m.rows)
                    .map(|i| {
                        row.copy_from_slice(m.row(i));
                        row[cols.clone()].copy_from_slice(&m.row(perm[i])[cols.clone()]);
                        model.predict_row(&row)
                    })
                    .collect();
                total += rmse(&pred, targets, &all) - base;
            }
            Importance {
                feature: name.clone(),
                importance: total / PERMUTATION_REPEATS as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.feature.cmp(&b.feature)));
    Ok(out)
}
