//! LSTM encoder-decoder for next-stop load bins.
//!
//! The encoder reads the past stops, the decoder runs one step from the
//! encoder state on the last past stop, and two dense layers map the decoder
//! output to five logits. Everything is f64 with hand-written
//! backpropagation through time, trained by Adam on cross-entropy.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{BinScheme, LoadLevel};
use crate::error::{Error, Result};
use crate::features::{percent_change, DayOrdinal, FeatureSchema, RawFeatures, STOP_LOAD, STOP_LOAD_CHANGE};

pub const N_CLASSES: usize = 5;
pub const MODEL_VERSION: u32 = 1;
/// Samples per gradient chunk. Chunks are summed in order, so results do not
/// depend on the number of threads.
const CHUNK: usize = 8;

/// Sparse input vector; one-hot blocks leave most entries at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub width: usize,
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(v: &[f64]) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (j, &x) in v.iter().enumerate() {
            if x != 0.0 {
                idx.push(j as u32);
                val.push(x);
            }
        }
        Self {
            width: v.len(),
            idx,
            val,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for (&j, &x) in self.idx.iter().zip(&self.val) {
            out[j as usize] = x;
        }
        out
    }

    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().map(|&j| j as usize).zip(self.val.iter().copied())
    }
}

/// Past stops and the next stop's bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub past: Vec<SparseVec>,
    pub target: LoadLevel,
}

/// Per-column affine map applied to encoded rows before the network.
/// Columns holding only 0 and 1 pass through so indicator blocks stay sparse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    pub fn identity(width: usize) -> Self {
        Self {
            shift: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn fit<'a>(width: usize, rows: impl Iterator<Item = &'a [f32]>) -> Self {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut indicator = vec![true; width];
        let mut n = 0usize;
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                let v = v as f64;
                sum[j] += v;
                sq[j] += v * v;
                indicator[j] &= v == 0.0 || v == 1.0;
            }
            n += 1;
        }
        let mut out = Self::identity(width);
        if n == 0 {
            return out;
        }
        for j in 0..width {
            if indicator[j] {
                continue;
            }
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            out.shift[j] = mean;
            out.scale[j] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, row: &[f32]) -> SparseVec {
        let dense: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| (v as f64 - self.shift[j]) * self.scale[j])
            .collect();
        SparseVec::from_dense(&dense)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub hidden: usize,
    pub dense: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub past_stops: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dense: 64,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            past_stops: 5,
            patience: 5,
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.dense == 0 {
            return Err(Error::Config("hidden and dense sizes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.past_stops == 0 {
            return Err(Error::Config("past_stops must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// Offsets of each weight block inside the flat parameter vector. Input
/// and recurrent matrices are stored input-major: row `j` holds the 4H gate
/// weights of input unit `j`, gates ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    f: usize,
    h: usize,
    d: usize,
}

struct LstmOffsets {
    w: usize,
    u: usize,
    b: usize,
}

impl Layout {
    fn g(&self) -> usize {
        4 * self.h
    }
    fn lstm_len(&self) -> usize {
        (self.f + self.h + 1) * self.g()
    }
    fn lstm(&self, which: usize) -> LstmOffsets {
        let base = which * self.lstm_len();
        LstmOffsets {
            w: base,
            u: base + self.f * self.g(),
            b: base + (self.f + self.h) * self.g(),
        }
    }
    /// Dense 1 is D x H row-major, then its bias; dense 2 is 5 x D, then bias.
    fn d1(&self) -> usize {
        2 * self.lstm_len()
    }
    fn c1(&self) -> usize {
        self.d1() + self.d * self.h
    }
    fn d2(&self) -> usize {
        self.c1() + self.d
    }
    fn c2(&self) -> usize {
        self.d2() + N_CLASSES * self.d
    }
    fn len(&self) -> usize {
        self.c2() + N_CLASSES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqParams {
    pub input_width: usize,
    pub hidden: usize,
    pub dense: usize,
    pub seed: u64,
    #[serde(skip)]
    pub weights: Vec<f64>,
}

struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct ForwardCache {
    encoder: Vec<StepCache>,
    decoder: StepCache,
    h_dec: Vec<f64>,
    a: Vec<f64>,
    probs: [f64; N_CLASSES],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Seq2SeqParams {
    fn layout(&self) -> Layout {
        Layout {
            f: self.input_width,
            h: self.hidden,
            d: self.dense,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len()
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases, forget bias +1.
    pub fn init(input_width: usize, hidden: usize, dense: usize, seed: u64) -> Self {
        let mut p = Self::zeros(input_width, hidden, dense);
        p.seed = seed;
        let lay = p.layout();
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.weights.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for which in 0..2 {
            let o = lay.lstm(which);
            for k in 0..lay.g() {
                p.weights[o.b + k] = if (hidden..2 * hidden).contains(&k) { 1.0 } else { 0.0 };
            }
        }
        p.weights[lay.c1()..lay.c1() + dense].fill(0.0);
        p.weights[lay.c2()..lay.c2() + N_CLASSES].fill(0.0);
        p
    }

    pub fn zeros(input_width: usize, hidden: usize, dense: usize) -> Self {
        let lay = Layout {
            f: input_width,
            h: hidden,
            d: dense,
        };
        Self {
            input_width,
            hidden,
            dense,
            seed: 0,
            weights: vec![0.0; lay.len()],
        }
    }

    fn check(&self, past: &[SparseVec]) -> Result<()> {
        if past.is_empty() {
            return Err(Error::Shape("a sample needs at least one past stop".into()));
        }
        if let Some(bad) = past.iter().find(|v| v.width != self.input_width) {
            return Err(Error::Shape(format!(
                "input width {} does not match model width {}",
                bad.width, self.input_width
            )));
        }
        Ok(())
    }

    fn lstm_step(&self, which: usize, x: &SparseVec, h_prev: &[f64], c_prev: &[f64]) -> (StepCache, Vec<f64>, Vec<f64>) {
        let lay = self.layout();
        let (h, g) = (lay.h, lay.g());
        let o = lay.lstm(which);
        let w = &self.weights;
        let mut z = w[o.b..o.b + g].to_vec();
        for (j, xj) in x.iter() {
            let row = &w[o.w + j * g..o.w + (j + 1) * g];
            for (zk, wk) in z.iter_mut().zip(row) {
                *zk += xj * wk;
            }
        }
        for (k, &hk) in h_prev.iter().enumerate() {
            if hk != 0.0 {
                let row = &w[o.u + k * g..o.u + (k + 1) * g];
                for (zk, wk) in z.iter_mut().zip(row) {
                    *zk += hk * wk;
                }
            }
        }
        let mut gates = z;
        for k in 0..h {
            gates[k] = sigmoid(gates[k]);
            gates[h + k] = sigmoid(gates[h + k]);
            gates[2 * h + k] = gates[2 * h + k].tanh();
            gates[3 * h + k] = sigmoid(gates[3 * h + k]);
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut hn = vec![0.0; h];
        for k in 0..h {
            c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
            tanh_c[k] = c[k].tanh();
            hn[k] = gates[3 * h + k] * tanh_c[k];
        }
        (
            StepCache {
                h_prev: h_prev.to_vec(),
                c_prev: c_prev.to_vec(),
                gates,
                tanh_c,
            },
            hn,
            c,
        )
    }

    fn forward_cached(&self, past: &[SparseVec]) -> ForwardCache {
        let lay = self.layout();
        let (h, d) = (lay.h, lay.d);
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut encoder = Vec::with_capacity(past.len());
        for x in past {
            let (cache, hn, cn) = self.lstm_step(0, x, &hs, &cs);
            encoder.push(cache);
            hs = hn;
            cs = cn;
        }
        let last = past.last().expect("checked non-empty");
        let (decoder, h_dec, _) = self.lstm_step(1, last, &hs, &cs);
        let w = &self.weights;
        let mut a = vec![0.0; d];
        for (r, ar) in a.iter_mut().enumerate() {
            let row = &w[lay.d1() + r * h..lay.d1() + (r + 1) * h];
            let s: f64 = row.iter().zip(&h_dec).map(|(x, y)| x * y).sum();
            *ar = (s + w[lay.c1() + r]).tanh();
        }
        let mut logits = [0.0; N_CLASSES];
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &w[lay.d2() + c * d..lay.d2() + (c + 1) * d];
            *l = row.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() + w[lay.c2() + c];
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0; N_CLASSES];
        let mut total = 0.0;
        for c in 0..N_CLASSES {
            probs[c] = (logits[c] - max).exp();
            total += probs[c];
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        ForwardCache {
            encoder,
            decoder,
            h_dec,
            a,
            probs,
        }
    }

    /// Class probabilities for the stop after `past`.
    pub fn forward(&self, past: &[SparseVec]) -> Result<[f64; N_CLASSES]> {
        self.check(past)?;
        Ok(self.forward_cached(past).probs)
    }

    pub fn predict(&self, past: &[SparseVec]) -> Result<LoadLevel> {
        Ok(argmax(&self.forward(past)?))
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, sample: &SequenceSample) -> Result<f64> {
        let p = self.forward(&sample.past)?;
        Ok(-p[sample.target.index()].max(f64::MIN_POSITIVE).ln())
    }

    fn lstm_backward(
        &self,
        which: usize,
        x: &SparseVec,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let lay = self.layout();
        let (h, g) = (lay.h, lay.g());
        let o = lay.lstm(which);
        let gt = &cache.gates;
        let mut dz = vec![0.0; g];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (i, f, gg, og) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * og * (1.0 - tc * tc);
            dz[k] = dct * gg * i * (1.0 - i);
            dz[h + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dct * i * (1.0 - gg * gg);
            dz[3 * h + k] = dh[k] * tc * og * (1.0 - og);
            dc_prev[k] = dct * f;
        }
        for (j, xj) in x.iter() {
            let row = &mut grad[o.w + j * g..o.w + (j + 1) * g];
            for (gk, dk) in row.iter_mut().zip(&dz) {
                *gk += xj * dk;
            }
        }
        let mut dh_prev = vec![0.0; h];
        for k in 0..h {
            let hk = cache.h_prev[k];
            let urow = &self.weights[o.u + k * g..o.u + (k + 1) * g];
            dh_prev[k] = urow.iter().zip(&dz).map(|(u, d)| u * d).sum();
            if hk != 0.0 {
                let row = &mut grad[o.u + k * g..o.u + (k + 1) * g];
                for (gk, dk) in row.iter_mut().zip(&dz) {
                    *gk += hk * dk;
                }
            }
        }
        for (gk, dk) in grad[o.b..o.b + g].iter_mut().zip(&dz) {
            *gk += dk;
        }
        (dh_prev, dc_prev)
    }

    /// Adds the gradient of one sample's loss to `grad`; returns the loss
    /// and whether the prediction was correct.
    fn accumulate(&self, sample: &SequenceSample, grad: &mut [f64]) -> (f64, bool) {
        let lay = self.layout();
        let (h, d) = (lay.h, lay.d);
        let fc = self.forward_cached(&sample.past);
        let t = sample.target.index();
        let loss = -fc.probs[t].max(f64::MIN_POSITIVE).ln();
        let correct = argmax(&fc.probs).index() == t;
        let mut dlogits = fc.probs;
        dlogits[t] -= 1.0;
        let mut da = vec![0.0; d];
        for (c, &dl) in dlogits.iter().enumerate() {
            let row = lay.d2() + c * d;
            for r in 0..d {
                grad[row + r] += dl * fc.a[r];
                da[r] += dl * self.weights[row + r];
            }
            grad[lay.c2() + c] += dl;
        }
        let mut dh_dec = vec![0.0; h];
        for r in 0..d {
            let dpre = da[r] * (1.0 - fc.a[r] * fc.a[r]);
            let row = lay.d1() + r * h;
            for k in 0..h {
                grad[row + k] += dpre * fc.h_dec[k];
                dh_dec[k] += dpre * self.weights[row + k];
            }
            grad[lay.c1() + r] += dpre;
        }
        let last = sample.past.last().expect("checked non-empty");
        let zero = vec![0.0; h];
        let (mut dh, mut dc) = self.lstm_backward(1, last, &fc.decoder, &dh_dec, &zero, grad);
        for (x, cache) in sample.past.iter().zip(&fc.encoder).rev() {
            let (a, b) = self.lstm_backward(0, x, cache, &dh, &dc, grad);
            dh = a;
            dc = b;
        }
        (loss, correct)
    }

    /// Loss and full gradient of one sample.
    pub fn loss_and_gradient(&self, sample: &SequenceSample) -> Result<(f64, Vec<f64>)> {
        self.check(&sample.past)?;
        let mut grad = vec![0.0; self.n_params()];
        let (loss, _) = self.accumulate(sample, &mut grad);
        Ok((loss, grad))
    }

    /// Summed loss, correct count and summed gradient over `samples`,
    /// reduced in a fixed chunk order.
    fn batch_gradient(&self, samples: &[&SequenceSample]) -> (f64, usize, Vec<f64>) {
        let n = self.n_params();
        let parts: Vec<(f64, usize, Vec<f64>)> = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; n];
                let mut loss = 0.0;
                let mut correct = 0;
                for s in chunk {
                    let (l, c) = self.accumulate(s, &mut grad);
                    loss += l;
                    correct += c as usize;
                }
                (loss, correct, grad)
            })
            .collect();
        let mut grad = vec![0.0; n];
        let (mut loss, mut correct) = (0.0, 0);
        for (l, c, g) in parts {
            loss += l;
            correct += c;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (loss, correct, grad)
    }
}

pub fn argmax(p: &[f64; N_CLASSES]) -> LoadLevel {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    LoadLevel::from_index(best).expect("five classes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: Vec<usize>,
}

/// Denominator floor of the relative error, so that parameters whose true
/// gradient is zero compare by absolute difference instead.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences on `n_checked`
/// parameters drawn with `seed`.
pub fn gradient_check(
    params: &Seq2SeqParams,
    sample: &SequenceSample,
    step: f64,
    n_checked: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grad) = params.loss_and_gradient(sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..params.n_params()).collect();
    all.shuffle(&mut rng);
    all.truncate(n_checked.min(params.n_params()));
    all.sort_unstable();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &k in &all {
        let w = probe.weights[k];
        probe.weights[k] = w + step;
        let up = probe.loss(sample)?;
        probe.weights[k] = w - step;
        let down = probe.loss(sample)?;
        probe.weights[k] = w;
        let numeric = (up - down) / (2.0 * step);
        let denom = grad[k].abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        worst = worst.max((grad[k] - numeric).abs() / denom);
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked: all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Seq2SeqParams,
    pub curve: Vec<EpochStats>,
    /// Epoch whose parameters were kept (1-based; 0 = initial weights).
    pub best_epoch: usize,
}

/// Mean loss and accuracy over a sample set.
pub fn evaluate_samples(params: &Seq2SeqParams, samples: &[SequenceSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    for s in samples {
        params.check(&s.past)?;
    }
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let parts: Vec<(f64, usize)> = refs
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold((0.0, 0), |(l, c), s| {
                let p = params.forward_cached(&s.past).probs;
                let t = s.target.index();
                (l - p[t].max(f64::MIN_POSITIVE).ln(), c + (argmax(&p).index() == t) as usize)
            })
        })
        .collect();
    let (loss, correct) = parts.into_iter().fold((0.0, 0), |(a, b), (l, c)| (a + l, b + c));
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - Self::BETA1.powi(self.t);
        let b2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..w.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
            let mh = self.m[k] / b1;
            let vh = self.v[k] / b2;
            w[k] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on mean cross-entropy. With validation samples, training
/// stops after `patience` epochs without a lower validation loss and the
/// best parameters are returned.
pub fn train(train: &[SequenceSample], validation: &[SequenceSample], cfg: &Seq2SeqConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let width = train
        .first()
        .and_then(|s| s.past.first())
        .map(|v| v.width)
        .ok_or_else(|| Error::Config("training needs at least one sample".into()))?;
    let mut params = Seq2SeqParams::init(width, cfg.hidden, cfg.dense, cfg.seed);
    for s in train.iter().chain(validation) {
        params.check(&s.past)?;
    }
    let mut adam = Adam::new(params.n_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.weights.clone());
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&SequenceSample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, c, mut grad) = params.batch_gradient(&samples);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss in epoch {epoch}, batch {b} (learning rate {} may be too high)",
                    cfg.learning_rate
                )));
            }
            let scale = 1.0 / samples.len() as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            adam.step(&mut params.weights, &grad, cfg.learning_rate);
            loss_sum += loss;
            correct += c;
        }
        let (validation_loss, validation_accuracy) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_samples(&params, validation)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("non-finite validation loss in epoch {epoch}")));
            }
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_loss,
            validation_accuracy,
        };
        log::debug!(
            "epoch {epoch}: train loss {:.5} acc {:.4}, validation loss {:?}",
            stats.train_loss,
            stats.train_accuracy,
            stats.validation_loss
        );
        curve.push(stats);
        let monitored = validation_loss.unwrap_or(loss_sum / train.len() as f64);
        if monitored < best.0 {
            best = (monitored, epoch, params.weights.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if !validation.is_empty() && since_best >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = if best.1 == 0 { curve.len() } else { best.1 };
    if best.1 > 0 {
        params.weights = best.2;
    }
    Ok(TrainOutcome {
        params,
        curve,
        best_epoch,
    })
}

/// A trained stop model with everything needed to encode new stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqModel {
    pub version: u32,
    pub config: Seq2SeqConfig,
    pub schema: FeatureSchema,
    pub schema_fingerprint: String,
    pub day_ordinal: DayOrdinal,
    pub scaler: InputScaler,
    pub params: Seq2SeqParams,
    /// Free-form record of how the model was produced.
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

impl Seq2SeqModel {
    /// Encodes and scales one raw stop row.
    pub fn encode(&self, raw: &RawFeatures) -> SparseVec {
        let row = self.schema.encode_row(raw);
        self.scaler.apply(&row)
    }

    /// Writes one line of JSON header followed by the weights as
    /// little-endian f64 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = serde_json::to_vec(self)?;
        header.push(b'\n');
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&header).map_err(|e| Error::io(path, e))?;
        for w in &self.params.weights {
            f.write_all(&w.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Shape(format!("{}: missing model header", path.display())))?;
        let mut model: Seq2SeqModel = serde_json::from_slice(&bytes[..split])?;
        if model.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                model.version
            )));
        }
        let payload = &bytes[split + 1..];
        let expected = Layout {
            f: model.params.input_width,
            h: model.params.hidden,
            d: model.params.dense,
        }
        .len();
        if payload.len() != expected * 8 {
            return Err(Error::Shape(format!(
                "{}: expected {expected} weights, found {} bytes",
                path.display(),
                payload.len()
            )));
        }
        model.params.weights = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(model)
    }
}

/// Predicts `k` stops ahead. Step one uses the seed stops; each later step
/// appends the previous prediction as a stop whose load features are the
/// predicted bin's midpoint and whose other features come from `planned`.
/// `planned[s]` describes the stop predicted at step `s + 1`.
pub fn predict_horizon(
    model: &Seq2SeqModel,
    seed: &[SparseVec],
    seed_last_load: f64,
    planned: &[Option<RawFeatures>],
    k: usize,
) -> Result<Vec<LoadLevel>> {
    if k == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let missing: Vec<usize> = (0..k - 1).filter(|&s| planned.get(s).is_none_or(Option::is_none)).collect();
    if !missing.is_empty() {
        return Err(Error::Shape(format!(
            "missing planned features for future stops {:?}",
            missing.iter().map(|s| s + 1).collect::<Vec<_>>()
        )));
    }
    let load_col = model.schema.column_of(STOP_LOAD);
    let change_col = model.schema.column_of(STOP_LOAD_CHANGE);
    let n = seed.len();
    let mut window: Vec<SparseVec> = seed.to_vec();
    let mut out = Vec::with_capacity(k);
    let mut prev_load = seed_last_load;
    for step in 0..k {
        let level = model.params.predict(&window[window.len() - n..])?;
        out.push(level);
        if step + 1 == k {
            break;
        }
        let mut raw = planned[step].clone().expect("checked above");
        let proxy = BinScheme::Stop.midpoint(level);
        if let Some(c) = load_col {
            raw.numerical[c] = Some(proxy);
        }
        if let Some(c) = change_col {
            raw.numerical[c] = percent_change(Some(prev_load), Some(proxy));
        }
        prev_load = proxy;
        window.push(model.encode(&raw));
    }
    Ok(out)
}
