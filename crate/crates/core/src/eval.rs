//! Rollout evaluation, resolution and context sweeps, inverse-problem
//! probes and PGM frame rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::datagen::{gen_trajectory, Family, PdeSpec, Trajectory};
use crate::error::{Error, Result};
use crate::fft;
use crate::field::Field;
use crate::model::Model;
use crate::trainer;

/// Next-frame predictor driven by the rollout harness.
pub trait Predictor {
    fn predict_next(&self, window: &Field) -> Result<Field>;

    fn supports_dims(&self, _dims: usize) -> bool {
        true
    }
}

impl Predictor for Model {
    fn predict_next(&self, window: &Field) -> Result<Field> {
        Model::predict_next(self, window)
    }

    fn supports_dims(&self, dims: usize) -> bool {
        self.has_codec(dims)
    }
}

/// Returns the true frame that follows the window; windows are assumed to
/// start at frame 0 of `truth`.
pub struct OracleStub {
    pub truth: Field,
}

impl Predictor for OracleStub {
    fn predict_next(&self, window: &Field) -> Result<Field> {
        self.truth.frame(window.steps())
    }
}

/// Repeats the last frame of the window.
pub struct PersistenceStub;

impl Predictor for PersistenceStub {
    fn predict_next(&self, window: &Field) -> Result<Field> {
        window.frame(window.steps() - 1)
    }
}

/// Free-running rollout of `horizon` frames from `window`; aborts with
/// `Error::Divergence` once a frame exceeds `bound` in magnitude.
pub fn rollout<P: Predictor + ?Sized>(p: &P, window: &Field, horizon: usize, bound: f64) -> Result<Field> {
    let mut ctx = window.clone();
    let mut preds: Vec<Field> = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let next = p.predict_next(&ctx)?;
        let mag = next
            .data()
            .iter()
            .fold(0.0_f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if mag > bound {
            return Err(Error::Divergence {
                step: s + 1,
                magnitude: mag,
                bound,
            });
        }
        ctx.append(&next)?;
        preds.push(next);
    }
    if preds.is_empty() {
        return Field::zeros(0, window.channels(), window.extents());
    }
    Field::from_frames(&preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub family: String,
    pub dim: usize,
    pub grid: usize,
    pub context: usize,
    pub horizon: usize,
    pub channel: usize,
    pub nrmse: Option<f64>,
    pub diverged: bool,
    pub seconds: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "experiment",
    "family",
    "dim",
    "grid",
    "context",
    "horizon",
    "channel",
    "nrmse",
    "diverged",
    "seconds",
    "seed",
];

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    archive::write_csv(path, &METRICS_HEADER, rows)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    archive::csv_bytes(&METRICS_HEADER, rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub experiment: String,
    pub context: usize,
    pub horizon: usize,
    pub seed: u64,
    pub divergence_bound: f64,
    /// Records wall-clock seconds; off keeps rows bitwise reproducible.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            experiment: "eval".into(),
            context: 10,
            horizon: 5,
            seed: 0,
            divergence_bound: 1e6,
            timing: false,
        }
    }
}

/// Per-trajectory rollout errors: `[horizon][channel]`, or `None` on
/// divergence.
fn trajectory_errors<P: Predictor + ?Sized>(
    p: &P,
    field: &Field,
    context: usize,
    horizon: usize,
    bound: f64,
) -> Result<(Option<Vec<Vec<f64>>>, f64)> {
    let window = field.time_slice(0, context)?;
    let t0 = Instant::now();
    let pred = match rollout(p, &window, horizon, bound) {
        Ok(f) => f,
        Err(Error::Divergence { step, magnitude, .. }) => {
            warn!("rollout diverged at step {step} (|u| = {magnitude:e})");
            return Ok((None, t0.elapsed().as_secs_f64()));
        }
        Err(e) => return Err(e),
    };
    let secs = t0.elapsed().as_secs_f64();
    let errs = (0..horizon)
        .map(|h| {
            let truth = field.frame(context + h)?;
            Ok(trainer::nrmse(&pred.frame(h)?, &truth)?.per_channel)
        })
        .collect::<Result<_>>()?;
    Ok((Some(errs), secs))
}

/// Free-running evaluation from the first `context` frames; one row per
/// (family, horizon step, channel), averaged over trajectories.
pub fn evaluate<P: Predictor + Sync + ?Sized>(p: &P, data: &[Trajectory], opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    if opts.horizon == 0 {
        return Ok(Vec::new());
    }
    if opts.context == 0 {
        return Err(Error::Eval("context length must be at least 1".into()));
    }
    let mut groups: BTreeMap<Family, Vec<&Trajectory>> = BTreeMap::new();
    for t in data {
        if !p.supports_dims(t.field.dims()) {
            return Err(Error::Eval(format!(
                "checkpoint has no {}-D codec for {}",
                t.field.dims(),
                t.spec.family
            )));
        }
        if t.field.steps() < opts.context + opts.horizon {
            return Err(Error::Eval(format!(
                "trajectory of {} steps is shorter than context {} + horizon {}",
                t.field.steps(),
                opts.context,
                opts.horizon
            )));
        }
        groups.entry(t.spec.family).or_default().push(t);
    }
    let mut rows = Vec::new();
    for (fam, trajs) in groups {
        let c = trajs[0].field.channels();
        let mut sums = vec![vec![0.0; c]; opts.horizon];
        let mut diverged = false;
        let mut secs = 0.0;
        for t in &trajs {
            let (errs, s) = trajectory_errors(p, &t.field, opts.context, opts.horizon, opts.divergence_bound)?;
            secs += s;
            match errs {
                Some(e) => {
                    for (acc, row) in sums.iter_mut().zip(&e) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                None => diverged = true,
            }
        }
        let n = trajs.len() as f64;
        for (h, per) in sums.iter().enumerate() {
            for (ch, v) in per.iter().enumerate() {
                rows.push(MetricsRow {
                    experiment: opts.experiment.clone(),
                    family: fam.to_string(),
                    dim: fam.dims(),
                    grid: trajs[0].field.extents()[0],
                    context: opts.context,
                    horizon: h + 1,
                    channel: ch,
                    nrmse: if diverged { None } else { Some(v / n) },
                    diverged,
                    seconds: if opts.timing { secs } else { 0.0 },
                    seed: opts.seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Closed-form nRMSE (with the `1e-8` σ floor) of repeating `last` for
/// `lag` time units under advection at speed `beta` on a domain of length
/// `length`.
pub fn advection_persistence_nrmse(last: &Field, beta: f64, length: f64, lag: f64) -> Result<f64> {
    if last.steps() != 1 || last.dims() != 1 {
        return Err(Error::Eval("persistence oracle takes a single 1-D frame".into()));
    }
    let n = last.extents()[0];
    let mut total = 0.0;
    for c in 0..last.channels() {
        let spec = fft::rfft_nd(last.channel(0, c), &[n])?;
        let (mut err, mut energy) = (0.0_f64, 0.0_f64);
        for k in 0..spec.len() {
            let (re, im) = spec.get(k);
            let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            let theta = 2.0 * std::f64::consts::PI * k as f64 * beta * lag / length;
            let m2 = re * re + im * im;
            err += w * m2 * (2.0 - 2.0 * theta.cos());
            energy += w * m2;
        }
        let nf = n as f64;
        total += (err.sqrt() / nf) / (energy.sqrt() / nf + 1e-8);
    }
    Ok(total / last.channels() as f64)
}

/// Trajectory recipe for freshly generated sweep data.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepData {
    pub family: Family,
    pub steps: usize,
    pub dt: f64,
    pub seeds: Vec<u64>,
}

impl SweepData {
    pub fn generate(&self, extents: &[usize]) -> Result<Vec<Trajectory>> {
        self.seeds
            .iter()
            .map(|&s| gen_trajectory(&PdeSpec::sampled(self.family, extents, self.steps, self.dt, s)))
            .collect()
    }
}

/// The same checkpoint evaluated on freshly generated data at each grid
/// size (every axis set to the size).
pub fn scale_sweep(model: &Model, data: &SweepData, sizes: &[usize], opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let dims = data.family.dims();
    let codec = model.codec(dims)?;
    let min = codec.selection.min_extents();
    let mut rows = Vec::new();
    for &n in sizes {
        if !n.is_power_of_two() || min.iter().any(|&m| n < m) {
            return Err(Error::Eval(format!(
                "grid size {n} must be a power of two of at least {:?} for the retained modes",
                min
            )));
        }
        let trajs = data.generate(&vec![n; dims])?;
        let mut o = opts.clone();
        o.experiment = format!("{}-scale", opts.experiment);
        rows.extend(evaluate(model, &trajs, &o)?);
    }
    Ok(rows)
}

/// Rollout accuracy and wall-clock per context length; duplicate lengths
/// are dropped with a warning. Timing is always recorded.
pub fn context_sweep<P: Predictor + Sync + ?Sized>(
    p: &P,
    data: &[Trajectory],
    lengths: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<MetricsRow>> {
    let mut seen = BTreeSet::new();
    let mut uniq = Vec::new();
    for &l in lengths {
        if seen.insert(l) {
            uniq.push(l);
        } else {
            warn!("context length {l} listed twice, ignoring the duplicate");
        }
    }
    let shortest = data.iter().map(|t| t.field.steps()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for l in uniq {
        if l == 0 || l + opts.horizon > shortest {
            return Err(Error::Eval(format!(
                "context {l} invalid for trajectories of {shortest} steps and horizon {}",
                opts.horizon
            )));
        }
        let mut o = opts.clone();
        o.context = l;
        o.timing = true;
        rows.extend(evaluate(p, data, &o)?);
    }
    Ok(rows)
}

/// Concatenated token-averaged outputs of every transformer layer.
pub fn hidden_features(model: &Model, field: &Field) -> Result<Vec<f64>> {
    let states = model.pooled_hidden_states(field)?;
    Ok(states[1..].concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseReport {
    pub r2: f64,
    pub rmse: f64,
    pub train: usize,
    pub test: usize,
}

/// Ridge weights (last entry is the unpenalised intercept).
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len) + 1;
    let a = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { x[i][j] });
    let mut ata = a.transpose() * &a;
    for j in 0..d - 1 {
        ata[(j, j)] += alpha;
    }
    let aty = a.transpose() * DVector::from_column_slice(y);
    let sol = ata
        .clone()
        .cholesky()
        .map(|c| c.solve(&aty))
        .or_else(|| ata.lu().solve(&aty))
        .ok_or_else(|| Error::Eval("ridge system is singular".into()))?;
    Ok(sol.iter().copied().collect())
}

/// Standardised ridge regression (`α = 1e-3`) with a shuffled 80/20 split.
pub fn ridge_probe(features: &[Vec<f64>], targets: &[f64], alpha: f64, seed: u64) -> Result<InverseReport> {
    let n = features.len();
    if n != targets.len() || n < 5 {
        return Err(Error::Eval(format!("{n} samples for {} targets", targets.len())));
    }
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let var_y = targets.iter().map(|t| (t - mean_y).powi(2)).sum::<f64>() / n as f64;
    if var_y <= 1e-24 * mean_y.abs().max(1.0) {
        return Err(Error::Eval("target is constant across the dataset".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nt = n / 5;
    let (test, train) = idx.split_at(nt);
    let d = features[0].len();
    let mu: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / train.len() as f64)
        .collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|&i| (features[i][j] - mu[j]).powi(2)).sum::<f64>() / train.len() as f64;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mu[j]) / sd[j]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();
    let ytr: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
    let w = ridge_fit(&xtr, &ytr, alpha)?;
    let pred = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
    let yt: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
    let mt = yt.iter().sum::<f64>() / yt.len() as f64;
    let ssr: f64 = test.iter().zip(&yt).map(|(&i, y)| (pred(&z(i)) - y).powi(2)).sum();
    let sst: f64 = yt.iter().map(|y| (y - mt).powi(2)).sum();
    Ok(InverseReport {
        r2: 1.0 - ssr / sst.max(1e-300),
        rmse: (ssr / yt.len() as f64).sqrt(),
        train: train.len(),
        test: test.len(),
    })
}

/// Recovers `coefficient` from frozen hidden states of trajectories of one
/// family.
pub fn inverse_probe(model: &Model, data: &[Trajectory], coefficient: &str, seed: u64) -> Result<InverseReport> {
    if data.len() < 100 {
        return Err(Error::Eval(format!("inverse probe needs at least 100 trajectories, got {}", data.len())));
    }
    let targets: Vec<f64> = data.iter().map(|t| t.spec.coefficient(coefficient)).collect::<Result<_>>()?;
    let features: Vec<Vec<f64>> = data.iter().map(|t| hidden_features(model, &t.field)).collect::<Result<_>>()?;
    ridge_probe(&features, &targets, 1e-3, seed)
}

fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

/// Binary PGM (P5) of a row-major 8-bit image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Truth | prediction | absolute error panels side by side, separated by
/// one black column. Panels are `rows × cols` row-major images.
pub fn triptych(truth: &[f64], pred: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let lo = truth.iter().chain(pred).cloned().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().chain(pred).cloned().fold(f64::NEG_INFINITY, f64::max);
    let err: Vec<f64> = truth.iter().zip(pred).map(|(a, b)| (a - b).abs()).collect();
    let emax = err.iter().cloned().fold(0.0, f64::max);
    let width = 3 * cols + 2;
    let mut px = vec![0u8; width * rows];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            px[r * width + c] = to_gray(truth[i], lo, hi);
            px[r * width + cols + 1 + c] = to_gray(pred[i], lo, hi);
            px[r * width + 2 * cols + 2 + c] = to_gray(err[i], 0.0, emax);
        }
    }
    pgm_bytes(width, rows, &px)
}

/// Writes triptychs for channel `channel`: one space-time image for 1-D
/// fields, one image per frame otherwise (first slice along axis 2 in 3-D).
pub fn write_rollout_pgms(dir: &Path, stem: &str, truth: &Field, pred: &Field, channel: usize) -> Result<Vec<PathBuf>> {
    if truth.steps() != pred.steps() || truth.extents() != pred.extents() || channel >= truth.channels() {
        return Err(Error::shape("write_rollout_pgms", "truth and prediction differ"));
    }
    let ext = truth.extents();
    let mut paths = Vec::new();
    if ext.len() == 1 {
        let t: Vec<f64> = (0..truth.steps()).flat_map(|s| truth.channel(s, channel).to_vec()).collect();
        let p: Vec<f64> = (0..pred.steps()).flat_map(|s| pred.channel(s, channel).to_vec()).collect();
        let path = dir.join(format!("{stem}_c{channel}.pgm"));
        archive::atomic_write(&path, &triptych(&t, &p, truth.steps(), ext[0]))?;
        paths.push(path);
        return Ok(paths);
    }
    let (rows, cols) = (ext[0], ext[1]);
    let depth = ext.get(2).copied().unwrap_or(1);
    for s in 0..truth.steps() {
        let slice = |f: &Field| -> Vec<f64> {
            let d = f.channel(s, channel);
            (0..rows * cols).map(|i| d[i * depth]).collect()
        };
        let path = dir.join(format!("{stem}_c{channel}_t{s:03}.pgm"));
        archive::atomic_write(&path, &triptych(&slice(truth), &slice(pred), rows, cols))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: usize,
    pub magnitude: f64,
    pub bound: f64,
    pub context: usize,
}
