//! Teacher-forced pre-training with an nRMSE objective, Adam and a cosine
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aligner::Aligner;
use crate::archive::{self, Checkpoint, RngState};
use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::Model;
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    /// Batch size for 1D, 2D and 3D steps.
    pub batch_sizes: [usize; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Longest teacher-forcing window in timesteps.
    pub max_context: usize,
    pub sigma_floor: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Held-out evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_min: 1e-6,
            total_steps: 1000,
            batch_sizes: [16, 2, 1],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            deterministic: false,
            max_context: 32,
            sigma_floor: 1e-8,
            checkpoint_every: 0,
            eval_every: 0,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min > self.lr_init || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "lr_min {} must lie in [0, lr_init = {}]",
                self.lr_min, self.lr_init
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_sizes.contains(&0) || self.max_context == 0 {
            return Err(Error::Config("batch sizes and max_context must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-channel nRMSE of one sample and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Nrmse {
    pub per_channel: Vec<f64>,
    pub mean: f64,
}

/// `sqrt(mean (pred−truth)²) / (σ + floor)` per channel over all timesteps
/// and points, with `σ` the RMS of the truth.
pub fn nrmse_with_floor(pred: &Field, truth: &Field, floor: f64) -> Result<Nrmse> {
    if pred.steps() != truth.steps() || pred.channels() != truth.channels() || pred.extents() != truth.extents() {
        return Err(Error::shape(
            "nrmse",
            format!(
                "[{}, {}, {:?}] vs [{}, {}, {:?}]",
                pred.steps(),
                pred.channels(),
                pred.extents(),
                truth.steps(),
                truth.channels(),
                truth.extents()
            ),
        ));
    }
    if !truth.is_finite() {
        return Err(Error::NonFinite {
            op: "nrmse",
            location: Some("truth".into()),
        });
    }
    let c = truth.channels();
    let n = (truth.steps() * truth.points()).max(1) as f64;
    let per_channel: Vec<f64> = (0..c)
        .map(|j| {
            let (mut se, mut ss) = (0.0, 0.0);
            for t in 0..truth.steps() {
                for (p, q) in pred.channel(t, j).iter().zip(truth.channel(t, j)) {
                    se += (p - q) * (p - q);
                    ss += q * q;
                }
            }
            (se / n).sqrt() / ((ss / n).sqrt() + floor)
        })
        .collect();
    let mean = per_channel.iter().sum::<f64>() / c as f64;
    Ok(Nrmse { per_channel, mean })
}

pub fn nrmse(pred: &Field, truth: &Field) -> Result<Nrmse> {
    nrmse_with_floor(pred, truth, 1e-8)
}

/// Batch nRMSE: per channel, the batch mean of per-sample values; then the
/// channel mean.
pub fn batch_nrmse(pairs: &[(Field, Field)], floor: f64) -> Result<Nrmse> {
    if pairs.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let each: Vec<Nrmse> = pairs
        .iter()
        .map(|(p, t)| nrmse_with_floor(p, t, floor))
        .collect::<Result<_>>()?;
    let c = each[0].per_channel.len();
    if each.iter().any(|e| e.per_channel.len() != c) {
        return Err(Error::shape("nrmse", "batch members disagree on channel count"));
    }
    let per_channel: Vec<f64> = (0..c)
        .map(|j| each.iter().map(|e| e.per_channel[j]).sum::<f64>() / each.len() as f64)
        .collect();
    let mean = per_channel.iter().sum::<f64>() / c as f64;
    Ok(Nrmse { per_channel, mean })
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))`; out-of-range
/// steps are clamped with a warning.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps.max(1);
    let s = if step > total {
        warn!("cosine_lr: step {step} beyond total {total}, clamped");
        total
    } else {
        step
    };
    let frac = s as f64 / total as f64;
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with per-parameter step counts; parameters without a gradient in a
/// step are left untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            ..Default::default()
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::shape("adam", format!("{name}: {} vs {}", p.numel(), g.len())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors `adam.m.<param>` / `adam.v.<param>`.
    pub fn export(&self, into: &mut ParamStore, counters: &mut BTreeMap<String, u64>) {
        for (n, m) in &self.m {
            into.insert(format!("adam.m.{n}"), Tensor::from_fn(&[m.len()], |i| m[i]));
        }
        for (n, v) in &self.v {
            into.insert(format!("adam.v.{n}"), Tensor::from_fn(&[v.len()], |i| v[i]));
        }
        for (n, t) in &self.t {
            counters.insert(format!("adam.t.{n}"), *t);
        }
    }

    pub fn import(cfg: &TrainConfig, tensors: &ParamStore, counters: &BTreeMap<String, u64>) -> Self {
        let mut a = Adam::from_config(cfg);
        for (n, t) in tensors.iter() {
            if let Some(p) = n.strip_prefix("adam.m.") {
                a.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = n.strip_prefix("adam.v.") {
                a.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        for (n, t) in counters {
            if let Some(p) = n.strip_prefix("adam.t.") {
                a.t.insert(p.to_string(), *t);
            }
        }
        a
    }
}

/// Trajectories of one dimensionality; quantity slots are padded to the
/// batch maximum.
#[derive(Clone, Debug)]
pub struct Batch {
    pub fields: Vec<Field>,
    pub channels: usize,
    /// Equation captions, needed only by the aligned objective.
    pub captions: Vec<String>,
}

impl Batch {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Training("empty batch".into()))?;
        let dims = first.dims();
        if fields.iter().any(|f| f.dims() != dims) {
            return Err(Error::Training("batch mixes spatial dimensionalities".into()));
        }
        if fields.iter().any(|f| f.steps() < 2) {
            return Err(Error::Training("teacher forcing needs at least 2 timesteps".into()));
        }
        let channels = fields.iter().map(Field::channels).max().unwrap();
        Ok(Batch {
            fields,
            channels,
            captions: Vec::new(),
        })
    }

    pub fn with_captions(mut self, captions: Vec<String>) -> Result<Self> {
        if captions.len() != self.fields.len() {
            return Err(Error::Training(format!(
                "{} captions for {} trajectories",
                captions.len(),
                self.fields.len()
            )));
        }
        self.captions = captions;
        Ok(self)
    }

    /// Pads the quantity slots to at least `channels`.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = self.channels.max(channels);
        self
    }

    pub fn dims(&self) -> usize {
        self.fields[0].dims()
    }
}

/// Tokens of `field` (all timesteps) with quantity slots padded to `c_pad`
/// by zero tokens; returns the token var and pad flags.
pub fn padded_tokens(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    field: &Field,
    c_pad: usize,
) -> Result<(Var, Vec<bool>)> {
    let codec = model.codec(field.dims())?;
    let (t, c) = (field.steps(), field.channels());
    let mut shape = vec![t * c];
    shape.extend_from_slice(field.extents());
    let x = g.constant(Tensor::new(field.data().to_vec(), shape)?);
    let tok = codec.encode_graph(g, b, x)?;
    if c_pad == c {
        return Ok((tok, vec![false; t * c]));
    }
    let idx: Vec<usize> = (0..t * c).map(|i| (i / c) * c_pad + i % c).collect();
    let tok = g.scatter(tok, 0, idx, t * c_pad)?;
    let pad = (0..t * c_pad).map(|i| i % c_pad >= c).collect();
    Ok((tok, pad))
}

/// Teacher-forced prediction of frames `1..T` from frames `0..T−1`, decoded
/// on the field's own grid; `[T−1, C, N…]`.
pub fn teacher_forced_prediction(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    field: &Field,
    c_pad: usize,
) -> Result<Var> {
    let t = field.steps();
    let c = field.channels();
    let inputs = field.time_slice(0, t - 1)?;
    let (tok, pad) = padded_tokens(model, g, b, &inputs, c_pad)?;
    let out = model.forward_graph(g, b, tok, c_pad, &pad)?;
    let out = if c_pad == c {
        out
    } else {
        let keep: Vec<usize> = (0..(t - 1) * c_pad).filter(|i| i % c_pad < c).collect();
        g.gather(out, 0, keep)?
    };
    let codec = model.codec(field.dims())?;
    let dec = codec.decode_graph(g, b, out, field.extents())?;
    let mut shape = vec![t - 1, c];
    shape.extend_from_slice(field.extents());
    g.reshape(dec, &shape)
}

/// Differentiable per-sample nRMSE of `pred` (`[S, C, N…]`) against
/// `truth`, averaged over channels.
pub fn nrmse_graph(g: &mut Graph, pred: Var, truth: &Field, floor: f64) -> Result<Var> {
    let (s, c, p) = (truth.steps(), truth.channels(), truth.points());
    let tv = g.constant(Tensor::new(truth.data().to_vec(), g.shape(pred).to_vec())?);
    let d = g.sub(pred, tv)?;
    let d2 = g.mul(d, d)?;
    let d2 = g.reshape(d2, &[s, c, p])?;
    let d2 = g.permute(d2, &[1, 0, 2])?;
    let d2 = g.reshape(d2, &[c, s * p])?;
    let ms = g.mean_axis(d2, 1)?;
    let rmse = g.sqrt(ms)?;
    let inv: Vec<f64> = (0..c)
        .map(|j| {
            let ss: f64 = (0..s).flat_map(|t| truth.channel(t, j)).map(|v| v * v).sum();
            1.0 / ((ss / (s * p) as f64).sqrt() + floor)
        })
        .collect();
    let inv = g.constant(Tensor::new(inv, vec![c])?);
    let per = g.mul(rmse, inv)?;
    g.mean(per)
}

/// Training objective: `L_sim`, or `L_sim − s` against a frozen aligner.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    Sim,
    Aligned(&'a Aligner),
}

/// Teacher-forcing loss graph of one sample; the window is truncated to the
/// first `max_context + 1` frames.
pub fn sample_loss(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    field: &Field,
    c_pad: usize,
    cfg: &TrainConfig,
) -> Result<Var> {
    objective_loss(model, g, b, field, c_pad, cfg, Objective::Sim, None)
}

#[allow(clippy::too_many_arguments)]
pub fn objective_loss(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    field: &Field,
    c_pad: usize,
    cfg: &TrainConfig,
    objective: Objective,
    caption: Option<&str>,
) -> Result<Var> {
    let t = field.steps().min(cfg.max_context + 1);
    let field = field.time_slice(0, t)?;
    let pred = teacher_forced_prediction(model, g, b, &field, c_pad)?;
    let truth = field.time_slice(1, t)?;
    let l_sim = nrmse_graph(g, pred, &truth, cfg.sigma_floor)?;
    match objective {
        Objective::Sim => Ok(l_sim),
        Objective::Aligned(aligner) => {
            let caption = caption.ok_or_else(|| Error::Training("aligned objective needs captions".into()))?;
            let s = aligner.similarity_graph(g, caption, &field.frame(0)?, pred)?;
            g.sub(l_sim, s)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub dims: usize,
    pub loss: f64,
}

/// Loss and summed gradients of a batch, accumulated in sample order.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let n = batch.fields.len() as f64;
    let one = |i: usize| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut g = Graph::new();
        let mut b = Binder::trainable(&model.params);
        let caption = batch.captions.get(i).map(String::as_str);
        let l = objective_loss(model, &mut g, &mut b, &batch.fields[i], batch.channels, cfg, objective, caption)?;
        let l = g.scale(l, 1.0 / n)?;
        let mut grads = g.backward(l)?;
        Ok((g.value(l).item(), b.collect(&mut grads)))
    };
    let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = if cfg.deterministic {
        (0..batch.fields.len()).map(one).collect()
    } else {
        (0..batch.fields.len()).into_par_iter().map(one).collect()
    };
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let (l, grads) = r?;
        loss += l;
        for (name, gv) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, x)| *a += x),
                None => {
                    total.insert(name, gv);
                }
            }
        }
    }
    Ok((loss, total))
}

/// Optimisation state: model, optimizer, step counter and batch RNG.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::from_config(&config),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One forward/backward over `batch` and one Adam update at
    /// `cosine_lr(step)`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        self.train_step_with(batch, Objective::Sim)
    }

    pub fn train_step_with(&mut self, batch: &Batch, objective: Objective) -> Result<StepReport> {
        let lr = cosine_lr(self.step, &self.config);
        let (loss, grads) = batch_gradients(&self.model, batch, &self.config, objective)?;
        if !loss.is_finite() {
            let per: Vec<String> = batch
                .fields
                .iter()
                .map(|f| {
                    let mut g = Graph::new();
                    let mut b = Binder::frozen(&self.model.params);
                    sample_loss(&self.model, &mut g, &mut b, f, batch.channels, &self.config)
                        .map(|v| format!("{:e}", g.value(v).item()))
                        .unwrap_or_else(|e| e.to_string())
                })
                .collect();
            return Err(Error::Training(format!(
                "non-finite loss at step {} (lr {lr:e}); per-sample losses [{}]",
                self.step,
                per.join(", ")
            )));
        }
        self.adam.step(&mut self.model.params, &grads, lr)?;
        let report = StepReport {
            step: self.step,
            lr,
            dims: batch.dims(),
            loss,
        };
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.params.clone();
        let mut counters = BTreeMap::new();
        self.adam.export(&mut tensors, &mut counters);
        Checkpoint {
            model: self.model.config.clone(),
            step: self.step as u64,
            rng: RngState {
                seed: self.config.seed,
                word_pos: self.rng.get_word_pos(),
            },
            counters,
            aligner: None,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (n, t) in ck.tensors.iter() {
            if !n.starts_with("adam.") && !n.starts_with("aligner.") {
                params.insert(n.clone(), t.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ck.rng.seed);
        rng.set_word_pos(ck.rng.word_pos);
        Ok(Trainer {
            model: Model {
                config: ck.model.clone(),
                params,
            },
            adam: Adam::import(&config, &ck.tensors, &ck.counters),
            config,
            step: ck.step as usize,
            rng,
        })
    }
}

/// Model parameters of a checkpoint, without optimizer state.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Model {
    let mut params = ParamStore::new();
    for (n, t) in ck.tensors.iter() {
        if !n.starts_with("adam.") && !n.starts_with("aligner.") {
            params.insert(n.clone(), t.clone());
        }
    }
    Model {
        config: ck.model.clone(),
        params,
    }
}

/// Archive paths, one per line; `#` starts a comment and relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[PathBuf]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let rel = e.strip_prefix(base).unwrap_or(e);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    archive::atomic_write(path, text.as_bytes())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let entries = read_manifest(path.as_ref())?;
    if entries.is_empty() {
        return Err(Error::Training(format!("manifest {} is empty", path.as_ref().display())));
    }
    entries.iter().map(archive::read_archive).collect()
}

/// Deterministic split: the last `⌈fraction·n⌉` trajectories of each family
/// (manifest order) are held out, keeping at least one for training.
pub fn split_holdout(data: &[Trajectory], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_family: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, t) in data.iter().enumerate() {
        by_family.entry(t.spec.family).or_default().push(i);
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for idx in by_family.values() {
        let k = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len() - 1);
        let cut = idx.len() - k;
        train.extend_from_slice(&idx[..cut]);
        held.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Loss-curve row: `family` is `train` for optimisation steps and the family
/// name for held-out evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub dim: usize,
    pub family: String,
    pub loss: Option<f64>,
    pub nrmse: Option<f64>,
}

pub const CURVE_HEADER: [&str; 6] = ["step", "lr", "dim", "family", "loss", "nrmse"];

/// Held-out next-step nRMSE (teacher forcing over the whole window).
pub fn next_step_nrmse(model: &Model, field: &Field, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let l = sample_loss(model, &mut g, &mut b, field, field.channels(), cfg)?;
    Ok(g.value(l).item())
}

pub struct PretrainOutput {
    pub trainer: Trainer,
    pub curve: Vec<CurveRow>,
    pub heldout: Vec<usize>,
}

fn heldout_rows(trainer: &Trainer, data: &[Trajectory], held: &[usize]) -> Result<Vec<CurveRow>> {
    let mut by_family: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for &i in held {
        let v = next_step_nrmse(&trainer.model, &data[i].field, &trainer.config)?;
        by_family.entry(data[i].spec.family).or_default().push(v);
    }
    let lr = cosine_lr(trainer.step, &trainer.config);
    Ok(by_family
        .into_iter()
        .map(|(f, v)| CurveRow {
            step: trainer.step,
            lr,
            dim: f.dims(),
            family: f.to_string(),
            loss: None,
            nrmse: Some(v.iter().sum::<f64>() / v.len() as f64),
        })
        .collect())
}

/// Round-robin pre-training over the dimensionalities present in `data`.
/// Writes checkpoints and the loss curve under `out` when given.
pub fn pretrain_on(trainer: Trainer, data: &[Trajectory], out: Option<&Path>) -> Result<PretrainOutput> {
    train_on(trainer, data, out, Objective::Sim)
}

/// Training loop shared by pre-training and fine-tuning.
pub fn train_on(
    mut trainer: Trainer,
    data: &[Trajectory],
    out: Option<&Path>,
    objective: Objective,
) -> Result<PretrainOutput> {
    if data.is_empty() {
        return Err(Error::Training("no trajectories to train on".into()));
    }
    let (train, held) = split_holdout(data, trainer.config.holdout_fraction);
    let mut by_dim: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train {
        by_dim.entry(data[i].field.dims()).or_default().push(i);
    }
    let dims: Vec<usize> = by_dim.keys().copied().collect();
    for &d in &dims {
        if !trainer.model.has_codec(d) {
            return Err(Error::Training(format!("model has no {d}-D codec")));
        }
    }
    let mut curve = Vec::new();
    let cfg = trainer.config.clone();
    while trainer.step < cfg.total_steps {
        let d = dims[trainer.step % dims.len()];
        let pool = &by_dim[&d];
        let bs = cfg.batch_sizes[d - 1];
        let picks: Vec<usize> = (0..bs).map(|_| pool[trainer.rng().gen_range(0..pool.len())]).collect();
        let fields: Vec<Field> = picks.iter().map(|&i| data[i].field.clone()).collect();
        let captions: Vec<String> = picks.iter().map(|&i| data[i].caption.clone()).collect();
        let batch = Batch::new(fields)?.with_captions(captions)?;
        let report = trainer.train_step_with(&batch, objective)?;
        curve.push(CurveRow {
            step: report.step,
            lr: report.lr,
            dim: d,
            family: "train".into(),
            loss: Some(report.loss),
            nrmse: None,
        });
        if cfg.eval_every > 0 && trainer.step % cfg.eval_every == 0 && trainer.step < cfg.total_steps {
            curve.extend(heldout_rows(&trainer, data, &held)?);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                trainer
                    .checkpoint()
                    .save(dir.join(format!("checkpoint_{:06}.ckpt", trainer.step)))?;
            }
        }
    }
    curve.extend(heldout_rows(&trainer, data, &held)?);
    if let Some(dir) = out {
        trainer.checkpoint().save(dir.join("checkpoint_final.ckpt"))?;
        archive::write_csv(dir.join("loss_curve.csv"), &CURVE_HEADER, &curve)?;
    }
    Ok(PretrainOutput {
        trainer,
        curve,
        heldout: held,
    })
}

/// Pre-training from an archive manifest.
pub fn pretrain(manifest: impl AsRef<Path>, trainer: Trainer, out: Option<&Path>) -> Result<PretrainOutput> {
    let data = load_manifest(manifest)?;
    pretrain_on(trainer, &data, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn field(data: Vec<f64>, t: usize, c: usize, n: usize) -> Field {
        Field::new(data, t, c, vec![n]).unwrap()
    }

    #[test]
    fn nrmse_examples() {
        let truth = field(vec![1.0, -2.0, 3.0, 0.5], 1, 1, 4);
        assert_eq!(nrmse(&truth, &truth).unwrap().mean, 0.0);
        let c = field(vec![2.5; 4], 1, 1, 4);
        let zero = field(vec![0.0; 4], 1, 1, 4);
        assert!((nrmse(&zero, &c).unwrap().mean - 1.0).abs() < 1e-8);
        assert!((nrmse(&truth.scaled(2.0), &truth).unwrap().mean - 1.0).abs() < 1e-8);
        assert!(nrmse(&zero, &field(vec![0.0; 8], 1, 1, 8)).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            lr_init: 1e-3,
            lr_min: 1e-5,
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(cosine_lr(0, &cfg), 1e-3);
        assert!((cosine_lr(100, &cfg) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, &cfg) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(500, &cfg), cosine_lr(100, &cfg));
    }

    #[test]
    fn adam_matches_direct_recurrence() {
        // Minimise Σ (p − target)² over 3 parameters.
        let target = [1.0, -2.0, 0.5];
        let mut store = ParamStore::new();
        store.insert("p", Tensor::zeros(&[3]));
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
        for t in 1..=20 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * (p[i] - target[i])).collect();
            let grads = [("p".to_string(), g.clone())].into_iter().collect();
            adam.step(&mut store, &grads, 0.05).unwrap();
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..3 {
                assert!((store.get("p").unwrap().data()[i] - p[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr_min: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            total_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            intermediate: 16,
            modes: [4, 4, 4],
            width: 4,
            layers: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &[1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = model.params.clone();
        let tc = TrainConfig {
            lr_init: 0.0,
            lr_min: 0.0,
            total_steps: 3,
            deterministic: true,
            ..Default::default()
        };
        let mut tr = Trainer::new(model, tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = field(Tensor::randn(&[4 * 16], 1.0, &mut rng).into_data(), 4, 1, 16);
        tr.train_step(&Batch::new(vec![f]).unwrap()).unwrap();
        for ((_, a), (_, b)) in tr.model.params.iter().zip(before.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn holdout_split_per_family() {
        use crate::datagen::{gen_trajectory, Family, PdeSpec};
        let data: Vec<Trajectory> = (0..5)
            .map(|s| gen_trajectory(&PdeSpec::sampled(Family::Diffusion1d, &[16], 2, 0.01, s)).unwrap())
            .collect();
        let (train, held) = split_holdout(&data, 0.2);
        assert_eq!(train, vec![0, 1, 2, 3]);
        assert_eq!(held, vec![4]);
    }
}
