//! Caption/physics alignment: spectral evolution features, a hashed caption
//! encoder, the contrastive alignment loss, the fine-tuning similarity term,
//! caption augmentation and linear probes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::codec::ModeSelection;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{self, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Magnitude below which a mode is degenerate.
    pub eps_m: f64,
    /// Shared embedding size `d_s`.
    pub embed_dim: usize,
    /// Caption token embedding size `d_t`.
    pub token_dim: usize,
    pub vocab: usize,
    /// Retained modes per axis for 1D, 2D and 3D features.
    pub modes: [usize; 3],
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            lambda: 0.1,
            temperature: 0.07,
            eps_m: 1e-10,
            embed_dim: 64,
            token_dim: 64,
            vocab: 4096,
            modes: [12, 6, 4],
            lr: 1e-3,
            steps: 500,
            batch: 32,
            seed: 0,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.embed_dim == 0 || self.token_dim == 0 || self.vocab == 0 {
            return Err(Error::Config("aligner sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn selection(&self, dims: usize) -> Result<ModeSelection> {
        if !(1..=3).contains(&dims) {
            return Err(Error::Aligner(format!("no features for {dims} dimensions")));
        }
        ModeSelection::fixed_low(self.modes[dims - 1], dims)
    }
}

/// Per channel and retained mode: `(Re Δφ, Im Δφ, log R)`, plus the raw
/// ratios `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsFeatures {
    /// `[C, M, 3]`.
    pub values: Vec<f64>,
    /// `[C, M]`.
    pub ratios: Vec<f64>,
    pub channels: usize,
    pub modes: usize,
}

impl PhysicsFeatures {
    pub fn delta_phi(&self, c: usize, m: usize) -> (f64, f64) {
        let i = (c * self.modes + m) * 3;
        (self.values[i], self.values[i + 1])
    }

    pub fn log_ratio(&self, c: usize, m: usize) -> f64 {
        self.values[(c * self.modes + m) * 3 + 2]
    }

    pub fn ratio(&self, c: usize, m: usize) -> f64 {
        self.ratios[c * self.modes + m]
    }

    /// Channel-averaged `[M·3]` vector.
    pub fn pooled(&self) -> Vec<f64> {
        let w = self.modes * 3;
        let mut out = vec![0.0; w];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.values[c * w..(c + 1) * w]) {
                *o += v / self.channels as f64;
            }
        }
        out
    }
}

struct FeatureVars {
    /// `[R, M·3]`.
    values: Var,
    /// `[R·M]`.
    ratios: Var,
    modes: usize,
}

/// Features of `cur` (`[R, N…]`) against constant `reference` rows of the
/// same shape.
fn feature_graph(g: &mut Graph, cur: Var, reference: &[f64], sel: &ModeSelection, eps_m: f64) -> Result<FeatureVars> {
    let shape = g.shape(cur).to_vec();
    let dims = sel.dims();
    if shape.len() != dims + 1 {
        return Err(Error::shape(
            "physics_features",
            format!("{}-D selection on state of shape {:?}", dims, &shape[1..]),
        ));
    }
    let rows = shape[0];
    let ext = &shape[1..];
    let flat = sel.flat_indices(ext)?;
    let m = flat.len();
    let s_total: usize = crate::fft::spectral_shape(ext).iter().product();
    let modes_of = |g: &mut Graph, x: Var| -> Result<Var> {
        let f = g.rfft(x, dims)?;
        let f = g.reshape(f, &[rows, s_total, 2])?;
        let f = g.gather(f, 1, flat.clone())?;
        g.reshape(f, &[rows * m, 2])
    };
    let rv = g.constant(Tensor::new(reference.to_vec(), shape.clone())?);
    let bm = modes_of(g, rv)?;
    let b = g.value(bm).data().to_vec();
    let am = modes_of(g, cur)?;
    let a = g.value(am).data().to_vec();
    let mag = |v: &[f64], i: usize| (v[2 * i] * v[2 * i] + v[2 * i + 1] * v[2 * i + 1]).sqrt();
    let nd: Vec<usize> = (0..rows * m)
        .filter(|&i| mag(&a, i) > eps_m && mag(&b, i) > eps_m)
        .collect();
    let mut neutral = vec![0.0; rows * m * 3];
    let mut neutral_r = vec![0.0; rows * m];
    let mut is_nd = vec![false; rows * m];
    nd.iter().for_each(|&i| is_nd[i] = true);
    for i in 0..rows * m {
        if !is_nd[i] {
            neutral[3 * i] = 1.0;
            neutral_r[i] = 1.0;
        }
    }
    let neutral = g.constant(Tensor::new(neutral, vec![rows * m, 3])?);
    let neutral_r = g.constant(Tensor::new(neutral_r, vec![rows * m])?);
    if nd.is_empty() {
        let values = g.reshape(neutral, &[rows, m * 3])?;
        return Ok(FeatureVars {
            values,
            ratios: neutral_r,
            modes: m,
        });
    }
    let n = nd.len();
    let col = |v: &[f64], k: usize| -> Vec<f64> { nd.iter().map(|&i| v[2 * i + k]).collect() };
    let br = g.constant(Tensor::new(col(&b, 0), vec![n])?);
    let bi = g.constant(Tensor::new(col(&b, 1), vec![n])?);
    let bmag = g.constant(Tensor::new(nd.iter().map(|&i| mag(&b, i)).collect(), vec![n])?);
    let an = g.gather(am, 0, nd.clone())?;
    let ar = g.slice(an, 1, 0, 1)?;
    let ar = g.reshape(ar, &[n])?;
    let ai = g.slice(an, 1, 1, 2)?;
    let ai = g.reshape(ai, &[n])?;
    let sq = g.mul(an, an)?;
    let sq = g.sum_axis(sq, 1)?;
    let amag = g.sqrt(sq)?;
    let denom = g.mul(amag, bmag)?;
    let (p, q) = (g.mul(ar, br)?, g.mul(ai, bi)?);
    let re = g.add(p, q)?;
    let re = g.div(re, denom)?;
    let (p, q) = (g.mul(ai, br)?, g.mul(ar, bi)?);
    let im = g.sub(p, q)?;
    let im = g.div(im, denom)?;
    let ratio = g.div(amag, bmag)?;
    let lr = g.ln(ratio)?;
    let lr = g.clamp(lr, -10.0, 10.0)?;
    let cols: Vec<Var> = [re, im, lr]
        .into_iter()
        .map(|v| g.reshape(v, &[n, 1]))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&cols, 1)?;
    let full = g.scatter(stacked, 0, nd.clone(), rows * m)?;
    let full = g.add(full, neutral)?;
    let values = g.reshape(full, &[rows, m * 3])?;
    let ratios = g.scatter(ratio, 0, nd, rows * m)?;
    let ratios = g.add(ratios, neutral_r)?;
    Ok(FeatureVars { values, ratios, modes: m })
}

/// Evolution features of `u_ti` relative to `u_t0` (single-frame fields).
pub fn physics_features(u_t0: &Field, u_ti: &Field, sel: &ModeSelection, eps_m: f64) -> Result<PhysicsFeatures> {
    if u_t0.steps() != 1 || u_ti.steps() != 1 {
        return Err(Error::shape("physics_features", "states must be single frames"));
    }
    if u_t0.channels() != u_ti.channels() || u_t0.extents() != u_ti.extents() {
        return Err(Error::shape(
            "physics_features",
            format!(
                "[{}, {:?}] vs [{}, {:?}]",
                u_t0.channels(),
                u_t0.extents(),
                u_ti.channels(),
                u_ti.extents()
            ),
        ));
    }
    let c = u_ti.channels();
    let mut shape = vec![c];
    shape.extend_from_slice(u_ti.extents());
    let mut g = Graph::new();
    let cur = g.constant(Tensor::new(u_ti.data().to_vec(), shape)?);
    let fv = feature_graph(&mut g, cur, u_t0.data(), sel, eps_m)?;
    Ok(PhysicsFeatures {
        values: g.value(fv.values).data().to_vec(),
        ratios: g.value(fv.ratios).data().to_vec(),
        channels: c,
        modes: fv.modes,
    })
}

const UNICODE_ALIASES: [(char, &str); 12] = [
    ('∂', "\\partial"),
    ('β', "\\beta"),
    ('ν', "\\nu"),
    ('ρ', "\\rho"),
    ('π', "\\pi"),
    ('ω', "\\omega"),
    ('Δ', "\\Delta"),
    ('η', "\\eta"),
    ('ξ', "\\xi"),
    ('∇', "\\nabla"),
    ('·', "\\cdot"),
    ('α', "\\alpha"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Control,
    Unicode,
    Ident,
    Number,
    Symbol,
}

/// Caption token with its byte span; `text` is the normalised form.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub start: usize,
    pub end: usize,
}

/// Splits on control sequences, braces, operators and whitespace; Unicode
/// symbols are normalised to their control-sequence spelling.
pub fn tokenize(caption: &str) -> Vec<Token> {
    let chars: Vec<(usize, char)> = caption.char_indices().collect();
    let end_of = |j: usize| chars.get(j).map_or(caption.len(), |&(p, _)| p);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        let mut j = i + 1;
        let kind = if ch.is_whitespace() {
            i = j;
            continue;
        } else if ch == '\\' {
            while j < chars.len() && chars[j].1.is_ascii_alphabetic() {
                j += 1;
            }
            if j == i + 1 && j < chars.len() {
                j += 1;
            }
            TokenKind::Control
        } else if ch.is_ascii_digit() || (ch == '.' && chars.get(j).is_some_and(|c| c.1.is_ascii_digit())) {
            while j < chars.len() && (chars[j].1.is_ascii_digit() || chars[j].1 == '.') {
                j += 1;
            }
            TokenKind::Number
        } else if ch.is_ascii_alphabetic() {
            while j < chars.len() && chars[j].1.is_ascii_alphabetic() {
                j += 1;
            }
            TokenKind::Ident
        } else if ch.is_ascii() {
            TokenKind::Symbol
        } else {
            TokenKind::Unicode
        };
        let end = end_of(j);
        let raw = &caption[pos..end];
        let text = match kind {
            TokenKind::Unicode => UNICODE_ALIASES
                .iter()
                .find(|(c, _)| *c == ch)
                .map_or_else(|| raw.to_string(), |(_, a)| a.to_string()),
            _ => raw.to_string(),
        };
        out.push(Token {
            text,
            kind,
            start: pos,
            end,
        });
        i = j;
    }
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn token_ids(caption: &str, vocab: usize) -> Result<Vec<usize>> {
    let toks = tokenize(caption);
    if toks.is_empty() {
        return Err(Error::Aligner("empty caption".into()));
    }
    Ok(toks.iter().map(|t| (fnv1a(&t.text) % vocab as u64) as usize).collect())
}

/// One aligned example: caption, initial state, later state, class label.
#[derive(Clone, Debug)]
pub struct AlignSample {
    pub caption: String,
    pub u_t0: Field,
    pub u_ti: Field,
    pub label: usize,
}

impl AlignSample {
    /// First and last frames of a trajectory.
    pub fn from_trajectory(t: &crate::datagen::Trajectory, label: usize) -> Result<Self> {
        let f = &t.field;
        Ok(AlignSample {
            caption: t.caption.clone(),
            u_t0: f.frame(0)?,
            u_ti: f.frame(f.steps() - 1)?,
            label,
        })
    }
}

/// Caption encoder and per-dimensionality physics projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligner {
    pub config: AlignerConfig,
    pub params: ParamStore,
}

const TEXT_TABLE: &str = "aligner.text_table";
const TEXT_PROJ: &str = "aligner.text_proj";

fn psi_name(dims: usize, part: &str) -> String {
    format!("aligner.psi{dims}d_{part}")
}

/// Row-wise L2 normalisation of `[B, d]`.
fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let n2 = g.sum_axis(sq, 1)?;
    let n = g.sqrt(n2)?;
    let tiny = g.constant(Tensor::scalar(1e-12));
    let n = g.add(n, tiny)?;
    let xt = g.transpose(x)?;
    let y = g.div(xt, n)?;
    g.transpose(y)
}

pub struct AlignLoss {
    pub total: Var,
    pub l_eq: Var,
    pub l_e: Var,
}

impl Aligner {
    pub fn new<R: Rng + ?Sized>(config: AlignerConfig, dims: &[usize], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (dt, ds) = (config.token_dim, config.embed_dim);
        params.insert(TEXT_TABLE, Tensor::randn(&[config.vocab, dt], 1.0, rng));
        params.insert(TEXT_PROJ, Tensor::randn(&[dt, ds], 1.0 / (dt as f64).sqrt(), rng));
        let mut a = Aligner { config, params };
        for &d in dims {
            a.add_dims(d, rng)?;
        }
        Ok(a)
    }

    pub fn add_dims<R: Rng + ?Sized>(&mut self, dims: usize, rng: &mut R) -> Result<()> {
        let m = self.config.selection(dims)?.kept_count();
        let ds = self.config.embed_dim;
        self.params
            .insert(psi_name(dims, "w"), Tensor::randn(&[3 * m, ds], 1.0 / ((3 * m) as f64).sqrt(), rng));
        self.params.insert(psi_name(dims, "b"), Tensor::zeros(&[ds]));
        Ok(())
    }

    /// Checkpoint holding only aligner tensors; `model` records the
    /// architecture it is meant to be paired with.
    pub fn to_checkpoint(&self, model: &crate::model::ModelConfig) -> archive::Checkpoint {
        archive::Checkpoint {
            model: model.clone(),
            step: 0,
            rng: archive::RngState {
                seed: self.config.seed,
                word_pos: 0,
            },
            counters: BTreeMap::new(),
            aligner: Some(self.config.clone()),
            tensors: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &archive::Checkpoint) -> Result<Self> {
        let config = ck
            .aligner
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no aligner".into()))?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (n, t) in ck.tensors.iter().filter(|(n, _)| n.starts_with("aligner.")) {
            params.insert(n.clone(), t.clone());
        }
        params.get(TEXT_TABLE)?;
        params.get(TEXT_PROJ)?;
        Ok(Aligner { config, params })
    }

    pub fn save(&self, model: &crate::model::ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(model).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&archive::Checkpoint::load(path)?)
    }

    /// Normalised caption embeddings, `[B, d_s]`.
    pub fn text_graph(&self, g: &mut Graph, b: &mut Binder, captions: &[&str]) -> Result<Var> {
        let table = b.var(g, TEXT_TABLE)?;
        let dt = self.config.token_dim;
        let rows: Vec<Var> = captions
            .iter()
            .map(|c| {
                let ids = token_ids(c, self.config.vocab)?;
                let e = g.gather(table, 0, ids)?;
                let e = g.mean_axis(e, 0)?;
                g.reshape(e, &[1, dt])
            })
            .collect::<Result<_>>()?;
        let pooled = g.concat(&rows, 0)?;
        let proj = b.var(g, TEXT_PROJ)?;
        let y = g.matmul(pooled, proj)?;
        normalize_rows(g, y)
    }

    /// Normalised physics embeddings of `[G·C, M·3]` features, one row per
    /// group of `C` channel rows.
    fn physics_embed(&self, g: &mut Graph, b: &mut Binder, feats: Var, dims: usize, groups: usize) -> Result<Var> {
        let w = b.var(g, &psi_name(dims, "w"))?;
        let bias = b.var(g, &psi_name(dims, "b"))?;
        let rows = g.shape(feats)[0];
        let y = g.matmul(feats, w)?;
        let y = g.add(y, bias)?;
        let y = g.reshape(y, &[groups, rows / groups, self.config.embed_dim])?;
        let y = g.mean_axis(y, 1)?;
        normalize_rows(g, y)
    }

    fn sample_physics(&self, g: &mut Graph, b: &mut Binder, s: &AlignSample) -> Result<(Var, Var)> {
        let dims = s.u_ti.dims();
        let sel = self.config.selection(dims)?;
        if s.u_t0.extents() != s.u_ti.extents() || s.u_t0.channels() != s.u_ti.channels() {
            return Err(Error::shape("align_loss", "initial and current states differ in shape"));
        }
        let mut shape = vec![s.u_ti.channels()];
        shape.extend_from_slice(s.u_ti.extents());
        let cur = g.constant(Tensor::new(s.u_ti.data().to_vec(), shape)?);
        let fv = feature_graph(g, cur, s.u_t0.data(), &sel, self.config.eps_m)?;
        let emb = self.physics_embed(g, b, fv.values, dims, 1)?;
        Ok((emb, fv.ratios))
    }

    /// Physics embedding of a single pair as a plain vector.
    pub fn physics_embedding(&self, s: &AlignSample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let (e, _) = self.sample_physics(&mut g, &mut b, s)?;
        Ok(g.value(e).data().to_vec())
    }

    pub fn caption_embedding(&self, caption: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let e = self.text_graph(&mut g, &mut b, &[caption])?;
        Ok(g.value(e).data().to_vec())
    }

    /// Symmetric InfoNCE between caption and physics embeddings plus
    /// `λ·mean_b |mean R − 1|`.
    pub fn align_loss_graph(&self, g: &mut Graph, b: &mut Binder, batch: &[AlignSample]) -> Result<AlignLoss> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::Aligner(format!("alignment needs at least 2 pairs, got {n}")));
        }
        let caps: Vec<&str> = batch.iter().map(|s| s.caption.as_str()).collect();
        let text = self.text_graph(g, b, &caps)?;
        let mut phys = Vec::with_capacity(n);
        let mut energy = Vec::with_capacity(n);
        let minus_one = g.constant(Tensor::scalar(-1.0));
        for s in batch {
            let (e, r) = self.sample_physics(g, b, s)?;
            phys.push(e);
            let mr = g.mean(r)?;
            let d = g.add(mr, minus_one)?;
            let d = g.abs(d)?;
            energy.push(g.reshape(d, &[1])?);
        }
        let phys = g.concat(&phys, 0)?;
        let pt = g.transpose(phys)?;
        let logits = g.matmul(text, pt)?;
        let logits = g.scale(logits, 1.0 / self.config.temperature)?;
        let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        let ce = |g: &mut Graph, l: Var| -> Result<Var> {
            let p = g.softmax(l)?;
            let p = g.reshape(p, &[n * n])?;
            let p = g.gather(p, 0, diag.clone())?;
            let lp = g.ln(p)?;
            let m = g.mean(lp)?;
            g.scale(m, -0.5)
        };
        let rows = ce(g, logits)?;
        let lt = g.transpose(logits)?;
        let cols = ce(g, lt)?;
        let l_eq = g.add(rows, cols)?;
        let e = g.concat(&energy, 0)?;
        let l_e = g.mean(e)?;
        let le_scaled = g.scale(l_e, self.config.lambda)?;
        let total = if self.config.lambda == 0.0 {
            l_eq
        } else {
            g.add(l_eq, le_scaled)?
        };
        Ok(AlignLoss { total, l_eq, l_e })
    }

    /// `(L_Align, L_eq, L_E)`.
    pub fn align_loss(&self, batch: &[AlignSample]) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let l = self.align_loss_graph(&mut g, &mut b, batch)?;
        Ok((g.value(l.total).item(), g.value(l.l_eq).item(), g.value(l.l_e).item()))
    }

    /// Mean cosine similarity between the caption and the physics embeddings
    /// of `pred` (`[S, C, N…]`) relative to `initial` (single frame).
    pub fn similarity_graph(&self, g: &mut Graph, caption: &str, initial: &Field, pred: Var) -> Result<Var> {
        let shape = g.shape(pred).to_vec();
        if shape.len() < 3 || shape[1] != initial.channels() || &shape[2..] != initial.extents() {
            return Err(Error::shape(
                "finetune_loss",
                format!("prediction {:?} vs initial state [{}, {:?}]", shape, initial.channels(), initial.extents()),
            ));
        }
        let (s, c) = (shape[0], shape[1]);
        let dims = initial.dims();
        let sel = self.config.selection(dims)?;
        let text = Tensor::new(self.caption_embedding(caption)?, vec![self.config.embed_dim])?;
        let mut flat = vec![s * c];
        flat.extend_from_slice(initial.extents());
        let cur = g.reshape(pred, &flat)?;
        let reference: Vec<f64> = (0..s).flat_map(|_| initial.data().iter().copied()).collect();
        let fv = feature_graph(g, cur, &reference, &sel, self.config.eps_m)?;
        let mut b = Binder::frozen(&self.params);
        let emb = self.physics_embed(g, &mut b, fv.values, dims, s)?;
        let tv = g.constant(text);
        let cos = g.mul(emb, tv)?;
        let cos = g.sum_axis(cos, 1)?;
        g.mean(cos)
    }
}

/// Fine-tuning objective on trajectories whose frame 0 is the initial state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneLoss {
    pub l_sim: f64,
    pub similarity: f64,
    pub total: f64,
}

/// `L_sim − s` with `L_sim` the nRMSE over frames `1..T` and `s` the mean
/// caption/physics similarity of predicted frames against truth frame 0.
pub fn finetune_loss(pred: &Field, truth: &Field, caption: &str, aligner: &Aligner) -> Result<FinetuneLoss> {
    if pred.steps() != truth.steps() || pred.channels() != truth.channels() || pred.extents() != truth.extents() {
        return Err(Error::shape("finetune_loss", "prediction and truth differ in shape"));
    }
    let t = truth.steps();
    if t < 2 {
        return Err(Error::shape("finetune_loss", "needs an initial frame and at least one prediction"));
    }
    let p = pred.time_slice(1, t)?;
    let l_sim = trainer::nrmse(&p, &truth.time_slice(1, t)?)?.mean;
    let mut g = Graph::new();
    let mut shape = vec![t - 1, p.channels()];
    shape.extend_from_slice(p.extents());
    let pv = g.constant(Tensor::new(p.into_data(), shape)?);
    let s = aligner.similarity_graph(&mut g, caption, &truth.frame(0)?, pv)?;
    let similarity = g.value(s).item();
    Ok(FinetuneLoss {
        l_sim,
        similarity,
        total: l_sim - similarity,
    })
}

/// Adam on the alignment loss over random batches; returns the loss trace.
pub fn align_train(aligner: &mut Aligner, data: &[AlignSample]) -> Result<Vec<f64>> {
    let cfg = aligner.config.clone();
    if data.len() < 2 {
        return Err(Error::Aligner("alignment needs at least 2 pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let bs = cfg.batch.clamp(2, data.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.steps {
        idx.shuffle(&mut rng);
        let batch: Vec<AlignSample> = idx[..bs].iter().map(|&i| data[i].clone()).collect();
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut b = Binder::trainable(&aligner.params);
            let l = aligner.align_loss_graph(&mut g, &mut b, &batch)?;
            let mut gr = g.backward(l.total)?;
            (g.value(l.total).item(), b.collect(&mut gr))
        };
        if !loss.is_finite() {
            return Err(Error::Aligner(format!("non-finite alignment loss at step {}", trace.len())));
        }
        adam.step(&mut aligner.params, &grads, cfg.lr)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Fraction of captions whose most similar physics embedding carries the
/// same label.
pub fn retrieval_accuracy(aligner: &Aligner, data: &[AlignSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Aligner("retrieval over an empty set".into()));
    }
    let text: Vec<Vec<f64>> = data.iter().map(|s| aligner.caption_embedding(&s.caption)).collect::<Result<_>>()?;
    let phys: Vec<Vec<f64>> = data.iter().map(|s| aligner.physics_embedding(s)).collect::<Result<_>>()?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let hits = text
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let best = (0..phys.len())
                .max_by(|&a, &b| dot(t, &phys[a]).total_cmp(&dot(t, &phys[b])))
                .unwrap();
            data[best].label == data[*i].label
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Symbol substitutions: the first symbol of a row may be replaced by any of
/// the others.
pub const SUBSTITUTION_TABLE: &str = "\
u v A w
\\beta c
\\nu \\eta
x \\xi
";

pub fn substitution_table() -> Vec<(String, Vec<String>)> {
    SUBSTITUTION_TABLE
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let k = it.next()?.to_string();
            Some((k, it.map(str::to_string).collect()))
        })
        .collect()
}

/// One augmentation: symbol map (keys in control-sequence spelling), a
/// both-sides scale factor and an optional time-derivative notation swap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Augmentation {
    pub substitutions: BTreeMap<String, String>,
    pub scale: f64,
    pub swap_time_notation: bool,
}

const GRAMMAR_CONTROLS: [&str; 12] = [
    "\\partial", "\\beta", "\\nu", "\\rho", "\\pi", "\\omega", "\\Delta", "\\frac", "\\eta", "\\xi", "\\nabla", "\\cdot",
];

fn in_grammar(t: &Token) -> bool {
    match t.kind {
        TokenKind::Control | TokenKind::Unicode => GRAMMAR_CONTROLS.contains(&t.text.as_str()),
        TokenKind::Ident => {
            matches!(t.text.as_str(), "u" | "v" | "w" | "A" | "c" | "t")
                || (!t.text.is_empty() && t.text.chars().all(|c| matches!(c, 'x' | 'y' | 'z')))
        }
        TokenKind::Number => t.text.parse::<f64>().is_ok(),
        TokenKind::Symbol => "+-=^_/(){},*".contains(t.text.as_str()),
    }
}

fn unicode_spelling(control: &str) -> Option<char> {
    UNICODE_ALIASES.iter().find(|(_, a)| *a == control).map(|(c, _)| *c)
}

fn render(target: &str, unicode: bool) -> String {
    match (unicode, unicode_spelling(target)) {
        (true, Some(c)) => c.to_string(),
        _ => target.to_string(),
    }
}

/// Applies one augmentation, preserving the spacing of untouched text.
pub fn apply_augmentation(caption: &str, aug: &Augmentation) -> Result<String> {
    let toks = tokenize(caption);
    if toks.is_empty() || !toks.iter().any(|t| t.text == "=") {
        return Err(Error::Aligner(format!("caption {caption:?} has no equation")));
    }
    if let Some(bad) = toks.iter().find(|t| !in_grammar(t)) {
        return Err(Error::Aligner(format!(
            "caption {caption:?} is outside the template grammar at {:?}",
            bad.text
        )));
    }
    let partial = |t: &Token| t.text == "\\partial";
    let mut out = String::with_capacity(caption.len() + 16);
    let mut last = 0;
    let mut i = 0;
    while i < toks.len() {
        let t = &toks[i];
        let uni = t.kind == TokenKind::Unicode;
        out.push_str(&caption[last..t.start]);
        let texts: Vec<&str> = toks[i..].iter().take(8).map(|t| t.text.as_str()).collect();
        if aug.swap_time_notation && partial(t) && texts.get(1) == Some(&"_") && texts.get(2) == Some(&"t") {
            let d = render("\\partial", uni);
            out.push_str(&format!("\\frac{{{d}}}{{{d} t}}"));
            last = toks[i + 2].end;
            i += 3;
            continue;
        }
        if aug.swap_time_notation
            && texts.len() >= 8
            && texts[..8] == ["\\frac", "{", "\\partial", "}", "{", "\\partial", "t", "}"]
        {
            out.push_str(&render("\\partial", toks[i + 2].kind == TokenKind::Unicode));
            out.push_str("_t");
            last = toks[i + 7].end;
            i += 8;
            continue;
        }
        let replaced = match t.kind {
            TokenKind::Ident if t.text.chars().all(|c| c == 'x') => aug
                .substitutions
                .get("x")
                .map(|x| t.text.chars().map(|_| render(x, caption.contains('ξ') || !caption.contains('\\'))).collect()),
            TokenKind::Ident | TokenKind::Control | TokenKind::Unicode => {
                aug.substitutions.get(&t.text).map(|r| render(r, uni))
            }
            _ => None,
        };
        match replaced {
            Some(r) => out.push_str(&r),
            None => out.push_str(&caption[t.start..t.end]),
        }
        last = t.end;
        i += 1;
    }
    out.push_str(&caption[last..]);
    let factor = format!("{:.2}", aug.scale);
    if aug.scale == 0.0 || factor == "1.00" {
        return Ok(out);
    }
    let mut depth = 0i32;
    let eq_end = out
        .char_indices()
        .find(|&(_, c)| {
            match c {
                '{' => depth += 1,
                '}' => depth -= 1,
                _ => {}
            }
            c == ',' && depth == 0
        })
        .map_or(out.len(), |(p, _)| p);
    let (eq, rest) = out.split_at(eq_end);
    let (lhs, rhs) = eq.split_once('=').ok_or_else(|| Error::Aligner("equation lost its '='".into()))?;
    Ok(format!("{factor} ({}) = {factor} ({}){rest}", lhs.trim(), rhs.trim()))
}

/// Four deterministic variants: substitution, scaling, notation swap, and
/// all three combined.
pub fn augment_caption(caption: &str, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = substitution_table();
    let random_map = |rng: &mut ChaCha8Rng| -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        while m.is_empty() {
            for (k, vs) in &table {
                if rng.gen_bool(0.5) {
                    m.insert(k.clone(), vs[rng.gen_range(0..vs.len())].clone());
                }
            }
        }
        m
    };
    let subs = Augmentation {
        substitutions: random_map(&mut rng),
        scale: 1.0,
        swap_time_notation: false,
    };
    let scaled = Augmentation {
        substitutions: BTreeMap::new(),
        scale: rng.gen_range(0.5..1.5),
        swap_time_notation: false,
    };
    let swapped = Augmentation {
        substitutions: BTreeMap::new(),
        scale: 1.0,
        swap_time_notation: true,
    };
    let all = Augmentation {
        substitutions: random_map(&mut rng),
        scale: rng.gen_range(0.5..1.5),
        swap_time_notation: true,
    };
    [subs, scaled, swapped, all]
        .iter()
        .map(|a| apply_augmentation(caption, a))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]` on the test split.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Multinomial logistic regression on standardised features with a
/// stratified 80/20 split.
pub fn classify_probe(features: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Aligner("features and labels differ in count".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Aligner("ragged feature vectors".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut by_class = vec![Vec::new(); k];
    labels.iter().enumerate().for_each(|(i, &l)| by_class[l].push(i));
    if k < 2 || by_class.iter().any(|c| c.len() < 2) {
        return Err(Error::Aligner("probe needs at least 2 classes with 2 samples each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        let nt = ((idx.len() as f64 * 0.2).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..nt]);
        train.extend_from_slice(&idx[nt..]);
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / train.len() as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / train.len() as f64;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let x = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = (0..features.len()).map(x).collect();
    let mut w = vec![0.0; (d + 1) * k];
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut store = ParamStore::new();
    let logits = |w: &[f64], xi: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| w[d * k + c] + xi.iter().enumerate().map(|(j, v)| v * w[j * k + c]).sum::<f64>())
            .collect()
    };
    let softmax = |z: Vec<f64>| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    store.insert("w", Tensor::zeros(&[w.len()]));
    for _ in 0..400 {
        let mut grad = vec![0.0; w.len()];
        for &i in &train {
            let p = softmax(logits(&w, &xs[i]));
            for c in 0..k {
                let r = (p[c] - if labels[i] == c { 1.0 } else { 0.0 }) / train.len() as f64;
                for j in 0..d {
                    grad[j * k + c] += r * xs[i][j];
                }
                grad[d * k + c] += r;
            }
        }
        for (gv, wv) in grad.iter_mut().zip(&w).take(d * k) {
            *gv += 1e-3 * wv;
        }
        let grads = [("w".to_string(), grad)].into_iter().collect();
        adam.step(&mut store, &grads, 0.05)?;
        w.copy_from_slice(store.get("w")?.data());
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for &i in &test {
        let z = logits(&w, &xs[i]);
        let pred = (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
        confusion[labels[i]][pred] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Confusion matrix as CSV: one row per true class, one column per
/// predicted class.
pub fn write_confusion_csv(path: impl AsRef<Path>, report: &ProbeReport, names: &[String]) -> Result<()> {
    let mut header = vec!["true".to_string()];
    header.extend(names.iter().cloned());
    let rows: Vec<Vec<String>> = report
        .confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            std::iter::once(names.get(i).cloned().unwrap_or_else(|| i.to_string()))
                .chain(r.iter().map(|v| v.to_string()))
                .collect()
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    archive::write_csv(path, &h, &rows)
}
