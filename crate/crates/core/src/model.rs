//! Decoder-only transformer over spectral tokens with a block-causal
//! temporal mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, ModeSelection};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Additive value standing in for −∞ in the attention mask.
pub const MASK_SENTINEL: f64 = -1e30;

/// `[L, H]` embeddings with `L = T·C`; token `i` belongs to timestep
/// `i / C` and quantity `i % C`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: Tensor,
    pub channels: usize,
    pub pad: Vec<bool>,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor, channels: usize, pad: Vec<bool>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || channels == 0 || s[0] % channels != 0 || pad.len() != s[0] {
            return Err(Error::Model(format!(
                "token array {s:?} with C={channels} and {} pad flags",
                pad.len()
            )));
        }
        Ok(TokenSequence {
            embeddings,
            channels,
            pad,
        })
    }

    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len() / self.channels
    }

    pub fn timestep_of(&self, i: usize) -> usize {
        i / self.channels
    }

    pub fn quantity_of(&self, i: usize) -> usize {
        i % self.channels
    }
}

/// `[T·C, T·C]` mask: zero where column `j` is a non-pad token of the same
/// or an earlier timestep than row `i`, the sentinel elsewhere.
pub fn temporal_mask(steps: usize, channels: usize, pad: &[bool]) -> Result<Tensor> {
    let l = steps * channels;
    if steps == 0 || channels == 0 || (!pad.is_empty() && pad.len() != l) {
        return Err(Error::Model(format!(
            "mask for T={steps}, C={channels}, {} pad flags",
            pad.len()
        )));
    }
    Ok(Tensor::from_fn(&[l, l], |k| {
        let (i, j) = (k / l, k % l);
        let padded = !pad.is_empty() && pad[j];
        if j / channels <= i / channels && !padded {
            0.0
        } else {
            MASK_SENTINEL
        }
    }))
}

/// Rotary rotation of `[L, heads, head_dim]`, pair `m` of token `i` turned by
/// `positions[i] · base^(−2m/head_dim)`.
pub fn rope_rotate(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.rope(v, positions.to_vec(), base)?;
    Ok(g.value(r).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    /// Retained modes per axis for 1D, 2D and 3D codecs.
    pub modes: [usize; 3],
    pub width: usize,
    pub codec_bias: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub max_context: usize,
    pub divergence_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            intermediate: 256,
            modes: [12, 12, 12],
            width: 8,
            codec_bias: true,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            max_context: 64,
            divergence_bound: 1e6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config("head dimension must be even for RoPE".into()));
        }
        if self.max_context == 0 || self.intermediate == 0 {
            return Err(Error::Config("max_context and intermediate must be positive".into()));
        }
        Ok(())
    }

    pub fn codec(&self, dims: usize) -> Result<Codec> {
        if !(1..=3).contains(&dims) {
            return Err(Error::Codec(format!("no codec for {dims} dimensions")));
        }
        let sel = ModeSelection::fixed_low(self.modes[dims - 1], dims)?;
        Ok(Codec::new(dims, sel, self.width, self.hidden, self.codec_bias))
    }
}

/// Shared transformer plus one codec per initialised dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn lp(i: usize, part: &str) -> String {
    format!("layer{i}.{part}")
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, dims: &[usize], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (h, f) = (config.hidden, config.intermediate);
        let std_h = 1.0 / (h as f64).sqrt();
        for i in 0..config.layers {
            params.insert(lp(i, "attn_norm"), Tensor::full(&[h], 1.0));
            params.insert(lp(i, "ffn_norm"), Tensor::full(&[h], 1.0));
            for w in ["wq", "wk", "wv"] {
                params.insert(lp(i, w), Tensor::randn(&[h, h], std_h, rng));
            }
            params.insert(lp(i, "wo"), Tensor::randn(&[h, h], 0.01 * std_h, rng));
            params.insert(lp(i, "w1"), Tensor::randn(&[h, f], std_h, rng));
            params.insert(lp(i, "w2"), Tensor::randn(&[f, h], 0.01 / (f as f64).sqrt(), rng));
        }
        let mut model = Model { config, params };
        for &d in dims {
            model.add_codec(d, rng)?;
        }
        Ok(model)
    }

    pub fn add_codec<R: Rng + ?Sized>(&mut self, dims: usize, rng: &mut R) -> Result<()> {
        let codec = self.config.codec(dims)?;
        codec.init(&mut self.params, rng)
    }

    pub fn has_codec(&self, dims: usize) -> bool {
        self.params.contains(&format!("codec{dims}d.lift_w"))
    }

    pub fn codec(&self, dims: usize) -> Result<Codec> {
        if !self.has_codec(dims) {
            return Err(Error::Codec(format!("model has no {dims}-D codec")));
        }
        self.config.codec(dims)
    }

    /// Transformer over `[L, H]` tokens; the output at `(t, c)` predicts
    /// `(t+1, c)`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        channels: usize,
        pad: &[bool],
    ) -> Result<Var> {
        self.forward_layers(g, b, x, channels, pad).map(|hs| *hs.last().unwrap())
    }

    /// Residual stream after every layer; entry 0 is the input.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        channels: usize,
        pad: &[bool],
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != cfg.hidden || channels == 0 || shape[0] % channels != 0 {
            return Err(Error::Model(format!(
                "tokens {shape:?} for hidden {} and C={channels}",
                cfg.hidden
            )));
        }
        let l = shape[0];
        let steps = l / channels;
        let mask = g.constant(temporal_mask(steps, channels, pad)?);
        let positions: Vec<usize> = (0..l).map(|i| i / channels).collect();
        let mut states = vec![x];
        let mut h = x;
        for i in 0..cfg.layers {
            h = self
                .layer(g, b, h, i, mask, &positions)
                .map_err(|e| match e {
                    Error::NonFinite { op, .. } => Error::NonFinite {
                        op,
                        location: Some(format!("layer {i}")),
                    },
                    other => other,
                })?;
            states.push(h);
        }
        Ok(states)
    }

    fn layer(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        i: usize,
        mask: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let (l, h) = (g.shape(x)[0], cfg.hidden);
        let heads = cfg.heads;
        let hd = h / heads;

        let gain = b.var(g, &lp(i, "attn_norm"))?;
        let xn = g.rms_norm(x, cfg.norm_eps)?;
        let xn = g.mul(xn, gain)?;
        let split = |g: &mut Graph, b: &mut Binder, w: &str, rotate: bool| -> Result<Var> {
            let wv = b.var(g, &lp(i, w))?;
            let y = g.matmul(xn, wv)?;
            let y = g.reshape(y, &[l, heads, hd])?;
            let y = if rotate {
                g.rope(y, positions.to_vec(), cfg.rope_base)?
            } else {
                y
            };
            g.permute(y, &[1, 0, 2])
        };
        let q = split(g, b, "wq", true)?;
        let k = split(g, b, "wk", true)?;
        let v = split(g, b, "wv", false)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let scores = g.add(scores, mask)?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[l, h])?;
        let wo = b.var(g, &lp(i, "wo"))?;
        let out = g.matmul(ctx, wo)?;
        let x = g.add(x, out)?;

        let gain = b.var(g, &lp(i, "ffn_norm"))?;
        let xn = g.rms_norm(x, cfg.norm_eps)?;
        let xn = g.mul(xn, gain)?;
        let w1 = b.var(g, &lp(i, "w1"))?;
        let w2 = b.var(g, &lp(i, "w2"))?;
        let u = g.matmul(xn, w1)?;
        let u = g.silu(u)?;
        let d = g.matmul(u, w2)?;
        g.add(x, d)
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let mut g = Graph::new();
        self.forward_in(&mut g, tokens)
    }

    /// Forward on a strict graph, which rejects non-finite activations.
    pub fn forward_strict(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        let mut g = Graph::strict();
        self.forward_in(&mut g, tokens)
    }

    fn forward_in(&self, g: &mut Graph, tokens: &TokenSequence) -> Result<TokenSequence> {
        let mut b = Binder::frozen(&self.params);
        let x = g.constant(tokens.embeddings.clone());
        let y = self.forward_graph(g, &mut b, x, tokens.channels, &tokens.pad)?;
        TokenSequence::new(g.value(y).clone(), tokens.channels, tokens.pad.clone())
    }

    /// Prediction of the frame following `window` (context truncated from
    /// the left to `max_context`).
    pub fn predict_next(&self, window: &Field) -> Result<Field> {
        let ctx = window.steps().min(self.config.max_context);
        if ctx == 0 {
            return Err(Error::Model("empty context window".into()));
        }
        let window = window.time_slice(window.steps() - ctx, window.steps())?;
        let codec = self.codec(window.dims())?;
        let c = window.channels();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let mut shape = vec![ctx * c];
        shape.extend_from_slice(window.extents());
        let x = g.constant(Tensor::new(window.data().to_vec(), shape)?);
        let tok = codec.encode_graph(&mut g, &mut b, x)?;
        let out = self.forward_graph(&mut g, &mut b, tok, c, &[])?;
        let last = g.slice(out, 0, (ctx - 1) * c, ctx * c)?;
        let dec = codec.decode_graph(&mut g, &mut b, last, window.extents())?;
        Field::new(g.value(dec).data().to_vec(), 1, c, window.extents().to_vec())
    }

    /// Token-averaged residual stream of `window` after every layer; entry 0
    /// is the token embedding.
    pub fn pooled_hidden_states(&self, window: &Field) -> Result<Vec<Vec<f64>>> {
        let ctx = window.steps().min(self.config.max_context);
        if ctx == 0 {
            return Err(Error::Model("empty context window".into()));
        }
        let window = window.time_slice(0, ctx)?;
        let codec = self.codec(window.dims())?;
        let c = window.channels();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let mut shape = vec![ctx * c];
        shape.extend_from_slice(window.extents());
        let x = g.constant(Tensor::new(window.data().to_vec(), shape)?);
        let tok = codec.encode_graph(&mut g, &mut b, x)?;
        let states = self.forward_layers(&mut g, &mut b, tok, c, &[])?;
        states
            .into_iter()
            .map(|s| {
                let m = g.mean_axis(s, 0)?;
                Ok(g.value(m).data().to_vec())
            })
            .collect()
    }

    /// Appends `steps` autoregressive predictions to `window`.
    pub fn rollout(&self, window: &Field, steps: usize) -> Result<Field> {
        if window.steps() == 0 {
            return Err(Error::Model("rollout needs at least one frame".into()));
        }
        let mut out = window.clone();
        for s in 0..steps {
            let next = self.predict_next(&out)?;
            let mag = next.data().iter().fold(0.0_f64, |m, v| {
                if v.is_finite() {
                    m.max(v.abs())
                } else {
                    f64::INFINITY
                }
            });
            if mag > self.config.divergence_bound {
                return Err(Error::Divergence {
                    step: s + 1,
                    magnitude: mag,
                    bound: self.config.divergence_bound,
                });
            }
            out.append(&next)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(layers: usize, heads: usize) -> Model {
        let cfg = ModelConfig {
            layers,
            hidden: 16,
            heads,
            intermediate: 32,
            modes: [4, 4, 4],
            width: 4,
            ..ModelConfig::default()
        };
        Model::new(cfg, &[1], &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn allowed(m: &Tensor, l: usize) -> Vec<Vec<usize>> {
        (0..l)
            .map(|i| (0..l).filter(|&j| m.data()[i * l + j] == 0.0).collect())
            .collect()
    }

    #[test]
    fn mask_examples() {
        let m = temporal_mask(2, 2, &[]).unwrap();
        assert_eq!(allowed(&m, 4), vec![vec![0, 1], vec![0, 1], vec![0, 1, 2, 3], vec![0, 1, 2, 3]]);
        let m = temporal_mask(4, 1, &[]).unwrap();
        for i in 0..4 {
            assert_eq!(allowed(&m, 4)[i], (0..=i).collect::<Vec<_>>());
        }
        let m = temporal_mask(1, 3, &[]).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let m = temporal_mask(2, 2, &[false, true, false, true]).unwrap();
        assert_eq!(allowed(&m, 4)[3], vec![0, 2]);
    }

    #[test]
    fn rope_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 2, 8], 1.0, &mut rng);
        let r = rope_rotate(&x, &[0, 0, 0], 10000.0).unwrap();
        assert_eq!(r, x);
        let r = rope_rotate(&x, &[1, 4, 9], 10000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(r.data().chunks(2)) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
        }
        let odd = Tensor::zeros(&[1, 1, 3]);
        assert!(rope_rotate(&odd, &[0], 10000.0).is_err());
    }

    #[test]
    fn rope_dot_depends_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let dot = |p1: usize, p2: usize| -> f64 {
            let a = rope_rotate(&q, &[p1], 10000.0).unwrap();
            let b = rope_rotate(&k, &[p2], 10000.0).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        assert!((dot(7, 3) - dot(12, 8)).abs() < 1e-12);
    }

    #[test]
    fn zero_layers_is_identity() {
        let m = small(0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = TokenSequence::new(Tensor::randn(&[6, 16], 1.0, &mut rng), 2, vec![false; 6]).unwrap();
        assert_eq!(m.forward(&t).unwrap(), t);
    }

    #[test]
    fn causality_and_group_visibility() {
        let m = small(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::randn(&[6, 16], 1.0, &mut rng);
        let run = |e: &Tensor| m.forward(&TokenSequence::new(e.clone(), 2, vec![false; 6]).unwrap()).unwrap();
        let y0 = run(&base);
        let mut p = base.clone();
        p.data_mut()[4 * 16..].iter_mut().for_each(|v| *v += 1.0);
        let y1 = run(&p);
        assert_eq!(&y0.embeddings.data()[..4 * 16], &y1.embeddings.data()[..4 * 16]);
        let mut p = base.clone();
        p.data_mut()[16..32].iter_mut().for_each(|v| *v += 1.0);
        let y2 = run(&p);
        assert_ne!(&y0.embeddings.data()[..16], &y2.embeddings.data()[..16]);
    }

    #[test]
    fn strict_forward_names_layer() {
        let m = small(1, 2);
        let mut e = Tensor::zeros(&[2, 16]);
        e.data_mut()[3] = f64::NAN;
        let t = TokenSequence::new(e, 1, vec![false; 2]).unwrap();
        let err = m.forward_strict(&t).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn rollout_zero_steps_and_divergence() {
        let mut m = small(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Field::new(Tensor::randn(&[32], 1.0, &mut rng).into_data(), 2, 1, vec![16]).unwrap();
        assert_eq!(m.rollout(&w, 0).unwrap(), w);
        assert_eq!(m.rollout(&w, 3).unwrap().steps(), 5);
        m.config.divergence_bound = 1e-9;
        assert!(matches!(m.rollout(&w, 2), Err(Error::Divergence { step: 1, .. })));
    }
}
