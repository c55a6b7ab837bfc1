//! Fourier encoder/decoder: field → truncated modes → token, and back by
//! zero padding and an inverse FFT onto any target grid.
//!
//! Kept modes are stored as signed frequencies so one selection can be
//! mapped onto spectra of different resolutions. Coefficients are scaled by
//! `1/∏N` before the learned maps, which makes a token independent of the
//! grid a band-limited field was sampled on.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{self, Spectrum};
use crate::field::Field;
use crate::model::TokenSequence;
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModePolicy {
    FixedLow,
    MagnitudeTopk,
}

/// Retained Fourier modes, as signed frequency tuples in ascending flat
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSelection {
    k: usize,
    policy: ModePolicy,
    freqs: Vec<Vec<i64>>,
}

fn fixed_low_axis(k: usize, last: bool) -> Vec<i64> {
    if last {
        return (0..k as i64).collect();
    }
    let pos = k.div_ceil(2) as i64;
    let neg = (k / 2) as i64;
    (0..pos).chain(-neg..0).collect()
}

fn cartesian(axes: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&f| {
                    let mut p = prefix.clone();
                    p.push(f);
                    p
                })
            })
            .collect();
    }
    out
}

/// Signed frequency of spectral index `i` on an axis of extent `n`.
fn signed_freq(i: usize, n: usize, last: bool) -> i64 {
    if last || i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl ModeSelection {
    /// Last axis keeps `0..K`; every other axis keeps
    /// `0..⌈K/2⌉ ∪ −⌊K/2⌋..0`.
    pub fn fixed_low(k: usize, dims: usize) -> Result<Self> {
        if k == 0 || !(1..=3).contains(&dims) {
            return Err(Error::Codec(format!("invalid selection K={k}, dims={dims}")));
        }
        let axes: Vec<Vec<i64>> = (0..dims).map(|a| fixed_low_axis(k, a == dims - 1)).collect();
        Ok(ModeSelection {
            k,
            policy: ModePolicy::FixedLow,
            freqs: cartesian(&axes),
        })
    }

    /// Keeps as many coefficients as the fixed-low policy would, choosing the
    /// largest magnitudes of `spectrum`; ties go to the lower flat index.
    pub fn magnitude_topk(spectrum: &Spectrum, k: usize) -> Result<Self> {
        let dims = spectrum.axis_extents.len();
        let count = ModeSelection::fixed_low(k, dims)?.kept_count();
        if count > spectrum.len() {
            return Err(Error::Codec(format!(
                "K={k} keeps {count} modes but the spectrum has {}",
                spectrum.len()
            )));
        }
        let mag: Vec<f64> = (0..spectrum.len())
            .map(|i| {
                let (re, im) = spectrum.get(i);
                re.hypot(im)
            })
            .collect();
        let mut order: Vec<usize> = (0..spectrum.len()).collect();
        order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order[..count].to_vec();
        chosen.sort_unstable();
        let shape = spectrum.spectral_shape();
        let freqs = chosen
            .into_iter()
            .map(|flat| {
                let mut rem = flat;
                let mut idx = vec![0; dims];
                for a in (0..dims).rev() {
                    idx[a] = rem % shape[a];
                    rem /= shape[a];
                }
                (0..dims)
                    .map(|a| signed_freq(idx[a], spectrum.axis_extents[a], a == dims - 1))
                    .collect()
            })
            .collect();
        Ok(ModeSelection {
            k,
            policy: ModePolicy::MagnitudeTopk,
            freqs,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn policy(&self) -> ModePolicy {
        self.policy
    }

    pub fn dims(&self) -> usize {
        self.freqs.first().map_or(0, Vec::len)
    }

    pub fn kept_count(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[Vec<i64>] {
        &self.freqs
    }

    /// Smallest power-of-two extent per axis that can hold every kept mode.
    pub fn min_extents(&self) -> Vec<usize> {
        let dims = self.dims();
        (0..dims)
            .map(|a| {
                let mut n = 4;
                while !self.freqs.iter().all(|f| representable(f[a], n, a == dims - 1)) {
                    n *= 2;
                }
                n
            })
            .collect()
    }

    /// Flat indices of the kept modes in the half-spectrum layout of
    /// `extents`.
    pub fn flat_indices(&self, extents: &[usize]) -> Result<Vec<usize>> {
        let dims = self.dims();
        if extents.len() != dims {
            return Err(Error::Codec(format!(
                "selection is {dims}-dimensional, grid {extents:?}"
            )));
        }
        let shape = fft::spectral_shape(extents);
        self.freqs
            .iter()
            .map(|f| {
                let mut flat = 0;
                for a in 0..dims {
                    let last = a == dims - 1;
                    if !representable(f[a], extents[a], last) {
                        return Err(Error::Codec(format!(
                            "extent {} on axis {a} cannot hold mode {} (K={})",
                            extents[a], f[a], self.k
                        )));
                    }
                    let i = if f[a] < 0 { extents[a] as i64 + f[a] } else { f[a] } as usize;
                    flat = flat * shape[a] + i;
                }
                Ok(flat)
            })
            .collect()
    }
}

fn representable(f: i64, n: usize, last: bool) -> bool {
    let n = n as i64;
    if last {
        (0..=n / 2).contains(&f)
    } else {
        (-(n / 2)..n / 2).contains(&f)
    }
}

/// Kept coefficients of one spectrum, interleaved `(re, im)` in selection
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedModes {
    pub values: Vec<f64>,
    pub selection: ModeSelection,
    pub source_extents: Vec<usize>,
}

pub fn select_modes(spectrum: &Spectrum, sel: &ModeSelection) -> Result<TruncatedModes> {
    let idx = sel.flat_indices(&spectrum.axis_extents)?;
    let mut values = Vec::with_capacity(2 * idx.len());
    for i in idx {
        let (re, im) = spectrum.get(i);
        values.push(re);
        values.push(im);
    }
    Ok(TruncatedModes {
        values,
        selection: sel.clone(),
        source_extents: spectrum.axis_extents.clone(),
    })
}

impl TruncatedModes {
    /// Places the kept coefficients into a zero spectrum sized for
    /// `target_extents`, rescaled by `∏N_target / ∏N_source`.
    pub fn to_spectrum(&self, target_extents: &[usize]) -> Result<Spectrum> {
        fft::check_extents(target_extents)?;
        let idx = self.selection.flat_indices(target_extents)?;
        let ratio = target_extents.iter().product::<usize>() as f64
            / self.source_extents.iter().product::<usize>() as f64;
        let mut s = Spectrum::zeros(target_extents);
        for (j, i) in idx.into_iter().enumerate() {
            s.set(i, (self.values[2 * j] * ratio, self.values[2 * j + 1] * ratio));
        }
        Ok(s)
    }
}

/// Random field whose spectrum lies inside the kept set of `sel`.
pub fn band_limited_field<R: Rng + ?Sized>(
    sel: &ModeSelection,
    extents: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let idx = sel.flat_indices(extents)?;
    let dims = extents.len();
    let kept: std::collections::HashSet<&Vec<i64>> = sel.freqs.iter().collect();
    let mut s = Spectrum::zeros(extents);
    let half = extents[dims - 1] / 2;
    for (f, i) in sel.freqs.iter().zip(idx) {
        let edge = f[dims - 1] == 0 || f[dims - 1] as usize == half;
        if edge {
            let mut conj: Vec<i64> = f.iter().map(|v| -v).collect();
            conj[dims - 1] = f[dims - 1];
            for (a, c) in conj.iter_mut().enumerate().take(dims - 1) {
                if *c == extents[a] as i64 / 2 {
                    *c = -*c;
                }
            }
            if !kept.contains(&conj) {
                continue;
            }
        }
        s.set(i, (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    }
    fft::irfft_nd(&s, extents)
}

/// Shapes of the four learned maps of one dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub prefix: String,
    pub selection: ModeSelection,
    pub width: usize,
    pub hidden: usize,
    pub bias: bool,
}

impl Codec {
    pub fn new(dims: usize, selection: ModeSelection, width: usize, hidden: usize, bias: bool) -> Self {
        Codec {
            prefix: format!("codec{dims}d"),
            selection,
            width,
            hidden,
            bias,
        }
    }

    pub fn dims(&self) -> usize {
        self.selection.dims()
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Random encoder maps; decoder maps set to the pseudo-inverse of the
    /// encoder, biases zero.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let m = self.selection.kept_count();
        let (w, h) = (self.width, self.hidden);
        if w < 2 {
            return Err(Error::Codec(format!("width {w} below 2")));
        }
        let lift = Tensor::randn(&[2, w], 1.0, rng);
        let proj = Tensor::randn(&[m * w, h], 1.0 / ((m * w) as f64).sqrt(), rng);
        let (unlift, unproj) = pseudo_inverse_maps(&lift, &proj, m)?;
        store.insert(self.name("lift_w"), lift);
        store.insert(self.name("proj_w"), proj);
        store.insert(self.name("unproj_w"), unproj);
        store.insert(self.name("unlift_w"), unlift);
        if self.bias {
            store.insert(self.name("lift_b"), Tensor::zeros(&[w]));
            store.insert(self.name("proj_b"), Tensor::zeros(&[h]));
            store.insert(self.name("unproj_b"), Tensor::zeros(&[m * w]));
            store.insert(self.name("unlift_b"), Tensor::zeros(&[2]));
        }
        Ok(())
    }

    fn affine(&self, g: &mut Graph, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var> {
        let wv = b.var(g, &self.name(w))?;
        let y = g.matmul(x, wv)?;
        if self.bias {
            let bv = b.var(g, &self.name(bias))?;
            g.add(y, bv)
        } else {
            Ok(y)
        }
    }

    /// `[B, N…]` fields to `[B, H]` tokens.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let dims = self.dims();
        if shape.len() != dims + 1 {
            return Err(Error::Codec(format!(
                "{dims}-D codec given input of shape {shape:?}"
            )));
        }
        let extents = &shape[1..];
        fft::check_extents(extents)?;
        let batch = shape[0];
        let idx = self.selection.flat_indices(extents)?;
        let m = idx.len();
        let s_total: usize = fft::spectral_shape(extents).iter().product();
        let n_total: usize = extents.iter().product();
        let s = g.rfft(x, dims)?;
        let s = g.reshape(s, &[batch, s_total, 2])?;
        let s = g.gather(s, 1, idx)?;
        let s = g.scale(s, 1.0 / n_total as f64)?;
        let z = self.affine(g, b, s, "lift_w", "lift_b")?;
        let z = g.reshape(z, &[batch, m * self.width])?;
        self.affine(g, b, z, "proj_w", "proj_b")
    }

    /// `[B, H]` tokens to `[B, N…]` fields on `target_extents`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        tokens: Var,
        target_extents: &[usize],
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.hidden {
            return Err(Error::Codec(format!(
                "tokens of shape {shape:?}, hidden size {}",
                self.hidden
            )));
        }
        fft::check_extents(target_extents)?;
        let batch = shape[0];
        let idx = self.selection.flat_indices(target_extents)?;
        let m = idx.len();
        let spec_shape = fft::spectral_shape(target_extents);
        let s_total: usize = spec_shape.iter().product();
        let n_total: usize = target_extents.iter().product();
        let z = self.affine(g, b, tokens, "unproj_w", "unproj_b")?;
        let z = g.reshape(z, &[batch, m, self.width])?;
        let s = self.affine(g, b, z, "unlift_w", "unlift_b")?;
        let s = g.scale(s, n_total as f64)?;
        let s = g.scatter(s, 1, idx, s_total)?;
        let mut full = vec![batch];
        full.extend_from_slice(&spec_shape);
        full.push(2);
        let s = g.reshape(s, &full)?;
        g.irfft(s, target_extents)
    }

    /// `T·C` tokens ordered timestep-major, then quantity.
    pub fn encode_tokens(&self, field: &Field, params: &ParamStore) -> Result<TokenSequence> {
        if !field.is_finite() {
            return Err(Error::NonFinite {
                op: "encode_tokens",
                location: None,
            });
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let mut shape = vec![field.steps() * field.channels()];
        shape.extend_from_slice(field.extents());
        let x = g.constant(Tensor::new(field.data().to_vec(), shape)?);
        let tok = self.encode_graph(&mut g, &mut b, x)?;
        TokenSequence::new(g.value(tok).clone(), field.channels(), vec![false; field.steps() * field.channels()])
    }

    pub fn decode_tokens(
        &self,
        tokens: &TokenSequence,
        params: &ParamStore,
        target_extents: &[usize],
    ) -> Result<Field> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(params);
        let t = g.constant(tokens.embeddings.clone());
        let out = self.decode_graph(&mut g, &mut b, t, target_extents)?;
        let c = tokens.channels;
        Field::new(
            g.value(out).data().to_vec(),
            tokens.len() / c,
            c,
            target_extents.to_vec(),
        )
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| data[i])
}

/// Decoder maps `(unlift, unproject)` inverting `lift ∘ project` on the
/// kept-mode space. Exact whenever `H ≥ 2·kept`.
fn pseudo_inverse_maps(lift: &Tensor, proj: &Tensor, m: usize) -> Result<(Tensor, Tensor)> {
    let w = lift.shape()[1];
    let l = to_matrix(lift);
    let p = to_matrix(proj);
    let pinv = |a: DMatrix<f64>| {
        a.pseudo_inverse(1e-12)
            .map_err(|e| Error::Codec(format!("pseudo-inverse failed: {e}")))
    };
    let unlift = pinv(l.clone())?;
    let mut block = DMatrix::zeros(2 * m, m * w);
    for i in 0..m {
        block.view_mut((2 * i, w * i), (2, w)).copy_from(&l);
    }
    let enc = &block * p;
    let unproj = pinv(enc)? * block;
    Ok((from_matrix(&unlift), from_matrix(&unproj)))
}
