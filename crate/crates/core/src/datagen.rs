//! Classical solvers for the PDE families used as ground truth.
//!
//! All domains are periodic on `[0, L)` per axis. Linear families are
//! advanced exactly by per-mode propagators; Burgers and 2D vorticity use
//! dealiased pseudo-spectral RK4, Fisher–KPP a semi-implicit Euler step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{self, Spectrum};
use crate::field::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "advection1d")]
    Advection1d,
    #[serde(rename = "diffusion1d")]
    Diffusion1d,
    #[serde(rename = "burgers1d")]
    Burgers1d,
    #[serde(rename = "reacdiff1d")]
    Reacdiff1d,
    #[serde(rename = "heat2d")]
    Heat2d,
    #[serde(rename = "navierstokes2d-vorticity")]
    NavierStokes2d,
    #[serde(rename = "heat3d")]
    Heat3d,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Advection1d,
        Family::Diffusion1d,
        Family::Burgers1d,
        Family::Reacdiff1d,
        Family::Heat2d,
        Family::NavierStokes2d,
        Family::Heat3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Advection1d => "advection1d",
            Family::Diffusion1d => "diffusion1d",
            Family::Burgers1d => "burgers1d",
            Family::Reacdiff1d => "reacdiff1d",
            Family::Heat2d => "heat2d",
            Family::NavierStokes2d => "navierstokes2d-vorticity",
            Family::Heat3d => "heat3d",
        }
    }

    pub fn dims(self) -> usize {
        match self {
            Family::Heat2d | Family::NavierStokes2d => 2,
            Family::Heat3d => 3,
            _ => 1,
        }
    }

    /// Stored quantities: vorticity carries `(ω, u, v)`.
    pub fn channels(self) -> usize {
        match self {
            Family::NavierStokes2d => 3,
            _ => 1,
        }
    }

    /// Coefficient names in `params_flat` order.
    pub fn coefficient_names(self) -> &'static [&'static str] {
        match self {
            Family::Advection1d => &["beta"],
            Family::Reacdiff1d => &["nu", "rho"],
            _ => &["nu"],
        }
    }

    pub fn is_analytic(self) -> bool {
        matches!(
            self,
            Family::Advection1d | Family::Diffusion1d | Family::Heat2d | Family::Heat3d
        )
    }

    /// Default sampling range per coefficient.
    pub fn default_range(self, coefficient: &str) -> (f64, f64) {
        match (self, coefficient) {
            (Family::Advection1d, _) => (0.2, 2.0),
            (Family::Burgers1d, _) => (0.001 * PI, 0.01 * PI),
            (Family::Reacdiff1d, "rho") => (1.0, 5.0),
            (Family::NavierStokes2d, _) => (1e-3, 1e-2),
            _ => (0.001, 0.01),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Datagen(format!("unknown family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeSpec {
    pub family: Family,
    pub coefficients: BTreeMap<String, f64>,
    pub extents: Vec<usize>,
    pub lengths: Vec<f64>,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Highest initial-condition frequency per axis.
    #[serde(default = "default_max_mode")]
    pub max_mode: usize,
    /// Internal step for the non-analytic families; chosen from the
    /// stability bounds when absent.
    #[serde(default)]
    pub solver_dt: Option<f64>,
}

fn default_max_mode() -> usize {
    8
}

impl PdeSpec {
    pub fn new(family: Family, coefficients: &[(&str, f64)], extents: &[usize], steps: usize, dt: f64, seed: u64) -> Self {
        PdeSpec {
            family,
            coefficients: coefficients.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            extents: extents.to_vec(),
            lengths: vec![1.0; extents.len()],
            steps,
            dt,
            seed,
            max_mode: default_max_mode(),
            solver_dt: None,
        }
    }

    /// Coefficients drawn uniformly from the family's default ranges, using
    /// an RNG stream separate from the initial condition's.
    pub fn sampled(family: Family, extents: &[usize], steps: usize, dt: f64, seed: u64) -> Self {
        Self::sampled_in(family, &BTreeMap::new(), extents, steps, dt, seed)
    }

    pub fn sampled_in(
        family: Family,
        ranges: &BTreeMap<String, (f64, f64)>,
        extents: &[usize],
        steps: usize,
        dt: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let coeffs: Vec<(&str, f64)> = family
            .coefficient_names()
            .iter()
            .map(|&n| {
                let (lo, hi) = ranges.get(n).copied().unwrap_or_else(|| family.default_range(n));
                let v = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                (n, v)
            })
            .collect();
        PdeSpec::new(family, &coeffs, extents, steps, dt, seed)
    }

    pub fn coefficient(&self, name: &str) -> Result<f64> {
        self.coefficients
            .get(name)
            .copied()
            .ok_or_else(|| Error::Datagen(format!("{} needs coefficient {name}", self.family)))
    }

    pub fn params_flat(&self) -> Result<Vec<f64>> {
        self.family
            .coefficient_names()
            .iter()
            .map(|n| self.coefficient(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fam = self.family;
        if self.extents.len() != fam.dims() || self.lengths.len() != fam.dims() {
            return Err(Error::Datagen(format!(
                "{fam} is {}-D, grid {:?} lengths {:?}",
                fam.dims(),
                self.extents,
                self.lengths
            )));
        }
        fft::check_extents(&self.extents)?;
        if self.lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Datagen(format!("domain lengths {:?}", self.lengths)));
        }
        if self.steps == 0 || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Datagen(format!("T={} dt={}", self.steps, self.dt)));
        }
        for &n in fam.coefficient_names() {
            let v = self.coefficient(n)?;
            let ok = match (fam, n) {
                (Family::Advection1d, _) => v.abs() <= 10.0,
                (Family::Reacdiff1d, "rho") => (0.0..=50.0).contains(&v),
                _ => v > 0.0 && v <= 1.0,
            };
            if !ok || !v.is_finite() {
                return Err(Error::Datagen(format!("{fam}: {n} = {v} outside the stable range")));
            }
        }
        if fam == Family::NavierStokes2d && (self.extents.iter().any(|&n| n > 64) || self.steps > 50) {
            return Err(Error::Datagen("vorticity runs are capped at 64² and T ≤ 50".into()));
        }
        if let Some(h) = self.solver_dt {
            if !(h > 0.0) {
                return Err(Error::Datagen(format!("solver_dt {h}")));
            }
        }
        Ok(())
    }
}

/// Dataset record: field, governing-equation caption and coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub spec: PdeSpec,
    pub field: Field,
    pub caption: String,
    pub params_flat: Vec<f64>,
}

fn fmt_coef(v: f64) -> String {
    format!("{v:.4}")
}

/// LaTeX caption of the governing equation with coefficient values.
pub fn caption(family: Family, coefficients: &BTreeMap<String, f64>) -> Result<String> {
    let get = |n: &str| {
        coefficients
            .get(n)
            .copied()
            .ok_or_else(|| Error::Datagen(format!("{family} caption needs {n}")))
    };
    Ok(match family {
        Family::Advection1d => format!(
            "\\partial_t u + \\beta \\partial_x u = 0, \\beta = {}",
            fmt_coef(get("beta")?)
        ),
        Family::Diffusion1d => format!(
            "\\partial_t u = \\nu \\partial_{{xx}} u, \\nu = {}",
            fmt_coef(get("nu")?)
        ),
        Family::Burgers1d => format!(
            "\\partial_t u + \\partial_x (u^2 / 2) = \\nu / \\pi \\partial_{{xx}} u, \\nu = {}",
            fmt_coef(get("nu")?)
        ),
        Family::Reacdiff1d => format!(
            "\\partial_t u = \\nu \\partial_{{xx}} u + \\rho u (1 - u), \\nu = {}, \\rho = {}",
            fmt_coef(get("nu")?),
            fmt_coef(get("rho")?)
        ),
        Family::Heat2d => format!(
            "\\partial_t u = \\nu (\\partial_{{xx}} u + \\partial_{{yy}} u), \\nu = {}",
            fmt_coef(get("nu")?)
        ),
        Family::NavierStokes2d => format!(
            "\\partial_t \\omega + u \\partial_x \\omega + v \\partial_y \\omega = \\nu \\Delta \\omega, \\nu = {}",
            fmt_coef(get("nu")?)
        ),
        Family::Heat3d => format!(
            "\\partial_t u = \\nu (\\partial_{{xx}} u + \\partial_{{yy}} u + \\partial_{{zz}} u), \\nu = {}",
            fmt_coef(get("nu")?)
        ),
    })
}

/// Random band-limited field: Gaussian coefficients on every non-DC mode
/// with `|k| ≤ min(max_mode, N/2 − 1)` per axis, normalised to unit RMS.
pub fn initial_condition<R: Rng + ?Sized>(extents: &[usize], max_mode: usize, rng: &mut R) -> Result<Vec<f64>> {
    fft::check_extents(extents)?;
    let mut s = Spectrum::zeros(extents);
    let shape = s.spectral_shape();
    for flat in 0..s.len() {
        let freqs = mode_freqs(flat, &shape, extents);
        let inside = freqs
            .iter()
            .zip(extents)
            .all(|(&k, &n)| k.unsigned_abs() as usize <= max_mode.min(n / 2 - 1));
        let dc = freqs.iter().all(|&k| k == 0);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        if inside && !dc {
            s.set(flat, (re, im));
        }
    }
    let mut u = fft::irfft_nd(&s, extents)?;
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
    if rms > 0.0 {
        u.iter_mut().for_each(|v| *v /= rms);
    }
    Ok(u)
}

/// Signed frequency per axis of a half-spectrum flat index.
fn mode_freqs(flat: usize, shape: &[usize], extents: &[usize]) -> Vec<i64> {
    let dims = shape.len();
    let mut rem = flat;
    let mut f = vec![0i64; dims];
    for a in (0..dims).rev() {
        let i = rem % shape[a];
        rem /= shape[a];
        f[a] = if a == dims - 1 || i <= extents[a] / 2 {
            i as i64
        } else {
            i as i64 - extents[a] as i64
        };
    }
    f
}

/// Angular wavenumbers `2πk/L` per axis for every mode of the spectrum.
fn wavenumbers(extents: &[usize], lengths: &[f64]) -> Vec<Vec<f64>> {
    let shape = fft::spectral_shape(extents);
    let total: usize = shape.iter().product();
    (0..total)
        .map(|flat| {
            mode_freqs(flat, &shape, extents)
                .iter()
                .zip(lengths)
                .map(|(&k, &l)| 2.0 * PI * k as f64 / l)
                .collect()
        })
        .collect()
}

/// Exact solution at time `t` by per-mode multiplication.
pub fn analytic_solution(
    family: Family,
    u0: &Spectrum,
    coefficients: &BTreeMap<String, f64>,
    lengths: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if !family.is_analytic() {
        return Err(Error::Datagen(format!("{family} has no closed-form propagator")));
    }
    let ext = &u0.axis_extents;
    if ext.len() != family.dims() || lengths.len() != ext.len() {
        return Err(Error::Datagen(format!("{family} spectrum over {ext:?}")));
    }
    let coef = |n: &str| {
        coefficients
            .get(n)
            .copied()
            .ok_or_else(|| Error::Datagen(format!("{family} needs {n}")))
    };
    let ks = wavenumbers(ext, lengths);
    let mut s = u0.clone();
    match family {
        Family::Advection1d => {
            let beta = coef("beta")?;
            for (i, k) in ks.iter().enumerate() {
                let (re, im) = s.get(i);
                let (sn, cs) = (-k[0] * beta * t).sin_cos();
                s.set(i, (re * cs - im * sn, re * sn + im * cs));
            }
        }
        _ => {
            let nu = coef("nu")?;
            for (i, k) in ks.iter().enumerate() {
                let k2: f64 = k.iter().map(|v| v * v).sum();
                let d = (-nu * k2 * t).exp();
                let (re, im) = s.get(i);
                s.set(i, (re * d, im * d));
            }
        }
    }
    fft::irfft_nd(&s, ext)
}

/// 2/3-rule mask: true for modes whose every |k| ≤ N/3.
fn dealias_mask(extents: &[usize]) -> Vec<bool> {
    let shape = fft::spectral_shape(extents);
    let total: usize = shape.iter().product();
    (0..total)
        .map(|flat| {
            mode_freqs(flat, &shape, extents)
                .iter()
                .zip(extents)
                .all(|(&k, &n)| k.unsigned_abs() as usize <= n / 3)
        })
        .collect()
}

struct Burgers {
    n: usize,
    visc: f64,
    k: Vec<f64>,
    keep: Vec<bool>,
}

impl Burgers {
    fn new(n: usize, nu: f64, length: f64) -> Self {
        let ks = wavenumbers(&[n], &[length]);
        Burgers {
            n,
            visc: nu / PI,
            k: ks.into_iter().map(|k| k[0]).collect(),
            keep: dealias_mask(&[n]),
        }
    }

    /// `−ik·P[û²/2] − (ν/π)k²û` with `P` the dealiasing projection.
    fn rhs(&self, s: &[f64]) -> Vec<f64> {
        let mut sp = s.to_vec();
        for (i, &keep) in self.keep.iter().enumerate() {
            if !keep {
                sp[2 * i] = 0.0;
                sp[2 * i + 1] = 0.0;
            }
        }
        let u = fft::irfft_batch(&sp, 1, &[self.n]);
        let q: Vec<f64> = u.iter().map(|v| 0.5 * v * v).collect();
        let qh = fft::rfft_batch(&q, 1, &[self.n]);
        let mut out = vec![0.0; s.len()];
        for (i, &k) in self.k.iter().enumerate() {
            if !self.keep[i] {
                continue;
            }
            let (qr, qi) = (qh[2 * i], qh[2 * i + 1]);
            let d = self.visc * k * k;
            out[2 * i] = k * qi - d * s[2 * i];
            out[2 * i + 1] = -k * qr - d * s[2 * i + 1];
        }
        out
    }

    fn step(&self, s: &mut [f64], dt: f64) {
        rk4(s, dt, |x| self.rhs(x));
    }
}

fn rk4(s: &mut [f64], dt: f64, f: impl Fn(&[f64]) -> Vec<f64>) {
    let axpy = |a: f64, x: &[f64], y: &[f64]| -> Vec<f64> {
        y.iter().zip(x).map(|(yv, xv)| yv + a * xv).collect()
    };
    let k1 = f(s);
    let k2 = f(&axpy(0.5 * dt, &k1, s));
    let k3 = f(&axpy(0.5 * dt, &k2, s));
    let k4 = f(&axpy(dt, &k3, s));
    for i in 0..s.len() {
        s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Largest Burgers step allowed by `dt ≤ 0.5·dx/max|u|` and
/// `dt ≤ 0.25·dx²·π/ν`.
pub fn burgers_dt_bound(max_u: f64, nu: f64, dx: f64) -> f64 {
    let adv = if max_u > 0.0 { 0.5 * dx / max_u } else { f64::INFINITY };
    adv.min(0.25 * dx * dx * PI / nu)
}

/// One RK4 step of `u_t + (u²/2)_x = (ν/π) u_xx` in spectral space.
pub fn burgers_step(state: &Spectrum, nu: f64, dt: f64, length: f64) -> Result<Spectrum> {
    let ext = &state.axis_extents;
    if ext.len() != 1 {
        return Err(Error::Datagen(format!("burgers is 1-D, got {ext:?}")));
    }
    let n = ext[0];
    let u = fft::irfft_nd(state, ext)?;
    let max_u = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let bound = burgers_dt_bound(max_u, nu, length / n as f64);
    if !(nu > 0.0) || dt > bound {
        return Err(Error::Stability(format!(
            "burgers dt = {dt:e} exceeds bound {bound:e} (max|u| = {max_u:.3}, nu = {nu})"
        )));
    }
    let b = Burgers::new(n, nu, length);
    let mut s = state.clone();
    b.step(&mut s.modes, dt);
    Ok(s)
}

/// Substep count and size covering `interval` with steps no longer than
/// `limit`.
fn substeps(interval: f64, limit: f64) -> (usize, f64) {
    let n = (interval / limit).ceil().max(1.0) as usize;
    (n, interval / n as f64)
}

fn resolve_dt(spec: &PdeSpec, bound: f64) -> Result<(usize, f64)> {
    match spec.solver_dt {
        Some(h) if h > bound => Err(Error::Stability(format!(
            "{}: solver dt {h:e} exceeds bound {bound:e}",
            spec.family
        ))),
        Some(h) => Ok(substeps(spec.dt, h)),
        None => Ok(substeps(spec.dt, bound)),
    }
}

fn run_burgers(spec: &PdeSpec, u0: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let n = spec.extents[0];
    let nu = spec.coefficient("nu")?;
    let max_u = u0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let bound = burgers_dt_bound(max_u, nu, spec.lengths[0] / n as f64);
    let (sub, h) = resolve_dt(spec, bound)?;
    let b = Burgers::new(n, nu, spec.lengths[0]);
    let mut s = fft::rfft_batch(&u0, 1, &[n]);
    let mut frames = vec![u0];
    for _ in 1..spec.steps {
        for _ in 0..sub {
            b.step(&mut s, h);
        }
        frames.push(fft::irfft_batch(&s, 1, &[n]));
    }
    Ok(frames)
}

/// Fisher–KPP `u_t = ν u_xx + ρ u(1−u)`: implicit diffusion, explicit
/// reaction.
fn run_reacdiff(spec: &PdeSpec, u0: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let n = spec.extents[0];
    let nu = spec.coefficient("nu")?;
    let rho = spec.coefficient("rho")?;
    let bound = if rho > 0.0 { 0.1 / rho } else { f64::INFINITY };
    let (sub, h) = resolve_dt(spec, bound)?;
    let ks = wavenumbers(&[n], &spec.lengths);
    let max = u0.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut u: Vec<f64> = u0.iter().map(|v| 0.5 + 0.4 * v / max).collect();
    let mut frames = vec![u.clone()];
    for _ in 1..spec.steps {
        for _ in 0..sub {
            let react: Vec<f64> = u.iter().map(|v| v + h * rho * v * (1.0 - v)).collect();
            let mut s = fft::rfft_batch(&react, 1, &[n]);
            for (i, k) in ks.iter().enumerate() {
                let d = 1.0 / (1.0 + h * nu * k[0] * k[0]);
                s[2 * i] *= d;
                s[2 * i + 1] *= d;
            }
            u = fft::irfft_batch(&s, 1, &[n]);
        }
        frames.push(u.clone());
    }
    Ok(frames)
}

struct Vorticity {
    ext: [usize; 2],
    nu: f64,
    k: Vec<Vec<f64>>,
    keep: Vec<bool>,
}

impl Vorticity {
    /// `(u, v)` from `ω̂` via `ψ̂ = ω̂/|k|²`, `u = ∂ψ/∂y`, `v = −∂ψ/∂x`, with
    /// axis 0 as `x` and axis 1 as `y`.
    fn velocity_spectra(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; w.len()];
        let mut v = vec![0.0; w.len()];
        for (i, k) in self.k.iter().enumerate() {
            let k2 = k[0] * k[0] + k[1] * k[1];
            if k2 == 0.0 {
                continue;
            }
            let (pr, pi) = (w[2 * i] / k2, w[2 * i + 1] / k2);
            // i·k_y·ψ̂ and −i·k_x·ψ̂
            u[2 * i] = -k[1] * pi;
            u[2 * i + 1] = k[1] * pr;
            v[2 * i] = k[0] * pi;
            v[2 * i + 1] = -k[0] * pr;
        }
        (u, v)
    }

    fn rhs(&self, w: &[f64]) -> Vec<f64> {
        let mut wd = w.to_vec();
        for (i, &keep) in self.keep.iter().enumerate() {
            if !keep {
                wd[2 * i] = 0.0;
                wd[2 * i + 1] = 0.0;
            }
        }
        let (uh, vh) = self.velocity_spectra(&wd);
        let mut wx = vec![0.0; w.len()];
        let mut wy = vec![0.0; w.len()];
        for (i, k) in self.k.iter().enumerate() {
            wx[2 * i] = -k[0] * wd[2 * i + 1];
            wx[2 * i + 1] = k[0] * wd[2 * i];
            wy[2 * i] = -k[1] * wd[2 * i + 1];
            wy[2 * i + 1] = k[1] * wd[2 * i];
        }
        let phys = |s: &[f64]| fft::irfft_batch(s, 1, &self.ext);
        let (u, v, ax, ay) = (phys(&uh), phys(&vh), phys(&wx), phys(&wy));
        let adv: Vec<f64> = (0..u.len()).map(|j| u[j] * ax[j] + v[j] * ay[j]).collect();
        let ah = fft::rfft_batch(&adv, 1, &self.ext);
        let mut out = vec![0.0; w.len()];
        for (i, k) in self.k.iter().enumerate() {
            if !self.keep[i] {
                continue;
            }
            let d = self.nu * (k[0] * k[0] + k[1] * k[1]);
            out[2 * i] = -ah[2 * i] - d * w[2 * i];
            out[2 * i + 1] = -ah[2 * i + 1] - d * w[2 * i + 1];
        }
        out
    }
}

fn run_vorticity(spec: &PdeSpec, w0: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let ext = [spec.extents[0], spec.extents[1]];
    let nu = spec.coefficient("nu")?;
    let ns = Vorticity {
        ext,
        nu,
        k: wavenumbers(&ext, &spec.lengths),
        keep: dealias_mask(&ext),
    };
    let mut s = fft::rfft_batch(&w0, 1, &ext);
    let frame = |s: &[f64]| -> Vec<f64> {
        let (uh, vh) = ns.velocity_spectra(s);
        let mut out = fft::irfft_batch(s, 1, &ext);
        out.extend(fft::irfft_batch(&uh, 1, &ext));
        out.extend(fft::irfft_batch(&vh, 1, &ext));
        out
    };
    let first = frame(&s);
    let p = ext[0] * ext[1];
    let max_vel = first[p..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let dx = spec.lengths.iter().zip(&ext).map(|(l, &n)| l / n as f64).fold(f64::INFINITY, f64::min);
    let adv = if max_vel > 0.0 { 0.5 * dx / max_vel } else { f64::INFINITY };
    let bound = adv.min(0.25 * dx * dx / nu);
    let (sub, h) = resolve_dt(spec, bound)?;
    let mut frames = vec![first];
    for _ in 1..spec.steps {
        for _ in 0..sub {
            rk4(&mut s, h, |x| ns.rhs(x));
        }
        frames.push(frame(&s));
    }
    Ok(frames)
}

/// Generates the trajectory described by `spec`; bit-reproducible.
pub fn gen_trajectory(spec: &PdeSpec) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u0 = initial_condition(&spec.extents, spec.max_mode, &mut rng)?;
    let fam = spec.family;
    let frames: Vec<Vec<f64>> = if fam.is_analytic() {
        let s0 = fft::rfft_nd(&u0, &spec.extents)?;
        (0..spec.steps)
            .map(|n| analytic_solution(fam, &s0, &spec.coefficients, &spec.lengths, n as f64 * spec.dt))
            .collect::<Result<_>>()?
    } else {
        match fam {
            Family::Burgers1d => run_burgers(spec, u0)?,
            Family::Reacdiff1d => run_reacdiff(spec, u0)?,
            _ => run_vorticity(spec, u0)?,
        }
    };
    let data: Vec<f64> = frames.into_iter().flatten().collect();
    let field = Field::new(data, spec.steps, fam.channels(), spec.extents.clone())?;
    if !field.is_finite() {
        return Err(Error::NonFinite {
            op: "gen_trajectory",
            location: Some(fam.to_string()),
        });
    }
    Ok(Trajectory {
        caption: caption(fam, &spec.coefficients)?,
        params_flat: spec.params_flat()?,
        spec: spec.clone(),
        field,
    })
}
