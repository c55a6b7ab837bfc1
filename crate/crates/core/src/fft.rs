//! Real-input radix-2 FFTs over 1, 2 or 3 trailing spatial axes.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/∏Nᵢ` factor. Spectra use the half-spectrum layout on the last axis
//! (`⌊N/2⌋ + 1` bins) and the full spectrum on every other axis. Complex
//! values are interleaved `(re, im)` pairs.
//!
//! The inverse treats the imaginary parts of the DC and Nyquist bins of the
//! last axis as zero, which makes `irfft` a fixed real-linear map whose
//! adjoint is available through [`irfft_adjoint_batch`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Complex modes of a real field in half-spectrum layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Interleaved `(re, im)` pairs, row-major over [`Spectrum::spectral_shape`].
    pub modes: Vec<f64>,
    /// Spatial extents `N₁..N_d` of the field the spectrum came from.
    pub axis_extents: Vec<usize>,
}

impl Spectrum {
    pub fn zeros(axis_extents: &[usize]) -> Self {
        let n: usize = spectral_shape(axis_extents).iter().product();
        Self {
            modes: vec![0.0; 2 * n],
            axis_extents: axis_extents.to_vec(),
        }
    }

    /// Complex grid shape: full extents except `⌊N_d/2⌋ + 1` on the last axis.
    pub fn spectral_shape(&self) -> Vec<usize> {
        spectral_shape(&self.axis_extents)
    }

    pub fn len(&self) -> usize {
        self.modes.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn get(&self, flat: usize) -> (f64, f64) {
        (self.modes[2 * flat], self.modes[2 * flat + 1])
    }

    pub fn set(&mut self, flat: usize, value: (f64, f64)) {
        self.modes[2 * flat] = value.0;
        self.modes[2 * flat + 1] = value.1;
    }
}

pub fn spectral_shape(extents: &[usize]) -> Vec<usize> {
    let mut s = extents.to_vec();
    if let Some(last) = s.last_mut() {
        *last = *last / 2 + 1;
    }
    s
}

pub fn check_extents(extents: &[usize]) -> Result<()> {
    if extents.is_empty() || extents.len() > 3 {
        return Err(Error::Fft(format!(
            "expected 1 to 3 spatial axes, got {}",
            extents.len()
        )));
    }
    for &n in extents {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Fft(format!(
                "extent {n} is not a power of two >= 4"
            )));
        }
    }
    Ok(())
}

/// Forward transform of a single real field laid out over `extents`.
pub fn rfft_nd(field: &[f64], extents: &[usize]) -> Result<Spectrum> {
    check_extents(extents)?;
    let n: usize = extents.iter().product();
    if field.len() != n {
        return Err(Error::Fft(format!(
            "field has {} samples, extents {extents:?} need {n}",
            field.len()
        )));
    }
    Ok(Spectrum {
        modes: rfft_batch(field, 1, extents),
        axis_extents: extents.to_vec(),
    })
}

/// Inverse transform; `target_extents` must match the spectrum's layout.
pub fn irfft_nd(spectrum: &Spectrum, target_extents: &[usize]) -> Result<Vec<f64>> {
    check_extents(target_extents)?;
    if spectrum.axis_extents != target_extents {
        return Err(Error::Fft(format!(
            "spectrum extents {:?} inconsistent with target {target_extents:?}",
            spectrum.axis_extents
        )));
    }
    let need = 2 * spectral_shape(target_extents).iter().product::<usize>();
    if spectrum.modes.len() != need {
        return Err(Error::Fft(format!(
            "spectrum holds {} values, layout needs {need}",
            spectrum.modes.len()
        )));
    }
    Ok(irfft_batch(&spectrum.modes, 1, target_extents))
}

/// Direct-sum DFT in the same half-spectrum layout as [`rfft_nd`].
///
/// O(N²) per axis, any extents ≥ 1. Used as the equivalence oracle.
pub fn dft_reference(field: &[f64], extents: &[usize]) -> Spectrum {
    let full = dft_reference_full(field, extents);
    let shape = spectral_shape(extents);
    let mut out = Spectrum::zeros(extents);
    let last = *extents.last().unwrap_or(&1);
    let half = shape.last().copied().unwrap_or(1);
    let rows: usize = full.len() / 2 / last.max(1);
    for r in 0..rows {
        for k in 0..half {
            let src = r * last + k;
            let dst = r * half + k;
            out.modes[2 * dst] = full[2 * src];
            out.modes[2 * dst + 1] = full[2 * src + 1];
        }
    }
    out
}

/// Direct-sum DFT returning the full complex spectrum over every axis.
pub fn dft_reference_full(field: &[f64], extents: &[usize]) -> Vec<f64> {
    let mut re = field.to_vec();
    let mut im = vec![0.0; field.len()];
    for axis in 0..extents.len() {
        for_each_line(extents, axis, &mut re, &mut im, |lr, li| {
            let n = lr.len();
            let mut or = vec![0.0; n];
            let mut oi = vec![0.0; n];
            for k in 0..n {
                let (mut sr, mut si) = (0.0, 0.0);
                for j in 0..n {
                    // reduce k·j mod n before forming the angle for accuracy
                    let ang = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                    let (s, c) = ang.sin_cos();
                    sr += lr[j] * c - li[j] * s;
                    si += lr[j] * s + li[j] * c;
                }
                or[k] = sr;
                oi[k] = si;
            }
            lr.copy_from_slice(&or);
            li.copy_from_slice(&oi);
        });
    }
    let mut out = Vec::with_capacity(2 * re.len());
    for (r, i) in re.into_iter().zip(im) {
        out.push(r);
        out.push(i);
    }
    out
}

// ---------------------------------------------------------------------------
// batched kernels used by the autodiff graph and the solvers

/// Forward transform of `batch` contiguous real fields.
pub fn rfft_batch(data: &[f64], batch: usize, extents: &[usize]) -> Vec<f64> {
    let n: usize = extents.iter().product();
    let shape = spectral_shape(extents);
    let m: usize = shape.iter().product();
    let last = *extents.last().unwrap();
    let half = last / 2 + 1;
    let rows = n / last;
    let mut out = vec![0.0; 2 * m * batch];
    let mut lr = vec![0.0; last];
    let mut li = vec![0.0; last];
    let mut re = vec![0.0; m];
    let mut im = vec![0.0; m];
    for b in 0..batch {
        let src = &data[b * n..(b + 1) * n];
        for r in 0..rows {
            lr.copy_from_slice(&src[r * last..(r + 1) * last]);
            li.iter_mut().for_each(|v| *v = 0.0);
            fft_inplace(&mut lr, &mut li, false);
            re[r * half..(r + 1) * half].copy_from_slice(&lr[..half]);
            im[r * half..(r + 1) * half].copy_from_slice(&li[..half]);
        }
        for axis in 0..extents.len() - 1 {
            for_each_line(&shape, axis, &mut re, &mut im, |a, b| fft_inplace(a, b, false));
        }
        let dst = &mut out[2 * m * b..2 * m * (b + 1)];
        for j in 0..m {
            dst[2 * j] = re[j];
            dst[2 * j + 1] = im[j];
        }
    }
    out
}

/// Inverse transform of `batch` contiguous half spectra.
pub fn irfft_batch(spec: &[f64], batch: usize, extents: &[usize]) -> Vec<f64> {
    let n: usize = extents.iter().product();
    let shape = spectral_shape(extents);
    let m: usize = shape.iter().product();
    let last = *extents.last().unwrap();
    let half = last / 2 + 1;
    let rows = n / last;
    let mut out = vec![0.0; n * batch];
    let mut re = vec![0.0; m];
    let mut im = vec![0.0; m];
    let mut lr = vec![0.0; last];
    let mut li = vec![0.0; last];
    for b in 0..batch {
        let src = &spec[2 * m * b..2 * m * (b + 1)];
        for j in 0..m {
            re[j] = src[2 * j];
            im[j] = src[2 * j + 1];
        }
        for axis in 0..extents.len() - 1 {
            for_each_line(&shape, axis, &mut re, &mut im, |a, b| fft_inplace(a, b, true));
        }
        let dst = &mut out[n * b..n * (b + 1)];
        for r in 0..rows {
            let hr = &re[r * half..(r + 1) * half];
            let hi = &im[r * half..(r + 1) * half];
            lr[0] = hr[0];
            li[0] = 0.0;
            for k in 1..half {
                lr[k] = hr[k];
                li[k] = hi[k];
                if k < last - k {
                    lr[last - k] = hr[k];
                    li[last - k] = -hi[k];
                }
            }
            if last % 2 == 0 {
                li[last / 2] = 0.0;
            }
            fft_inplace(&mut lr, &mut li, true);
            dst[r * last..(r + 1) * last].copy_from_slice(&lr);
        }
    }
    out
}

/// Adjoint of [`rfft_batch`] with respect to the real inner product.
pub fn rfft_adjoint_batch(grad_spec: &[f64], batch: usize, extents: &[usize]) -> Vec<f64> {
    let n: usize = extents.iter().product();
    let w = interior_weights(extents, 0.5);
    let mut scaled = grad_spec.to_vec();
    apply_last_axis_weights(&mut scaled, &w);
    let mut out = irfft_batch(&scaled, batch, extents);
    let scale = n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Adjoint of [`irfft_batch`] with respect to the real inner product.
pub fn irfft_adjoint_batch(grad_field: &[f64], batch: usize, extents: &[usize]) -> Vec<f64> {
    let n: usize = extents.iter().product();
    let w = interior_weights(extents, 2.0);
    let mut spec = rfft_batch(grad_field, batch, extents);
    apply_last_axis_weights(&mut spec, &w);
    let scale = 1.0 / n as f64;
    spec.iter_mut().for_each(|v| *v *= scale);
    spec
}

/// Per-bin weights along the last spectral axis: `interior` for bins strictly
/// between DC and Nyquist, 1 at DC and Nyquist.
fn interior_weights(extents: &[usize], interior: f64) -> Vec<(f64, f64)> {
    let last = *extents.last().unwrap();
    let half = last / 2 + 1;
    (0..half)
        .map(|k| {
            let edge = k == 0 || (last % 2 == 0 && k == last / 2);
            if edge {
                (1.0, 1.0)
            } else {
                (interior, interior)
            }
        })
        .collect()
}

fn apply_last_axis_weights(spec: &mut [f64], w: &[(f64, f64)]) {
    let half = w.len();
    for (j, pair) in spec.chunks_exact_mut(2).enumerate() {
        let (wr, wi) = w[j % half];
        pair[0] *= wr;
        pair[1] *= wi;
    }
}

/// Calls `f` on every 1-D line of the row-major `shape` grid along `axis`.
fn for_each_line(
    shape: &[usize],
    axis: usize,
    re: &mut [f64],
    im: &mut [f64],
    mut f: impl FnMut(&mut [f64], &mut [f64]),
) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for o in 0..outer {
            let s = o * len;
            f(&mut re[s..s + len], &mut im[s..s + len]);
        }
        return;
    }
    let mut lr = vec![0.0; len];
    let mut li = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lr[j] = re[base + j * inner];
                li[j] = im[base + j * inner];
            }
            f(&mut lr, &mut li);
            for j in 0..len {
                re[base + j * inner] = lr[j];
                im[base + j * inner] = li[j];
            }
        }
    }
}

thread_local! {
    static TWIDDLES: RefCell<HashMap<usize, Rc<Vec<(f64, f64)>>>> = RefCell::new(HashMap::new());
}

/// `exp(-2πik/n)` for `k < n/2`, each evaluated directly rather than by
/// recurrence.
fn twiddles(n: usize) -> Rc<Vec<(f64, f64)>> {
    TWIDDLES.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                Rc::new(
                    (0..n / 2)
                        .map(|k| {
                            let (s, c) = (-2.0 * PI * k as f64 / n as f64).sin_cos();
                            (c, s)
                        })
                        .collect(),
                )
            })
            .clone()
    })
}

/// In-place iterative radix-2 complex FFT. The inverse is normalized by `1/n`.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut k = n >> 1;
        while k <= j {
            j -= k;
            k >>= 1;
        }
        j += k;
    }
    let tw = twiddles(n);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let (wr, wi) = tw[k * step];
                let wi = sign * wi;
                let u = start + k;
                let v = u + half;
                let tr = wr * re[v] - wi * im[v];
                let ti = wr * im[v] + wi * re[v];
                re[v] = re[u] - tr;
                im[v] = im[u] - ti;
                re[u] += tr;
                im[u] += ti;
            }
        }
        size <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        re.iter_mut().for_each(|v| *v *= s);
        im.iter_mut().for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn delta_impulse_has_flat_spectrum() {
        let s = rfft_nd(&[1.0, 0.0, 0.0, 0.0], &[4]).unwrap();
        assert_eq!(s.modes, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_is_dc_only() {
        let s = rfft_nd(&[1.0; 8], &[8]).unwrap();
        assert_eq!(s.get(0), (8.0, 0.0));
        for k in 1..5 {
            let (r, i) = s.get(k);
            assert!(r.abs() < 1e-15 && i.abs() < 1e-15);
        }
    }

    #[test]
    fn single_mode_synthesis() {
        let mut s = Spectrum::zeros(&[8]);
        s.set(2, (4.0, 0.0));
        let f = irfft_nd(&s, &[8]).unwrap();
        for (x, v) in f.iter().enumerate() {
            let expect = (2.0 * PI * 2.0 * x as f64 / 8.0).cos();
            assert!((v - expect).abs() < 1e-15);
        }
        let z = irfft_nd(&Spectrum::zeros(&[8]), &[8]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(rfft_nd(&[0.0; 6], &[6]).is_err());
        assert!(rfft_nd(&[0.0; 2], &[2]).is_err());
        let s = Spectrum::zeros(&[8]);
        assert!(irfft_nd(&s, &[16]).is_err());
    }

    #[test]
    fn length_one_reference() {
        let s = dft_reference(&[3.5], &[1]);
        assert_eq!(s.modes, vec![3.5, 0.0]);
    }

    #[test]
    fn matches_reference_in_each_dimensionality() {
        for extents in [vec![16], vec![8, 16], vec![4, 8, 8]] {
            let n: usize = extents.iter().product();
            let f = random_field(n, n as u64);
            let fast = rfft_nd(&f, &extents).unwrap();
            let slow = dft_reference(&f, &extents);
            let err = fast
                .modes
                .iter()
                .zip(&slow.modes)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "{extents:?}: {err}");
        }
    }

    #[test]
    fn adjoints_match_inner_products() {
        let extents = [8, 16];
        let n = 128;
        let m = 2 * 8 * 9;
        let x = random_field(n, 1);
        let y = random_field(m, 2);
        let fx = rfft_batch(&x, 1, &extents);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ay = rfft_adjoint_batch(&y, 1, &extents);
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-300) < 1e-10);

        let g = random_field(n, 3);
        let iy = irfft_batch(&y, 1, &extents);
        let lhs: f64 = iy.iter().zip(&g).map(|(a, b)| a * b).sum();
        let ag = irfft_adjoint_batch(&g, 1, &extents);
        let rhs: f64 = y.iter().zip(&ag).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-300) < 1e-10);
    }
}
