//! Oracle suites shared by the `selftest` command and the acceptance
//! harness: DFT equivalence, gradient checks, codec round trips, mask
//! causality and solver oracles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{band_limited_field, Codec, ModeSelection};
use crate::datagen::{burgers_step, gen_trajectory, Family, PdeSpec};
use crate::error::Result;
use crate::fft::{self, Spectrum};
use crate::field::Field;
use crate::model::{Model, ModelConfig, TokenSequence};
use crate::params::Binder;
use crate::tensor::{finite_diff_gradient, relative_error, Graph, Tensor, Var};
use crate::trainer::{nrmse_graph, teacher_forced_prediction};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn spectrum_diff(a: &Spectrum, b: &Spectrum) -> f64 {
    (0..a.len())
        .map(|i| {
            let (x, y) = (a.get(i), b.get(i));
            (x.0 - y.0).abs().max((x.1 - y.1).abs())
        })
        .fold(0.0, f64::max)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst `(abs DFT error, Parseval rel. error, round-trip rel. error)` over
/// random fields on every power-of-two grid from 4 to `max_n` in 1–3 D.
pub fn spectral_errors(seed: u64, max_n: usize) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dft, mut pars, mut rt) = (0.0_f64, 0.0_f64, 0.0_f64);
    let sizes: Vec<usize> = (2..).map(|p| 1usize << p).take_while(|&n| n <= max_n).collect();
    for dims in 1..=3 {
        for &n in &sizes {
            if dims == 3 && n > 16 {
                continue;
            }
            let ext = vec![n; dims];
            let total: usize = ext.iter().product();
            let x: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = fft::rfft_nd(&x, &ext)?;
            dft = dft.max(spectrum_diff(&s, &fft::dft_reference(&x, &ext)));
            let last = n;
            let mut energy = 0.0;
            for i in 0..s.len() {
                let k = i % (last / 2 + 1);
                let w = if k == 0 || k == last / 2 { 1.0 } else { 2.0 };
                let (re, im) = s.get(i);
                energy += w * (re * re + im * im);
            }
            let direct = x.iter().map(|v| v * v).sum::<f64>() * total as f64;
            pars = pars.max((energy - direct).abs() / direct);
            let back = fft::irfft_nd(&s, &ext)?;
            let diff: Vec<f64> = back.iter().zip(&x).map(|(a, b)| a - b).collect();
            rt = rt.max(l2(&diff) / l2(&x));
        }
    }
    Ok((dft, pars, rt))
}

/// Relative error between reverse-mode and central-difference gradients of
/// `Σ w ⊙ build(inputs)` for a random probe `w`, worst over inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Tensor::randn(g.shape(out), 1.0, &mut rng)
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = g.constant(probe.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0_f64;
    for (i, x) in inputs.iter().enumerate() {
        let fd = finite_diff_gradient(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                eval(&xs)
            },
            x,
            1e-5,
        )?;
        let ad = grads.get(vars[i]).unwrap_or(&[]);
        worst = worst.max(relative_error(ad, fd.data()));
    }
    Ok(worst)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Gradient check of every registered differentiable op.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let pos = |t: Tensor| Tensor::new(t.data().iter().map(|v| v.abs() + 0.5).collect(), t.shape().to_vec()).unwrap();
    let away = |t: Tensor| {
        Tensor::new(
            t.data().iter().map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { *v }).collect(),
            t.shape().to_vec(),
        )
        .unwrap()
    };
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("add", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[2, 3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![r(&[3, 4]), pos(r(&[4]))], Box::new(|g, v| g.div(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("matmul", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("transpose", vec![r(&[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("slice", vec![r(&[4, 5])], Box::new(|g, v| g.slice(v[0], 1, 1, 4))),
        ("pad", vec![r(&[3, 2])], Box::new(|g, v| g.pad(v[0], 0, 1, 2))),
        ("gather", vec![r(&[4, 3])], Box::new(|g, v| g.gather(v[0], 0, vec![3, 0, 3, 1]))),
        ("scatter", vec![r(&[2, 3])], Box::new(|g, v| g.scatter(v[0], 0, vec![3, 1], 5))),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("sum", vec![r(&[3, 4])], Box::new(|g, v| g.sum_axis(v[0], 0))),
        ("mean", vec![r(&[3, 4])], Box::new(|g, v| g.mean_axis(v[0], 1))),
        ("softmax", vec![r(&[3, 5])], Box::new(|g, v| g.softmax(v[0]))),
        ("rms_norm", vec![r(&[3, 6])], Box::new(|g, v| g.rms_norm(v[0], 1e-6))),
        ("silu", vec![r(&[7])], Box::new(|g, v| g.silu(v[0]))),
        ("sqrt", vec![pos(r(&[6]))], Box::new(|g, v| g.sqrt(v[0]))),
        ("ln", vec![pos(r(&[6]))], Box::new(|g, v| g.ln(v[0]))),
        ("abs", vec![away(r(&[6]))], Box::new(|g, v| g.abs(v[0]))),
        (
            "clamp",
            vec![Tensor::new(vec![-2.0, -0.3, 0.1, 0.7, 2.5], vec![5])?],
            Box::new(|g, v| g.clamp(v[0], -1.0, 1.0)),
        ),
        ("rope", vec![r(&[3, 2, 4])], Box::new(|g, v| g.rope(v[0], vec![0, 2, 5], 10000.0))),
        ("rfft_1d", vec![r(&[2, 8])], Box::new(|g, v| g.rfft(v[0], 1))),
        ("rfft_2d", vec![r(&[4, 8])], Box::new(|g, v| g.rfft(v[0], 2))),
        ("rfft_3d", vec![r(&[4, 4, 4])], Box::new(|g, v| g.rfft(v[0], 3))),
        ("irfft_1d", vec![r(&[2, 5, 2])], Box::new(|g, v| g.irfft(v[0], &[8]))),
        ("irfft_2d", vec![r(&[4, 5, 2])], Box::new(|g, v| g.irfft(v[0], &[4, 8]))),
        ("irfft_3d", vec![r(&[4, 4, 3, 2])], Box::new(|g, v| g.irfft(v[0], &[4, 4, 4]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Ok((name.to_string(), gradcheck(&inputs, build)?)))
        .collect()
}

/// Gradient check of encode → transformer → decode → nRMSE with respect to
/// every model parameter (2 layers, H = 16, K = 4, N = 16).
pub fn pipeline_gradcheck(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        intermediate: 32,
        modes: [4, 4, 4],
        width: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg, &[1], &mut rng)?;
    // Move away from the near-identity initialisation.
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
    let field = Field::new(Tensor::randn(&[4 * 16], 1.0, &mut rng).into_data(), 4, 1, vec![16])?;
    let truth = field.time_slice(1, 4)?;
    let loss_of = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&m.params);
        let p = teacher_forced_prediction(m, &mut g, &mut b, &field, 1)?;
        let l = nrmse_graph(&mut g, p, &truth, 1e-8)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let mut b = Binder::trainable(&model.params);
    let p = teacher_forced_prediction(&model, &mut g, &mut b, &field, 1)?;
    let l = nrmse_graph(&mut g, p, &truth, 1e-8)?;
    let mut grads = g.backward(l)?;
    let ad = b.collect(&mut grads);
    let (mut ad_all, mut fd_all) = (Vec::new(), Vec::new());
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        let x = model.params.get(&name)?.clone();
        let fd = finite_diff_gradient(
            |xi| {
                let mut m = model.clone();
                *m.params.get_mut(&name)? = xi.clone();
                loss_of(&m)
            },
            &x,
            1e-6,
        )?;
        ad_all.extend_from_slice(ad.get(&name).map(Vec::as_slice).unwrap_or(&[]));
        fd_all.extend_from_slice(fd.data());
    }
    if ad_all.len() != fd_all.len() {
        return Ok(f64::INFINITY);
    }
    Ok(relative_error(&ad_all, &fd_all))
}

/// `(round-trip rel. L2, cross-resolution rel. L2)` per dimensionality for
/// band-limited fields.
pub fn codec_roundtrips(seed: u64) -> Result<Vec<(usize, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setups = [(1usize, 6usize, 32usize), (2, 3, 16), (3, 2, 8)];
    let mut out = Vec::new();
    for (dims, k, n) in setups {
        let sel = ModeSelection::fixed_low(k, dims)?;
        let hidden = 2 * sel.kept_count() + 2;
        let codec = Codec::new(dims, sel.clone(), 4, hidden, true);
        let mut store = crate::params::ParamStore::new();
        codec.init(&mut store, &mut rng)?;
        let ext = vec![n; dims];
        let x = band_limited_field(&sel, &ext, &mut rng)?;
        let f = Field::new(x.clone(), 1, 1, ext.clone())?;
        let tokens: TokenSequence = codec.encode_tokens(&f, &store)?;
        let back = codec.decode_tokens(&tokens, &store, &ext)?;
        let diff: Vec<f64> = back.data().iter().zip(&x).map(|(a, b)| a - b).collect();
        let rt = l2(&diff) / l2(&x);
        let fine = vec![2 * n; dims];
        let up = codec.decode_tokens(&tokens, &store, &fine)?;
        let oracle = fft::irfft_nd(
            &crate::codec::select_modes(&fft::rfft_nd(&x, &ext)?, &sel)?.to_spectrum(&fine)?,
            &fine,
        )?;
        let diff: Vec<f64> = up.data().iter().zip(&oracle).map(|(a, b)| a - b).collect();
        out.push((dims, rt, l2(&diff) / l2(&oracle)));
    }
    Ok(out)
}

/// `(earlier outputs bitwise unchanged, same-timestep cross-quantity
/// influence nonzero)` for a random model of `layers` layers.
pub fn mask_causality(seed: u64, layers: usize) -> Result<(bool, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        layers,
        hidden: 16,
        heads: 2,
        intermediate: 32,
        modes: [4, 4, 4],
        width: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, &[1], &mut rng)?;
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        if name.ends_with("wo") || name.ends_with("w2") {
            let t = model.params.get_mut(&name)?;
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    let (steps, c, h) = (6, 2, 16);
    let x = Tensor::randn(&[steps * c, h], 1.0, &mut rng);
    let base = model.forward_strict(&TokenSequence::new(x.clone(), c, vec![false; steps * c])?)?;
    let mut causal = true;
    for t in 0..steps - 1 {
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + 1) * c * h..] {
            *v += rng.gen_range(-1.0..1.0);
        }
        let out = model.forward_strict(&TokenSequence::new(y, c, vec![false; steps * c])?)?;
        let n = (t + 1) * c * h;
        causal &= out.embeddings.data()[..n]
            .iter()
            .zip(&base.embeddings.data()[..n])
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let t = 2;
    let mut y = x.clone();
    for v in &mut y.data_mut()[(t * c + 1) * h..(t * c + 2) * h] {
        *v += 0.5;
    }
    let out = model.forward_strict(&TokenSequence::new(y, c, vec![false; steps * c])?)?;
    let row = |e: &Tensor| e.data()[t * c * h..(t * c + 1) * h].to_vec();
    let cross = row(&out.embeddings) != row(&base.embeddings);
    Ok((causal, cross))
}

fn unravel(flat: usize, ext: &[usize]) -> Vec<usize> {
    let mut rem = flat;
    let mut idx = vec![0; ext.len()];
    for a in (0..ext.len()).rev() {
        idx[a] = rem % ext[a];
        rem /= ext[a];
    }
    idx
}

/// Closed-form solution at time `t` evaluated as a direct Fourier series over
/// the full DFT `c` of the initial state.
fn closed_form_series(spec: &PdeSpec, c: &[f64], t: f64) -> Result<Vec<f64>> {
    let ext = &spec.extents;
    let total: usize = ext.iter().product();
    let idx: Vec<Vec<usize>> = (0..total).map(|f| unravel(f, ext)).collect();
    let mut g = Vec::with_capacity(total);
    for m in &idx {
        let k: Vec<f64> = m
            .iter()
            .zip(ext)
            .zip(&spec.lengths)
            .map(|((&i, &n), &l)| {
                let signed = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                2.0 * PI * signed / l
            })
            .collect();
        g.push(match spec.family {
            Family::Advection1d => {
                let a = -k[0] * spec.coefficient("beta")? * t;
                (a.cos(), a.sin())
            }
            _ => {
                let k2: f64 = k.iter().map(|v| v * v).sum();
                ((-spec.coefficient("nu")? * k2 * t).exp(), 0.0)
            }
        });
    }
    let coef: Vec<(f64, f64)> = g
        .iter()
        .enumerate()
        .map(|(m, &(gr, gi))| (c[2 * m] * gr - c[2 * m + 1] * gi, c[2 * m] * gi + c[2 * m + 1] * gr))
        .collect();
    Ok(idx
        .iter()
        .map(|x| {
            let sum: f64 = idx
                .iter()
                .zip(&coef)
                .map(|(m, &(cr, ci))| {
                    let turns: f64 = m.iter().zip(x).zip(ext).map(|((&a, &b), &n)| ((a * b) % n) as f64 / n as f64).sum();
                    let (s, co) = (2.0 * PI * turns).sin_cos();
                    cr * co - ci * s
                })
                .sum();
            sum / total as f64
        })
        .collect())
}

/// Worst relative L2 error, over every step and analytic family, between
/// generated trajectories and a direct Fourier-series evaluation of the
/// closed form.
pub fn analytic_oracle(seed: u64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (i, fam) in Family::ALL.into_iter().filter(|f| f.is_analytic()).enumerate() {
        let n = if fam.dims() == 3 { 8 } else { 16 };
        let spec = PdeSpec::sampled(fam, &vec![n; fam.dims()], 10, 0.05, seed + i as u64);
        let traj = gen_trajectory(&spec)?;
        let c0 = fft::dft_reference_full(traj.field.channel(0, 0), &spec.extents);
        for step in 0..spec.steps {
            let exact = closed_form_series(&spec, &c0, step as f64 * spec.dt)?;
            worst = worst.max(relative_error(traj.field.channel(step, 0), &exact));
        }
    }
    Ok(worst)
}

/// Relative L2 distance at t = 1 between Burgers solutions on `(n, dt)` and
/// `(2n, dt/2)` from one unit-RMS initial condition band-limited to mode 8,
/// ν/π = 0.01. The fine solution is compared on the coarse grid points.
pub fn burgers_refinement(seed: u64, n: usize, dt: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64)> = (0..8).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let rms = (modes.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / 2.0).sqrt();
    let ic = |m: usize| -> Vec<f64> {
        (0..m)
            .map(|j| {
                let x = j as f64 / m as f64;
                let u: f64 = modes
                    .iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let (s, c) = (2.0 * PI * (k + 1) as f64 * x).sin_cos();
                        a * c + b * s
                    })
                    .sum();
                u / rms
            })
            .collect()
    };
    let solve = |m: usize, h: f64| -> Result<Vec<f64>> {
        let mut s = fft::rfft_nd(&ic(m), &[m])?;
        for _ in 0..(1.0 / h).round() as usize {
            s = burgers_step(&s, 0.01 * PI, h, 1.0)?;
        }
        fft::irfft_nd(&s, &[m])
    };
    let coarse = solve(n, dt)?;
    let fine: Vec<f64> = solve(2 * n, dt / 2.0)?.into_iter().step_by(2).collect();
    Ok(relative_error(&coarse, &fine))
}

/// All suites as pass/fail records.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    };
    push(
        "dft equivalence",
        spectral_errors(seed, 32).map(|(d, p, r)| {
            (d < 1e-12 && p < 1e-12 && r < 1e-12, format!("dft {d:.2e} parseval {p:.2e} roundtrip {r:.2e}"))
        }),
    );
    push(
        "op gradients",
        op_gradchecks(seed).map(|v| {
            let worst = v.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
            (worst.1 < 1e-4, format!("worst {} {:.2e}", worst.0, worst.1))
        }),
    );
    push(
        "pipeline gradient",
        pipeline_gradcheck(seed).map(|e| (e < 1e-4, format!("{e:.2e}"))),
    );
    push(
        "codec round trips",
        codec_roundtrips(seed).map(|v| {
            let ok = v.iter().all(|&(_, a, b)| a < 1e-10 && b < 1e-10);
            (ok, format!("{v:?}"))
        }),
    );
    push(
        "mask causality",
        (1..=3)
            .map(|l| mask_causality(seed + l as u64, l))
            .collect::<Result<Vec<_>>>()
            .map(|v| (v.iter().all(|&(a, b)| a && b), format!("{v:?}"))),
    );
    push(
        "solver oracles",
        analytic_oracle(seed).and_then(|a| {
            let b = burgers_refinement(seed, 256, 1.25e-4)?;
            Ok((a < 1e-10 && b < 1e-4, format!("analytic {a:.2e} burgers refinement {b:.2e}")))
        }),
    );
    out
}
