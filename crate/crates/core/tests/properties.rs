use std::path::Path;

use fieldformer::aligner::{physics_features, Aligner, AlignerConfig};
use fieldformer::archive::{decode_archive, encode_archive, Checkpoint, RngState};
use fieldformer::codec::{band_limited_field, select_modes, Codec, ModeSelection};
use fieldformer::datagen::{gen_trajectory, Family, PdeSpec};
use fieldformer::fft::{irfft_nd, rfft_nd};
use fieldformer::field::Field;
use fieldformer::model::{Model, ModelConfig, TokenSequence};
use fieldformer::params::ParamStore;
use fieldformer::tensor::{Graph, Tensor};
use fieldformer::trainer::nrmse;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300)
}

fn random_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn extents_for(dims: usize, log2: &[u32]) -> Vec<usize> {
    log2[..dims].iter().map(|&p| 1usize << p).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn codec_round_trip_on_band_limited_fields(dims in 1usize..=3, log2 in prop::collection::vec(3u32..=6, 3), k in 1usize..=3, seed in any::<u64>()) {
        let log2: Vec<u32> = log2.iter().map(|&p| if dims == 3 { p.min(4) } else { p }).collect();
        let ext = extents_for(dims, &log2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = ModeSelection::fixed_low(k, dims).unwrap();
        let c = Codec::new(dims, sel.clone(), 3, 2 * sel.kept_count() + 2, true);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut rng).unwrap();
        let data = band_limited_field(&sel, &ext, &mut rng).unwrap();
        let f = Field::new(data, 1, 1, ext.clone()).unwrap();
        let tok = c.encode_tokens(&f, &store).unwrap();
        prop_assert_eq!(tok.len(), 1);
        let back = c.decode_tokens(&tok, &store, &ext).unwrap();
        prop_assert!(rel(back.data(), f.data()) < 1e-10);
        let up: Vec<usize> = ext.iter().map(|n| 2 * n).collect();
        let oracle = irfft_nd(&select_modes(&rfft_nd(f.data(), &ext).unwrap(), &sel).unwrap().to_spectrum(&up).unwrap(), &up).unwrap();
        let fine = c.decode_tokens(&tok, &store, &up).unwrap();
        prop_assert!(rel(fine.data(), &oracle) < 1e-10);
    }

    #[test]
    fn fft_round_trip_and_linearity(dims in 1usize..=3, log2 in prop::collection::vec(2u32..=4, 3), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let ext = extents_for(dims, &log2);
        let n: usize = ext.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g) = (random_field(&mut rng, n), random_field(&mut rng, n));
        let back = irfft_nd(&rfft_nd(&f, &ext).unwrap(), &ext).unwrap();
        prop_assert!(rel(&back, &f) < 1e-12);
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = rfft_nd(&mix, &ext).unwrap();
        let (sf, sg) = (rfft_nd(&f, &ext).unwrap(), rfft_nd(&g, &ext).unwrap());
        let rhs: Vec<f64> = sf.modes.iter().zip(&sg.modes).map(|(x, y)| a * x + b * y).collect();
        let scale = rhs.iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(lhs.modes.iter().zip(&rhs).all(|(x, y)| (x - y).abs() <= 1e-12 * scale));
    }

    #[test]
    fn nrmse_is_scale_invariant(a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0], c in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * c * 16;
        let truth = Field::new(random_field(&mut rng, n), 3, c, vec![16]).unwrap();
        let pred = Field::new(random_field(&mut rng, n), 3, c, vec![16]).unwrap();
        let base = nrmse(&pred, &truth).unwrap();
        let scaled = nrmse(&pred.scaled(a), &truth.scaled(a)).unwrap();
        prop_assert!(base.mean >= 0.0);
        // exact up to the 1e-8 σ floor
        prop_assert!((base.mean - scaled.mean).abs() <= 1e-6 * base.mean.max(1.0));
    }

    #[test]
    fn evolution_features_scale_invariant_and_unit_modulus(a in 0.01f64..100.0, beta in 0.2f64..2.0, seed in any::<u64>()) {
        let t = gen_trajectory(&PdeSpec::new(Family::Advection1d, &[("beta", beta)], &[32], 5, 0.01, seed)).unwrap();
        let (u0, ui) = (t.field.frame(0).unwrap(), t.field.frame(4).unwrap());
        let sel = ModeSelection::fixed_low(8, 1).unwrap();
        let f = physics_features(&u0, &ui, &sel, 1e-10).unwrap();
        let g = physics_features(&u0.scaled(a), &ui.scaled(a), &sel, 1e-10).unwrap();
        for m in 0..f.modes {
            let (re, im) = f.delta_phi(0, m);
            prop_assert!(((re * re + im * im).sqrt() - 1.0).abs() < 1e-12);
            let (re2, im2) = g.delta_phi(0, m);
            prop_assert!((re - re2).abs() < 1e-10 && (im - im2).abs() < 1e-10);
            prop_assert!((f.ratio(0, m) - g.ratio(0, m)).abs() < 1e-10 * f.ratio(0, m).max(1.0));
            prop_assert!(f.ratio(0, m) >= 0.0);
            prop_assert!((-10.0..=10.0).contains(&f.log_ratio(0, m)));
        }
    }

    #[test]
    fn similarity_is_a_cosine(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let t = gen_trajectory(&PdeSpec::sampled(Family::Diffusion1d, &[32], 4, 0.01, seed)).unwrap();
        let a = Aligner::new(AlignerConfig { vocab: 256, ..AlignerConfig::default() }, &[1], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let noise: Vec<f64> = t.field.time_slice(1, 4).unwrap().data().iter().map(|v| scale * v + rng.gen_range(-0.1..0.1)).collect();
        let mut g = Graph::new();
        let pred = g.constant(Tensor::new(noise, vec![3, 1, 32]).unwrap());
        let s = a.similarity_graph(&mut g, &t.caption, &t.field.frame(0).unwrap(), pred).unwrap();
        let v = g.value(s).item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(values in prop::collection::vec(any::<f64>(), 1..40), step in any::<u64>(), pos in any::<u128>()) {
        let mut tensors = ParamStore::new();
        tensors.insert("w", Tensor::new(values.clone(), vec![values.len()]).unwrap());
        let ck = Checkpoint { model: ModelConfig::default(), step, rng: RngState { seed: 1, word_pos: pos }, counters: Default::default(), aligner: None, tensors };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let got = back.tensors.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(got, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn temporal_mask_is_causal(layers in 1usize..=3, heads in prop_oneof![Just(1usize), Just(2), Just(4)], steps in 2usize..6, c in 1usize..=3, t in 0usize..5, seed in any::<u64>()) {
        let t = t % (steps - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { layers, hidden: 16, heads, intermediate: 24, modes: [4, 4, 4], width: 4, ..ModelConfig::default() };
        let mut model = Model::new(cfg, &[1], &mut rng).unwrap();
        for name in model.params.names().cloned().collect::<Vec<_>>() {
            if name.ends_with("wo") || name.ends_with("w2") {
                let shape = model.params.get(&name).unwrap().shape().to_vec();
                *model.params.get_mut(&name).unwrap() = Tensor::randn(&shape, 0.3, &mut rng);
            }
        }
        let h = 16;
        let x = Tensor::randn(&[steps * c, h], 1.0, &mut rng);
        let run = |x: Tensor| model.forward_strict(&TokenSequence::new(x, c, vec![false; steps * c]).unwrap()).unwrap().embeddings;
        let base = run(x.clone());
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + 1) * c * h..] {
            *v += rng.gen_range(-1.0..1.0);
        }
        let out = run(y);
        let n = (t + 1) * c * h;
        prop_assert!(out.data()[..n].iter().zip(&base.data()[..n]).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(out.data()[n..] != base.data()[n..]);
    }

    #[test]
    fn channel_permutation_is_equivariant(seed in any::<u64>(), steps in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { layers: 2, hidden: 16, heads: 2, intermediate: 24, modes: [4, 4, 4], width: 4, ..ModelConfig::default() };
        let model = Model::new(cfg, &[1], &mut rng).unwrap();
        let (c, n) = (3, 16);
        let data = random_field(&mut rng, steps * c * n);
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0.0; data.len()];
        for s in 0..steps {
            for (j, &p) in perm.iter().enumerate() {
                permuted[(s * c + j) * n..(s * c + j + 1) * n].copy_from_slice(&data[(s * c + p) * n..(s * c + p + 1) * n]);
            }
        }
        let a = model.predict_next(&Field::new(data, steps, c, vec![n]).unwrap()).unwrap();
        let b = model.predict_next(&Field::new(permuted, steps, c, vec![n]).unwrap()).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            let (x, y) = (b.channel(0, j), a.channel(0, p));
            prop_assert!(rel(x, y) < 1e-10);
        }
    }

    #[test]
    fn archive_round_trip(family in prop_oneof![Just(Family::Advection1d), Just(Family::Burgers1d), Just(Family::Heat2d)], seed in any::<u64>()) {
        let ext = vec![16; family.dims()];
        let t = gen_trajectory(&PdeSpec::sampled(family, &ext, 3, 0.01, seed)).unwrap();
        let bytes = encode_archive(&t).unwrap();
        let back = decode_archive(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(encode_archive(&back).unwrap(), bytes);
        prop_assert_eq!(&back.caption, &t.caption);
        let scale = t.field.max_abs().max(1e-30);
        prop_assert!(back.field.data().iter().zip(t.field.data()).all(|(a, b)| (a - b).abs() <= 1e-6 * scale));
    }
}
