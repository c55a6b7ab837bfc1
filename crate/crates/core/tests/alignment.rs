use fieldformer::aligner::{
    self, align_train, classify_probe, finetune_loss, physics_features, retrieval_accuracy, AlignSample, Aligner,
    AlignerConfig,
};
use fieldformer::datagen::{gen_trajectory, Family, PdeSpec, Trajectory};
use fieldformer::model::{Model, ModelConfig};
use fieldformer::params::Binder;
use fieldformer::selftest::gradcheck;
use fieldformer::tensor::{Graph, Tensor};
use fieldformer::trainer::{next_step_nrmse, train_on, Objective, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FAMILIES: [Family; 3] = [Family::Advection1d, Family::Diffusion1d, Family::Burgers1d];

fn trajectories(family: Family, count: usize, grid: usize, steps: usize, seed: u64) -> Vec<Trajectory> {
    (0..count as u64)
        .map(|i| gen_trajectory(&PdeSpec::sampled(family, &[grid], steps, 0.005, seed + i)).unwrap())
        .collect()
}

fn samples(count: usize, grid: usize) -> Vec<AlignSample> {
    FAMILIES
        .iter()
        .enumerate()
        .flat_map(|(label, &f)| {
            trajectories(f, count, grid, 20, 1000 * label as u64)
                .into_iter()
                .map(move |t| AlignSample::from_trajectory(&t, label).unwrap())
        })
        .collect()
}

fn small_config() -> AlignerConfig {
    AlignerConfig {
        vocab: 128,
        token_dim: 6,
        embed_dim: 5,
        modes: [4, 2, 2],
        ..AlignerConfig::default()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n(a).max(n(b)).max(1e-300)
}

#[test]
fn align_loss_gradients_match_finite_differences() {
    let batch: Vec<AlignSample> = samples(2, 32).into_iter().take(4).collect();
    assert_eq!(batch.len(), 4);
    let a = Aligner::new(small_config(), &[1], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let analytic = {
        let mut g = Graph::new();
        let mut b = Binder::trainable(&a.params);
        let l = a.align_loss_graph(&mut g, &mut b, &batch).unwrap();
        let mut gr = g.backward(l.total).unwrap();
        b.collect(&mut gr)
    };
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, grad) in &analytic {
        let n = a.params.get(name).unwrap().numel();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(24);
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        for &i in &idx {
            let mut p = a.clone();
            p.params.get_mut(name).unwrap().data_mut()[i] += h;
            let up = p.align_loss(&batch).unwrap().0;
            p.params.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = p.align_loss(&batch).unwrap().0;
            fd.push((up - down) / (2.0 * h));
            ad.push(grad[i]);
        }
        let e = rel_err(&ad, &fd);
        assert!(e < 1e-4, "{name}: relative error {e}");
    }
}

#[test]
fn similarity_gradient_wrt_prediction() {
    let t = &trajectories(Family::Advection1d, 1, 16, 4, 5)[0];
    let a = Aligner::new(small_config(), &[1], &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let init = t.field.frame(0).unwrap();
    let pred = Tensor::new(t.field.time_slice(1, 4).unwrap().into_data(), vec![3, 1, 16]).unwrap();
    let err = gradcheck(&[pred], |g, v| a.similarity_graph(g, &t.caption, &init, v[0])).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn retrieval_improves_after_alignment() {
    let data = samples(64, 32);
    let mut a = Aligner::new(AlignerConfig::default(), &[1], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let trace = align_train(&mut a, &data).unwrap();
    assert_eq!(trace.len(), 500);
    let acc = retrieval_accuracy(&a, &data).unwrap();
    assert!(acc > 0.8, "retrieval accuracy {acc}");
}

#[test]
fn finetune_loss_examples() {
    let t = &trajectories(Family::Advection1d, 1, 32, 6, 9)[0];
    let a = Aligner::new(AlignerConfig::default(), &[1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let exact = finetune_loss(&t.field, &t.field, &t.caption, &a).unwrap();
    assert_eq!(exact.l_sim, 0.0);
    assert_eq!(exact.total, -exact.similarity);
    let noisy = t.field.scaled(1.3);
    let l = finetune_loss(&noisy, &t.field, &t.caption, &a).unwrap();
    assert!((-1.0..=1.0).contains(&l.similarity));
    assert!(l.total >= l.l_sim - 1.0);
}

#[test]
fn physics_probe_separates_advection_and_diffusion() {
    let sel = AlignerConfig::default().selection(1).unwrap();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (label, f) in [Family::Advection1d, Family::Diffusion1d].into_iter().enumerate() {
        for t in trajectories(f, 100, 32, 20, 77 + label as u64 * 500) {
            let s = AlignSample::from_trajectory(&t, label).unwrap();
            features.push(physics_features(&s.u_t0, &s.u_ti, &sel, 1e-10).unwrap().pooled());
            labels.push(label);
        }
    }
    let report = classify_probe(&features, &labels, 0).unwrap();
    assert!(report.accuracy > 0.9, "accuracy {}", report.accuracy);
    let control = (0..5)
        .map(|k| {
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(k));
            classify_probe(&features, &shuffled, k).unwrap().accuracy
        })
        .sum::<f64>()
        / 5.0;
    assert!((control - 0.5).abs() <= 0.15, "shuffled accuracy {control}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("confusion.csv");
    aligner::write_confusion_csv(&path, &report, &["advection1d".into(), "diffusion1d".into()]).unwrap();
    assert!(std::fs::read_to_string(path).unwrap().lines().count() >= 3);
}

#[test]
fn aligned_finetuning_does_not_regress() {
    let data = trajectories(Family::Advection1d, 24, 32, 12, 40);
    let mc = ModelConfig {
        hidden: 32,
        heads: 2,
        intermediate: 64,
        ..ModelConfig::default()
    };
    let tc = |steps, lr| TrainConfig {
        lr_init: lr,
        lr_min: lr * 0.1,
        total_steps: steps,
        batch_sizes: [4, 1, 1],
        holdout_fraction: 0.25,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = Model::new(mc, &[1], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let pre = train_on(Trainer::new(model, tc(300, 1e-3)).unwrap(), &data, None, Objective::Sim).unwrap();
    let mut a = Aligner::new(AlignerConfig { steps: 100, ..AlignerConfig::default() }, &[1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    align_train(&mut a, &samples(16, 32)).unwrap();
    let score = |objective| {
        let out = train_on(Trainer::new(pre.trainer.model.clone(), tc(200, 1e-5)).unwrap(), &data, None, objective).unwrap();
        let held = &out.heldout;
        held.iter()
            .map(|&i| next_step_nrmse(&out.trainer.model, &data[i].field, &out.trainer.config).unwrap())
            .sum::<f64>()
            / held.len() as f64
    };
    let sim = score(Objective::Sim);
    let ft = score(Objective::Aligned(&a));
    assert!(ft <= sim + 0.02, "L_ft {ft} vs L_sim {sim}");
}
