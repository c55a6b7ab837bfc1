use fieldformer::datagen::{gen_trajectory, Family, PdeSpec, Trajectory};
use fieldformer::field::Field;
use fieldformer::model::{Model, ModelConfig};
use fieldformer::trainer::{
    self, batch_gradients, next_step_nrmse, pretrain_on, Batch, Objective, TrainConfig, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn advection(count: usize, grid: usize, steps: usize, seed: u64) -> Vec<Trajectory> {
    (0..count as u64)
        .map(|i| gen_trajectory(&PdeSpec::sampled(Family::Advection1d, &[grid], steps, 0.005, seed + i)).unwrap())
        .collect()
}

fn small_model(dims: &[usize], seed: u64) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        intermediate: 32,
        modes: [4, 4, 4],
        ..ModelConfig::default()
    };
    Model::new(cfg, dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        lr_init: lr,
        lr_min: lr * 0.01,
        total_steps: steps,
        batch_sizes: [4, 2, 1],
        deterministic: true,
        holdout_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_halves_over_200_steps_on_advection() {
    let data = advection(32, 64, 20, 100);
    let model = Model::new(ModelConfig::default(), &[1], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut tc = cfg(200, 1e-3);
    tc.batch_sizes = [8, 2, 1];
    tc.deterministic = false;
    let out = pretrain_on(Trainer::new(model, tc).unwrap(), &data, None).unwrap();
    let losses: Vec<f64> = out.curve.iter().filter_map(|r| r.loss).collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "initial {head}, final {tail}");
}

#[test]
fn single_trajectory_overfit() {
    let data = advection(1, 32, 12, 3);
    let mc = ModelConfig {
        hidden: 32,
        heads: 2,
        intermediate: 64,
        ..ModelConfig::default()
    };
    let model = Model::new(mc, &[1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tc = cfg(2000, 3e-3);
    tc.lr_min = 1e-5;
    tc.batch_sizes = [1, 1, 1];
    tc.holdout_fraction = 0.0;
    let out = pretrain_on(Trainer::new(model, tc.clone()).unwrap(), &data, None).unwrap();
    let n = next_step_nrmse(&out.trainer.model, &data[0].field, &tc).unwrap();
    assert!(n < 0.01, "held-in next-step nRMSE {n}");
}

#[test]
fn identical_seeds_give_identical_traces() {
    let data = advection(8, 16, 8, 0);
    let run = || {
        let out = pretrain_on(Trainer::new(small_model(&[1], 2), cfg(6, 1e-3)).unwrap(), &data, None).unwrap();
        out.curve
            .iter()
            .map(|r| (r.loss.map(f64::to_bits), r.nrmse.map(f64::to_bits)))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_gradients_match_sequential_bitwise() {
    let data = advection(6, 16, 6, 9);
    let model = small_model(&[1], 3);
    let batch = Batch::new(data.iter().map(|t| t.field.clone()).collect()).unwrap();
    let mut seq = cfg(1, 1e-3);
    let a = batch_gradients(&model, &batch, &seq, Objective::Sim).unwrap();
    seq.deterministic = false;
    let b = batch_gradients(&model, &batch, &seq, Objective::Sim).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn resume_reproduces_next_loss_bitwise() {
    let data = advection(8, 16, 8, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut tc = cfg(6, 1e-3);
    tc.checkpoint_every = 3;
    let full = pretrain_on(Trainer::new(small_model(&[1], 5), tc.clone()).unwrap(), &data, Some(dir.path())).unwrap();
    let ck = fieldformer::archive::Checkpoint::load(dir.path().join("checkpoint_000003.ckpt")).unwrap();
    let resumed = pretrain_on(Trainer::from_checkpoint(&ck, tc).unwrap(), &data, None).unwrap();
    let tail = |c: &[trainer::CurveRow]| c.iter().filter(|r| r.step >= 3 && r.loss.is_some()).map(|r| r.loss.unwrap().to_bits()).collect::<Vec<_>>();
    assert_eq!(tail(&full.curve), tail(&resumed.curve));
    assert!(!tail(&resumed.curve).is_empty());
    assert!(dir.path().join("checkpoint_final.ckpt").exists());
    assert!(dir.path().join("loss_curve.csv").exists());
}

#[test]
fn mixed_manifest_alternates_dimensionalities() {
    let mut data = advection(4, 16, 6, 0);
    for i in 0..4 {
        data.push(gen_trajectory(&PdeSpec::sampled(Family::Heat2d, &[16, 16], 6, 0.005, 50 + i)).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_on(Trainer::new(small_model(&[1, 2], 6), cfg(6, 1e-3)).unwrap(), &data, Some(dir.path())).unwrap();
    let dims: Vec<usize> = out.curve.iter().filter(|r| r.family == "train").map(|r| r.dim).collect();
    assert_eq!(dims, vec![1, 2, 1, 2, 1, 2]);
    let csv = std::fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
    assert!(csv.starts_with("step,lr,dim,family,loss,nrmse\n"));
    assert!(csv.contains(",2,heat2d,,"));
}

#[test]
fn pad_quantities_leave_loss_unchanged() {
    let data = advection(3, 16, 6, 11);
    let model = small_model(&[1], 8);
    let tc = cfg(1, 1e-3);
    let fields: Vec<Field> = data.iter().map(|t| t.field.clone()).collect();
    let plain = Batch::new(fields.clone()).unwrap();
    let padded = Batch::new(fields).unwrap().with_channels(3);
    let a = batch_gradients(&model, &plain, &tc, Objective::Sim).unwrap();
    let b = batch_gradients(&model, &padded, &tc, Objective::Sim).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
}

#[test]
fn manifest_round_trip_feeds_pretrain() {
    let data = advection(3, 16, 6, 12);
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for (i, t) in data.iter().enumerate() {
        let name = format!("t{i}.pdearch");
        fieldformer::archive::write_archive(t, dir.path().join(&name)).unwrap();
        entries.push(name.into());
    }
    let manifest = dir.path().join("manifest.txt");
    trainer::write_manifest(&manifest, &entries).unwrap();
    let loaded = trainer::load_manifest(&manifest).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[1].caption, data[1].caption);
    let out = trainer::pretrain(&manifest, Trainer::new(small_model(&[1], 9), cfg(2, 1e-3)).unwrap(), None).unwrap();
    assert_eq!(out.trainer.step, 2);
    std::fs::write(&manifest, "# empty\n").unwrap();
    assert!(trainer::load_manifest(&manifest).is_err());
}
