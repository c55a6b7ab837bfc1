use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fieldformer::aligner::{self, AlignSample, Aligner};
use fieldformer::archive::{self, atomic_write, write_archive, Checkpoint};
use fieldformer::config::ExperimentConfig;
use fieldformer::datagen::{gen_trajectory, Family, Trajectory};
use fieldformer::eval::{self, DivergenceReport, EvalOptions, SweepData};
use fieldformer::model::Model;
use fieldformer::selftest::run_selftest;
use fieldformer::trainer::{self, Objective, Trainer};
use fieldformer::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fieldformer", version, about = "Spectral-token transformer surrogates for time-dependent PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sequential, bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Dataset manifest (overrides `eval.manifest`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Model checkpoint (overrides `eval.checkpoint`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Aligner checkpoint (overrides `eval.aligner_checkpoint`).
    #[arg(long, global = true)]
    aligner: Option<PathBuf>,
    /// Family excluded from training and used alone for evaluation.
    #[arg(long, global = true)]
    holdout_family: Option<Family>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate trajectory archives and a manifest.
    Gen(Common),
    /// Pre-train a model on a manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint, with the aligner term when an aligner is given.
    Finetune(Common),
    /// Train the caption/physics aligner.
    AlignTrain(Common),
    /// Free-running evaluation of a checkpoint on a manifest.
    Eval(Common),
    /// Roll out one trajectory and render truth/prediction/error images.
    Rollout(Common),
    /// Evaluate a checkpoint on fresh data at several grid sizes.
    ScaleSweep(Common),
    /// Evaluate a checkpoint at several context lengths.
    ContextSweep(Common),
    /// Linear probes: family classification or coefficient regression.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ProbeKind::Physics)]
        kind: ProbeKind,
    },
    /// Run the oracle suites.
    Selftest(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    /// Family classification from spectral evolution features.
    Physics,
    /// Coefficient regression from frozen hidden states.
    Inverse,
}

/// Loaded configuration with flag overrides applied.
struct Ctx {
    cfg: ExperimentConfig,
    common: Common,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.data.seed = s;
            cfg.train.seed = s;
            cfg.aligner.seed = s;
        }
        if common.deterministic {
            cfg.train.deterministic = true;
        }
        if let Some(p) = &common.manifest {
            cfg.eval.manifest = Some(p.clone());
        }
        if let Some(p) = &common.checkpoint {
            cfg.eval.checkpoint = Some(p.clone());
        }
        if let Some(p) = &common.aligner {
            cfg.eval.aligner_checkpoint = Some(p.clone());
        }
        cfg.validate()?;
        std::fs::create_dir_all(&common.out).map_err(|e| Error::Io {
            path: common.out.clone(),
            source: e,
        })?;
        Ok(Ctx { cfg, common })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn seed(&self) -> u64 {
        self.common.seed.unwrap_or(self.cfg.data.seed)
    }

    fn manifest(&self) -> Result<Vec<Trajectory>> {
        let p = self
            .cfg
            .eval
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("no manifest given (--manifest or eval.manifest)".into()))?;
        trainer::load_manifest(p)
    }

    /// Manifest filtered by the hold-out family: excluded for training,
    /// exclusive for evaluation.
    fn data(&self, training: bool) -> Result<Vec<Trajectory>> {
        let data = self.manifest()?;
        let Some(h) = self.common.holdout_family else {
            return Ok(data);
        };
        let kept: Vec<Trajectory> = data.into_iter().filter(|t| (t.spec.family == h) != training).collect();
        if kept.is_empty() {
            return Err(Error::Config(format!("no trajectories left after hold-out of {h}")));
        }
        Ok(kept)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let p = self
            .cfg
            .eval
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or eval.checkpoint)".into()))?;
        Checkpoint::load(p)
    }

    fn model(&self) -> Result<Model> {
        let ck = self.checkpoint()?;
        if ck.model != self.cfg.model && self.common.config.is_some() {
            log::warn!("checkpoint architecture differs from [model]; using the checkpoint's");
        }
        Ok(trainer::model_from_checkpoint(&ck))
    }

    fn family(&self) -> Result<Family> {
        self.common
            .holdout_family
            .or(self.cfg.eval.family)
            .or_else(|| self.cfg.data.families.first().copied())
            .ok_or_else(|| Error::Config("no family given (eval.family)".into()))
    }

    fn eval_options(&self, experiment: &str) -> EvalOptions {
        EvalOptions {
            experiment: experiment.into(),
            context: self.cfg.eval.context,
            horizon: self.cfg.eval.horizon,
            seed: self.seed(),
            divergence_bound: self.cfg.model.divergence_bound,
            timing: !self.cfg.train.deterministic,
        }
    }

    fn sweep_data(&self) -> Result<SweepData> {
        let base = self.seed();
        Ok(SweepData {
            family: self.family()?,
            steps: self.cfg.data.steps,
            dt: self.cfg.data.dt,
            seeds: (0..self.cfg.eval.count as u64).map(|i| base + i).collect(),
        })
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        let path = self.out(name);
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        Ok(path)
    }
}

enum Outcome {
    Ok,
    /// Runtime failure whose report is already on disk.
    Failed(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Gen(c) => gen(&Ctx::new(c)?),
        Command::Pretrain { common, resume } => pretrain(&Ctx::new(common)?, resume.as_deref()),
        Command::Finetune(c) => finetune(&Ctx::new(c)?),
        Command::AlignTrain(c) => align_train(&Ctx::new(c)?),
        Command::Eval(c) => evaluate(&Ctx::new(c)?),
        Command::Rollout(c) => rollout(&Ctx::new(c)?),
        Command::ScaleSweep(c) => scale_sweep(&Ctx::new(c)?),
        Command::ContextSweep(c) => context_sweep(&Ctx::new(c)?),
        Command::Probe { common, kind } => probe(&Ctx::new(common)?, kind),
        Command::Selftest(c) => selftest(&Ctx::new(c)?),
    }
}

fn gen(ctx: &Ctx) -> Result<Outcome> {
    let specs = ctx.cfg.data.specs();
    let mut entries = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let t = gen_trajectory(spec)?;
        let name = format!("{}_{i:05}.pdearch", spec.family);
        write_archive(&t, ctx.out(&name))?;
        entries.push(PathBuf::from(name));
    }
    let manifest = ctx.out("manifest.txt");
    trainer::write_manifest(&manifest, &entries)?;
    info!("wrote {} archives and {}", entries.len(), manifest.display());
    Ok(Outcome::Ok)
}

fn data_dims(data: &[Trajectory]) -> Vec<usize> {
    let mut d: Vec<usize> = data.iter().map(|t| t.field.dims()).collect();
    d.sort_unstable();
    d.dedup();
    d
}

fn pretrain(ctx: &Ctx, resume: Option<&Path>) -> Result<Outcome> {
    let data = ctx.data(true)?;
    let trainer = match resume {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?, ctx.cfg.train.clone())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.train.seed);
            let model = Model::new(ctx.cfg.model.clone(), &data_dims(&data), &mut rng)?;
            Trainer::new(model, ctx.cfg.train.clone())?
        }
    };
    let out = trainer::pretrain_on(trainer, &data, Some(&ctx.common.out))?;
    report_curve(&out.curve);
    Ok(Outcome::Ok)
}

fn report_curve(curve: &[trainer::CurveRow]) {
    for r in curve.iter().filter(|r| r.nrmse.is_some()) {
        info!("step {} held-out {} nRMSE {:.4}", r.step, r.family, r.nrmse.unwrap_or(f64::NAN));
    }
}

fn finetune(ctx: &Ctx) -> Result<Outcome> {
    let data = ctx.data(true)?;
    let model = ctx.model()?;
    let trainer = Trainer::new(model, ctx.cfg.train.clone())?;
    let aligner = match &ctx.cfg.eval.aligner_checkpoint {
        Some(p) => Some(Aligner::load(p)?),
        None => None,
    };
    let objective = match &aligner {
        Some(a) => Objective::Aligned(a),
        None => Objective::Sim,
    };
    let out = trainer::train_on(trainer, &data, Some(&ctx.common.out), objective)?;
    report_curve(&out.curve);
    Ok(Outcome::Ok)
}

fn align_samples(data: &[Trajectory]) -> Result<(Vec<AlignSample>, Vec<Family>)> {
    let mut families: Vec<Family> = data.iter().map(|t| t.spec.family).collect();
    families.sort_unstable();
    families.dedup();
    let samples = data
        .iter()
        .map(|t| AlignSample::from_trajectory(t, families.binary_search(&t.spec.family).unwrap_or(0)))
        .collect::<Result<_>>()?;
    Ok((samples, families))
}

fn align_train(ctx: &Ctx) -> Result<Outcome> {
    let data = ctx.data(true)?;
    let (samples, _) = align_samples(&data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.aligner.seed);
    let mut a = Aligner::new(ctx.cfg.aligner.clone(), &data_dims(&data), &mut rng)?;
    let before = aligner::retrieval_accuracy(&a, &samples)?;
    let trace = aligner::align_train(&mut a, &samples)?;
    let after = aligner::retrieval_accuracy(&a, &samples)?;
    a.save(&ctx.cfg.model, ctx.out("aligner.ckpt"))?;
    let rows: Vec<(usize, f64)> = trace.iter().copied().enumerate().collect();
    archive::write_csv(ctx.out("align_curve.csv"), &["step", "loss"], &rows)?;
    ctx.write_json(
        "align_report.json",
        &json!({"retrieval_before": before, "retrieval_after": after, "final_loss": trace.last()}),
    )?;
    info!("retrieval accuracy {before:.3} -> {after:.3}");
    Ok(Outcome::Ok)
}

fn evaluate(ctx: &Ctx) -> Result<Outcome> {
    let model = ctx.model()?;
    let data = ctx.data(false)?;
    let rows = eval::evaluate(&model, &data, &ctx.eval_options("eval"))?;
    eval::write_metrics(ctx.out("metrics.csv"), &rows)?;
    info!("wrote {} metric rows", rows.len());
    Ok(Outcome::Ok)
}

fn rollout(ctx: &Ctx) -> Result<Outcome> {
    let model = ctx.model()?;
    let data = ctx.data(false)?;
    let idx = ctx.cfg.eval.index;
    let t = data
        .get(idx)
        .ok_or_else(|| Error::Config(format!("trajectory index {idx} out of range ({} available)", data.len())))?;
    let context = ctx.cfg.eval.context;
    let horizon = ctx.cfg.eval.horizon.min(t.field.steps().saturating_sub(context));
    let window = t.field.time_slice(0, context)?;
    let bound = model.config.divergence_bound;
    match eval::rollout(&model, &window, horizon, bound) {
        Ok(pred) => {
            let truth = t.field.time_slice(context, context + horizon)?;
            let mut rows = Vec::new();
            for h in 0..horizon {
                let n = trainer::nrmse(&pred.frame(h)?, &truth.frame(h)?)?;
                rows.push((h + 1, n.mean));
            }
            archive::write_csv(ctx.out("rollout.csv"), &["horizon", "nrmse"], &rows)?;
            for c in 0..truth.channels() {
                eval::write_rollout_pgms(&ctx.common.out, "rollout", &truth, &pred, c)?;
            }
            Ok(Outcome::Ok)
        }
        Err(Error::Divergence { step, magnitude, bound }) => {
            let report = DivergenceReport {
                step,
                magnitude,
                bound,
                context,
            };
            let path = ctx.write_json("divergence_report.json", &serde_json::to_value(&report)?)?;
            Ok(Outcome::Failed(format!(
                "rollout diverged at step {step}; report written to {}",
                path.display()
            )))
        }
        Err(e) => Err(e),
    }
}

fn scale_sweep(ctx: &Ctx) -> Result<Outcome> {
    let model = ctx.model()?;
    let rows = eval::scale_sweep(&model, &ctx.sweep_data()?, &ctx.cfg.eval.grid_sizes, &ctx.eval_options("sweep"))?;
    eval::write_metrics(ctx.out("scale_sweep.csv"), &rows)?;
    Ok(Outcome::Ok)
}

fn context_sweep(ctx: &Ctx) -> Result<Outcome> {
    let model = ctx.model()?;
    let sweep = ctx.sweep_data()?;
    let data = sweep.generate(&vec![ctx.cfg.data.grid; sweep.family.dims()])?;
    let rows = eval::context_sweep(&model, &data, &ctx.cfg.eval.context_lengths, &ctx.eval_options("context"))?;
    eval::write_metrics(ctx.out("context_sweep.csv"), &rows)?;
    Ok(Outcome::Ok)
}

fn probe(ctx: &Ctx, kind: ProbeKind) -> Result<Outcome> {
    let seed = ctx.seed();
    match kind {
        ProbeKind::Physics => {
            let data: Vec<Trajectory> = match &ctx.cfg.eval.manifest {
                Some(_) => ctx.manifest()?,
                None => ctx.cfg.data.specs().iter().map(gen_trajectory).collect::<Result<_>>()?,
            };
            let (samples, families) = align_samples(&data)?;
            let features = samples
                .iter()
                .map(|s| {
                    let sel = ctx.cfg.aligner.selection(s.u_t0.dims())?;
                    Ok(aligner::physics_features(&s.u_t0, &s.u_ti, &sel, ctx.cfg.aligner.eps_m)?.pooled())
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let report = aligner::classify_probe(&features, &labels, seed)?;
            let names: Vec<String> = families.iter().map(|f| f.to_string()).collect();
            aligner::write_confusion_csv(ctx.out("confusion.csv"), &report, &names)?;
            ctx.write_json(
                "probe_report.json",
                &json!({"accuracy": report.accuracy, "train": report.train_size, "test": report.test_size}),
            )?;
            info!("probe accuracy {:.3}", report.accuracy);
        }
        ProbeKind::Inverse => {
            let model = ctx.model()?;
            let data = match &ctx.cfg.eval.manifest {
                Some(_) => ctx.data(false)?,
                None => {
                    let sweep = ctx.sweep_data()?;
                    sweep.generate(&vec![ctx.cfg.data.grid; sweep.family.dims()])?
                }
            };
            let coef = &ctx.cfg.eval.coefficient;
            let report = eval::inverse_probe(&model, &data, coef, seed)?;
            let features: Vec<Vec<f64>> =
                data.iter().map(|t| eval::hidden_features(&model, &t.field)).collect::<Result<_>>()?;
            let mut shuffled: Vec<f64> = data.iter().map(|t| t.spec.coefficient(coef)).collect::<Result<_>>()?;
            {
                use rand::seq::SliceRandom;
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            }
            let control = eval::ridge_probe(&features, &shuffled, 1e-3, seed)?;
            ctx.write_json(
                "inverse_report.json",
                &json!({"coefficient": coef, "report": report, "shuffled_control": control}),
            )?;
            info!("inverse probe R² {:.3} (shuffled {:.3})", report.r2, control.r2);
        }
    }
    Ok(Outcome::Ok)
}

fn selftest(ctx: &Ctx) -> Result<Outcome> {
    let results = run_selftest(ctx.seed());
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    let rows: Vec<(String, bool, String)> =
        results.iter().map(|r| (r.name.clone(), r.passed, r.detail.clone())).collect();
    archive::write_csv(ctx.out("selftest.csv"), &["check", "passed", "detail"], &rows)?;
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Failed(format!("selftest failures: {}", failed.join(", "))))
    }
}
