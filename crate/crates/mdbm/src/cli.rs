//! Command-line entry points: `train`, `infer`, `compare`, `check`,
//! `rbm-train`, `rbm-infer`. Runs are driven by a declarative TOML file
//! with command-line overrides; every artifact (checkpoints, CSV metrics,
//! PGM image grids) lands in the chosen output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, MaskPolicy, RawImageSet};
use crate::error::{Error, Result};
use crate::meanfield::{self, InferenceMethod, SolverConfig};
use crate::model::{Arch, MaskedSample, MdbmModel};
use crate::rbm::DeepRbm;
use crate::train::{self, LossConfig, Optimizer};
use crate::verify;

#[derive(Parser)]
#[command(
    name = "mdbm",
    about = "Monotone deep Boltzmann machines: train, infer, compare inference rules, verify"
)]
struct Cli {
    /// Thread cap for batch-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leave wall-time columns empty in CSV outputs (for bitwise
    /// reproducibility checks).
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Impute hidden pixels and classify with a trained checkpoint.
    Infer(InferArgs),
    /// Compare inference update rules on one checkpoint.
    Compare(CompareArgs),
    /// Run the full property/oracle suite; exits nonzero on any failure.
    Check(CheckArgs),
    /// Train the deep RBM baseline.
    RbmTrain(RbmTrainArgs),
    /// Impute and classify with a trained RBM checkpoint.
    RbmInfer(RbmInferArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Declarative run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Damping parameter override.
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable the monotone parameterization (lifts normalization).
    #[arg(long)]
    no_monotone: bool,
    /// Mask policy override: bernoulli:P, patch:S or tophalf.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "bernoulli:0.6")]
    mask: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "bernoulli:0.6")]
    mask: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Reduced sample counts (seconds instead of minutes).
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct RbmTrainArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 300)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RbmInferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "bernoulli:0.6")]
    mask: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    bins: usize,
    #[arg(long, default_value_t = 1000)]
    mf_steps: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Declarative training configuration; every field has a default so a
/// minimal file (or none at all, for synthetic data) works.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub mask: String,
    pub train: TrainConfig,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// IDX files; when absent, a deterministic synthetic digit corpus is
    /// generated under the output directory.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub bins: usize,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            bins: 4,
            limit_train: None,
            limit_test: None,
            synthetic_train: 10_000,
            synthetic_test: 2_000,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// `digits-default` or `digits-halved`.
    pub preset: String,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            preset: "digits-halved".to_string(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub task_weight: f64,
    pub class_weight_beta: f64,
    pub monotone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 0.001,
            task_weight: 0.5,
            class_weight_beta: 0.9999,
            monotone: true,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: 1,
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            mask: "bernoulli:0.6".to_string(),
            train: TrainConfig::default(),
            solver: SolverConfig::training(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if cfg.version != 1 {
            return Err(Error::config(format!(
                "{}: unsupported config version {}",
                path.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        MaskPolicy::parse(&self.mask)?;
        self.solver.validate()?;
        if self.data.bins < 2 {
            return Err(Error::config("data.bins must be at least 2"));
        }
        for p in [
            &self.data.train_images,
            &self.data.train_labels,
            &self.data.test_images,
            &self.data.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::config(format!("missing data file {}", p.display())));
            }
        }
        Ok(())
    }

    fn arch(&self) -> Result<Arch> {
        match self.arch.preset.as_str() {
            "digits-default" => Ok(Arch::digits_default(self.data.bins)),
            "digits-halved" => Ok(Arch::digits_halved(self.data.bins)),
            other => Err(Error::config(format!(
                "unknown architecture preset '{other}' (digits-default | digits-halved)"
            ))),
        }
    }
}

pub fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            std::process::exit(2);
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let code = match run(cli.command, !cli.no_timing) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}

fn run(command: Command, with_time: bool) -> Result<i32> {
    match command {
        Command::Train(args) => cmd_train(args, with_time),
        Command::Infer(args) => cmd_infer(args, with_time),
        Command::Compare(args) => cmd_compare(args, with_time),
        Command::Check(args) => cmd_check(args),
        Command::RbmTrain(args) => cmd_rbm_train(args, with_time),
        Command::RbmInfer(args) => cmd_rbm_infer(args),
    }
}

/// Load the configured dataset pair, or synthesize one into `out/data`.
fn load_dataset(cfg: &RunConfig) -> Result<(RawImageSet, RawImageSet)> {
    let (train, test) = match (&cfg.data.train_images, &cfg.data.train_labels) {
        (Some(ti), Some(tl)) => {
            let train = RawImageSet::load(ti, tl)?;
            let test = match (&cfg.data.test_images, &cfg.data.test_labels) {
                (Some(i), Some(l)) => RawImageSet::load(i, l)?,
                _ => {
                    return Err(Error::config(
                        "test_images/test_labels are required when training data is given",
                    ))
                }
            };
            (train, test)
        }
        _ => {
            let dir = cfg.out.join("data");
            let paths = data::synth::write_corpus(
                &dir,
                cfg.data.synthetic_train,
                cfg.data.synthetic_test,
                28,
                cfg.seed ^ 0x57a7,
            )?;
            (
                RawImageSet::load(&paths[0], &paths[1])?,
                RawImageSet::load(&paths[2], &paths[3])?,
            )
        }
    };
    let mut train = train;
    let mut test = test;
    if let Some(n) = cfg.data.limit_train {
        train.truncate(n);
    }
    if let Some(n) = cfg.data.limit_test {
        test.truncate(n);
    }
    Ok((train, test))
}

fn cmd_train(args: TrainArgs, with_time: bool) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(alpha) = args.alpha {
        cfg.solver.alpha = alpha;
    }
    if args.no_monotone {
        cfg.train.monotone = false;
    }
    if let Some(mask) = args.mask {
        cfg.mask = mask;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    // resolved configuration is part of the run artifacts
    let resolved = toml::to_string_pretty(&cfg).map_err(|e| Error::config(e.to_string()))?;
    fs::write(cfg.out.join("config.toml"), resolved)?;

    let (train_set, test_set) = load_dataset(&cfg)?;
    let outcome = train_model(&cfg, &train_set, &test_set, with_time, &mut |line| {
        println!("{line}");
    })?;
    println!(
        "final: test accuracy {:.4}, imputation error {:.3}",
        outcome.test_accuracy, outcome.imputation_error
    );
    Ok(0)
}

/// Everything `train` produces, reused by the acceptance harness.
pub struct TrainOutcome {
    pub model: MdbmModel,
    pub epoch_metrics: Vec<train::EpochMetrics>,
    pub test_accuracy: f64,
    pub imputation_error: f64,
    pub checkpoint: PathBuf,
}

pub fn train_model(
    cfg: &RunConfig,
    train_set: &RawImageSet,
    test_set: &RawImageSet,
    with_time: bool,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let arch = cfg.arch()?;
    let mut model = MdbmModel::init(&arch, cfg.seed, cfg.train.monotone)?;
    let mut opt = Optimizer::new(&model, cfg.train.learning_rate);
    let loss_cfg = LossConfig {
        class_weight_beta: cfg.train.class_weight_beta,
        task_weight: cfg.train.task_weight,
    };
    let policy = MaskPolicy::parse(&cfg.mask)?;
    let mut metrics_file = fs::File::create(cfg.out.join("metrics.csv"))?;
    writeln!(metrics_file, "{}", train::EpochMetrics::csv_header())?;
    let mut epoch_metrics = Vec::new();
    for epoch in 0..cfg.train.epochs {
        // masks are resampled every epoch
        let mask_seed = cfg.seed.wrapping_add(1 + epoch as u64).wrapping_mul(0x9e37_79b9);
        let samples =
            data::make_masked_samples(train_set, cfg.data.bins, &model, policy, mask_seed)?;
        let m = train::train_epoch(
            &mut model,
            &samples,
            cfg.train.batch_size,
            &cfg.solver,
            &loss_cfg,
            &mut opt,
            epoch,
        )?;
        log(&format!(
            "epoch {epoch}: loss {:.4} acc {:.3} fwd {:.2} bwd {:.2} ({:.1}s)",
            m.mean_loss, m.accuracy, m.mean_fwd_iters, m.mean_bwd_iters, m.wall_time_s
        ));
        writeln!(metrics_file, "{}", m.csv_row(with_time))?;
        epoch_metrics.push(m);
    }
    let checkpoint = cfg.out.join("checkpoint.mdbm");
    data::save_checkpoint(&model, &checkpoint)?;

    let eval = evaluate_model(
        &model,
        test_set,
        cfg.data.bins,
        MaskPolicy::parse(&cfg.mask)?,
        cfg.seed ^ 0x7e57,
        &cfg.solver,
    )?;
    let mut eval_file = fs::File::create(cfg.out.join("eval.csv"))?;
    writeln!(eval_file, "samples,accuracy,imputation_error")?;
    writeln!(
        eval_file,
        "{},{:.6},{:.6}",
        test_set.count, eval.0, eval.1
    )?;
    Ok(TrainOutcome {
        model,
        epoch_metrics,
        test_accuracy: eval.0,
        imputation_error: eval.1,
        checkpoint,
    })
}

/// Classification accuracy and Table-1-protocol imputation error over a
/// test set.
pub fn evaluate_model(
    model: &MdbmModel,
    test_set: &RawImageSet,
    bins: usize,
    policy: MaskPolicy,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(f64, f64)> {
    let samples = data::make_masked_samples(test_set, bins, model, policy, seed)?;
    let mut correct = 0usize;
    let mut err_acc = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let pred = model.predict(s, solver)?;
        if let Some(probs) = &pred.label_distribution {
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if argmax == test_set.labels[i] as usize {
                correct += 1;
            }
        }
        let recon = data::reconstruction_bins(model, &pred.marginals);
        let truth = data::true_bins(test_set, i, bins)?;
        err_acc += data::imputation_error(&recon, &truth, bins, None)?;
    }
    Ok((
        correct as f64 / samples.len() as f64,
        err_acc / samples.len() as f64,
    ))
}

fn cmd_infer(args: InferArgs, with_time: bool) -> Result<i32> {
    let _ = with_time;
    let model = data::load_checkpoint(&args.checkpoint)?;
    let mut set = RawImageSet::load(&args.images, &args.labels)?;
    if let Some(n) = args.limit {
        set.truncate(n);
    }
    let layout = model.weights.layout();
    let spec = &layout.layers()[model.arch.pixel_layer];
    let bins = spec.cardinality();
    let policy = MaskPolicy::parse(&args.mask)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("infer-out"));
    fs::create_dir_all(&out)?;
    let samples = data::make_masked_samples(&set, bins, &model, policy, args.seed)?;
    let solver = SolverConfig::verification().with_tol(1e-4);

    let mut metrics = fs::File::create(out.join("metrics.csv"))?;
    writeln!(metrics, "sample,label,predicted,correct,imputation_error")?;
    let mut observed_imgs = Vec::new();
    let mut imputed_imgs = Vec::new();
    let mut original_imgs = Vec::new();
    let mut correct = 0usize;
    let mut err_acc = 0.0;
    let to_u8 = |bin: usize| ((bin as f64 + 0.5) / bins as f64 * 255.0).round() as u8;
    for (i, s) in samples.iter().enumerate() {
        let pred = model.predict(s, &solver)?;
        let recon = data::reconstruction_bins(&model, &pred.marginals);
        let truth = data::true_bins(&set, i, bins)?;
        let hidden = data::hidden_pixel_flags(&model, &s.mask);
        let err = data::imputation_error(&recon, &truth, bins, None)?;
        err_acc += err;
        let predicted = pred
            .label_distribution
            .as_ref()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap_or(0)
            })
            .unwrap_or(0);
        let is_correct = predicted == set.labels[i] as usize;
        if is_correct {
            correct += 1;
        }
        writeln!(
            metrics,
            "{i},{},{predicted},{},{:.6}",
            set.labels[i], is_correct as u8, err
        )?;
        if i < 64 {
            original_imgs.push(truth.iter().map(|&b| to_u8(b)).collect::<Vec<u8>>());
            observed_imgs.push(
                truth
                    .iter()
                    .zip(&hidden)
                    .map(|(&b, &h)| if h { 32u8 } else { to_u8(b) })
                    .collect::<Vec<u8>>(),
            );
            imputed_imgs.push(recon.iter().map(|&b| to_u8(b)).collect::<Vec<u8>>());
        }
    }
    let (w, h) = (spec.width, spec.height);
    data::pgm::write_pgm_grid(&out.join("original.pgm"), &original_imgs, w, h, 8)?;
    data::pgm::write_pgm_grid(&out.join("observed.pgm"), &observed_imgs, w, h, 8)?;
    data::pgm::write_pgm_grid(&out.join("imputed.pgm"), &imputed_imgs, w, h, 8)?;
    println!(
        "{} samples: accuracy {:.4}, mean imputation error {:.3}",
        samples.len(),
        correct as f64 / samples.len() as f64,
        err_acc / samples.len() as f64
    );
    Ok(0)
}

fn cmd_compare(args: CompareArgs, with_time: bool) -> Result<i32> {
    let model = data::load_checkpoint(&args.checkpoint)?;
    let mut set = RawImageSet::load(&args.images, &args.labels)?;
    set.truncate(args.samples);
    let bins = model.weights.layout().layers()[model.arch.pixel_layer].cardinality();
    let policy = MaskPolicy::parse(&args.mask)?;
    let samples = data::make_masked_samples(&set, bins, &model, policy, args.seed)?;
    let methods = [
        InferenceMethod::Ours,
        InferenceMethod::Baque,
        InferenceMethod::Cccp,
        InferenceMethod::FrankWolfe(0.7),
    ];
    let metrics = meanfield::compare_inference(&model, &samples, &methods, args.budget, args.tol)?;
    let mut lines = vec![meanfield::MethodMetrics::csv_header().to_string()];
    for m in &metrics {
        lines.push(m.csv_row(with_time));
    }
    let text = lines.join("\n");
    println!("{text}");
    if let Some(out) = args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, format!("{text}\n"))?;
    }
    Ok(0)
}

fn cmd_check(args: CheckArgs) -> Result<i32> {
    let results = verify::run_all(args.quick);
    let mut failed = 0usize;
    for r in &results {
        println!(
            "{} {:<28} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_rbm_train(args: RbmTrainArgs, with_time: bool) -> Result<i32> {
    let mut set = RawImageSet::load(&args.images, &args.labels)?;
    if let Some(n) = args.limit {
        set.truncate(n);
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("rbm-out"));
    fs::create_dir_all(&out)?;
    let (rbm, log) = train_rbm(
        &set,
        args.hidden,
        args.epochs,
        args.batch_size,
        args.learning_rate,
        args.seed,
    )?;
    let mut f = fs::File::create(out.join("metrics.csv"))?;
    writeln!(f, "epoch,reconstruction_error,wall_time_s")?;
    for (epoch, (err, secs)) in log.iter().enumerate() {
        let t = if with_time {
            format!("{secs:.3}")
        } else {
            String::new()
        };
        writeln!(f, "{epoch},{err:.6},{t}")?;
        println!("epoch {epoch}: reconstruction error {err:.4}");
    }
    data::save_rbm_checkpoint(&rbm, &out.join("checkpoint.rbm"))?;
    Ok(0)
}

/// CD-1 training of the layered baseline on binarized pixels with the label
/// layer clamped; returns the model and per-epoch reconstruction errors.
pub fn train_rbm(
    set: &RawImageSet,
    hidden: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(DeepRbm, Vec<(f64, f64)>)> {
    use rand::SeedableRng;
    let n_vis = set.height * set.width;
    let mut rbm = DeepRbm::init(&[n_vis, hidden, set.num_classes.max(2)], seed)?;
    let binarized: Vec<Vec<f64>> = (0..set.count)
        .map(|i| {
            set.image(i)
                .iter()
                .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcd1);
    let mut log = Vec::new();
    for _epoch in 0..epochs {
        let t = std::time::Instant::now();
        for (ci, chunk) in binarized.chunks(batch_size).enumerate() {
            let labels =
                &set.labels[ci * batch_size..(ci * batch_size + chunk.len()).min(set.count)];
            rbm.cd_k_update(chunk, Some(labels), 1, learning_rate, &mut rng)?;
        }
        let err = rbm.reconstruction_error(&binarized[..binarized.len().min(512)])?;
        log.push((err, t.elapsed().as_secs_f64()));
    }
    Ok((rbm, log))
}

/// RBM evaluation under the shared comparison protocol: block mean-field
/// with observed binarized pixels clamped, outputs bucketized into `bins`.
pub fn evaluate_rbm(
    rbm: &DeepRbm,
    set: &RawImageSet,
    bins: usize,
    policy: MaskPolicy,
    seed: u64,
    mf_steps: usize,
) -> Result<(f64, f64)> {
    // reuse the model-side masking machinery by drawing pixel masks from a
    // disposable layout-compatible model
    let arch = Arch::conv_stack(set.height, set.width, 2, set.num_classes.max(2), 2, 2)?;
    let probe = MdbmModel::init(&arch, 0, false)?;
    let mut correct = 0usize;
    let mut err_acc = 0.0;
    for i in 0..set.count {
        let mask = data::make_mask(&probe, policy, seed.wrapping_add(i as u64))?;
        let hidden = data::hidden_pixel_flags(&probe, &mask);
        let img = set.image(i);
        let observed: Vec<Option<f64>> = img
            .iter()
            .zip(&hidden)
            .map(|(&v, &h)| {
                if h {
                    None
                } else {
                    Some(if v >= 0.5 { 1.0 } else { 0.0 })
                }
            })
            .collect();
        let (visible, top) = rbm.impute_and_classify(&observed, mf_steps, 1e-6)?;
        let buckets = data::bucketize_rbm_output(&visible, bins)?;
        let truth = data::true_bins(set, i, bins)?;
        err_acc += data::imputation_error(&buckets, &truth, bins, None)?;
        let argmax = top
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if argmax == set.labels[i] as usize {
            correct += 1;
        }
    }
    Ok((
        correct as f64 / set.count as f64,
        err_acc / set.count as f64,
    ))
}

fn cmd_rbm_infer(args: RbmInferArgs) -> Result<i32> {
    let rbm = data::load_rbm_checkpoint(&args.checkpoint)?;
    let mut set = RawImageSet::load(&args.images, &args.labels)?;
    if let Some(n) = args.limit {
        set.truncate(n);
    }
    let policy = MaskPolicy::parse(&args.mask)?;
    let (acc, err) = evaluate_rbm(&rbm, &set, args.bins, policy, args.seed, args.mf_steps)?;
    println!(
        "{} samples: accuracy {:.4}, mean imputation error {:.3}",
        set.count, acc, err
    );
    if let Some(out) = args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, format!("samples,accuracy,imputation_error\n{},{acc:.6},{err:.6}\n", set.count))?;
    }
    Ok(0)
}
