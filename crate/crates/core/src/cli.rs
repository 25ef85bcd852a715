//! The `jobvs` command-line front end.
//!
//! Every subcommand can read an [`ExperimentConfig`] JSON file; flags given on
//! the command line override the corresponding config fields.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{read_cohort, read_manifest, write_cohort};
use crate::error::{Error, Result};
use crate::inference::{apply_brain_mask, binarize, evaluate_modes, masking_invariant_holds, predict_image, EvalMode};
use crate::metrics::{evaluate_subject, MetricsReport};
use crate::model::TaskMode;
use crate::phantom::{generate_cohort, PhantomConfig};
use crate::render::render_mips;
use crate::training::{make_folds, train, TrainConfig};
use crate::volume::{compute_cohort_stats, load_volume, save_volume, Volume};

/// Everything needed to reproduce an experiment from one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub eval_modes: Vec<EvalMode>,
    /// Fractional overlap of inference tiles.
    pub overlap: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: None,
            train: TrainConfig::default(),
            phantom: PhantomConfig::default(),
            eval_modes: vec![EvalMode::BM, EvalMode::NBM],
            overlap: crate::inference::DEFAULT_OVERLAP,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; schema violations name the offending field path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("field `{}`: {}", e.path(), e.inner())))
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Parser)]
#[command(name = "jobvs", version, about = "Joint brain and vessel segmentation of 3D angiography volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with brain and vessel ground truth
    Phantom(PhantomArgs),
    /// Compute intensity and spacing statistics of a cohort
    Stats(StatsArgs),
    /// Train a model on one or all cross-validation folds
    Train(TrainArgs),
    /// Evaluate trained checkpoints on their held-out folds
    Eval(EvalArgs),
    /// Predict brain and vessel probabilities for one volume
    Infer(InferArgs),
    /// Write maximum-intensity projections with a mask overlay
    Render(RenderArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Experiment config; its `phantom` section sets the generator
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of subjects
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic grid size in voxels
    #[arg(long, default_value_t = PhantomConfig::default().size)]
    size: usize,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = PhantomConfig::default().noise_std)]
    noise: f64,
    /// Output cohort directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort directory (overrides `data_dir`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Restrict to the training subjects of this fold
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 2)]
    n_folds: usize,
    /// Fold shuffling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file [default: <data>/stats.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_task_mode(s: &str) -> std::result::Result<TaskMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown task mode {s:?} (expected joint, vessel_only or brain_only)"))
}

/// Accepts plain numbers and fractions such as `8/255`.
fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once('/') {
        Some((a, b)) => Ok(num(a)? / num(b)?),
        None => num(s),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort directory (overrides `data_dir`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; each fold writes to `<out>/fold<k>` [default: runs]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Train every fold in turn
    #[arg(long)]
    all_folds: bool,
    #[arg(long, default_value_t = 2)]
    n_folds: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Maximum number of base-stage epochs
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    steps_per_epoch: usize,
    /// joint, vessel_only or brain_only
    #[arg(long, default_value = "joint", value_parser = parse_task_mode)]
    task_mode: TaskMode,
    /// Brain loss weight
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Vessel loss weight
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Fine-tune the best base model with free adversarial training
    #[arg(long)]
    at: bool,
    /// Perturbation bound (L-infinity, normalized intensity units)
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    epsilon: f64,
    /// Replays per minibatch during adversarial fine-tuning
    #[arg(long, default_value_t = 5)]
    replays: usize,
    #[arg(long, default_value_t = 100)]
    at_epochs: usize,
    /// Number of lattice columns after the first
    #[arg(long, default_value_t = 2)]
    lattice_length: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    /// Cubic training patch edge in voxels
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort directory (overrides `data_dir`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate on its held-out subjects; repeat for several folds
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Run directory whose `fold*/best.ckpt` files are all evaluated
    #[arg(long)]
    run: Option<PathBuf>,
    /// Evaluation mode; repeat for several
    #[arg(long, default_values_t = [EvalMode::BM, EvalMode::NBM])]
    mode: Vec<EvalMode>,
    #[arg(long, default_value_t = crate::inference::DEFAULT_OVERLAP)]
    overlap: f64,
    /// Row label of the markdown table
    #[arg(long, default_value = "model")]
    label: String,
    /// Directory for metrics.json and metrics.md [default: the run directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output prefix; writes `<out>_{vessel,brain}_{prob,mask}.nii.gz`
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = crate::inference::DEFAULT_OVERLAP)]
    overlap: f64,
    /// Binarization threshold for the masks
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Zero vessel probabilities outside the predicted brain mask
    #[arg(long)]
    brain_mask: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    image: PathBuf,
    /// Mask or probability volume to overlay (binarized at 0.5)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output prefix; writes `<out>_axis{0,1,2}.png`
    #[arg(long)]
    out: PathBuf,
}

/// True when the user set the flag explicitly.
fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

fn set<T: Clone>(m: &ArgMatches, id: &str, slot: &mut T, value: &T) {
    if given(m, id) {
        *slot = value.clone();
    }
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(&a, sub),
        Command::Stats(a) => cmd_stats(&a, sub),
        Command::Train(a) => cmd_train(&a, sub),
        Command::Eval(a) => cmd_eval(&a, sub),
        Command::Infer(a) => cmd_infer(&a),
        Command::Render(a) => cmd_render(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn data_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no cohort directory: pass --data or set `data_dir`".into()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_phantom(a: &PhantomArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(a.config.as_deref())?.phantom;
    set(m, "seed", &mut cfg.seed, &a.seed);
    set(m, "size", &mut cfg.size, &a.size);
    set(m, "noise", &mut cfg.noise_std, &a.noise);
    cfg.validate()?;
    let cohort = generate_cohort(&cfg, a.n)?;
    write_cohort(&a.out, &cohort, serde_json::json!({ "phantom": cfg }))?;
    log::info!("wrote {} phantom subjects to {}", cohort.len(), a.out.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs, _m: &ArgMatches) -> Result<()> {
    let cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let data = data_dir(&a.data, &cfg)?;
    let ids = match a.fold {
        Some(k) => {
            let folds = make_folds(&read_manifest(&data)?.ids(), a.n_folds, a.seed)?;
            let f = folds
                .into_iter()
                .find(|f| f.fold_id == k)
                .ok_or_else(|| Error::Config(format!("fold {k} out of range for {} folds", a.n_folds)))?;
            Some(f.train)
        }
        None => None,
    };
    let cohort = read_cohort(&data, ids.as_deref())?;
    let stats = compute_cohort_stats(&cohort)?;
    let out = a.out.clone().unwrap_or_else(|| data.join("stats.json"));
    write_json(&out, &stats)?;
    log::info!("cohort statistics of {} subjects written to {}", cohort.len(), out.display());
    Ok(())
}

fn apply_train_overrides(a: &TrainArgs, m: &ArgMatches, t: &mut TrainConfig) {
    set(m, "fold", &mut t.fold, &a.fold);
    set(m, "n_folds", &mut t.n_folds, &a.n_folds);
    set(m, "lr", &mut t.lr0, &a.lr);
    set(m, "weight_decay", &mut t.weight_decay, &a.weight_decay);
    set(m, "batch_size", &mut t.batch_size, &a.batch_size);
    set(m, "epochs", &mut t.max_epochs, &a.epochs);
    set(m, "steps_per_epoch", &mut t.steps_per_epoch, &a.steps_per_epoch);
    set(m, "task_mode", &mut t.task_mode, &a.task_mode);
    set(m, "alpha", &mut t.loss_weights.alpha, &a.alpha);
    set(m, "beta", &mut t.loss_weights.beta, &a.beta);
    if a.at {
        t.at.enabled = true;
    }
    set(m, "epsilon", &mut t.at.epsilon, &a.epsilon);
    set(m, "replays", &mut t.at.n_replays, &a.replays);
    set(m, "at_epochs", &mut t.at.epochs, &a.at_epochs);
    set(m, "lattice_length", &mut t.model.lattice_length, &a.lattice_length);
    set(m, "base_channels", &mut t.model.base_channels, &a.base_channels);
    set(m, "patch_size", &mut t.model.patch_size, &[a.patch_size; 3]);
    set(m, "seed", &mut t.seed, &a.seed);
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    apply_train_overrides(a, m, &mut cfg.train);
    cfg.train.validate()?;
    let data = data_dir(&a.data, &cfg)?;
    let out = a.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    cfg.data_dir = Some(data.clone());
    cfg.out_dir = Some(out.clone());

    let cohort = read_cohort(&data, None)?;
    let ids: Vec<String> = cohort.iter().map(|r| r.id.clone()).collect();
    let folds = make_folds(&ids, cfg.train.n_folds, cfg.train.seed)?;
    let selected: Vec<_> = folds.into_iter().filter(|f| a.all_folds || f.fold_id == cfg.train.fold).collect();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("experiment.json"), &cfg)?;
    for split in &selected {
        let fold_cfg = TrainConfig {
            fold: split.fold_id,
            ..cfg.train.clone()
        };
        let dir = out.join(format!("fold{}", split.fold_id));
        log::info!(
            "training fold {} on {} subjects ({} held out) into {}",
            split.fold_id,
            split.train.len(),
            split.test.len(),
            dir.display()
        );
        let outcome = train(&fold_cfg, &cohort, split, Some(&dir))?;
        println!(
            "fold {}: {} (checksum {})",
            split.fold_id,
            dir.join("best.ckpt").display(),
            outcome.best.checksum()
        );
    }
    Ok(())
}

/// `fold*/best.ckpt` files under `run`, in fold order.
fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(run)
        .map_err(|e| Error::io(run, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let k = name.strip_prefix("fold")?.parse::<usize>().ok()?;
            let ck = e.path().join("best.ckpt");
            ck.is_file().then_some((k, ck))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Empty(format!("no fold*/best.ckpt under {}", run.display())));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn held_out(ck: &Checkpoint, path: &Path) -> Result<(usize, Vec<String>)> {
    let bad = || Error::Format {
        path: path.to_path_buf(),
        reason: "checkpoint metadata lacks `fold` and `test_ids`".into(),
    };
    let fold = ck.meta.get("fold").and_then(|v| v.as_u64()).ok_or_else(bad)? as usize;
    let ids: Vec<String> = serde_json::from_value(ck.meta.get("test_ids").cloned().ok_or_else(bad)?)?;
    Ok((fold, ids))
}

fn cmd_eval(a: &EvalArgs, m: &ArgMatches) -> Result<()> {
    let cfg = ExperimentConfig::load_or_default(a.config.as_deref())?;
    let data = data_dir(&a.data, &cfg)?;
    let mut modes = if given(m, "mode") { a.mode.clone() } else { cfg.eval_modes.clone() };
    modes.sort();
    modes.dedup();
    let overlap = if given(m, "overlap") { a.overlap } else { cfg.overlap };
    let mut paths = a.checkpoint.clone();
    if let Some(run) = &a.run {
        paths.extend(run_checkpoints(run)?);
    }
    if paths.is_empty() {
        return Err(Error::Config("nothing to evaluate: pass --checkpoint or --run".into()));
    }
    let out = a
        .out
        .clone()
        .or_else(|| a.run.clone())
        .or_else(|| paths[0].parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));

    let mut subjects = Vec::new();
    for path in &paths {
        let ck = Checkpoint::load(path)?;
        let (fold, ids) = held_out(&ck, path)?;
        log::info!("evaluating {} on {} held-out subjects of fold {fold}", path.display(), ids.len());
        for rec in read_cohort(&data, Some(&ids))? {
            let pred = evaluate_modes(&ck.model, ck.stats.as_ref(), &rec, overlap)?;
            if !masking_invariant_holds(&pred.nbm, &pred.bm, &pred.mask) {
                return Err(Error::Numerical(format!("{}: BM prediction differs from masked NBM", rec.id)));
            }
            for &mode in &modes {
                let p = match mode {
                    EvalMode::BM => &pred.bm,
                    EvalMode::NBM => &pred.nbm,
                };
                subjects.push(evaluate_subject(p, &rec, fold, mode)?);
            }
        }
    }
    let report = MetricsReport::from_subjects(subjects)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("metrics.json"), &report)?;
    let md = report.to_markdown(&a.label);
    fs::write(out.join("metrics.md"), &md).map_err(|e| Error::io(out.join("metrics.md"), e))?;
    print!("{md}");
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let image = load_volume(&a.image)?;
    let mut pred = predict_image(&ck.model, ck.stats.as_ref(), &image, a.overlap)?;
    if a.brain_mask {
        let brain = pred
            .brain
            .as_ref()
            .ok_or_else(|| Error::Config("--brain-mask needs a model with a brain head".into()))?;
        pred = apply_brain_mask(&pred, &binarize(brain, 0.5))?;
    }
    let prefix = a.out.to_string_lossy().into_owned();
    if let Some(dir) = Path::new(&prefix).parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write = |name: &str, prob: &Option<Volume>| -> Result<()> {
        if let Some(p) = prob {
            save_volume(p, format!("{prefix}_{name}_prob.nii.gz"))?;
            save_volume(&binarize(p, a.threshold), format!("{prefix}_{name}_mask.nii.gz"))?;
        }
        Ok(())
    };
    write("vessel", &pred.vessel)?;
    write("brain", &pred.brain)?;
    log::info!("wrote predictions with prefix {prefix}");
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let image = load_volume(&a.image)?;
    let mask = a.mask.as_ref().map(load_volume).transpose()?.map(|m| binarize(&m, 0.5));
    if let Some(m) = &mask {
        if m.shape() != image.shape() {
            return Err(Error::shape(image.shape(), m.shape()));
        }
    }
    for p in render_mips(&image, mask.as_ref(), &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}
