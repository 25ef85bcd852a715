//! Optimization loop, schedules, cross-validation folds and the ablation grid.

mod optim;
mod sampling;
mod step;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{free_at_epoch, ATConfig, Perturbation};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{build_model, LatticeConfig, ModelParams, TaskMode};
use crate::objective::{JointLoss, LossWeights};
use crate::volume::{compute_cohort_stats, preprocess, CohortStats, SubjectRecord};

pub use optim::Adam;
pub use sampling::{
    augment, crop, flip, patch_start, rotate90, sample_patch, sample_patch_from, vessel_voxels, AugmentConfig,
    PatchTriple,
};
pub use step::Trainer;

/// Environment variable capping the number of patch prefetch workers.
pub const NUM_WORKERS_ENV: &str = "JOBVS_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Training stops once the scheduled learning rate drops below this value.
    pub lr_floor: f64,
    pub n_folds: usize,
    pub fold: usize,
    pub task_mode: TaskMode,
    pub loss_weights: LossWeights,
    pub at: ATConfig,
    pub seed: u64,
    /// Architecture; its `task_mode` is replaced by the top-level one.
    pub model: LatticeConfig,
    /// Probability that a patch is centred on a vessel voxel.
    pub fg_bias: f64,
    pub augment: AugmentConfig,
    /// Fraction of the training fold held out for checkpoint selection.
    pub val_fraction: f64,
    /// Fixed validation patches drawn per held-out subject.
    pub val_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 1e-5,
            max_epochs: 1000,
            steps_per_epoch: 50,
            batch_size: 1,
            lr_floor: 1e-6,
            n_folds: 2,
            fold: 0,
            task_mode: TaskMode::Joint,
            loss_weights: LossWeights::default(),
            at: ATConfig::default(),
            seed: 0,
            model: LatticeConfig::default(),
            fg_bias: 0.5,
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            val_patches: 4,
        }
    }
}

impl TrainConfig {
    pub fn lattice(&self) -> LatticeConfig {
        LatticeConfig {
            task_mode: self.task_mode,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr_floor > 0.0 && self.lr0 > self.lr_floor) {
            return bad(format!("need lr0 > lr_floor > 0, got lr0={} lr_floor={}", self.lr0, self.lr_floor));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.max_epochs < 1 || self.steps_per_epoch < 1 {
            return bad("max_epochs and steps_per_epoch must be >= 1".into());
        }
        if self.n_folds < 1 || self.fold >= self.n_folds {
            return bad(format!("fold {} out of range for n_folds {}", self.fold, self.n_folds));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return bad("fg_bias must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)".into());
        }
        self.loss_weights.validate()?;
        self.at.validate()?;
        self.lattice().validate()
    }
}

/// Polynomial decay `lr0 * (1 - epoch / max_epochs)^0.9`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    poly(cfg.lr0, epoch, cfg.max_epochs)
}

fn poly(lr0: f64, epoch: usize, max_epochs: usize) -> f64 {
    let frac = (epoch as f64 / max_epochs as f64).min(1.0);
    lr0 * (1.0 - frac).powf(0.9)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles ids with `seed` and cuts them into `k` near-equal test folds.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 1 || ids.len() < k {
        return Err(Error::Config(format!("cannot split {} subjects into {k} folds", ids.len())));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for fold_id in 0..k {
        let size = base + usize::from(fold_id < extra);
        let test = order[at..at + size].to_vec();
        let train = order[..at].iter().chain(&order[at + size..]).cloned().collect();
        folds.push(FoldSplit { fold_id, train, test });
        at += size;
    }
    Ok(folds)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_brain: Option<f64>,
    pub loss_vessel: Option<f64>,
    pub val_loss: Option<f64>,
    pub seed: u64,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss checkpoint (of the fine-tuning stage when enabled).
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Epoch at which the learning-rate floor stopped the base stage, if it did.
    pub early_stop_epoch: Option<usize>,
}

/// Number of prefetch workers from the environment, defaulting to the available cores.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Prepared {
    records: Vec<SubjectRecord>,
    vessels: Vec<Vec<[usize; 3]>>,
}

/// Everything the epoch loop needs besides the model.
struct Session<'a> {
    cfg: &'a TrainConfig,
    train: Prepared,
    val: Vec<PatchTriple>,
    pool: rayon::ThreadPool,
    log_file: Option<fs::File>,
    outdir: Option<PathBuf>,
    log: Vec<EpochRecord>,
    meta: serde_json::Value,
    stats: CohortStats,
}

const STAGE_BASE: u64 = 0;
const STAGE_AT: u64 = 1;

fn step_rng(seed: u64, stage: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 48) | ((epoch as u64) << 24) | step as u64);
    rng
}

impl Session<'_> {
    /// Samples and augments every minibatch of one epoch; a pure function of (seed, stage, epoch).
    fn epoch_batches(&self, stage: u64, epoch: usize) -> Vec<Vec<PatchTriple>> {
        let cfg = self.cfg;
        let patch = cfg.model.patch_size;
        let train = &self.train;
        self.pool.install(|| {
            (0..cfg.steps_per_epoch)
                .into_par_iter()
                .map(|step| {
                    let mut rng = step_rng(cfg.seed, stage, epoch, step);
                    (0..cfg.batch_size)
                        .map(|_| {
                            use rand::Rng;
                            let s = rng.random_range(0..train.records.len());
                            let p = sample_patch_from(&train.records[s], &train.vessels[s], patch, cfg.fg_bias, &mut rng);
                            augment(p, &cfg.augment, &mut rng)
                        })
                        .collect()
                })
                .collect()
        })
    }

    fn validate(&self, trainer: &Trainer) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let losses: Vec<f64> = self
            .val
            .iter()
            .map(|p| trainer.evaluate(p).map(|l| l.total))
            .collect::<Result<_>>()?;
        let v = losses.iter().sum::<f64>() / losses.len() as f64;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss {v}")));
        }
        Ok(Some(v))
    }

    fn record(&mut self, rec: EpochRecord) -> Result<()> {
        log::info!(
            "{} epoch {} lr {:.3e} loss {:.4} val {:?}",
            rec.stage,
            rec.epoch,
            rec.lr,
            rec.loss_total,
            rec.val_loss
        );
        if let Some(f) = self.log_file.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io("train_log.ndjson", e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn checkpoint(&self, model: &ModelParams, stage: &str, epoch: usize, val: f64) -> Checkpoint {
        let mut meta = self.meta.clone();
        meta["stage"] = stage.into();
        meta["epoch"] = epoch.into();
        meta["selection_loss"] = val.into();
        Checkpoint {
            model: model.clone(),
            stats: Some(self.stats.clone()),
            meta,
        }
    }

    fn save(&self, ck: &Checkpoint, name: &str) -> Result<()> {
        if let Some(dir) = &self.outdir {
            ck.save(dir.join(name))?;
        }
        Ok(())
    }
}

fn mean_loss(losses: &[JointLoss]) -> JointLoss {
    let k = losses.len().max(1) as f64;
    let part = |f: fn(&JointLoss) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = losses.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / k)
    };
    JointLoss {
        total: losses.iter().map(|l| l.total).sum::<f64>() / k,
        brain: part(|l| l.brain),
        vessel: part(|l| l.vessel),
    }
}

fn select<'r>(cohort: &'r [SubjectRecord], ids: &[String]) -> Result<Vec<&'r SubjectRecord>> {
    ids.iter()
        .map(|id| {
            cohort
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::Config(format!("subject {id} is not in the cohort")))
        })
        .collect()
}

/// Trains on `split.train` of the raw `cohort`.
///
/// Cohort statistics come from the training subjects only. A fraction of them
/// is held out for checkpoint selection. When `outdir` is given, the best
/// checkpoint (`best.ckpt`) and the NDJSON log (`train_log.ndjson`) are
/// written as training progresses, so they survive a numerical abort.
pub fn train(cfg: &TrainConfig, cohort: &[SubjectRecord], split: &FoldSplit, outdir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Empty("training fold has no subjects".into()));
    }
    if split.train.iter().any(|id| split.test.contains(id)) {
        return Err(Error::Config("train and test folds overlap".into()));
    }
    let raw = select(cohort, &split.train)?;
    let owned: Vec<SubjectRecord> = raw.iter().map(|r| (*r).clone()).collect();
    let stats = compute_cohort_stats(&owned)?;
    let pre: Vec<SubjectRecord> = owned.par_iter().map(|r| preprocess(r, &stats)).collect::<Result<_>>()?;

    let mut ids: Vec<usize> = (0..pre.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1));
    let n_val = if pre.len() >= 2 && cfg.val_fraction > 0.0 {
        ((cfg.val_fraction * pre.len() as f64).round() as usize).clamp(1, pre.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = ids.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort();
    train_idx.sort();

    let train_records: Vec<SubjectRecord> = train_idx.iter().map(|&i| pre[i].clone()).collect();
    let vessels = train_records.iter().map(vessel_voxels).collect();
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(u64::MAX);
    let val: Vec<PatchTriple> = val_idx
        .iter()
        .flat_map(|&i| {
            let rec = &pre[i];
            let vs = vessel_voxels(rec);
            (0..cfg.val_patches)
                .map(|_| sample_patch_from(rec, &vs, cfg.model.patch_size, 0.5, &mut val_rng))
                .collect::<Vec<_>>()
        })
        .collect();

    let outdir_buf = outdir.map(Path::to_path_buf);
    let log_file = match &outdir_buf {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.ndjson");
            Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(num_workers())
        .build()
        .map_err(|e| Error::Config(format!("cannot start prefetch workers: {e}")))?;
    let name = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| pre[i].id.clone()).collect() };
    let meta = serde_json::json!({
        "fold": split.fold_id,
        "train_ids": name(&train_idx),
        "val_ids": name(&val_idx),
        "test_ids": split.test,
        "train_config": cfg,
    });
    let mut s = Session {
        cfg,
        train: Prepared {
            records: train_records,
            vessels,
        },
        val,
        pool,
        log_file,
        outdir: outdir_buf,
        log: Vec::new(),
        meta,
        stats,
    };

    let mut trainer = Trainer::new(build_model(&cfg.lattice(), cfg.seed)?, cfg.weight_decay, cfg.loss_weights)?;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut early_stop_epoch = None;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg);
        if lr < cfg.lr_floor {
            log::info!("learning rate {lr:.3e} below floor at epoch {epoch}; stopping");
            early_stop_epoch = Some(epoch);
            break;
        }
        let batches = s.epoch_batches(STAGE_BASE, epoch);
        let losses: Vec<JointLoss> = batches.iter().map(|b| trainer.step(b, lr)).collect::<Result<_>>()?;
        let train_loss = mean_loss(&losses);
        let val = s.validate(&trainer)?;
        s.record(EpochRecord {
            stage: "base".into(),
            epoch,
            lr,
            loss_total: train_loss.total,
            loss_brain: train_loss.brain,
            loss_vessel: train_loss.vessel,
            val_loss: val,
            seed: cfg.seed,
            forward_passes: trainer.forward_passes,
            backward_passes: trainer.backward_passes,
        })?;
        let score = val.unwrap_or(train_loss.total);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            let ck = s.checkpoint(&trainer.model, "base", epoch, score);
            s.save(&ck, "best.ckpt")?;
            best = Some((score, ck));
        }
    }
    let (_, mut best_ck) = best.expect("at least one epoch runs because lr0 > lr_floor");

    if cfg.at.enabled {
        // Fine-tune the selected base model with a fresh optimizer and a zero perturbation.
        let mut ft = Trainer::new(best_ck.model.clone(), cfg.weight_decay, cfg.loss_weights)?;
        ft.forward_passes = trainer.forward_passes;
        ft.backward_passes = trainer.backward_passes;
        let mut delta = Perturbation::new();
        let lr0 = cfg.lr0 * cfg.at.lr_factor;
        let mut best_ft: Option<(f64, Checkpoint)> = None;
        for epoch in 0..cfg.at.epochs {
            let lr = poly(lr0, epoch, cfg.at.epochs);
            if lr < cfg.lr_floor {
                break;
            }
            let batches = s.epoch_batches(STAGE_AT, epoch);
            let stats = free_at_epoch(&mut ft, batches, &cfg.at, lr, &mut delta)?;
            let loss = stats.mean_loss.expect("at least one minibatch");
            let val = s.validate(&ft)?;
            s.record(EpochRecord {
                stage: "at".into(),
                epoch,
                lr,
                loss_total: loss.total,
                loss_brain: loss.brain,
                loss_vessel: loss.vessel,
                val_loss: val,
                seed: cfg.seed,
                forward_passes: ft.forward_passes,
                backward_passes: ft.backward_passes,
            })?;
            let score = val.unwrap_or(loss.total);
            if best_ft.as_ref().is_none_or(|(b, _)| score < *b) {
                let ck = s.checkpoint(&ft.model, "at", epoch, score);
                s.save(&ck, "best.ckpt")?;
                best_ft = Some((score, ck));
            }
        }
        if let Some((_, ck)) = best_ft {
            best_ck = ck;
        }
    }

    Ok(TrainOutcome {
        best: best_ck,
        log: s.log,
        early_stop_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let cfg = TrainConfig {
            max_epochs: 20,
            ..Default::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 5e-4);
        assert_eq!(lr_schedule(20, &cfg), 0.0);
        for e in 0..20 {
            assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn folds_partition_the_cohort() {
        let folds = make_folds(&ids(57), 2, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![29, 28]);
        let folds = make_folds(&ids(10), 2, 3).unwrap();
        assert_eq!(folds[0].test.len(), 5);
        let mut seen: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort();
        assert_eq!(seen, ids(10));
        for f in &folds {
            assert!(f.train.iter().all(|id| !f.test.contains(id)));
            assert_eq!(f.train.len() + f.test.len(), 10);
        }
        assert!(make_folds(&ids(1), 2, 0).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.weight_decay, 1e-5);
        assert_eq!(cfg.batch_size, 1);
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_floor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { fold: 2, ..Default::default() }.validate().is_err());
    }
}
