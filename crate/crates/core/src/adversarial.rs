//! "Free" adversarial training: every minibatch is replayed `N` times, each
//! replay updating the weights and taking a signed-gradient ascent step on a
//! persistent input perturbation `delta` bounded in the L-infinity ball.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::objective::JointLoss;
use crate::training::{PatchTriple, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ATConfig {
    /// Perturbation bound in normalized intensity units.
    pub epsilon: f64,
    /// Replays per minibatch.
    pub n_replays: usize,
    pub enabled: bool,
    /// Fine-tuning epoch budget.
    pub epochs: usize,
    /// Fine-tuning learning rate as a fraction of the base initial rate.
    pub lr_factor: f64,
}

impl Default for ATConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            n_replays: 5,
            enabled: false,
            epochs: 100,
            lr_factor: 0.1,
        }
    }
}

impl ATConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("at.epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.n_replays < 1 {
            return Err(Error::Config("at.n_replays must be >= 1".into()));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Config("at.lr_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Clamps every entry of `delta` to `[-epsilon, epsilon]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    let e = epsilon as f32;
    Tensor::from_vec(delta.shape(), delta.data().iter().map(|v| v.clamp(-e, e)).collect())
}

/// The perturbation buffer, one patch-shaped tensor per minibatch slot.
#[derive(Clone, Debug, Default)]
pub struct Perturbation {
    slots: Vec<Tensor>,
}

impl Perturbation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn max_abs(&self) -> f32 {
        self.slots.iter().map(Tensor::max_abs).fold(0.0, f32::max)
    }

    fn fit(&mut self, batch: &[PatchTriple]) {
        let fits = self.slots.len() == batch.len() && self.slots.iter().zip(batch).all(|(d, p)| d.shape() == p.image.shape());
        if !fits {
            self.slots = batch.iter().map(|p| Tensor::zeros(p.image.shape())).collect();
        }
    }
}

/// What happened during one adversarial epoch.
#[derive(Clone, Debug, Default)]
pub struct ATEpochStats {
    pub minibatches: usize,
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// Joint loss of every replay, in order.
    pub replay_losses: Vec<f64>,
    /// `max |delta|` observed after every replay.
    pub replay_max_delta: Vec<f32>,
    pub mean_loss: Option<JointLoss>,
}

/// Runs Free AT over `batches`; `delta` carries over between minibatches and calls.
pub fn free_at_epoch<I>(trainer: &mut Trainer, batches: I, at: &ATConfig, lr: f64, delta: &mut Perturbation) -> Result<ATEpochStats>
where
    I: IntoIterator<Item = Vec<PatchTriple>>,
{
    if !at.enabled {
        return Err(Error::Config("free adversarial training requested with at.enabled = false".into()));
    }
    at.validate()?;
    let (f0, b0) = (trainer.forward_passes, trainer.backward_passes);
    let mut stats = ATEpochStats::default();
    let mut sum = JointLoss {
        total: 0.0,
        brain: None,
        vessel: None,
    };
    let eps = at.epsilon as f32;
    for batch in batches {
        delta.fit(&batch);
        stats.minibatches += 1;
        for _ in 0..at.n_replays {
            let images: Vec<Tensor> = batch
                .iter()
                .zip(&delta.slots)
                .map(|(p, d)| {
                    let mut x = p.image.clone();
                    x.add_assign(d);
                    x
                })
                .collect();
            let (loss, grads) = trainer.step_images(&batch, &images, lr, true)?;
            for (d, g) in delta.slots.iter_mut().zip(&grads) {
                for (dv, gv) in d.data_mut().iter_mut().zip(g.data()) {
                    let step = if *gv > 0.0 {
                        eps
                    } else if *gv < 0.0 {
                        -eps
                    } else {
                        0.0
                    };
                    *dv = (*dv + step).clamp(-eps, eps);
                }
            }
            stats.replay_losses.push(loss.total);
            stats.replay_max_delta.push(delta.max_abs());
            sum.total += loss.total;
            sum.brain = loss.brain.map(|v| sum.brain.unwrap_or(0.0) + v);
            sum.vessel = loss.vessel.map(|v| sum.vessel.unwrap_or(0.0) + v);
        }
    }
    let n = stats.replay_losses.len();
    if n > 0 {
        let k = n as f64;
        stats.mean_loss = Some(JointLoss {
            total: sum.total / k,
            brain: sum.brain.map(|v| v / k),
            vessel: sum.vessel.map(|v| v / k),
        });
    }
    stats.forward_passes = trainer.forward_passes - f0;
    stats.backward_passes = trainer.backward_passes - b0;
    Ok(stats)
}
