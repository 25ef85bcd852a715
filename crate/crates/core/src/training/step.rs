//! One optimization step on a minibatch of patches.

use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelParams};
use crate::nn::{Graph, Tensor};
use crate::objective::{heads_loss_with_grad, tensor_to_f64, JointLoss, LossWeights};

use super::optim::Adam;
use super::sampling::PatchTriple;

/// Loss and gradients of one forward/backward pass.
pub struct PassOutput {
    pub loss: JointLoss,
    pub param_grads: Vec<Option<Vec<f32>>>,
    /// Gradient of the loss with respect to the input image, when requested.
    pub input_grad: Option<Tensor>,
}

/// Owns the model under training, its optimizer and pass counters.
pub struct Trainer {
    pub model: ModelParams,
    optimizer: Adam,
    weights: LossWeights,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

fn to_tensor(grad: Vec<f64>, shape: [usize; 4]) -> Tensor {
    Tensor::from_vec(shape, grad.into_iter().map(|v| v as f32).collect())
}

impl Trainer {
    pub fn new(model: ModelParams, weight_decay: f64, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let optimizer = Adam::new(&model.params, weight_decay);
        Ok(Self {
            model,
            optimizer,
            weights,
            forward_passes: 0,
            backward_passes: 0,
        })
    }

    pub fn optimizer_steps(&self) -> i32 {
        self.optimizer.steps()
    }

    /// Loss only, no gradients and no counters.
    pub fn evaluate(&self, patch: &PatchTriple) -> Result<JointLoss> {
        let mut g = Graph::new(&self.model.params);
        let x = g.input(patch.image.clone(), false);
        let heads = forward_graph(&self.model, &mut g, x);
        let grads = heads_loss_with_grad(
            heads.brain.map(|n| tensor_to_f64(g.value(n))).as_deref(),
            heads.vessel.map(|n| tensor_to_f64(g.value(n))).as_deref(),
            &patch.brain,
            &patch.vessel,
            self.weights,
        )?;
        Ok(grads.loss)
    }

    /// Forward and backward pass on `image` (which may carry a perturbation) with the patch labels.
    fn pass(&self, image: &Tensor, patch: &PatchTriple, want_input_grad: bool) -> Result<PassOutput> {
        let mut g = Graph::new(&self.model.params);
        let x = g.input(image.clone(), want_input_grad);
        let heads = forward_graph(&self.model, &mut g, x);
        let lg = heads_loss_with_grad(
            heads.brain.map(|n| tensor_to_f64(g.value(n))).as_deref(),
            heads.vessel.map(|n| tensor_to_f64(g.value(n))).as_deref(),
            &patch.brain,
            &patch.vessel,
            self.weights,
        )?;
        if !lg.loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {}", lg.loss.total)));
        }
        let mut seeds = Vec::new();
        if let (Some(n), Some(gr)) = (heads.brain, lg.brain) {
            seeds.push((n, to_tensor(gr, g.value(n).shape())));
        }
        if let (Some(n), Some(gr)) = (heads.vessel, lg.vessel) {
            seeds.push((n, to_tensor(gr, g.value(n).shape())));
        }
        let grads = g.backward(seeds);
        let input_grad = want_input_grad.then(|| grads.input(x).cloned().unwrap_or_else(|| Tensor::zeros(image.shape())));
        Ok(PassOutput {
            loss: lg.loss,
            param_grads: grads.params,
            input_grad,
        })
    }

    /// Applies averaged gradients.
    pub fn apply(&mut self, mut grads: Vec<Option<Vec<f32>>>, batch: usize, lr: f64) -> Result<()> {
        if batch > 1 {
            let s = 1.0 / batch as f32;
            grads.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.optimizer.step(&mut self.model.params, &grads, lr);
        Ok(())
    }

    /// Standard step: gradients averaged over the minibatch, then one update.
    /// Counts one forward and one backward pass per minibatch.
    pub fn step(&mut self, batch: &[PatchTriple], lr: f64) -> Result<JointLoss> {
        let images: Vec<Tensor> = batch.iter().map(|p| p.image.clone()).collect();
        Ok(self.step_images(batch, &images, lr, false)?.0)
    }

    /// A minibatch step on possibly perturbed images; optionally returns per-sample input gradients.
    pub(crate) fn step_images(
        &mut self,
        batch: &[PatchTriple],
        images: &[Tensor],
        lr: f64,
        want_input_grad: bool,
    ) -> Result<(JointLoss, Vec<Tensor>)> {
        assert!(!batch.is_empty() && batch.len() == images.len());
        let mut acc: Option<Vec<Option<Vec<f32>>>> = None;
        let mut loss = JointLoss {
            total: 0.0,
            brain: None,
            vessel: None,
        };
        let mut input_grads = Vec::new();
        for (patch, image) in batch.iter().zip(images) {
            let out = self.pass(image, patch, want_input_grad)?;
            let k = batch.len() as f64;
            loss.total += out.loss.total / k;
            loss.brain = out.loss.brain.map(|v| loss.brain.unwrap_or(0.0) + v / k);
            loss.vessel = out.loss.vessel.map(|v| loss.vessel.unwrap_or(0.0) + v / k);
            input_grads.extend(out.input_grad);
            acc = Some(match acc {
                None => out.param_grads,
                Some(mut a) => {
                    for (dst, src) in a.iter_mut().zip(out.param_grads) {
                        match (dst.as_mut(), src) {
                            (Some(d), Some(s)) => d.iter_mut().zip(&s).for_each(|(x, y)| *x += y),
                            (None, Some(s)) => *dst = Some(s),
                            _ => {}
                        }
                    }
                    a
                }
            });
        }
        // Counted per minibatch, like one batched pass.
        self.forward_passes += 1;
        self.backward_passes += 1;
        self.apply(acc.expect("non-empty batch"), batch.len(), lr)?;
        Ok((loss, input_grads))
    }
}
