//! Lattice segmentation network with a dual-task head.
//!
//! The backbone is a triangular lattice of convolutional nodes indexed by
//! column `c in 0..=L` and resolution level `l`. Column `c` holds
//! `n_levels - c` levels, so the lattice narrows toward the output. Each node
//! sums its same-level predecessor `(c-1, l)`, its upper neighbour `(c, l-1)`
//! brought down by a strided convolution and its lower neighbour `(c-1, l+1)`
//! brought up by trilinear interpolation and a pointwise convolution, then
//! applies two `conv3 -> instance norm -> leaky-ReLU` stages.
//!
//! Each task head projects every level of the last column to class logits
//! with a pointwise convolution, upsamples them to full resolution and sums.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv, ConvGeom, Graph, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Joint,
    VesselOnly,
    BrainOnly,
}

impl TaskMode {
    pub fn has_vessel(self) -> bool {
        self != TaskMode::BrainOnly
    }

    pub fn has_brain(self) -> bool {
        self != TaskMode::VesselOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Joint => "joint",
            TaskMode::VesselOnly => "vessel_only",
            TaskMode::BrainOnly => "brain_only",
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TaskMode::Joint),
            "vessel_only" => Ok(TaskMode::VesselOnly),
            "brain_only" => Ok(TaskMode::BrainOnly),
            other => Err(Error::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Number of lattice columns beyond the first.
    pub lattice_length: usize,
    pub n_levels: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub patch_size: [usize; 3],
    pub n_classes_per_task: usize,
    pub task_mode: TaskMode,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            lattice_length: 2,
            n_levels: 4,
            base_channels: 16,
            channel_growth: 2,
            patch_size: [64; 3],
            n_classes_per_task: 2,
            task_mode: TaskMode::Joint,
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lattice_length < 1 {
            return Err(Error::Config("lattice_length must be >= 1".into()));
        }
        if self.n_levels < 2 {
            return Err(Error::Config("n_levels must be >= 2".into()));
        }
        if self.lattice_length >= self.n_levels {
            return Err(Error::Config(format!(
                "lattice_length {} leaves no level in the last column of a {}-level lattice",
                self.lattice_length, self.n_levels
            )));
        }
        if self.base_channels == 0 || self.channel_growth == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.n_classes_per_task != 2 {
            return Err(Error::Config("n_classes_per_task must be 2 (binary tasks)".into()));
        }
        let div = 1usize << (self.n_levels - 1);
        if let Some(p) = self.patch_size.iter().find(|&&p| p == 0 || p % div != 0) {
            return Err(Error::Config(format!(
                "patch size {p} is not divisible by 2^(n_levels-1) = {div}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Number of levels in lattice column `c`.
    pub fn column_levels(&self, c: usize) -> usize {
        self.n_levels - c
    }

    fn tasks(&self) -> Vec<&'static str> {
        let mut t = Vec::new();
        if self.task_mode.has_vessel() {
            t.push("vessel");
        }
        if self.task_mode.has_brain() {
            t.push("brain");
        }
        t
    }
}

/// Learned weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: LatticeConfig,
    pub params: ParamStore,
}

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Parameters that belong to the shared backbone (everything but the heads).
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .filter(|p| !p.name.starts_with("head."))
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }

    /// Sets every head weight and bias to zero, making all logits zero.
    pub fn zero_heads(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("head.")) {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Per-head class logits, `(2, x, y, z)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair {
    pub vessel_logits: Option<Tensor>,
    pub brain_logits: Option<Tensor>,
}

/// Per-head class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityPair {
    pub vessel: Option<Tensor>,
    pub brain: Option<Tensor>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, geom: ConvGeom) {
        let shape = conv::weight_shape(c_in, c_out, geom);
        let fan_in = c_in * geom.kernel.pow(3);
        let gain = 2.0 / (1.0 + crate::nn::ops::LEAKY_SLOPE as f64 * crate::nn::ops::LEAKY_SLOPE as f64);
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        store.insert(format!("{name}.weight"), shape.to_vec(), data);
    }

    fn norm(&mut self, store: &mut ParamStore, name: &str, c: usize) {
        store.insert(format!("{name}.gamma"), vec![c], vec![1.0; c]);
        store.insert(format!("{name}.beta"), vec![c], vec![0.0; c]);
    }

    fn block(&mut self, store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) {
        self.conv(store, &format!("{name}.conv0"), c_in, c_out, ConvGeom::SAME3);
        self.norm(store, &format!("{name}.norm0"), c_out);
        self.conv(store, &format!("{name}.conv1"), c_out, c_out, ConvGeom::SAME3);
        self.norm(store, &format!("{name}.norm1"), c_out);
    }
}

/// Deterministically initializes a network for `cfg` from `seed`.
pub fn build_model(cfg: &LatticeConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut store = ParamStore::new();
    init.block(&mut store, "stem", 1, cfg.channels(0));
    for c in 0..=cfg.lattice_length {
        for l in 0..cfg.column_levels(c) {
            let ch = cfg.channels(l);
            if l > 0 {
                let name = format!("down.c{c}.l{l}");
                init.conv(&mut store, &format!("{name}.conv"), cfg.channels(l - 1), ch, ConvGeom::DOWN3);
                init.norm(&mut store, &format!("{name}.norm"), ch);
            }
            if c > 0 {
                init.conv(&mut store, &format!("up.c{c}.l{l}.conv"), cfg.channels(l + 1), ch, ConvGeom::POINT);
            }
            init.block(&mut store, &format!("node.c{c}.l{l}"), ch, ch);
        }
    }
    let last = cfg.lattice_length;
    for task in cfg.tasks() {
        for l in 0..cfg.column_levels(last) {
            let name = format!("head.{task}.l{l}");
            init.conv(&mut store, &name, cfg.channels(l), cfg.n_classes_per_task, ConvGeom::POINT);
            let n = cfg.n_classes_per_task;
            store.insert(format!("{name}.bias"), vec![n], vec![0.0; n]);
        }
    }
    Ok(ModelParams {
        config: cfg.clone(),
        params: store,
    })
}

/// Output nodes of a forward pass recorded on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub vessel: Option<NodeId>,
    pub brain: Option<NodeId>,
}

fn pid(model: &ModelParams, name: &str) -> usize {
    model
        .params
        .id(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn conv_norm_act(g: &mut Graph, model: &ModelParams, x: NodeId, conv: &str, norm: &str, geom: ConvGeom) -> NodeId {
    let y = g.conv(x, pid(model, &format!("{conv}.weight")), None, geom);
    let y = g.instance_norm(
        y,
        pid(model, &format!("{norm}.gamma")),
        pid(model, &format!("{norm}.beta")),
    );
    g.leaky_relu(y)
}

fn block(g: &mut Graph, model: &ModelParams, x: NodeId, name: &str) -> NodeId {
    let y = conv_norm_act(g, model, x, &format!("{name}.conv0"), &format!("{name}.norm0"), ConvGeom::SAME3);
    conv_norm_act(g, model, y, &format!("{name}.conv1"), &format!("{name}.norm1"), ConvGeom::SAME3)
}

/// Records the network on `g` starting from the image node `input`.
pub fn forward_graph(model: &ModelParams, g: &mut Graph, input: NodeId) -> HeadNodes {
    let cfg = &model.config;
    let stem = block(g, model, input, "stem");
    let mut prev: Vec<NodeId> = Vec::new();
    for c in 0..=cfg.lattice_length {
        let mut col: Vec<NodeId> = Vec::with_capacity(cfg.column_levels(c));
        for l in 0..cfg.column_levels(c) {
            let mut terms = Vec::with_capacity(3);
            if c == 0 && l == 0 {
                terms.push(stem);
            }
            if c > 0 {
                terms.push(prev[l]);
            }
            if l > 0 {
                let name = format!("down.c{c}.l{l}");
                terms.push(conv_norm_act(
                    g,
                    model,
                    col[l - 1],
                    &format!("{name}.conv"),
                    &format!("{name}.norm"),
                    ConvGeom::DOWN3,
                ));
            }
            if c > 0 {
                // The pointwise projection commutes with trilinear upsampling,
                // so it is applied at the coarse resolution.
                let w = pid(model, &format!("up.c{c}.l{l}.conv.weight"));
                let p = g.conv(prev[l + 1], w, None, ConvGeom::POINT);
                terms.push(g.upsample(p, 2));
            }
            let x = if terms.len() == 1 { terms[0] } else { g.add(&terms) };
            col.push(block(g, model, x, &format!("node.c{c}.l{l}")));
        }
        prev = col;
    }

    let mut head = |task: &str| {
        let mut outs = Vec::with_capacity(prev.len());
        for (l, &node) in prev.iter().enumerate() {
            let name = format!("head.{task}.l{l}");
            let y = g.conv(
                node,
                pid(model, &format!("{name}.weight")),
                Some(pid(model, &format!("{name}.bias"))),
                ConvGeom::POINT,
            );
            outs.push(if l == 0 { y } else { g.upsample(y, 1 << l) });
        }
        if outs.len() == 1 {
            outs[0]
        } else {
            g.add(&outs)
        }
    };
    let vessel = cfg.task_mode.has_vessel().then(|| head("vessel"));
    let brain = cfg.task_mode.has_brain().then(|| head("brain"));
    HeadNodes { vessel, brain }
}

fn check_patch(model: &ModelParams, patch: &Tensor) -> Result<()> {
    let p = model.config.patch_size;
    let expected = [1, p[0], p[1], p[2]];
    if patch.shape() != expected {
        return Err(Error::shape(expected, patch.shape()));
    }
    if !patch.is_finite() {
        return Err(Error::Numerical("non-finite input patch".into()));
    }
    Ok(())
}

/// Evaluates the network on a single `(1, x, y, z)` patch.
pub fn forward(model: &ModelParams, patch: &Tensor) -> Result<PredictionPair> {
    check_patch(model, patch)?;
    let mut g = Graph::new(&model.params);
    let x = g.input(patch.clone(), false);
    let heads = forward_graph(model, &mut g, x);
    Ok(PredictionPair {
        vessel_logits: heads.vessel.map(|n| g.value(n).clone()),
        brain_logits: heads.brain.map(|n| g.value(n).clone()),
    })
}

/// Two-class softmax over the channel axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN logits".into()));
    }
    let n = logits.voxels();
    let c = logits.channels();
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..n {
        let m = (0..c).map(|k| src[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for k in 0..c {
            z += ((src[k * n + i] - m) as f64).exp();
        }
        for k in 0..c {
            dst[k * n + i] = (((src[k * n + i] - m) as f64).exp() / z) as f32;
        }
    }
    Ok(out)
}

pub fn softmax_probs(pred: &PredictionPair) -> Result<ProbabilityPair> {
    Ok(ProbabilityPair {
        vessel: pred.vessel_logits.as_ref().map(softmax).transpose()?,
        brain: pred.brain_logits.as_ref().map(softmax).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(mode: TaskMode) -> LatticeConfig {
        LatticeConfig {
            n_levels: 3,
            base_channels: 4,
            patch_size: [8, 8, 8],
            task_mode: mode,
            ..Default::default()
        }
    }

    fn random_patch(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec([1, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = build_model(&small(TaskMode::Joint), 3).unwrap();
        let b = build_model(&small(TaskMode::Joint), 3).unwrap();
        let c = build_model(&small(TaskMode::Joint), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn joint_has_more_parameters_and_same_backbone() {
        let joint = build_model(&small(TaskMode::Joint), 0).unwrap();
        let vessel = build_model(&small(TaskMode::VesselOnly), 0).unwrap();
        assert!(joint.parameter_count() > vessel.parameter_count());
        assert_eq!(joint.backbone_shapes(), vessel.backbone_shapes());
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let cfg = LatticeConfig {
            n_levels: 3,
            patch_size: [65, 64, 64],
            ..Default::default()
        };
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_follow_task_mode() {
        let cfg = small(TaskMode::Joint);
        let m = build_model(&cfg, 1).unwrap();
        let pred = forward(&m, &random_patch(cfg.patch_size, 0)).unwrap();
        assert_eq!(pred.vessel_logits.unwrap().shape(), [2, 8, 8, 8]);
        assert_eq!(pred.brain_logits.unwrap().shape(), [2, 8, 8, 8]);

        let cfg = small(TaskMode::VesselOnly);
        let m = build_model(&cfg, 1).unwrap();
        let pred = forward(&m, &random_patch(cfg.patch_size, 0)).unwrap();
        assert!(pred.brain_logits.is_none());
        assert!(pred.vessel_logits.is_some());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = build_model(&small(TaskMode::Joint), 1).unwrap();
        assert!(matches!(forward(&m, &random_patch([8, 8, 16], 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let cfg = small(TaskMode::Joint);
        let mut m = build_model(&cfg, 1).unwrap();
        m.zero_heads();
        let probs = softmax_probs(&forward(&m, &random_patch(cfg.patch_size, 5)).unwrap()).unwrap();
        for t in [probs.vessel.unwrap(), probs.brain.unwrap()] {
            assert!(t.data().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::from_vec([2, 1, 1, 2], vec![0.0, 3f32.ln(), 0.0, 0.0]);
        let p = softmax(&t).unwrap();
        assert_eq!(p.data()[0], 0.5);
        assert_eq!(p.data()[2], 0.5);
        assert!((p.data()[1] - 0.75).abs() < 1e-7);
        assert!((p.data()[3] - 0.25).abs() < 1e-7);
        let nan = Tensor::from_vec([2, 1, 1, 1], vec![f32::NAN, 0.0]);
        assert!(softmax(&nan).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::from_vec([2, 3, 3, 3], (0..54).map(|_| rng.random_range(-20.0..20.0)).collect());
        let p = softmax(&t).unwrap();
        for i in 0..27 {
            assert!((p.data()[i] + p.data()[27 + i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let cfg = small(TaskMode::Joint);
        let m = build_model(&cfg, 2).unwrap();
        let mut g = Graph::new(&m.params);
        let x = g.input(random_patch(cfg.patch_size, 9), false);
        let heads = forward_graph(&m, &mut g, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seeds = [heads.vessel.unwrap(), heads.brain.unwrap()]
            .into_iter()
            .map(|n| {
                let shape = g.value(n).shape();
                let len = shape.iter().product();
                (n, Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()))
            })
            .collect();
        let grads = g.backward(seeds);
        let mut zero = 0usize;
        let mut total = 0usize;
        for (p, grad) in m.params.iter().zip(&grads.params) {
            let grad = grad.as_ref().unwrap_or_else(|| panic!("{} received no gradient", p.name));
            total += grad.len();
            zero += grad.iter().filter(|&&v| v == 0.0).count();
        }
        assert!((zero as f64) < 0.01 * total as f64, "{zero} of {total} zero gradients");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = small(TaskMode::Joint);
        let m = build_model(&cfg, 2).unwrap();
        let x = random_patch(cfg.patch_size, 4);
        assert_eq!(forward(&m, &x).unwrap(), forward(&m, &x).unwrap());
    }
}
