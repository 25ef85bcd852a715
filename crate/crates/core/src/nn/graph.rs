//! Reverse-mode tape over [`Tensor`] operations.

use super::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use super::ops::{self, NormCache};
use super::{ParamId, ParamStore, Tensor};

pub type NodeId = usize;

enum Op {
    Input { requires_grad: bool },
    Conv { x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom },
    Norm { x: NodeId, gamma: ParamId, beta: ParamId, cache: NormCache },
    LeakyRelu { x: NodeId },
    Add(Vec<NodeId>),
    Upsample { x: NodeId, factor: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass so it can be differentiated once.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    /// One entry per parameter in store order; `None` if the parameter was unused.
    pub params: Vec<Option<Vec<f32>>>,
    inputs: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Input { requires_grad })
    }

    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> NodeId {
        let weight = self.params.get(w);
        let c_out = weight.shape[0];
        let value = conv3d_forward(
            &self.nodes[x].value,
            &weight.data,
            b.map(|b| self.params.get(b).data.as_slice()),
            c_out,
            geom,
        );
        self.push(value, Op::Conv { x, w, b, geom })
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let (value, cache) = ops::instance_norm(
            &self.nodes[x].value,
            &self.params.get(gamma).data,
            &self.params.get(beta).data,
        );
        self.push(value, Op::Norm { x, gamma, beta, cache })
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::leaky_relu(&self.nodes[x].value);
        self.push(value, Op::LeakyRelu { x })
    }

    /// Sum of one or more same-shape nodes.
    pub fn add(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut value = self.nodes[xs[0]].value.clone();
        for &x in &xs[1..] {
            value.add_assign(&self.nodes[x].value);
        }
        self.push(value, Op::Add(xs.to_vec()))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let value = ops::upsample(&self.nodes[x].value, factor);
        self.push(value, Op::Upsample { x, factor })
    }

    /// Back-propagates `seeds` (output node, upstream gradient) through the tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads[id], g);
        }
        let mut param_grads: Vec<Option<Vec<f32>>> = vec![None; self.params.len()];
        let mut inputs = Vec::new();
        let needs = self.requires_grad();

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        inputs.push((id, g));
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let cg = conv3d_backward(
                        &self.nodes[*x].value,
                        &self.params.get(*w).data,
                        &g,
                        *geom,
                        needs[*x],
                    );
                    accumulate_param(&mut param_grads[*w], cg.weight);
                    if let Some(b) = b {
                        accumulate_param(&mut param_grads[*b], cg.bias);
                    }
                    if let Some(gi) = cg.input {
                        accumulate(&mut grads[*x], gi);
                    }
                }
                Op::Norm { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::instance_norm_backward(cache, &self.params.get(*gamma).data, &g);
                    accumulate_param(&mut param_grads[*gamma], gg);
                    accumulate_param(&mut param_grads[*beta], gb);
                    if needs[*x] {
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::LeakyRelu { x } => {
                    if needs[*x] {
                        let gx = ops::leaky_relu_backward(&self.nodes[*x].value, &g);
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Add(xs) => {
                    for &x in xs {
                        if needs[x] {
                            accumulate(&mut grads[x], g.clone());
                        }
                    }
                }
                Op::Upsample { x, factor } => {
                    if needs[*x] {
                        let gx = ops::upsample_backward(&g, self.nodes[*x].value.shape(), *factor);
                        accumulate(&mut grads[*x], gx);
                    }
                }
            }
        }
        Gradients {
            params: param_grads,
            inputs,
        }
    }

    /// Whether each node depends on something differentiable (a parameter or a grad-requiring input).
    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Input { requires_grad } => *requires_grad,
                Op::Conv { .. } | Op::Norm { .. } => true,
                Op::LeakyRelu { x } | Op::Upsample { x, .. } => needs[*x],
                Op::Add(xs) => xs.iter().any(|&x| needs[x]),
            };
        }
        needs
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn accumulate_param(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
