use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNormSpec, Conv2dSpec, ConvScratch, DenseSpec, PoolSpec};
use super::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Op {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2d(Conv2dSpec),
    BatchNorm(BatchNormSpec),
    Relu,
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    Add,
    Concat,
    GlobalAvgPool,
    Dense(DenseSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// A named parameter array. Values are stored in single precision; all
/// arithmetic happens in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics; every activation is retained.
    Train,
    Inference,
}

/// Which intermediate outputs a forward pass keeps.
#[derive(Debug, Clone)]
pub enum Keep {
    All,
    Only(Vec<NodeId>),
}

enum Cache {
    None,
    ArgMax(Vec<u32>),
    BatchStats { mean: Vec<f64>, var: Vec<f64>, count: usize },
}

pub struct ForwardPass {
    mode: Mode,
    keep_all: bool,
    outputs: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    output: NodeId,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.outputs[self.output].as_ref().expect("output is always retained")
    }

    pub fn node_output(&self, id: NodeId) -> Option<&Tensor> {
        self.outputs.get(id).and_then(|t| t.as_ref())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

pub struct Gradients {
    /// Gradient per parameter (indexed like [`Network::params`]); `None` for
    /// parameters that received none or when not requested.
    pub params: Vec<Option<Vec<f64>>>,
    pub nodes: HashMap<NodeId, Tensor>,
}

/// A feed-forward DAG of layers plus its parameters. Nodes are stored in
/// topological order: every input id is smaller than its consumer's id.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    shapes: Vec<[usize; 3]>,
    params: Vec<Param>,
    output: NodeId,
}

fn infer_shape(op: &Op, inputs: &[[usize; 3]], params: &[Param]) -> Result<[usize; 3]> {
    let bad = |msg: String| Err(Error::InvalidConfig(msg));
    let single = || -> Result<[usize; 3]> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(Error::InvalidConfig(format!("{op:?} takes exactly one input"))),
        }
    };
    let check_param = |id: usize, shape: &[usize]| -> Result<()> {
        match params.get(id) {
            Some(p) if p.shape == shape && p.data.len() == shape.iter().product::<usize>() => Ok(()),
            Some(p) => Err(Error::InvalidConfig(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name, p.shape, shape
            ))),
            None => Err(Error::InvalidConfig(format!("missing parameter #{id}"))),
        }
    };
    match op {
        Op::Input { channels, height, width } => {
            if !inputs.is_empty() {
                return bad("input node cannot have inputs".into());
            }
            Ok([*channels, *height, *width])
        }
        Op::Conv2d(spec) => {
            let [c, h, w] = single()?;
            if c != spec.in_channels {
                return bad(format!("conv expects {} channels, got {c}", spec.in_channels));
            }
            if spec.depthwise && spec.in_channels != spec.out_channels {
                return bad("depthwise conv must keep the channel count".into());
            }
            check_param(spec.weight, &spec.weight_shape())?;
            if let Some(b) = spec.bias {
                check_param(b, &[spec.out_channels])?;
            }
            let (oh, ow) = spec
                .output_hw(h, w)
                .ok_or_else(|| Error::InvalidConfig(format!("conv kernel does not fit {h}x{w} input")))?;
            Ok([spec.out_channels, oh, ow])
        }
        Op::BatchNorm(spec) => {
            let s = single()?;
            if s[0] != spec.channels {
                return bad(format!("batch norm expects {} channels, got {}", spec.channels, s[0]));
            }
            for id in [spec.gamma, spec.beta, spec.running_mean, spec.running_var] {
                check_param(id, &[spec.channels])?;
            }
            Ok(s)
        }
        Op::Relu => single(),
        Op::MaxPool(spec) | Op::AvgPool(spec) => {
            let [c, h, w] = single()?;
            let (oh, ow) = spec
                .output_hw(h, w)
                .ok_or_else(|| Error::InvalidConfig(format!("pool window does not fit {h}x{w} input")))?;
            Ok([c, oh, ow])
        }
        Op::Add => {
            if inputs.len() < 2 || inputs.iter().any(|s| *s != inputs[0]) {
                return bad(format!("add needs >= 2 inputs of equal shape, got {inputs:?}"));
            }
            Ok(inputs[0])
        }
        Op::Concat => {
            if inputs.is_empty() || inputs.iter().any(|s| s[1..] != inputs[0][1..]) {
                return bad(format!("concat needs inputs of equal spatial size, got {inputs:?}"));
            }
            Ok([inputs.iter().map(|s| s[0]).sum(), inputs[0][1], inputs[0][2]])
        }
        Op::GlobalAvgPool => {
            let [c, _, _] = single()?;
            Ok([c, 1, 1])
        }
        Op::Dense(spec) => {
            let [c, h, w] = single()?;
            if c * h * w != spec.in_features {
                return bad(format!("dense expects {} features, got {}", spec.in_features, c * h * w));
            }
            check_param(spec.weight, &[spec.out_features, spec.in_features])?;
            check_param(spec.bias, &[spec.out_features])?;
            Ok([spec.out_features, 1, 1])
        }
    }
}

impl Network {
    /// Assembles and validates a network from a node list and parameters.
    pub fn from_parts(nodes: Vec<Node>, params: Vec<Param>, output: NodeId) -> Result<Network> {
        let mut shapes = Vec::with_capacity(nodes.len());
        let mut names = HashSet::new();
        for (id, node) in nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate layer name {:?}", node.name)));
            }
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::InvalidConfig(format!("layer {:?} is not topologically ordered", node.name)));
            }
            if (id == 0) != matches!(node.op, Op::Input { .. }) {
                return Err(Error::InvalidConfig("the first node, and only it, must be the input".into()));
            }
            let ins: Vec<[usize; 3]> = node.inputs.iter().map(|&i| shapes[i]).collect();
            shapes.push(infer_shape(&node.op, &ins, &params)?);
        }
        if output >= nodes.len() {
            return Err(Error::InvalidConfig("output node out of range".into()));
        }
        Ok(Network { nodes, shapes, params, output })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.shapes[0]
    }

    pub fn output_len(&self) -> usize {
        self.shapes[self.output].iter().product()
    }

    /// `[channels, height, width]` of a node's output.
    pub fn shape_of(&self, id: NodeId) -> [usize; 3] {
        self.shapes[id]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// The deepest feature map feeding a global average pool, if any.
    pub fn last_spatial_layer(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .rev()
            .find(|n| matches!(n.op, Op::GlobalAvgPool))
            .map(|n| n.inputs[0])
    }

    fn last_uses(&self) -> Vec<NodeId> {
        let mut last = vec![0; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last[i] = id;
            }
        }
        last
    }

    /// Runs the graph on an NCHW batch. `replace` substitutes a node's output
    /// with the given tensor (used to probe downstream sensitivity).
    pub fn forward(&self, input: &Tensor, mode: Mode, keep: Keep, replace: Option<(NodeId, &Tensor)>) -> Result<ForwardPass> {
        let [c, h, w] = self.shapes[0];
        if input.shape()[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "network expects {c}x{h}x{w} inputs, got {:?}",
                &input.shape()[1..]
            )));
        }
        let n = input.batch();
        if let Some((id, t)) = replace {
            let [rc, rh, rw] = self.shapes.get(id).copied().ok_or_else(|| Error::UnknownLayer(format!("#{id}")))?;
            if t.shape() != [n, rc, rh, rw] {
                return Err(Error::ShapeMismatch(format!(
                    "replacement for {:?} has shape {:?}",
                    self.nodes[id].name,
                    t.shape()
                )));
            }
        }
        let keep_all = matches!(keep, Keep::All) || mode == Mode::Train;
        let mut retained = vec![keep_all; self.nodes.len()];
        if let Keep::Only(ids) = &keep {
            for &i in ids {
                if i < retained.len() {
                    retained[i] = true;
                }
            }
        }
        retained[self.output] = true;
        let last_use = self.last_uses();

        let mut outputs: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut scratch = ConvScratch::default();
        for (id, node) in self.nodes.iter().enumerate() {
            let [oc, oh, ow] = self.shapes[id];
            let (out, cache) = match replace {
                Some((rid, t)) if rid == id => (t.clone(), Cache::None),
                _ => {
                    let ins: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&i| outputs[i].as_ref().expect("input still alive"))
                        .collect();
                    self.eval_node(node, n, [oc, oh, ow], input, &ins, mode, &mut scratch)
                }
            };
            outputs.push(Some(out));
            caches.push(cache);
            if !keep_all {
                for &i in &node.inputs {
                    if last_use[i] == id && !retained[i] {
                        outputs[i] = None;
                    }
                }
            }
        }
        Ok(ForwardPass {
            mode,
            keep_all,
            outputs,
            caches,
            output: self.output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_node(
        &self,
        node: &Node,
        n: usize,
        out_shape: [usize; 3],
        input: &Tensor,
        ins: &[&Tensor],
        mode: Mode,
        scratch: &mut ConvScratch,
    ) -> (Tensor, Cache) {
        let x = |k: usize| ins[k];
        let [oc, oh, ow] = out_shape;
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        let mut cache = Cache::None;
        match &node.op {
            Op::Input { .. } => out = input.clone(),
            Op::Conv2d(spec) => {
                let src = x(0);
                let weight = self.params[spec.weight].to_f64();
                let bias = spec.bias.map(|b| self.params[b].to_f64());
                for b in 0..n {
                    ops::conv_forward(
                        spec,
                        src.sample(b),
                        src.height(),
                        src.width(),
                        &weight,
                        bias.as_deref(),
                        out.sample_mut(b),
                        scratch,
                    );
                }
            }
            Op::BatchNorm(spec) => {
                let src = x(0);
                let plane = oh * ow;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (m, v) = ops::batch_moments(src.data(), n, oc, plane);
                        cache = Cache::BatchStats {
                            mean: m.clone(),
                            var: v.clone(),
                            count: n * plane,
                        };
                        (m, v)
                    }
                    Mode::Inference => (self.params[spec.running_mean].to_f64(), self.params[spec.running_var].to_f64()),
                };
                let gamma = self.params[spec.gamma].to_f64();
                let beta = self.params[spec.beta].to_f64();
                for b in 0..n {
                    let s = src.sample(b);
                    let o = out.sample_mut(b);
                    for c in 0..oc {
                        let inv = 1.0 / (var[c] + spec.eps).sqrt();
                        for i in c * plane..(c + 1) * plane {
                            o[i] = gamma[c] * (s[i] - mean[c]) * inv + beta[c];
                        }
                    }
                }
            }
            Op::Relu => {
                for (o, &v) in out.data_mut().iter_mut().zip(x(0).data()) {
                    // NaN must survive so poisoned inputs are detected downstream
                    *o = if v > 0.0 || v.is_nan() { v } else { 0.0 };
                }
            }
            Op::MaxPool(spec) => {
                let src = x(0);
                let mut argmax = vec![0u32; n * oc * oh * ow];
                let per = oc * oh * ow;
                for b in 0..n {
                    ops::max_pool_forward(
                        spec,
                        oc,
                        src.height(),
                        src.width(),
                        src.sample(b),
                        &mut out.data_mut()[b * per..(b + 1) * per],
                        &mut argmax[b * per..(b + 1) * per],
                    );
                }
                cache = Cache::ArgMax(argmax);
            }
            Op::AvgPool(spec) => {
                let src = x(0);
                for b in 0..n {
                    ops::avg_pool_forward(spec, oc, src.height(), src.width(), src.sample(b), out.sample_mut(b));
                }
            }
            Op::Add => {
                out = x(0).clone();
                for k in 1..node.inputs.len() {
                    out.add_assign(x(k));
                }
            }
            Op::Concat => {
                let per = oc * oh * ow;
                for b in 0..n {
                    let mut offset = 0;
                    for k in 0..node.inputs.len() {
                        let s = x(k).sample(b);
                        out.data_mut()[b * per + offset..b * per + offset + s.len()].copy_from_slice(s);
                        offset += s.len();
                    }
                }
            }
            Op::GlobalAvgPool => {
                let src = x(0);
                let plane = src.height() * src.width();
                for b in 0..n {
                    let s = src.sample(b);
                    let o = out.sample_mut(b);
                    for c in 0..oc {
                        o[c] = s[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                    }
                }
            }
            Op::Dense(spec) => {
                let src = x(0);
                let weight = self.params[spec.weight].to_f64();
                let bias = self.params[spec.bias].to_f64();
                for b in 0..n {
                    let s = src.sample(b);
                    let o = out.sample_mut(b);
                    for (j, row) in weight.chunks_exact(spec.in_features).enumerate() {
                        o[j] = bias[j] + row.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        (out, cache)
    }

    /// Back-propagates `seed` (the gradient at the output node) through a
    /// pass made with [`Keep::All`]. Returns gradients for `wanted` nodes and,
    /// if `param_grads`, for every trainable parameter.
    pub fn backward(&self, pass: &ForwardPass, seed: Tensor, wanted: &[NodeId], param_grads: bool) -> Result<Gradients> {
        if !pass.keep_all {
            return Err(Error::ShapeMismatch("backward needs a forward pass that kept all activations".into()));
        }
        let out_t = pass.output();
        if seed.shape() != out_t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "seed gradient {:?} vs output {:?}",
                seed.shape(),
                out_t.shape()
            )));
        }
        let n = out_t.batch();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(seed);
        let mut param_out: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let mut result = HashMap::new();
        let mut pending: HashSet<NodeId> = wanted.iter().copied().collect();
        let mut scratch = ConvScratch::default();
        let act = |i: NodeId| pass.outputs[i].as_ref().expect("kept");

        for id in (0..=self.output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if pending.remove(&id) {
                result.insert(id, dy.clone());
            }
            if !param_grads && pending.is_empty() {
                break;
            }
            let node = &self.nodes[id];
            let needs_dx = |i: NodeId| i != 0 || wanted.contains(&0);
            let acc = |target: NodeId, g: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[target] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Input { .. } => {}
                Op::Conv2d(spec) => {
                    let src_id = node.inputs[0];
                    let src = act(src_id);
                    let weight = self.params[spec.weight].to_f64();
                    let mut dw = param_grads.then(|| vec![0.0; weight.len()]);
                    let mut db = (param_grads && spec.bias.is_some()).then(|| vec![0.0; spec.out_channels]);
                    let mut dx = needs_dx(src_id).then(|| Tensor::zeros(src.shape()));
                    for b in 0..n {
                        ops::conv_backward(
                            spec,
                            src.sample(b),
                            src.height(),
                            src.width(),
                            &weight,
                            dy.sample(b),
                            dw.as_deref_mut(),
                            db.as_deref_mut(),
                            dx.as_mut().map(|t| t.sample_mut(b)),
                            &mut scratch,
                        );
                    }
                    if let Some(dx) = dx {
                        acc(src_id, dx, &mut grads);
                    }
                    add_param_grad(&mut param_out, spec.weight, dw);
                    if let Some(bid) = spec.bias {
                        add_param_grad(&mut param_out, bid, db);
                    }
                }
                Op::BatchNorm(spec) => {
                    let src_id = node.inputs[0];
                    let src = act(src_id);
                    let [c, h, w] = self.shapes[id];
                    let plane = h * w;
                    let gamma = self.params[spec.gamma].to_f64();
                    let mut dx = Tensor::zeros(src.shape());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let (mean, var, count) = match &pass.caches[id] {
                        Cache::BatchStats { mean, var, count } => (mean.clone(), var.clone(), Some(*count)),
                        _ => (
                            self.params[spec.running_mean].to_f64(),
                            self.params[spec.running_var].to_f64(),
                            None,
                        ),
                    };
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] + spec.eps).sqrt();
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                let xhat = (src.data()[i] - mean[ch]) * inv;
                                sum_dy += dy.data()[i];
                                sum_dy_xhat += dy.data()[i] * xhat;
                            }
                        }
                        dgamma[ch] = sum_dy_xhat;
                        dbeta[ch] = sum_dy;
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                let g = dy.data()[i] * gamma[ch];
                                dx.data_mut()[i] = match count {
                                    Some(m) => {
                                        let xhat = (src.data()[i] - mean[ch]) * inv;
                                        let m = m as f64;
                                        inv / m * (m * g - gamma[ch] * sum_dy - gamma[ch] * xhat * sum_dy_xhat)
                                    }
                                    None => g * inv,
                                };
                            }
                        }
                    }
                    if needs_dx(src_id) {
                        acc(src_id, dx, &mut grads);
                    }
                    if param_grads {
                        add_param_grad(&mut param_out, spec.gamma, Some(dgamma));
                        add_param_grad(&mut param_out, spec.beta, Some(dbeta));
                    }
                }
                Op::Relu => {
                    let y = act(id);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    acc(node.inputs[0], dx, &mut grads);
                }
                Op::MaxPool(spec) => {
                    let src = act(node.inputs[0]);
                    let Cache::ArgMax(argmax) = &pass.caches[id] else {
                        unreachable!("max pool always caches winners")
                    };
                    let mut dx = Tensor::zeros(src.shape());
                    let per = dy.sample_len();
                    for b in 0..n {
                        ops::max_pool_backward(
                            spec,
                            src.channels(),
                            src.height(),
                            src.width(),
                            &argmax[b * per..(b + 1) * per],
                            dy.sample(b),
                            dx.sample_mut(b),
                        );
                    }
                    acc(node.inputs[0], dx, &mut grads);
                }
                Op::AvgPool(spec) => {
                    let src = act(node.inputs[0]);
                    let mut dx = Tensor::zeros(src.shape());
                    for b in 0..n {
                        ops::avg_pool_backward(spec, src.channels(), src.height(), src.width(), dy.sample(b), dx.sample_mut(b));
                    }
                    acc(node.inputs[0], dx, &mut grads);
                }
                Op::Add => {
                    for &i in &node.inputs {
                        acc(i, dy.clone(), &mut grads);
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &i in &node.inputs {
                        let s = act(i).shape();
                        let len = s[1] * s[2] * s[3];
                        let mut part = Tensor::zeros(s);
                        for b in 0..n {
                            part.sample_mut(b).copy_from_slice(&dy.sample(b)[offset..offset + len]);
                        }
                        offset += len;
                        acc(i, part, &mut grads);
                    }
                }
                Op::GlobalAvgPool => {
                    let src = act(node.inputs[0]);
                    let plane = src.height() * src.width();
                    let mut dx = Tensor::zeros(src.shape());
                    for b in 0..n {
                        let g = dy.sample(b).to_vec();
                        let d = dx.sample_mut(b);
                        for (c, gv) in g.iter().enumerate() {
                            d[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = gv / plane as f64);
                        }
                    }
                    acc(node.inputs[0], dx, &mut grads);
                }
                Op::Dense(spec) => {
                    let src_id = node.inputs[0];
                    let src = act(src_id);
                    let weight = self.params[spec.weight].to_f64();
                    let (fin, fout) = (spec.in_features, spec.out_features);
                    if param_grads {
                        let mut dw = vec![0.0; fin * fout];
                        let mut db = vec![0.0; fout];
                        for b in 0..n {
                            let s = src.sample(b);
                            for (j, &g) in dy.sample(b).iter().enumerate() {
                                db[j] += g;
                                for (d, &xv) in dw[j * fin..(j + 1) * fin].iter_mut().zip(s) {
                                    *d += g * xv;
                                }
                            }
                        }
                        add_param_grad(&mut param_out, spec.weight, Some(dw));
                        add_param_grad(&mut param_out, spec.bias, Some(db));
                    }
                    if needs_dx(src_id) {
                        let mut dx = Tensor::zeros(src.shape());
                        for b in 0..n {
                            let g = dy.sample(b).to_vec();
                            let d = dx.sample_mut(b);
                            for (j, gv) in g.iter().enumerate() {
                                for (dv, &wv) in d.iter_mut().zip(&weight[j * fin..(j + 1) * fin]) {
                                    *dv += gv * wv;
                                }
                            }
                        }
                        acc(src_id, dx, &mut grads);
                    }
                }
            }
        }
        Ok(Gradients {
            params: param_out,
            nodes: result,
        })
    }

    /// Folds the batch statistics of a training pass into the running
    /// mean/variance of every batch-norm layer.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass) {
        for (id, node) in self.nodes.iter().enumerate() {
            let (Op::BatchNorm(spec), Cache::BatchStats { mean, var, count }) = (&node.op, &pass.caches[id]) else {
                continue;
            };
            let m = spec.momentum;
            let bessel = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
            for c in 0..spec.channels {
                let rm = &mut self.params[spec.running_mean].data[c];
                *rm = (m * *rm as f64 + (1.0 - m) * mean[c]) as f32;
                let rv = &mut self.params[spec.running_var].data[c];
                *rv = (m * *rv as f64 + (1.0 - m) * var[c] * bessel) as f32;
            }
        }
    }
}

fn add_param_grad(out: &mut [Option<Vec<f64>>], id: usize, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut out[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Incrementally assembles a [`Network`], inferring shapes and initialising
/// parameters deterministically from a seed (Glorot-uniform weights, zero
/// biases, identity batch norm).
pub struct GraphBuilder {
    nodes: Vec<Node>,
    shapes: Vec<[usize; 3]>,
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(input: [usize; 3], seed: u64) -> GraphBuilder {
        let [channels, height, width] = input;
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input { channels, height, width },
                inputs: vec![],
            }],
            shapes: vec![input],
            params: vec![],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> [usize; 3] {
        self.shapes[id]
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::InvalidConfig(format!("duplicate layer name {name:?}")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::InvalidConfig(format!("unknown input node #{bad}")));
        }
        let ins: Vec<[usize; 3]> = inputs.iter().map(|&i| self.shapes[i]).collect();
        let shape = infer_shape(&op, &ins, &self.params)?;
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
        });
        self.shapes.push(shape);
        Ok(self.nodes.len() - 1)
    }

    fn param(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> usize {
        self.params.push(Param {
            name,
            shape,
            data,
            trainable,
        });
        self.params.len() - 1
    }

    fn glorot(&mut self, len: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..len).map(|_| self.rng.random_range(-limit..limit) as f32).collect()
    }

    /// Standard convolution; `padding` is symmetric `[rows, cols]`.
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: [usize; 2],
        bias: bool,
    ) -> Result<NodeId> {
        let in_channels = self.shape(x)[0];
        self.conv_impl(name, x, in_channels, out_channels, kernel, stride, padding, bias, false)
    }

    /// Depthwise convolution (one filter per channel).
    pub fn depthwise(&mut self, name: &str, x: NodeId, kernel: [usize; 2], stride: usize, padding: [usize; 2], bias: bool) -> Result<NodeId> {
        let c = self.shape(x)[0];
        self.conv_impl(name, x, c, c, kernel, stride, padding, bias, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        name: &str,
        x: NodeId,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: [usize; 2],
        bias: bool,
        depthwise: bool,
    ) -> Result<NodeId> {
        if out_channels == 0 || stride == 0 || kernel.contains(&0) {
            return Err(Error::InvalidConfig(format!("degenerate conv {name:?}")));
        }
        let area = kernel[0] * kernel[1];
        let (fan_in, fan_out) = if depthwise {
            (area, area)
        } else {
            (in_channels * area, out_channels * area)
        };
        let mut spec = Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            depthwise,
            weight: 0,
            bias: None,
        };
        let shape = spec.weight_shape();
        let data = self.glorot(shape.iter().product(), fan_in, fan_out);
        spec.weight = self.param(format!("{name}.weight"), shape, data, true);
        if bias {
            spec.bias = Some(self.param(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels], true));
        }
        self.push(name, Op::Conv2d(spec), vec![x])
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.shape(x)[0];
        let spec = BatchNormSpec {
            channels: c,
            eps: 1e-3,
            momentum: 0.99,
            gamma: self.param(format!("{name}.gamma"), vec![c], vec![1.0; c], true),
            beta: self.param(format!("{name}.beta"), vec![c], vec![0.0; c], true),
            running_mean: self.param(format!("{name}.running_mean"), vec![c], vec![0.0; c], false),
            running_var: self.param(format!("{name}.running_var"), vec![c], vec![1.0; c], false),
        };
        self.push(name, Op::BatchNorm(spec), vec![x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::Relu, vec![x])
    }

    pub fn max_pool(&mut self, name: &str, x: NodeId, size: usize, stride: usize, padding: usize) -> Result<NodeId> {
        self.push(name, Op::MaxPool(PoolSpec { size, stride, padding }), vec![x])
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, size: usize, stride: usize, padding: usize) -> Result<NodeId> {
        self.push(name, Op::AvgPool(PoolSpec { size, stride, padding }), vec![x])
    }

    pub fn add(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        self.push(name, Op::Add, xs.to_vec())
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        self.push(name, Op::Concat, xs.to_vec())
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, Op::GlobalAvgPool, vec![x])
    }

    pub fn dense(&mut self, name: &str, x: NodeId, out_features: usize) -> Result<NodeId> {
        let in_features = self.shape(x).iter().product();
        let data = self.glorot(in_features * out_features, in_features, out_features);
        let spec = DenseSpec {
            in_features,
            out_features,
            weight: self.param(format!("{name}.weight"), vec![out_features, in_features], data, true),
            bias: self.param(format!("{name}.bias"), vec![out_features], vec![0.0; out_features], true),
        };
        self.push(name, Op::Dense(spec), vec![x])
    }

    /// Mutable access to the parameters created so far, for hand-built
    /// networks with fixed weights.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn finish(self, output: NodeId) -> Result<Network> {
        Network::from_parts(self.nodes, self.params, output)
    }
}
