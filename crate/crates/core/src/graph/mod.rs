//! The multi-stream network as a small DAG over the layer vocabulary.
//!
//! ```text
//! input -> conv1 -> relu1 -> pool1 -> norm1 -+-> conv2 -> relu2 -> conv3 -> relu3 -+
//!                                            |                                    |
//!                                            +-> conv4 -> relu4 ------------------+-> concat
//! concat -> conv5 -> relu5 -> flatten -> fc6 -> relu6 -> fc7 (logits)
//! ```
//!
//! Nodes are stored in construction order, which is a topological order.
//! Parameters live in a registry keyed by name (`conv1.weight`, `fc7.bias`,
//! ...) and are grouped for freezing: the root convolution is group `root`,
//! every other layer is its own group.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, conv, fc_backward, fc_forward, lrn_backward_with, lrn_forward,
    maxpool_backward, maxpool_forward, relu, relu_backward, split_channels, LrnAdjoint, LrnParams,
    PoolIndexMap,
};
use crate::tensor::{ShapeDisplay, Tensor, Window};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::LfhnConfig;

pub const ROOT_GROUP: &str = "root";

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        weight: usize,
        bias: usize,
        window: Window,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn(LrnParams),
    Concat,
    Flatten,
    Fc {
        weight: usize,
        bias: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { window, .. } if window.kh == 1 && window.kw == 1 => "conv1x1",
            Op::Conv { .. } => "conv",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::Lrn(_) => "lrn",
            Op::Concat => "concat",
            Op::Flatten => "flatten",
            Op::Fc { .. } => "fc",
        }
    }

    /// Registry index of the weight; the bias shares its group.
    fn weight(&self) -> Option<usize> {
        match self {
            Op::Conv { weight, .. } | Op::Fc { weight, .. } => Some(*weight),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    /// Per-sample output shape (`[H, W, C]` or `[D]`).
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub frozen: bool,
    /// Fan-in used by the initializer.
    fan_in: usize,
}

/// Symbolic construction: shapes are propagated as nodes are added, and
/// parameters are recorded by shape only.
struct Planner {
    nodes: Vec<Node>,
    params: Vec<(String, String, Vec<usize>, usize)>,
}

impl Planner {
    fn add(&mut self, name: &str, op: Op, inputs: &[usize]) -> Result<usize> {
        let in_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&i| self.nodes[i].shape.as_slice())
            .collect();
        let shape = self
            .infer(&op, &in_shapes)
            .map_err(|e| {
                let detail = match e {
                    Error::Config(m) | Error::Shape(m) => m,
                    other => other.to_string(),
                };
                Error::config(format!("node {name}: {detail}"))
            })?;
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn param(&mut self, name: String, group: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        self.params.push((name, group.to_string(), shape, fan_in));
        self.params.len() - 1
    }

    fn infer(&self, op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
        let hwc = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::shape(format!(
                    "expected an HxWxC map, got {}",
                    ShapeDisplay(s)
                ))),
            }
        };
        match op {
            Op::Input => unreachable!("input is created directly"),
            Op::Conv { weight, window, .. } => {
                let (h, w, c) = hwc(ins[0])?;
                let k = &self.params[*weight].2;
                if k[2] != c {
                    return Err(Error::shape(format!(
                        "kernel expects {} channels, input has {c}",
                        k[2]
                    )));
                }
                let (ho, wo) = window.out_hw(h, w)?;
                Ok(vec![ho, wo, k[3]])
            }
            Op::Relu | Op::Lrn(_) => Ok(ins[0].to_vec()),
            Op::MaxPool { window, stride } => {
                let (h, w, c) = hwc(ins[0])?;
                let (ho, wo) = Window::new(*window, *window, *stride, 0).out_hw(h, w)?;
                Ok(vec![ho, wo, c])
            }
            Op::Concat => {
                let (h, w, _) = hwc(ins[0])?;
                let mut c = 0;
                for s in ins {
                    let (sh, sw, sc) = hwc(s)?;
                    if (sh, sw) != (h, w) {
                        return Err(Error::shape("stream spatial extents differ"));
                    }
                    c += sc;
                }
                Ok(vec![h, w, c])
            }
            Op::Flatten => Ok(vec![ins[0].iter().product()]),
            Op::Fc { weight, .. } => {
                let k = &self.params[*weight].2;
                let d: usize = ins[0].iter().product();
                if k[0] != d {
                    return Err(Error::shape(format!("expects {} features, got {d}", k[0])));
                }
                Ok(vec![k[1]])
            }
        }
    }
}

fn plan(cfg: &LfhnConfig) -> Result<Planner> {
    cfg.validate()?;
    let mut p = Planner {
        nodes: vec![Node {
            name: "input".into(),
            op: Op::Input,
            inputs: vec![],
            shape: cfg.input_shape().to_vec(),
        }],
        params: Vec::new(),
    };

    let conv = |p: &mut Planner, name: &str, group: &str, from: usize, k: usize, stride: usize, pad: usize, cout: usize| -> Result<usize> {
        let cin = *p.nodes[from].shape.last().unwrap();
        let weight = p.param(format!("{name}.weight"), group, vec![k, k, cin, cout], k * k * cin);
        let bias = p.param(format!("{name}.bias"), group, vec![cout], 0);
        p.add(
            name,
            Op::Conv {
                weight,
                bias,
                window: Window::new(k, k, stride, pad),
            },
            &[from],
        )
    };

    let root = conv(
        &mut p,
        "conv1",
        ROOT_GROUP,
        0,
        cfg.root_kernel,
        cfg.root_stride,
        cfg.root_pad,
        cfg.root_channels,
    )?;
    let root = p.add("relu1", Op::Relu, &[root])?;
    let root = p.add(
        "pool1",
        Op::MaxPool {
            window: cfg.pool_window,
            stride: cfg.pool_stride,
        },
        &[root],
    )?;
    let norm = p.add("norm1", Op::Lrn(cfg.lrn), &[root])?;

    let mut layer = 2;
    let mut pointwise = |p: &mut Planner, from: usize, width: usize| -> Result<usize> {
        let name = format!("conv{layer}");
        let mut at = conv(p, &name, &name, from, 1, 1, 0, width)?;
        if cfg.relu_after_pointwise {
            at = p.add(&format!("relu{layer}"), Op::Relu, &[at])?;
        }
        layer += 1;
        Ok(at)
    };

    let mut tails = Vec::with_capacity(cfg.streams.len());
    for stream in &cfg.streams {
        let mut at = norm;
        for &width in stream {
            at = pointwise(&mut p, at, width)?;
        }
        tails.push(at);
    }
    let joined = p.add("concat", Op::Concat, &tails)?;
    let mixed = pointwise(&mut p, joined, cfg.mix_width)?;
    let flat = p.add("flatten", Op::Flatten, &[mixed])?;

    let d = p.nodes[flat].shape[0];
    let fc_layer = layer;
    let fc = |p: &mut Planner, name: &str, from: usize, din: usize, dout: usize| -> Result<usize> {
        let weight = p.param(format!("{name}.weight"), name, vec![din, dout], din);
        let bias = p.param(format!("{name}.bias"), name, vec![dout], 0);
        p.add(name, Op::Fc { weight, bias }, &[from])
    };
    let hidden_name = format!("fc{fc_layer}");
    let mut hidden = fc(&mut p, &hidden_name, flat, d, cfg.fc_hidden)?;
    if cfg.relu_after_hidden_fc {
        hidden = p.add(&format!("relu{fc_layer}"), Op::Relu, &[hidden])?;
    }
    fc(&mut p, &format!("fc{}", fc_layer + 1), hidden, cfg.fc_hidden, cfg.classes)?;
    Ok(p)
}

/// Symbolic shape propagation: every node's name and per-sample output shape,
/// in topological order, without allocating activations or parameters.
pub fn shape_trace(cfg: &LfhnConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(plan(cfg)?
        .nodes
        .into_iter()
        .map(|n| (n.name, n.shape))
        .collect())
}

/// Parameter names and shapes, computed symbolically.
pub fn parameter_shapes(cfg: &LfhnConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(plan(cfg)?
        .params
        .into_iter()
        .map(|(name, _, shape, _)| (name, shape))
        .collect())
}

pub fn build_lfhn(cfg: &LfhnConfig, seed: u64) -> Result<NetworkGraph> {
    NetworkGraph::build(cfg, seed)
}

#[derive(Clone, Debug)]
pub struct NetworkGraph {
    config: LfhnConfig,
    nodes: Vec<Node>,
    params: Vec<Param>,
    order: Vec<usize>,
    lrn_adjoint: LrnAdjoint,
}

impl NetworkGraph {
    /// Builds the network with He-normal weights (std `sqrt(2 / fan_in)`) and
    /// zero biases drawn from a ChaCha8 stream seeded with `seed`.
    pub fn build(cfg: &LfhnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_plan(cfg, |shape, fan_in| {
            if fan_in == 0 {
                return Tensor::zeros(shape);
            }
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        })
    }

    /// Same topology as [`NetworkGraph::build`] with every parameter zero.
    pub fn zeroed(cfg: &LfhnConfig) -> Result<Self> {
        Self::from_plan(cfg, |shape, _| Tensor::zeros(shape))
    }

    fn from_plan(cfg: &LfhnConfig, mut init: impl FnMut(&[usize], usize) -> Tensor) -> Result<Self> {
        let p = plan(cfg)?;
        let params = p
            .params
            .into_iter()
            .map(|(name, group, shape, fan_in)| Param {
                value: init(&shape, fan_in),
                name,
                group,
                frozen: false,
                fan_in,
            })
            .collect();
        let mut net = NetworkGraph {
            config: cfg.clone(),
            nodes: p.nodes,
            params,
            order: Vec::new(),
            lrn_adjoint: LrnAdjoint::Exact,
        };
        net.order = net.topological_order()?;
        Ok(net)
    }

    /// Kahn's algorithm; errors on a cycle or a dangling input reference.
    fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= n {
                    return Err(Error::config(format!("{} reads missing node {i}", node.name)));
                }
                indegree[id] += 1;
                consumers[i].push(id);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(id) = ready.pop() {
            order.push(id);
            for &c in consumers[id].iter().rev() {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::config("network graph has a cycle"));
        }
        Ok(order)
    }

    pub fn config(&self) -> &LfhnConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn topological(&self) -> &[usize] {
        &self.order
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Errors unless the network can score `classes` identities.
    pub fn expect_classes(&self, classes: usize) -> Result<()> {
        if self.config.classes < classes {
            return Err(Error::Mismatch(format!(
                "model scores {} classes but the data needs {classes}",
                self.config.classes
            )));
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let mut found = false;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
            found = true;
        }
        if !found {
            return Err(Error::Unknown {
                kind: "parameter group",
                name: group.to_string(),
            });
        }
        Ok(())
    }

    pub fn freeze_root(&mut self, frozen: bool) {
        self.set_frozen(ROOT_GROUP, frozen)
            .expect("every network has a root group");
    }

    pub fn frozen_groups(&self) -> Vec<&str> {
        let mut groups: Vec<&str> = self
            .params
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.group.as_str())
            .collect();
        groups.dedup();
        groups
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| !p.frozen)
    }

    /// Selects which LRN adjoint the backward pass uses. Anything other than
    /// [`LrnAdjoint::Exact`] produces wrong gradients; it is only for testing
    /// gradient checkers.
    pub fn set_lrn_adjoint(&mut self, adjoint: LrnAdjoint) {
        self.lrn_adjoint = adjoint;
    }

    /// Replaces the root convolution with externally trained weights.
    ///
    /// The file holds little-endian floats, either all `f32` or all `f64`
    /// (told apart by file size): the kernel in `kh, kw, Cin, Cout` order
    /// followed by the `Cout` biases.
    pub fn load_root_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let kernel_len = self.param("conv1.weight").unwrap().value.len();
        let bias_len = self.param("conv1.bias").unwrap().value.len();
        let count = kernel_len + bias_len;
        let values: Vec<f64> = if bytes.len() == count * 4 {
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else if bytes.len() == count * 8 {
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        } else {
            return Err(Error::Format(format!(
                "root weight file {} has {} bytes; expected {count} f32 or f64 values",
                path.display(),
                bytes.len()
            )));
        };
        let (k, b) = values.split_at(kernel_len);
        self.param_mut("conv1.weight")
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(k);
        self.param_mut("conv1.bias")
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(b);
        Ok(())
    }

    fn input_extents_match(&self, batch: &Tensor) -> Result<()> {
        let ok = batch.rank() == 4 && batch.shape()[1..] == self.config.input_shape();
        if !ok {
            return Err(Error::shape(format!(
                "batch {} does not match network input {}",
                ShapeDisplay(batch.shape()),
                ShapeDisplay(&self.config.input_shape())
            )));
        }
        Ok(())
    }

    /// Runs the whole graph on an `N x H x W x C` batch. The returned cache
    /// keeps every node output for [`NetworkGraph::backward`].
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.input_extents_match(batch)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut pools = vec![None; self.nodes.len()];
        for &id in &self.order {
            let node = &self.nodes[id];
            let x = |k: usize| &outputs[node.inputs[k]];
            let out = match &node.op {
                Op::Input => batch.clone(),
                Op::Conv {
                    weight,
                    bias,
                    window,
                } => {
                    let (k, b) = (&self.params[*weight].value, &self.params[*bias].value);
                    if window.kh == 1 && window.kw == 1 && window.stride == 1 && window.pad == 0 {
                        conv::forward_1x1_raw(x(0), k, b)?
                    } else {
                        conv::forward_raw(x(0), k, b, *window)?
                    }
                }
                Op::Relu => relu(x(0)),
                Op::MaxPool { window, stride } => {
                    let (out, map) = maxpool_forward(x(0), *window, *stride)?;
                    pools[id] = Some(map);
                    out
                }
                Op::Lrn(p) => lrn_forward(x(0), p)?,
                Op::Concat => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &outputs[i]).collect();
                    concat_channels(&ins)?
                }
                Op::Flatten => {
                    let n = batch.shape()[0];
                    x(0).clone().reshape(&[n, node.shape[0]])?
                }
                Op::Fc { weight, bias } => {
                    fc_forward(x(0), &self.params[*weight].value, &self.params[*bias].value)?
                }
            };
            debug_assert_eq!(outputs.len(), id);
            outputs.push(out);
        }
        let logits = outputs.last().expect("graph has nodes").clone();
        let relus = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Relu)
            .map(|(i, _)| i)
            .collect();
        Ok((
            logits,
            ForwardCache {
                outputs,
                pools,
                relus,
            },
        ))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }

    /// Mean softmax cross-entropy of the batch.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(batch)?;
        Ok(crate::layers::softmax_xent(&logits, labels)?.0)
    }

    /// Whether each node's output gradient is needed to reach a trainable
    /// parameter.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for &id in &self.order {
            let node = &self.nodes[id];
            let own = node.op.weight().is_some_and(|p| !self.params[p].frozen);
            needs[id] = own || node.inputs.iter().any(|&i| needs[i]);
        }
        needs
    }

    /// Reverse pass from `dL/dlogits`. Frozen parameters get no entry.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
        if cache.outputs.len() != self.nodes.len() {
            return Err(Error::shape("forward cache does not belong to this network"));
        }
        let last = self.nodes.len() - 1;
        if grad_logits.shape() != cache.outputs[last].shape() {
            return Err(Error::shape(format!(
                "grad_logits {} vs logits {}",
                ShapeDisplay(grad_logits.shape()),
                ShapeDisplay(cache.outputs[last].shape())
            )));
        }
        let needs = self.needs_grad();
        let mut pending: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        pending[last] = Some(grad_logits.clone());
        let mut grads = Gradients::default();

        let push = |pending: &mut Vec<Option<Tensor>>, to: usize, g: Tensor| -> Result<()> {
            match &mut pending[to] {
                Some(acc) => acc.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        for &id in self.order.iter().rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let input = |k: usize| &cache.outputs[node.inputs[k]];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    weight,
                    bias,
                    window,
                } => {
                    let src = node.inputs[0];
                    let frozen = self.params[*weight].frozen;
                    if frozen && !needs[src] {
                        continue;
                    }
                    let r = conv::backward_raw(
                        input(0),
                        &self.params[*weight].value,
                        *window,
                        &g,
                        needs[src],
                    )?;
                    if !frozen {
                        grads.insert(&self.params[*weight].name, r.kernel);
                        grads.insert(&self.params[*bias].name, r.bias);
                    }
                    if let Some(gi) = r.input {
                        push(&mut pending, src, gi)?;
                    }
                }
                Op::Relu => {
                    if needs[node.inputs[0]] {
                        // sign of the output equals sign of the input
                        let gi = relu_backward(&cache.outputs[id], &g)?;
                        push(&mut pending, node.inputs[0], gi)?;
                    }
                }
                Op::MaxPool { .. } => {
                    if needs[node.inputs[0]] {
                        let map = cache.pools[id]
                            .as_ref()
                            .ok_or_else(|| Error::shape("missing pool index map in cache"))?;
                        push(&mut pending, node.inputs[0], maxpool_backward(map, &g)?)?;
                    }
                }
                Op::Lrn(p) => {
                    if needs[node.inputs[0]] {
                        let gi = lrn_backward_with(input(0), p, &g, self.lrn_adjoint)?;
                        push(&mut pending, node.inputs[0], gi)?;
                    }
                }
                Op::Concat => {
                    let widths: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&i| *self.nodes[i].shape.last().unwrap())
                        .collect();
                    for (&src, part) in node.inputs.iter().zip(split_channels(&g, &widths)?) {
                        if needs[src] {
                            push(&mut pending, src, part)?;
                        }
                    }
                }
                Op::Flatten => {
                    let src = node.inputs[0];
                    if needs[src] {
                        push(&mut pending, src, g.reshape(cache.outputs[src].shape())?)?;
                    }
                }
                Op::Fc { weight, bias } => {
                    let src = node.inputs[0];
                    let frozen = self.params[*weight].frozen;
                    if frozen && !needs[src] {
                        continue;
                    }
                    let r = fc_backward(input(0), &self.params[*weight].value, &g, needs[src])?;
                    if !frozen {
                        grads.insert(&self.params[*weight].name, r.weight);
                        grads.insert(&self.params[*bias].name, r.bias);
                    }
                    if let Some(gi) = r.input {
                        push(&mut pending, src, gi)?;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Loss and gradients of the mean softmax cross-entropy on one batch.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Tensor, Gradients)> {
        let (logits, cache) = self.forward(batch)?;
        let (loss, grad) = crate::layers::softmax_xent(&logits, labels)?;
        let grads = self.backward(&cache, &grad)?;
        Ok((loss, logits, grads))
    }
}

impl fmt::Display for NetworkGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for node in &self.nodes {
            let from: Vec<&str> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].name.as_str())
                .collect();
            writeln!(
                f,
                "{:<8} {:<8} {:<16} <- {}",
                node.name,
                node.op.kind(),
                ShapeDisplay(&node.shape).to_string(),
                from.join(", ")
            )?;
        }
        write!(f, "{} parameters", self.parameter_count())
    }
}

/// Node outputs and pooling decisions of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    outputs: Vec<Tensor>,
    pools: Vec<Option<PoolIndexMap>>,
    relus: Vec<usize>,
}

impl ForwardCache {
    pub fn output(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }

    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("graph has nodes")
    }

    /// True when both passes took the same branch at every ReLU (same sign
    /// pattern) and every max pool (same winners). Between two such passes
    /// the network is a smooth function of its parameters.
    pub fn same_branches(&self, other: &ForwardCache) -> bool {
        let relus_match = self.relus.iter().all(|&id| {
            self.outputs[id]
                .data()
                .iter()
                .zip(other.outputs[id].data())
                .all(|(a, b)| (*a > 0.0) == (*b > 0.0))
        });
        relus_match && self.pools == other.pools
    }
}

/// Named parameter gradients, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: &str, grad: Tensor) {
        self.map.insert(name.to_string(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` entry by entry; both must cover the same names.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.map.is_empty() {
            self.map = other.map.clone();
            return Ok(());
        }
        if self.map.len() != other.map.len() {
            return Err(Error::shape("gradient registries cover different parameters"));
        }
        for (name, g) in &other.map {
            self.map
                .get_mut(name)
                .ok_or_else(|| Error::Unknown {
                    kind: "parameter",
                    name: name.clone(),
                })?
                .add_assign(g)?;
        }
        Ok(())
    }
}
