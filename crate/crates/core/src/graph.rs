//! Differentiable computation graph with named parameters and multiple
//! weighted loss sinks.
//!
//! Nodes are appended in topological order by construction (a node may only
//! reference already-declared inputs), so forward is a single left-to-right
//! sweep and reverse accumulation is the mirror sweep. Sinks are softmax
//! cross-entropy losses; backward takes one weight per sink and skips sinks
//! with weight zero entirely, which makes "this head contributes nothing"
//! an exact statement rather than a numerical one.

use crate::kernels::{
    batchnorm_bwd_eval, batchnorm_bwd_train, batchnorm_fwd_eval, batchnorm_fwd_train,
    bn_running_update, conv2d_bwd, conv2d_fwd, dropout_bwd, dropout_fwd, fc_bwd, fc_fwd,
    maxpool_bwd, maxpool_fwd, relu_bwd, relu_fwd, softmax_ce_batch, BnCache, ConvCache,
    PoolSwitches,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, TensorError};
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {node}: {source}")]
    AtNode { node: String, source: TensorError },
    #[error("unknown node name: {0}")]
    UnknownNode(String),
    #[error("duplicate node name: {0}")]
    DuplicateNode(String),
    #[error("node {node}: expected {expected} inputs, got {got}")]
    BadArity {
        node: String,
        expected: usize,
        got: usize,
    },
    #[error("node {node}: missing parameter {param}")]
    MissingParam { node: String, param: String },
    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter name: {0}")]
    UnknownParam(String),
    #[error("no sink named {0}")]
    NoSuchSink(String),
    #[error("batch has {images} images but {labels} {kind} labels")]
    LabelCount {
        images: usize,
        labels: usize,
        kind: &'static str,
    },
    #[error("cache was built without backward state; rerun forward with Retain::ForBackward")]
    NotRetained,
    #[error("non-finite loss at sink {0}")]
    DivergedSink(String),
}

/// Which label stream a loss sink consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Category,
    Pose,
}

/// Graph operations. Parameter tensors are carried by name in the node, in a
/// fixed order per op: conv `[weight, bias]`, batchnorm `[gamma, beta,
/// running_mean, running_var]`, fc `[weight]` or `[weight, bias]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv { stride: usize, pad: usize },
    Pool { window: usize, stride: usize },
    BatchNorm { eps: f64, momentum: f64 },
    Relu,
    Fc { bias: bool },
    Dropout { rate: f64 },
    /// Elementwise sum of two or more same-shaped inputs.
    Sum,
    /// Softmax cross-entropy sink over its single logits input.
    Loss { target: TargetKind },
}

impl Op {
    fn arity(&self) -> Option<usize> {
        match self {
            Op::Input => Some(0),
            Op::Sum => None, // two or more
            _ => Some(1),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Op::Conv { .. } => 2,
            Op::BatchNorm { .. } => 4,
            Op::Fc { bias } => 1 + usize::from(*bias),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub params: Vec<String>,
}

/// Ownership bucket for a parameter: the trunk shared by both heads, the
/// category head, the pose head, or one of the per-depth pose branches.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Shared,
    CategoryHead,
    PoseHead,
    PoseBranch(String),
}

impl Partition {
    /// True for everything that exists only to serve the pose target.
    pub fn is_pose_side(&self) -> bool {
        matches!(self, Partition::PoseHead | Partition::PoseBranch(_))
    }

    pub fn label(&self) -> String {
        match self {
            Partition::Shared => "shared".into(),
            Partition::CategoryHead => "category_head".into(),
            Partition::PoseHead => "pose_head".into(),
            Partition::PoseBranch(name) => format!("pose_branch:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub partition: Partition,
    /// Running statistics live here with `trainable == false`; they are
    /// carried by checkpoints but never receive gradients or SGD updates.
    pub trainable: bool,
}

/// Named parameter tensors, iterated in name order everywhere so update
/// order is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: Tensor<T>,
        partition: Partition,
        trainable: bool,
    ) -> Result<(), GraphError> {
        if self.entries.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                partition,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>, GraphError> {
        self.entries
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a parameter's tensor; the new value must keep the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<(), GraphError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        value.expect_shape(entry.value.shape(), name)?;
        entry.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<T>> {
        self.entries.remove(name)
    }

    /// Total element count, optionally restricted to trainable entries.
    pub fn total_elements(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast::<U>(),
                            partition: e.partition.clone(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One minibatch: images in NCHW plus the two label streams.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub categories: Vec<u32>,
    pub poses: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What the forward pass keeps around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retain {
    /// Keep everything backward needs (column caches, masks, batch stats).
    ForBackward,
    /// Keep node outputs and sink probabilities only; backward will refuse.
    OutputsOnly,
}

enum Aux<T> {
    None,
    Conv(ConvCache<T>),
    Pool(PoolSwitches),
    Bn(BnCache<T>),
    Dropout(Tensor<T>),
    Loss { grad: Tensor<T>, probs: Tensor<T> },
}

/// Everything one forward pass produced.
pub struct ActivationCache<T> {
    outputs: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
    /// Mean loss per sink name.
    pub losses: BTreeMap<String, f64>,
    /// Pending running-statistics updates: `(bn node, new_mean, new_var)`.
    pub bn_updates: Vec<(NodeId, Tensor<T>, Tensor<T>)>,
    pub batch_size: usize,
    mode: Mode,
    retain: Retain,
}

impl<T: Real> ActivationCache<T> {
    pub fn output(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.outputs.get(id).and_then(|o| o.as_ref())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Softmax probabilities computed at the named sink.
    pub fn probs(&self, graph: &Graph, sink: &str) -> Result<&Tensor<T>, GraphError> {
        let id = graph.sink_id(sink)?;
        match &self.aux[id] {
            Aux::Loss { probs, .. } => Ok(probs),
            _ => Err(GraphError::NoSuchSink(sink.to_string())),
        }
    }
}

/// Per-parameter gradients from one backward pass. Every trainable parameter
/// has an entry; parameters no active sink reaches hold exact zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        self.map
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<(), GraphError> {
        match self.map.get_mut(name) {
            Some(t) => t.add_assign(&grad).map_err(GraphError::from),
            None => Err(GraphError::UnknownParam(name.to_string())),
        }
    }
}

/// The computation graph: an input node, a DAG of layer ops, loss sinks.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: BTreeMap<String, NodeId>,
    input: NodeId,
    sinks: Vec<NodeId>,
    input_chw: (usize, usize, usize),
}

impl Graph {
    /// Creates a graph holding just the input node, named `input`.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        let node = Node {
            name: "input".to_string(),
            op: Op::Input,
            inputs: vec![],
            params: vec![],
        };
        Graph {
            nodes: vec![node],
            by_name: BTreeMap::from([("input".to_string(), 0)]),
            input: 0,
            sinks: vec![],
            input_chw: (channels, height, width),
        }
    }

    pub fn input_chw(&self) -> (usize, usize, usize) {
        self.input_chw
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Sink names in declaration order.
    pub fn sink_names(&self) -> Vec<&str> {
        self.sinks.iter().map(|&id| self.nodes[id].name.as_str()).collect()
    }

    pub fn sink_id(&self, name: &str) -> Result<NodeId, GraphError> {
        let id = self.node_id(name)?;
        if self.sinks.contains(&id) {
            Ok(id)
        } else {
            Err(GraphError::NoSuchSink(name.to_string()))
        }
    }

    /// The node whose output feeds the named sink (its logits).
    pub fn sink_logits(&self, name: &str) -> Result<NodeId, GraphError> {
        Ok(self.nodes[self.sink_id(name)?].inputs[0])
    }

    /// Appends a node. Inputs are referenced by name and must already exist,
    /// which keeps the node list topologically ordered by construction.
    pub fn add(
        &mut self,
        name: &str,
        op: Op,
        inputs: &[&str],
        params: Vec<String>,
    ) -> Result<NodeId, GraphError> {
        if self.by_name.contains_key(name) {
            return Err(GraphError::DuplicateNode(name.to_string()));
        }
        if let Some(want) = op.arity() {
            if inputs.len() != want {
                return Err(GraphError::BadArity {
                    node: name.to_string(),
                    expected: want,
                    got: inputs.len(),
                });
            }
        } else if inputs.len() < 2 {
            return Err(GraphError::BadArity {
                node: name.to_string(),
                expected: 2,
                got: inputs.len(),
            });
        }
        if params.len() != op.param_count() {
            return Err(GraphError::MissingParam {
                node: name.to_string(),
                param: format!("expected {} parameters, got {}", op.param_count(), params.len()),
            });
        }
        let ids = inputs
            .iter()
            .map(|n| self.node_id(n))
            .collect::<Result<Vec<_>, _>>()?;
        let id = self.nodes.len();
        if matches!(op, Op::Loss { .. }) {
            self.sinks.push(id);
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: ids,
            params,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Drops every node at or past `first_removed`, along with sink entries
    /// and name-map rows. Callers must know the tail is self-contained (no
    /// kept node references a dropped one); that holds for the builder's
    /// layout where pose machinery is appended after the category sink.
    pub(crate) fn truncate(&mut self, first_removed: NodeId) {
        for node in &self.nodes[first_removed..] {
            self.by_name.remove(&node.name);
        }
        self.nodes.truncate(first_removed);
        self.sinks.retain(|&s| s < first_removed);
        debug_assert!(self
            .nodes
            .iter()
            .all(|n| n.inputs.iter().all(|&i| i < first_removed)));
    }

    /// Computes every node's output shape for batch size `n`, validating
    /// parameter shapes along the way. Loss sinks report shape `[1]`.
    pub fn infer_shapes<T: Real>(
        &self,
        params: &ParamStore<T>,
        n: usize,
    ) -> Result<Vec<Vec<usize>>, GraphError> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            for p in &node.params {
                if !params.contains(p) {
                    return Err(GraphError::MissingParam {
                        node: node.name.clone(),
                        param: p.clone(),
                    });
                }
            }
            let at = |source: TensorError| GraphError::AtNode {
                node: node.name.clone(),
                source,
            };
            let shape = match &node.op {
                Op::Input => {
                    let (c, h, w) = self.input_chw;
                    vec![n, c, h, w]
                }
                Op::Conv { stride, pad } => {
                    let is = &shapes[node.inputs[0]];
                    if is.len() != 4 {
                        return Err(at(TensorError::InvalidArg(format!(
                            "conv input must be 4-d, got {is:?}"
                        ))));
                    }
                    let w = params.value(&node.params[0])?;
                    if w.rank() != 4 || w.dim(1) != is[1] {
                        return Err(at(TensorError::ShapeMismatch {
                            context: "conv weight".into(),
                            expected: vec![w.dim(0), is[1], w.dim(2), w.dim(3)],
                            got: w.shape().to_vec(),
                        }));
                    }
                    let (oh, ow) =
                        crate::kernels::conv_out_hw(is[2], is[3], w.dim(2), w.dim(3), *stride, *pad)
                            .map_err(at)?;
                    vec![n, w.dim(0), oh, ow]
                }
                Op::Pool { window, stride } => {
                    let is = &shapes[node.inputs[0]];
                    if is.len() != 4 {
                        return Err(at(TensorError::InvalidArg(format!(
                            "pool input must be 4-d, got {is:?}"
                        ))));
                    }
                    if is[2] < *window || is[3] < *window {
                        return Err(at(TensorError::InvalidArg(format!(
                            "pool window {window} larger than input {}x{}",
                            is[2], is[3]
                        ))));
                    }
                    vec![
                        n,
                        is[1],
                        (is[2] - window) / stride + 1,
                        (is[3] - window) / stride + 1,
                    ]
                }
                Op::BatchNorm { .. } => {
                    let is = &shapes[node.inputs[0]];
                    let c = if is.len() == 4 || is.len() == 2 {
                        is[1]
                    } else {
                        return Err(at(TensorError::InvalidArg(format!(
                            "batchnorm input must be rank 2 or 4, got {is:?}"
                        ))));
                    };
                    for p in &node.params {
                        params.value(p)?.expect_shape(&[c], p).map_err(at)?;
                    }
                    is.clone()
                }
                Op::Relu | Op::Dropout { .. } => shapes[node.inputs[0]].clone(),
                Op::Fc { bias } => {
                    let is = &shapes[node.inputs[0]];
                    let d: usize = is[1..].iter().product();
                    let w = params.value(&node.params[0])?;
                    w.expect_shape(&[w.dim(0), d], &format!("{} weight", node.name))
                        .map_err(at)?;
                    if *bias {
                        params
                            .value(&node.params[1])?
                            .expect_shape(&[w.dim(0)], &format!("{} bias", node.name))
                            .map_err(at)?;
                    }
                    vec![n, w.dim(0)]
                }
                Op::Sum => {
                    let first = shapes[node.inputs[0]].clone();
                    for &i in &node.inputs[1..] {
                        if shapes[i] != first {
                            return Err(at(TensorError::ShapeMismatch {
                                context: "sum inputs".into(),
                                expected: first.clone(),
                                got: shapes[i].clone(),
                            }));
                        }
                    }
                    first
                }
                Op::Loss { .. } => {
                    let is = &shapes[node.inputs[0]];
                    if is.len() != 2 {
                        return Err(at(TensorError::InvalidArg(format!(
                            "loss input must be [batch, classes], got {is:?}"
                        ))));
                    }
                    vec![1]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Runs the graph on a batch.
    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        batch: &Batch<T>,
        mode: Mode,
        retain: Retain,
        rng: &mut Rng,
    ) -> Result<ActivationCache<T>, GraphError> {
        let (c, h, w) = self.input_chw;
        let n = batch.images.dim(0);
        batch.images.expect_shape(&[n, c, h, w], "batch images")?;
        if batch.categories.len() != n {
            return Err(GraphError::LabelCount {
                images: n,
                labels: batch.categories.len(),
                kind: "category",
            });
        }
        let keep = retain == Retain::ForBackward;
        let mut outputs: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux<T>> = Vec::with_capacity(self.nodes.len());
        let mut losses = BTreeMap::new();
        let mut bn_updates = Vec::new();

        for (id, node) in self.nodes.iter().enumerate() {
            let at = |source: TensorError| GraphError::AtNode {
                node: node.name.clone(),
                source,
            };
            let input = |i: usize| -> &Tensor<T> {
                outputs[node.inputs[i]]
                    .as_ref()
                    .expect("inputs precede consumers")
            };
            let (out, a) = match &node.op {
                Op::Input => (batch.images.clone(), Aux::None),
                Op::Conv { stride, pad } => {
                    let weight = params.value(&node.params[0])?;
                    let bias = params.value(&node.params[1])?;
                    let (out, cache) =
                        conv2d_fwd(input(0), weight, bias, *stride, *pad, keep).map_err(at)?;
                    (out, cache.map(Aux::Conv).unwrap_or(Aux::None))
                }
                Op::Pool { window, stride } => {
                    let (out, sw) = maxpool_fwd(input(0), *window, *stride).map_err(at)?;
                    (out, if keep { Aux::Pool(sw) } else { Aux::None })
                }
                Op::BatchNorm { eps, momentum } => {
                    let gamma = params.value(&node.params[0])?;
                    let beta = params.value(&node.params[1])?;
                    match mode {
                        Mode::Train => {
                            let (out, cache) =
                                batchnorm_fwd_train(input(0), gamma, beta, *eps).map_err(at)?;
                            let rm = params.value(&node.params[2])?;
                            let rv = params.value(&node.params[3])?;
                            bn_updates.push((
                                id,
                                bn_running_update(rm, &cache.mean, *momentum).map_err(at)?,
                                bn_running_update(rv, &cache.var, *momentum).map_err(at)?,
                            ));
                            (out, if keep { Aux::Bn(cache) } else { Aux::None })
                        }
                        Mode::Eval => {
                            let rm = params.value(&node.params[2])?;
                            let rv = params.value(&node.params[3])?;
                            let out = batchnorm_fwd_eval(input(0), gamma, beta, rm, rv, *eps)
                                .map_err(at)?;
                            (out, Aux::None)
                        }
                    }
                }
                Op::Relu => (relu_fwd(input(0)), Aux::None),
                Op::Fc { bias } => {
                    let weight = params.value(&node.params[0])?;
                    let b = if *bias {
                        Some(params.value(&node.params[1])?)
                    } else {
                        None
                    };
                    (fc_fwd(input(0), weight, b).map_err(at)?, Aux::None)
                }
                Op::Dropout { rate } => {
                    let (out, mask) =
                        dropout_fwd(input(0), *rate, mode == Mode::Train, rng).map_err(at)?;
                    let a = match (keep, mask) {
                        (true, Some(m)) => Aux::Dropout(m),
                        _ => Aux::None,
                    };
                    (out, a)
                }
                Op::Sum => {
                    let mut out = input(0).clone();
                    for i in 1..node.inputs.len() {
                        out.add_assign(input(i)).map_err(at)?;
                    }
                    (out, Aux::None)
                }
                Op::Loss { target } => {
                    let labels: &[u32] = match target {
                        TargetKind::Category => &batch.categories,
                        TargetKind::Pose => {
                            if batch.poses.len() != n {
                                return Err(GraphError::LabelCount {
                                    images: n,
                                    labels: batch.poses.len(),
                                    kind: "pose",
                                });
                            }
                            &batch.poses
                        }
                    };
                    let xent = softmax_ce_batch(input(0), labels).map_err(at)?;
                    let loss = xent.loss.as_f64();
                    if !loss.is_finite() {
                        return Err(GraphError::DivergedSink(node.name.clone()));
                    }
                    losses.insert(node.name.clone(), loss);
                    (
                        Tensor::from_vec(&[1], vec![xent.loss])?,
                        Aux::Loss {
                            grad: xent.grad,
                            probs: xent.probs,
                        },
                    )
                }
            };
            outputs.push(Some(out));
            aux.push(a);
        }
        Ok(ActivationCache {
            outputs,
            aux,
            losses,
            bn_updates,
            batch_size: n,
            mode,
            retain,
        })
    }

    /// Reverse accumulation from the weighted sinks.
    ///
    /// `sink_weights` must name existing sinks; sinks with weight exactly
    /// zero are skipped, so parameters only they reach get exact-zero
    /// gradients. Every trainable parameter has an entry in the result.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &ActivationCache<T>,
        sink_weights: &[(&str, f64)],
    ) -> Result<Gradients<T>, GraphError> {
        if cache.retain != Retain::ForBackward {
            return Err(GraphError::NotRetained);
        }
        let mut grads = Gradients {
            map: params
                .iter()
                .filter(|(_, e)| e.trainable)
                .map(|(k, e)| (k.clone(), Tensor::zeros(e.value.shape())))
                .collect(),
        };
        let mut buffers: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (name, weight) in sink_weights {
            let id = self.sink_id(name)?;
            if *weight == 0.0 {
                continue;
            }
            let Aux::Loss { grad, .. } = &cache.aux[id] else {
                return Err(GraphError::NotRetained);
            };
            let logits = self.nodes[id].inputs[0];
            let mut seeded = grad.clone();
            seeded.scale(T::from_f64(*weight));
            match &mut buffers[logits] {
                Some(b) => b.add_assign(&seeded)?,
                slot => *slot = Some(seeded),
            }
        }

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Loss { .. } | Op::Input) {
                continue;
            }
            let Some(gout) = buffers[id].take() else {
                continue;
            };
            let at = |source: TensorError| GraphError::AtNode {
                node: node.name.clone(),
                source,
            };
            let in_id = node.inputs[0];
            let input_out = |i: usize| -> &Tensor<T> {
                cache.outputs[node.inputs[i]]
                    .as_ref()
                    .expect("forward kept outputs")
            };
            let push = |buffers: &mut Vec<Option<Tensor<T>>>,
                            id: NodeId,
                            g: Tensor<T>|
             -> Result<(), GraphError> {
                match &mut buffers[id] {
                    Some(b) => b.add_assign(&g).map_err(GraphError::from),
                    slot => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input | Op::Loss { .. } => unreachable!(),
                Op::Conv { stride, pad } => {
                    let Aux::Conv(cc) = &cache.aux[id] else {
                        return Err(GraphError::NotRetained);
                    };
                    let weight = params.value(&node.params[0])?;
                    let (gi, gw, gb) = conv2d_bwd(
                        &gout,
                        input_out(0).shape(),
                        weight,
                        cc,
                        *stride,
                        *pad,
                    )
                    .map_err(at)?;
                    grads.accumulate(&node.params[0], gw)?;
                    grads.accumulate(&node.params[1], gb)?;
                    push(&mut buffers, in_id, gi)?;
                }
                Op::Pool { window, stride } => {
                    let Aux::Pool(sw) = &cache.aux[id] else {
                        return Err(GraphError::NotRetained);
                    };
                    let gi = maxpool_bwd(&gout, sw, input_out(0).shape(), *window, *stride)
                        .map_err(at)?;
                    push(&mut buffers, in_id, gi)?;
                }
                Op::BatchNorm { eps, .. } => {
                    let gamma = params.value(&node.params[0])?;
                    let (gi, gg, gb) = match cache.mode {
                        Mode::Train => {
                            let Aux::Bn(bc) = &cache.aux[id] else {
                                return Err(GraphError::NotRetained);
                            };
                            batchnorm_bwd_train(&gout, input_out(0), gamma, bc).map_err(at)?
                        }
                        Mode::Eval => {
                            let rm = params.value(&node.params[2])?;
                            let rv = params.value(&node.params[3])?;
                            batchnorm_bwd_eval(&gout, input_out(0), gamma, rm, rv, *eps)
                                .map_err(at)?
                        }
                    };
                    grads.accumulate(&node.params[0], gg)?;
                    grads.accumulate(&node.params[1], gb)?;
                    push(&mut buffers, in_id, gi)?;
                }
                Op::Relu => {
                    let gi = relu_bwd(&gout, input_out(0)).map_err(at)?;
                    push(&mut buffers, in_id, gi)?;
                }
                Op::Fc { bias } => {
                    let weight = params.value(&node.params[0])?;
                    let (gi, gw, gb) =
                        fc_bwd(&gout, input_out(0), weight, *bias).map_err(at)?;
                    grads.accumulate(&node.params[0], gw)?;
                    if let Some(gb) = gb {
                        grads.accumulate(&node.params[1], gb)?;
                    }
                    push(&mut buffers, in_id, gi)?;
                }
                Op::Dropout { .. } => {
                    let gi = match cache.mode {
                        Mode::Train => {
                            let Aux::Dropout(mask) = &cache.aux[id] else {
                                return Err(GraphError::NotRetained);
                            };
                            dropout_bwd(&gout, mask).map_err(at)?
                        }
                        Mode::Eval => gout.clone(),
                    };
                    push(&mut buffers, in_id, gi)?;
                }
                Op::Sum => {
                    for k in 0..node.inputs.len() {
                        push(&mut buffers, node.inputs[k], gout.clone())?;
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Writes the pending batch-norm running-statistics updates from a training
/// forward pass back into the store.
pub fn apply_bn_updates<T: Real>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    cache: &ActivationCache<T>,
) -> Result<(), GraphError> {
    for (id, rm, rv) in &cache.bn_updates {
        let node = graph.node(*id);
        params.set_value(&node.params[2], rm.clone())?;
        params.set_value(&node.params[3], rv.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::softmax_ce;

    fn fc_graph() -> (Graph, ParamStore<f64>) {
        let mut g = Graph::new(2, 1, 1);
        let mut p = ParamStore::new();
        p.insert(
            "fc.weight",
            Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.25, 0.75]).unwrap(),
            Partition::Shared,
            true,
        )
        .unwrap();
        p.insert(
            "fc.bias",
            Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap(),
            Partition::CategoryHead,
            true,
        )
        .unwrap();
        g.add(
            "fc",
            Op::Fc { bias: true },
            &["input"],
            vec!["fc.weight".into(), "fc.bias".into()],
        )
        .unwrap();
        g.add(
            "category_loss",
            Op::Loss {
                target: TargetKind::Category,
            },
            &["fc"],
            vec![],
        )
        .unwrap();
        (g, p)
    }

    fn batch1() -> Batch<f64> {
        Batch {
            images: Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap(),
            categories: vec![1],
            poses: vec![],
        }
    }

    #[test]
    fn two_layer_loss_matches_direct_computation() {
        let (g, p) = fc_graph();
        let cache = g
            .forward(&p, &batch1(), Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        // logits = W x + b = [0.5*1 - 0.5*2 + 0.1, 0.25*1 + 0.75*2 - 0.1]
        let logits = [-0.4, 1.65];
        let (want, _) = softmax_ce(&logits, 1).unwrap();
        assert!((cache.losses["category_loss"] - want).abs() < 1e-12);
        let out = cache.output(g.node_id("fc").unwrap()).unwrap();
        assert!((out.data()[0] - logits[0]).abs() < 1e-12);
        assert!((out.data()[1] - logits[1]).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_manual_chain_rule() {
        let (g, p) = fc_graph();
        let cache = g
            .forward(&p, &batch1(), Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        let grads = g
            .backward(&p, &cache, &[("category_loss", 1.0)])
            .unwrap();
        let logits = [-0.4f64, 1.65];
        let (_, dlog) = softmax_ce(&logits, 1).unwrap();
        // dW[o][d] = dlogit[o] * x[d], db = dlogit
        let gw = grads.get("fc.weight").unwrap();
        let x = [1.0, 2.0];
        for o in 0..2 {
            for d in 0..2 {
                assert!((gw.data()[o * 2 + d] - dlog[o] * x[d]).abs() < 1e-12);
            }
        }
        let gb = grads.get("fc.bias").unwrap();
        assert!((gb.data()[0] - dlog[0]).abs() < 1e-12);
        assert!((gb.data()[1] - dlog[1]).abs() < 1e-12);
    }

    #[test]
    fn zero_sink_weight_gives_exact_zero_grads() {
        let (g, p) = fc_graph();
        let cache = g
            .forward(&p, &batch1(), Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        let grads = g
            .backward(&p, &cache, &[("category_loss", 0.0)])
            .unwrap();
        for (_, t) in grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sum_node_adds_and_splits_gradient() {
        let mut g = Graph::new(2, 1, 1);
        let mut p = ParamStore::<f64>::new();
        p.insert(
            "a.weight",
            Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Partition::PoseBranch("a".into()),
            true,
        )
        .unwrap();
        p.insert(
            "b.weight",
            Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap(),
            Partition::PoseBranch("b".into()),
            true,
        )
        .unwrap();
        g.add("a", Op::Fc { bias: false }, &["input"], vec!["a.weight".into()])
            .unwrap();
        g.add("b", Op::Fc { bias: false }, &["input"], vec!["b.weight".into()])
            .unwrap();
        g.add("sum", Op::Sum, &["a", "b"], vec![]).unwrap();
        g.add(
            "pose_loss",
            Op::Loss {
                target: TargetKind::Pose,
            },
            &["sum"],
            vec![],
        )
        .unwrap();
        let batch = Batch {
            images: Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
            categories: vec![0],
            poses: vec![0],
        };
        let cache = g
            .forward(&p, &batch, Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        // a -> [1, 0], b -> [0, 2], sum -> [1, 2]
        let s = cache.output(g.node_id("sum").unwrap()).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0]);
        // Gradient reaches both pathway weights.
        let grads = g.backward(&p, &cache, &[("pose_loss", 1.0)]).unwrap();
        assert!(grads.get("a.weight").unwrap().sum_squares() > 0.0);
        assert!(grads.get("b.weight").unwrap().sum_squares() > 0.0);
    }

    #[test]
    fn multi_sink_backward_is_linear_in_weights() {
        // Shared trunk, two sinks; check w1*g1 + w2*g2 composition.
        let mut g = Graph::new(3, 1, 1);
        let mut p = ParamStore::<f64>::new();
        let mut rng = Rng::new(40);
        p.insert(
            "trunk.weight",
            Tensor::gaussian(&[4, 3], 0.7, &mut rng),
            Partition::Shared,
            true,
        )
        .unwrap();
        p.insert(
            "cat.weight",
            Tensor::gaussian(&[3, 4], 0.7, &mut rng),
            Partition::CategoryHead,
            true,
        )
        .unwrap();
        p.insert(
            "pose.weight",
            Tensor::gaussian(&[5, 4], 0.7, &mut rng),
            Partition::PoseHead,
            true,
        )
        .unwrap();
        g.add(
            "trunk",
            Op::Fc { bias: false },
            &["input"],
            vec!["trunk.weight".into()],
        )
        .unwrap();
        g.add("trunk_relu", Op::Relu, &["trunk"], vec![]).unwrap();
        g.add(
            "cat",
            Op::Fc { bias: false },
            &["trunk_relu"],
            vec!["cat.weight".into()],
        )
        .unwrap();
        g.add(
            "pose",
            Op::Fc { bias: false },
            &["trunk_relu"],
            vec!["pose.weight".into()],
        )
        .unwrap();
        g.add(
            "category_loss",
            Op::Loss {
                target: TargetKind::Category,
            },
            &["cat"],
            vec![],
        )
        .unwrap();
        g.add(
            "pose_loss",
            Op::Loss {
                target: TargetKind::Pose,
            },
            &["pose"],
            vec![],
        )
        .unwrap();
        let batch = Batch {
            images: Tensor::gaussian(&[4, 3, 1, 1], 1.0, &mut rng),
            categories: vec![0, 2, 1, 0],
            poses: vec![3, 0, 4, 2],
        };
        let cache = g
            .forward(&p, &batch, Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        let combined = g
            .backward(&p, &cache, &[("category_loss", 0.3), ("pose_loss", 1.7)])
            .unwrap();
        let only_cat = g
            .backward(&p, &cache, &[("category_loss", 1.0), ("pose_loss", 0.0)])
            .unwrap();
        let only_pose = g
            .backward(&p, &cache, &[("category_loss", 0.0), ("pose_loss", 1.0)])
            .unwrap();
        for (name, t) in combined.iter() {
            let a = only_cat.get(name).unwrap();
            let b = only_pose.get(name).unwrap();
            for i in 0..t.len() {
                let want = 0.3 * a.data()[i] + 1.7 * b.data()[i];
                assert!(
                    (t.data()[i] - want).abs() < 1e-10,
                    "{name}[{i}]: {} vs {want}",
                    t.data()[i]
                );
            }
        }
        // Zero pose weight leaves pose parameters at exact zero.
        assert!(only_cat
            .get("pose.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(only_cat.get("trunk.weight").unwrap().sum_squares() > 0.0);
    }

    #[test]
    fn same_seed_reproduces_train_forward_exactly() {
        // Dropout between input and fc exercises the rng stream.
        let mut g = Graph::new(2, 1, 1);
        g.add("drop", Op::Dropout { rate: 0.5 }, &["input"], vec![])
            .unwrap();
        g.add(
            "fc",
            Op::Fc { bias: true },
            &["drop"],
            vec!["fc.weight".into(), "fc.bias".into()],
        )
        .unwrap();
        g.add(
            "category_loss",
            Op::Loss {
                target: TargetKind::Category,
            },
            &["fc"],
            vec![],
        )
        .unwrap();
        let (_, p) = fc_graph();
        let c1 = g
            .forward(&p, &batch1(), Mode::Train, Retain::ForBackward, &mut Rng::new(5))
            .unwrap();
        let c2 = g
            .forward(&p, &batch1(), Mode::Train, Retain::ForBackward, &mut Rng::new(5))
            .unwrap();
        assert_eq!(c1.losses, c2.losses);
        let f1 = c1.output(1).unwrap();
        let f2 = c2.output(1).unwrap();
        assert_eq!(f1.data(), f2.data());
        // Eval mode ignores the rng entirely.
        let e1 = g
            .forward(&p, &batch1(), Mode::Eval, Retain::OutputsOnly, &mut Rng::new(1))
            .unwrap();
        let e2 = g
            .forward(&p, &batch1(), Mode::Eval, Retain::OutputsOnly, &mut Rng::new(999))
            .unwrap();
        assert_eq!(e1.losses, e2.losses);
    }

    #[test]
    fn outputs_only_cache_refuses_backward() {
        let (g, p) = fc_graph();
        let cache = g
            .forward(&p, &batch1(), Mode::Eval, Retain::OutputsOnly, &mut Rng::new(0))
            .unwrap();
        let err = g
            .backward(&p, &cache, &[("category_loss", 1.0)])
            .unwrap_err();
        assert_eq!(err, GraphError::NotRetained);
    }

    #[test]
    fn unknown_sink_is_an_error() {
        let (g, p) = fc_graph();
        let cache = g
            .forward(&p, &batch1(), Mode::Eval, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        assert!(matches!(
            g.backward(&p, &cache, &[("nope", 1.0)]),
            Err(GraphError::UnknownNode(_) | GraphError::NoSuchSink(_))
        ));
    }

    #[test]
    fn add_validates_names_and_arity() {
        let mut g = Graph::new(1, 4, 4);
        assert!(matches!(
            g.add("x", Op::Relu, &["missing"], vec![]),
            Err(GraphError::UnknownNode(_))
        ));
        g.add("r", Op::Relu, &["input"], vec![]).unwrap();
        assert!(matches!(
            g.add("r", Op::Relu, &["input"], vec![]),
            Err(GraphError::DuplicateNode(_))
        ));
        assert!(matches!(
            g.add("s", Op::Sum, &["r"], vec![]),
            Err(GraphError::BadArity { .. })
        ));
        assert!(matches!(
            g.add("c", Op::Conv { stride: 1, pad: 0 }, &["r"], vec![]),
            Err(GraphError::MissingParam { .. })
        ));
    }

    #[test]
    fn shape_inference_names_offending_node() {
        let mut g = Graph::new(1, 8, 8);
        let mut p = ParamStore::<f32>::new();
        p.insert(
            "conv1.weight",
            Tensor::zeros(&[4, 2, 3, 3]), // wrong channel count: input has 1
            Partition::Shared,
            true,
        )
        .unwrap();
        p.insert("conv1.bias", Tensor::zeros(&[4]), Partition::Shared, true)
            .unwrap();
        g.add(
            "conv1",
            Op::Conv { stride: 1, pad: 1 },
            &["input"],
            vec!["conv1.weight".into(), "conv1.bias".into()],
        )
        .unwrap();
        let err = g.infer_shapes(&p, 2).unwrap_err();
        match err {
            GraphError::AtNode { node, .. } => assert_eq!(node, "conv1"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
