//! Network descriptions: a small text format, builders for the three
//! architecture variants, test-time pruning, and parameter transplants.
//!
//! The same description file yields three architectures:
//!
//! * [`ArchKind::Base`]: the plain chain ending in the category head.
//! * [`ArchKind::InjectTop`]: base plus a pose head read off the top of the
//!   chain through a bias-free linear map.
//! * [`ArchKind::InjectMulti`]: additionally, every `inject` line grows a
//!   branch (two fc+relu stages of the given widths) from the named layer's
//!   output; each branch ends in a bias-free linear map into the pose
//!   logits, and the pose logits are the sum of all pathway contributions.
//!
//! Pose machinery is appended strictly after the category sink, so the base
//! chain occupies an identical node and parameter prefix in all variants.
//! Pruning is therefore a truncation, and two variants built from the same
//! seed share bit-identical chain and category-head initializations.

use crate::graph::{Graph, GraphError, Op, ParamStore, Partition, TargetKind};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// The default architecture shipped with the crate.
pub const MINI_NET: &str = include_str!("mini.net");

/// Weight-init standard deviation used by builders and transplants.
pub const INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Validation(String),
    #[error("architecture needs a pose head but the description declares none")]
    NoPoseHead,
    #[error("injection source {0} is not a declared layer")]
    UnknownInjectionSource(String),
    #[error("no category sink in graph; cannot prune")]
    NoCategorySink,
    #[error("parameter {name} has shape {src:?} in the source but {dst:?} in the destination")]
    TransplantShape {
        name: String,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Base,
    InjectTop,
    InjectMulti,
}

impl ArchKind {
    pub fn label(self) -> &'static str {
        match self {
            ArchKind::Base => "base",
            ArchKind::InjectTop => "inject_top",
            ArchKind::InjectMulti => "inject_multi",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ArchKind::Base => 0,
            ArchKind::InjectTop => 1,
            ArchKind::InjectMulti => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ArchKind::Base),
            1 => Some(ArchKind::InjectTop),
            2 => Some(ArchKind::InjectMulti),
            _ => None,
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(ArchKind::Base),
            "inject_top" | "top" | "i" => Ok(ArchKind::InjectTop),
            "inject_multi" | "multi" | "mi" => Ok(ArchKind::InjectMulti),
            other => Err(format!(
                "unknown architecture {other:?}; expected base, inject_top, or inject_multi"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    BatchNorm,
    Relu,
    Fc {
        out: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
}

/// One `inject` line: grow a pose branch from `source` with the two given
/// hidden widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub source: String,
    pub width1: usize,
    pub width2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Input geometry as written: height, width, channels.
    pub input_hwc: (usize, usize, usize),
    pub layers: Vec<LayerDef>,
    pub categories: usize,
    /// Zero when the description has no pose head.
    pub poses: usize,
    pub injections: Vec<Injection>,
    pub lambda: f64,
}

impl NetworkSpec {
    /// Sets every dropout layer's rate, for run configs that override the
    /// rate written in the description.
    pub fn override_dropout(&mut self, rate: f64) {
        for layer in &mut self.layers {
            if let LayerKind::Dropout { rate: r } = &mut layer.kind {
                *r = rate;
            }
        }
    }
}

const EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

fn err(line: usize, msg: impl Into<String>) -> SpecError {
    SpecError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, SpecError> {
    let v: usize = tok
        .parse()
        .map_err(|_| err(line, format!("{what}: expected a non-negative integer, got {tok:?}")))?;
    Ok(v)
}

fn parse_kv(pairs: &[&str], line: usize) -> Result<Vec<(String, String)>, SpecError> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| err(line, format!("expected key=value, got {p:?}")))
        })
        .collect()
}

fn take_kv(
    kv: &[(String, String)],
    key: &str,
    line: usize,
) -> Result<Option<String>, SpecError> {
    let mut found = None;
    for (k, v) in kv {
        if k == key {
            if found.is_some() {
                return Err(err(line, format!("duplicate key {key}")));
            }
            found = Some(v.clone());
        }
    }
    Ok(found)
}

/// Parses the network description text.
pub fn parse_spec(text: &str) -> Result<NetworkSpec, SpecError> {
    let mut input_hwc: Option<(usize, usize, usize)> = None;
    let mut layers: Vec<LayerDef> = Vec::new();
    let mut categories: Option<usize> = None;
    let mut poses: Option<usize> = None;
    let mut injections: Vec<Injection> = Vec::new();
    let mut lambda: Option<f64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let toks: Vec<&str> = stripped.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "input" => {
                if input_hwc.is_some() {
                    return Err(err(line, "duplicate input line"));
                }
                if toks.len() != 4 {
                    return Err(err(line, "usage: input <height> <width> <channels>"));
                }
                let h = parse_usize(toks[1], line, "height")?;
                let w = parse_usize(toks[2], line, "width")?;
                let c = parse_usize(toks[3], line, "channels")?;
                if h == 0 || w == 0 || c == 0 {
                    return Err(err(line, "input dimensions must be positive"));
                }
                input_hwc = Some((h, w, c));
            }
            "layer" => {
                if input_hwc.is_none() {
                    return Err(err(line, "layer before input line"));
                }
                if toks.len() < 3 {
                    return Err(err(line, "usage: layer <name> <kind> [k=v ...]"));
                }
                let name = toks[1].to_string();
                if name == "input"
                    || name.starts_with("pose_")
                    || name.starts_with("category_")
                {
                    return Err(err(line, format!("layer name {name:?} is reserved")));
                }
                if layers.iter().any(|l| l.name == name) {
                    return Err(err(line, format!("duplicate layer name {name:?}")));
                }
                let kv = parse_kv(&toks[3..], line)?;
                let known = |allowed: &[&str]| -> Result<(), SpecError> {
                    for (k, _) in &kv {
                        if !allowed.contains(&k.as_str()) {
                            return Err(err(line, format!("unknown key {k:?} for {}", toks[2])));
                        }
                    }
                    Ok(())
                };
                let need = |key: &str| -> Result<String, SpecError> {
                    take_kv(&kv, key, line)?
                        .ok_or_else(|| err(line, format!("{} requires {key}=...", toks[2])))
                };
                let kind = match toks[2] {
                    "conv" => {
                        known(&["out", "k", "stride", "pad"])?;
                        let out = parse_usize(&need("out")?, line, "out")?;
                        let k = parse_usize(&need("k")?, line, "k")?;
                        let stride = match take_kv(&kv, "stride", line)? {
                            Some(v) => parse_usize(&v, line, "stride")?,
                            None => 1,
                        };
                        let pad = match take_kv(&kv, "pad", line)? {
                            Some(v) => parse_usize(&v, line, "pad")?,
                            None => 0,
                        };
                        if out == 0 || k == 0 || stride == 0 {
                            return Err(err(line, "conv out, k, stride must be positive"));
                        }
                        LayerKind::Conv { out, k, stride, pad }
                    }
                    "pool" => {
                        known(&["window", "stride"])?;
                        let window = parse_usize(&need("window")?, line, "window")?;
                        let stride = match take_kv(&kv, "stride", line)? {
                            Some(v) => parse_usize(&v, line, "stride")?,
                            None => window,
                        };
                        if window == 0 || stride == 0 {
                            return Err(err(line, "pool window and stride must be positive"));
                        }
                        LayerKind::Pool { window, stride }
                    }
                    "bn" => {
                        known(&[])?;
                        LayerKind::BatchNorm
                    }
                    "relu" => {
                        known(&[])?;
                        LayerKind::Relu
                    }
                    "fc" => {
                        known(&["out"])?;
                        let out = parse_usize(&need("out")?, line, "out")?;
                        if out == 0 {
                            return Err(err(line, "fc out must be positive"));
                        }
                        LayerKind::Fc { out }
                    }
                    "dropout" => {
                        known(&["rate"])?;
                        let rate: f64 = need("rate")?
                            .parse()
                            .map_err(|_| err(line, "rate: expected a real number"))?;
                        if !(0.0..1.0).contains(&rate) {
                            return Err(err(line, "dropout rate must be in [0, 1)"));
                        }
                        LayerKind::Dropout { rate }
                    }
                    other => {
                        return Err(err(
                            line,
                            format!(
                                "unknown layer kind {other:?}; expected conv, pool, bn, relu, fc, or dropout"
                            ),
                        ))
                    }
                };
                layers.push(LayerDef { name, kind });
            }
            "head" => {
                if toks.len() != 3 {
                    return Err(err(line, "usage: head <category|pose> <classes>"));
                }
                let classes = parse_usize(toks[2], line, "classes")?;
                if classes < 2 {
                    return Err(err(line, "a head needs at least 2 classes"));
                }
                match toks[1] {
                    "category" => {
                        if categories.is_some() {
                            return Err(err(line, "duplicate category head"));
                        }
                        categories = Some(classes);
                    }
                    "pose" => {
                        if poses.is_some() {
                            return Err(err(line, "duplicate pose head"));
                        }
                        poses = Some(classes);
                    }
                    other => return Err(err(line, format!("unknown head {other:?}"))),
                }
            }
            "inject" => {
                if toks.len() != 4 {
                    return Err(err(line, "usage: inject <layer> <width1> <width2>"));
                }
                let source = toks[1].to_string();
                let width1 = parse_usize(toks[2], line, "width1")?;
                let width2 = parse_usize(toks[3], line, "width2")?;
                if width1 == 0 || width2 == 0 {
                    return Err(err(line, "injection widths must be positive"));
                }
                if injections.iter().any(|i| i.source == source) {
                    return Err(err(line, format!("duplicate injection from {source:?}")));
                }
                injections.push(Injection {
                    source,
                    width1,
                    width2,
                });
            }
            "lambda" => {
                if lambda.is_some() {
                    return Err(err(line, "duplicate lambda line"));
                }
                if toks.len() != 2 {
                    return Err(err(line, "usage: lambda <real>"));
                }
                let v: f64 = toks[1]
                    .parse()
                    .map_err(|_| err(line, "lambda: expected a real number"))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(err(line, "lambda must be finite and non-negative"));
                }
                lambda = Some(v);
            }
            other => return Err(err(line, format!("unknown directive {other:?}"))),
        }
    }

    let input_hwc = input_hwc.ok_or(SpecError::Validation("no input line".into()))?;
    if layers.is_empty() {
        return Err(SpecError::Validation("no layers declared".into()));
    }
    let categories =
        categories.ok_or(SpecError::Validation("no category head declared".into()))?;
    for inj in &injections {
        if !layers.iter().any(|l| l.name == inj.source) {
            return Err(SpecError::UnknownInjectionSource(inj.source.clone()));
        }
    }
    Ok(NetworkSpec {
        input_hwc,
        layers,
        categories,
        poses: poses.unwrap_or(0),
        injections,
        lambda: lambda.unwrap_or(1.0),
    })
}

/// Activation geometry while walking the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeState {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl ShapeState {
    fn flat(self) -> usize {
        match self {
            ShapeState::Spatial { c, h, w } => c * h * w,
            ShapeState::Flat { d } => d,
        }
    }

    fn channels(self) -> usize {
        match self {
            ShapeState::Spatial { c, .. } => c,
            ShapeState::Flat { d } => d,
        }
    }
}

struct Builder<'r, T: Real> {
    graph: Graph,
    params: ParamStore<T>,
    rng: &'r mut Rng,
}

impl<'r, T: Real> Builder<'r, T> {
    fn gaussian(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::gaussian(shape, INIT_SIGMA, self.rng)
    }

    fn add_fc(
        &mut self,
        name: &str,
        from: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        partition: Partition,
    ) -> Result<(), SpecError> {
        let wname = format!("{name}.weight");
        let weight = self.gaussian(&[out_dim, in_dim]);
        self.params
            .insert(&wname, weight, partition.clone(), true)?;
        let mut pnames = vec![wname];
        if bias {
            let bname = format!("{name}.bias");
            self.params
                .insert(&bname, Tensor::zeros(&[out_dim]), partition, true)?;
            pnames.push(bname);
        }
        self.graph.add(name, Op::Fc { bias }, &[from], pnames)?;
        Ok(())
    }
}

/// Builds a graph and freshly initialized parameters for one variant.
///
/// Weights are mean-zero Gaussians with deviation [`INIT_SIGMA`], biases and
/// batch-norm shifts start at zero, batch-norm scales and running variances
/// at one. Draws happen in chain order, then the category head, then the
/// pose side, so two variants built from the same seed agree bit for bit on
/// every parameter they share.
pub fn build<T: Real>(
    spec: &NetworkSpec,
    kind: ArchKind,
    rng: &mut Rng,
) -> Result<(Graph, ParamStore<T>), SpecError> {
    if kind != ArchKind::Base && spec.poses == 0 {
        return Err(SpecError::NoPoseHead);
    }
    let (h, w, c) = spec.input_hwc;
    let mut b = Builder {
        graph: Graph::new(c, h, w),
        params: ParamStore::new(),
        rng,
    };

    let mut prev = "input".to_string();
    let mut state = ShapeState::Spatial { c, h, w };
    // Source name -> activation geometry, for injections.
    let mut stage_shapes: Vec<(String, ShapeState)> = Vec::new();

    for layer in &spec.layers {
        let name = layer.name.as_str();
        match &layer.kind {
            LayerKind::Conv { out, k, stride, pad } => {
                let ShapeState::Spatial { c, h, w } = state else {
                    return Err(SpecError::Validation(format!(
                        "layer {name}: conv after flattening fc"
                    )));
                };
                let (oh, ow) = crate::kernels::conv_out_hw(h, w, *k, *k, *stride, *pad)
                    .map_err(|e| SpecError::Validation(format!("layer {name}: {e}")))?;
                let wname = format!("{name}.weight");
                let bname = format!("{name}.bias");
                let weight = b.gaussian(&[*out, c, *k, *k]);
                b.params.insert(&wname, weight, Partition::Shared, true)?;
                b.params
                    .insert(&bname, Tensor::zeros(&[*out]), Partition::Shared, true)?;
                b.graph.add(
                    name,
                    Op::Conv {
                        stride: *stride,
                        pad: *pad,
                    },
                    &[&prev],
                    vec![wname, bname],
                )?;
                state = ShapeState::Spatial {
                    c: *out,
                    h: oh,
                    w: ow,
                };
            }
            LayerKind::Pool { window, stride } => {
                let ShapeState::Spatial { c, h, w } = state else {
                    return Err(SpecError::Validation(format!(
                        "layer {name}: pool after flattening fc"
                    )));
                };
                if h < *window || w < *window {
                    return Err(SpecError::Validation(format!(
                        "layer {name}: pool window {window} larger than input {h}x{w}"
                    )));
                }
                b.graph.add(
                    name,
                    Op::Pool {
                        window: *window,
                        stride: *stride,
                    },
                    &[&prev],
                    vec![],
                )?;
                state = ShapeState::Spatial {
                    c,
                    h: (h - window) / stride + 1,
                    w: (w - window) / stride + 1,
                };
            }
            LayerKind::BatchNorm => {
                let ch = state.channels();
                let names = ["gamma", "beta", "running_mean", "running_var"]
                    .map(|s| format!("{name}.{s}"));
                b.params
                    .insert(&names[0], Tensor::filled(&[ch], T::one()), Partition::Shared, true)?;
                b.params
                    .insert(&names[1], Tensor::zeros(&[ch]), Partition::Shared, true)?;
                b.params
                    .insert(&names[2], Tensor::zeros(&[ch]), Partition::Shared, false)?;
                b.params.insert(
                    &names[3],
                    Tensor::filled(&[ch], T::one()),
                    Partition::Shared,
                    false,
                )?;
                b.graph.add(
                    name,
                    Op::BatchNorm {
                        eps: EPS,
                        momentum: BN_MOMENTUM,
                    },
                    &[&prev],
                    names.to_vec(),
                )?;
            }
            LayerKind::Relu => {
                b.graph.add(name, Op::Relu, &[&prev], vec![])?;
            }
            LayerKind::Fc { out } => {
                let d = state.flat();
                let wname = format!("{name}.weight");
                let bname = format!("{name}.bias");
                let weight = b.gaussian(&[*out, d]);
                b.params.insert(&wname, weight, Partition::Shared, true)?;
                b.params
                    .insert(&bname, Tensor::zeros(&[*out]), Partition::Shared, true)?;
                b.graph
                    .add(name, Op::Fc { bias: true }, &[&prev], vec![wname, bname])?;
                state = ShapeState::Flat { d: *out };
            }
            LayerKind::Dropout { rate } => {
                b.graph
                    .add(name, Op::Dropout { rate: *rate }, &[&prev], vec![])?;
            }
        }
        prev = name.to_string();
        stage_shapes.push((prev.clone(), state));
    }

    // Category head.
    let top_dim = state.flat();
    let chain_top = prev.clone();
    {
        let wname = "category_logits.weight".to_string();
        let bname = "category_logits.bias".to_string();
        let weight = b.gaussian(&[spec.categories, top_dim]);
        b.params
            .insert(&wname, weight, Partition::CategoryHead, true)?;
        b.params.insert(
            &bname,
            Tensor::zeros(&[spec.categories]),
            Partition::CategoryHead,
            true,
        )?;
        b.graph.add(
            "category_logits",
            Op::Fc { bias: true },
            &[&chain_top],
            vec![wname, bname],
        )?;
        b.graph.add(
            "category_loss",
            Op::Loss {
                target: TargetKind::Category,
            },
            &["category_logits"],
            vec![],
        )?;
    }

    if kind == ArchKind::Base {
        return Ok((b.graph, b.params));
    }

    // Pose side, appended after the category sink.
    let mut pathway_outputs: Vec<String> = Vec::new();
    if kind == ArchKind::InjectMulti {
        for inj in &spec.injections {
            let (_, src_state) = stage_shapes
                .iter()
                .find(|(n, _)| n == &inj.source)
                .ok_or_else(|| SpecError::UnknownInjectionSource(inj.source.clone()))?;
            let part = Partition::PoseBranch(inj.source.clone());
            let fc1 = format!("pose_{}_fc1", inj.source);
            let r1 = format!("pose_{}_r1", inj.source);
            let fc2 = format!("pose_{}_fc2", inj.source);
            let r2 = format!("pose_{}_r2", inj.source);
            let proj = format!("pose_{}_proj", inj.source);
            b.add_fc(&fc1, &inj.source, src_state.flat(), inj.width1, true, part.clone())?;
            b.graph.add(&r1, Op::Relu, &[&fc1], vec![])?;
            b.add_fc(&fc2, &r1, inj.width1, inj.width2, true, part.clone())?;
            b.graph.add(&r2, Op::Relu, &[&fc2], vec![])?;
            b.add_fc(&proj, &r2, inj.width2, spec.poses, false, part)?;
            pathway_outputs.push(proj);
        }
    }
    // Top pathway: bias-free linear map from the chain output. Last in the
    // fan-in order, after the injected branches.
    b.add_fc(
        "pose_top",
        &chain_top,
        top_dim,
        spec.poses,
        false,
        Partition::PoseHead,
    )?;
    pathway_outputs.push("pose_top".to_string());

    let logits_node = if pathway_outputs.len() == 1 {
        pathway_outputs[0].clone()
    } else {
        let refs: Vec<&str> = pathway_outputs.iter().map(|s| s.as_str()).collect();
        b.graph.add("pose_logits", Op::Sum, &refs, vec![])?;
        "pose_logits".to_string()
    };
    b.graph.add(
        "pose_loss",
        Op::Loss {
            target: TargetKind::Pose,
        },
        &[&logits_node],
        vec![],
    )?;
    Ok((b.graph, b.params))
}

/// What [`prune`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneOutcome {
    Pruned {
        removed_nodes: usize,
        removed_params: usize,
    },
    /// The graph had no pose machinery; the copy is unchanged.
    AlreadyBase,
}

/// Removes all pose machinery, leaving the base chain plus category head.
///
/// Relies on the builder layout: every pose node sits after the category
/// sink. Evaluation outputs of the pruned net are bit-identical to the
/// original's category outputs, since the removed nodes were never on the
/// category path.
pub fn prune<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
) -> Result<(Graph, ParamStore<T>, PruneOutcome), SpecError> {
    let cat = graph
        .sink_id("category_loss")
        .map_err(|_| SpecError::NoCategorySink)?;
    let total = graph.nodes().len();
    let first_removed = cat + 1;
    let mut pruned_graph = graph.clone();
    pruned_graph.truncate(first_removed);
    let mut pruned_params = ParamStore::new();
    let mut removed_params = 0usize;
    for (name, entry) in params.iter() {
        if entry.partition.is_pose_side() {
            removed_params += 1;
        } else {
            pruned_params.insert(name, entry.value.clone(), entry.partition.clone(), entry.trainable)?;
        }
    }
    let outcome = if first_removed == total && removed_params == 0 {
        PruneOutcome::AlreadyBase
    } else {
        PruneOutcome::Pruned {
            removed_nodes: total - first_removed,
            removed_params,
        }
    };
    // Every kept node's parameters must have survived the filter.
    debug_assert!(pruned_graph
        .nodes()
        .iter()
        .all(|n| n.params.iter().all(|p| pruned_params.contains(p))));
    Ok((pruned_graph, pruned_params, outcome))
}

/// Report from a transplant: which destination parameters were copied from
/// the source and which were freshly re-initialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransplantReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Copies every parameter whose name appears in both stores and whose
/// destination partition passes `keep`; everything else in the destination
/// is re-initialized from `rng` (weights as fresh Gaussians, biases and
/// means to zero, scales and variances to one).
///
/// Iteration is in destination name order, so results are deterministic.
pub fn transplant_filtered<T: Real>(
    src: &ParamStore<T>,
    dst: &ParamStore<T>,
    rng: &mut Rng,
    keep: impl Fn(&Partition) -> bool,
) -> Result<(ParamStore<T>, TransplantReport), SpecError> {
    let mut out = ParamStore::new();
    let mut copied = Vec::new();
    let mut reinitialized = Vec::new();
    for (name, entry) in dst.iter() {
        let take = keep(&entry.partition)
            && src.contains(name)
            && {
                let s = src.value(name)?;
                if s.shape() != entry.value.shape() {
                    return Err(SpecError::TransplantShape {
                        name: name.clone(),
                        src: s.shape().to_vec(),
                        dst: entry.value.shape().to_vec(),
                    });
                }
                true
            };
        let value = if take {
            copied.push(name.clone());
            src.value(name)?.clone()
        } else {
            reinitialized.push(name.clone());
            fresh_value(name, entry.value.shape(), rng)?
        };
        out.insert(name, value, entry.partition.clone(), entry.trainable)?;
    }
    Ok((
        out,
        TransplantReport {
            copied,
            reinitialized,
        },
    ))
}

/// [`transplant_filtered`] keeping every partition: plain name-intersection
/// transplant. Destination-only parameters are re-initialized.
pub fn transplant<T: Real>(
    src: &ParamStore<T>,
    dst: &ParamStore<T>,
    rng: &mut Rng,
) -> Result<(ParamStore<T>, TransplantReport), SpecError> {
    transplant_filtered(src, dst, rng, |_| true)
}

/// Fresh value for a parameter by naming convention (the builder's suffixes).
fn fresh_value<T: Real>(
    name: &str,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<T>, SpecError> {
    let suffix = name.rsplit('.').next().unwrap_or("");
    match suffix {
        "weight" => Ok(Tensor::gaussian(shape, INIT_SIGMA, rng)),
        "bias" | "beta" | "running_mean" => Ok(Tensor::zeros(shape)),
        "gamma" | "running_var" => Ok(Tensor::filled(shape, T::one())),
        other => Err(SpecError::Validation(format!(
            "parameter {name}: unknown suffix {other:?}, cannot re-initialize"
        ))),
    }
}
