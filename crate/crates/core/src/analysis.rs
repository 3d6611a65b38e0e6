//! Post-training diagnostics: gradient probes at a trained point, the
//! warm-start transplant experiment, class-conditional unit entropy and the
//! decoupling coefficient, receptive-field averages, and a 2-D PCA
//! projection of activations.
//!
//! Everything here runs the network in eval mode (frozen batch statistics,
//! no dropout), so every report is a deterministic function of parameters,
//! data, and the probe seed.

use crate::data::{DataError, Dataset};
use crate::graph::{Graph, GraphError, Mode, ParamStore, Partition, Retain};
use crate::netspec::{build, transplant_filtered, ArchKind, NetworkSpec, SpecError};
use crate::rng::{derive_named, Rng};
use crate::tensor::Real;
use crate::train::{evaluate, train_segment, EpochStat, TrainConfig, TrainError, TrainState, EVAL_BATCH};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// A unit whose total response falls below this is considered dead.
pub const DEAD_MASS: f64 = 1e-8;
/// Shared-partition gradient RMS below this counts as near-converged.
pub const CONVERGED_GRAD_RMS: f64 = 1e-4;
/// Train-loss movement over three epochs below this counts as a plateau.
pub const CONVERGED_LOSS_DELTA: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("spectrum too degenerate: {0}")]
    DegenerateSpectrum(String),
}

// ---------------------------------------------------------------------------
// Gradient probes

/// Gradient magnitudes for one parameter partition: the L2 norm over all
/// its elements and the per-element RMS, both averaged over probe batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionStat {
    pub l2: f64,
    pub rms: f64,
    pub elements: usize,
}

/// Norms for the three coarse partitions: shared trunk, category head, and
/// everything on the pose side (head plus branches). `pose_side` is absent
/// on a pruned or base network.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeNorms {
    pub shared: PartitionStat,
    pub category_head: PartitionStat,
    pub pose_side: Option<PartitionStat>,
}

/// Gradient magnitudes at the current parameters, measured in eval mode.
/// `category_only` weights just the category sink; `joint` adds the pose
/// sink at `lambda` (on a network without one the two are equal).
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbeReport {
    pub category_only: ProbeNorms,
    pub joint: ProbeNorms,
    pub batches: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batches: 4,
            batch_size: 64,
            lambda: 1.0,
            seed: 0,
        }
    }
}

fn coarse(partition: &Partition) -> usize {
    match partition {
        Partition::Shared => 0,
        Partition::CategoryHead => 1,
        Partition::PoseHead | Partition::PoseBranch(_) => 2,
    }
}

/// Measures mean per-partition gradient norms over `probe.batches` batches
/// drawn (without replacement) from `data`.
pub fn gradient_probe<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    probe: &ProbeConfig,
) -> Result<GradProbeReport, AnalysisError> {
    let need = probe.batches * probe.batch_size;
    if probe.batches == 0 || probe.batch_size == 0 {
        return Err(AnalysisError::InvalidArg(
            "probe batches and batch size must be positive".into(),
        ));
    }
    if need > data.len() {
        return Err(AnalysisError::InvalidArg(format!(
            "probe wants {need} samples but the dataset holds {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(derive_named(probe.seed, "probe", 0)).shuffle(&mut order);
    let has_pose = graph.node_id("pose_loss").is_ok();

    let mut elements = [0usize; 3];
    for (_, e) in params.iter() {
        if e.trainable {
            elements[coarse(&e.partition)] += e.value.len();
        }
    }

    // Accumulated mean l2 and rms per coarse partition, for both weightings.
    let mut acc = [[0.0f64; 3]; 2]; // [weighting][partition] l2 sums
    let mut rng = Rng::new(0);
    for b in 0..probe.batches {
        let chunk = &order[b * probe.batch_size..(b + 1) * probe.batch_size];
        let batch = data.batch::<T>(chunk)?;
        let cache = graph.forward(params, &batch, Mode::Eval, Retain::ForBackward, &mut rng)?;
        let weightings: [Vec<(&str, f64)>; 2] = [
            vec![("category_loss", 1.0)],
            if has_pose {
                vec![("category_loss", 1.0), ("pose_loss", probe.lambda)]
            } else {
                vec![("category_loss", 1.0)]
            },
        ];
        for (wi, weights) in weightings.iter().enumerate() {
            let grads = graph.backward(params, &cache, weights)?;
            let mut sumsq = [0.0f64; 3];
            for (name, g) in grads.iter() {
                let part = coarse(&params.get(name)?.partition);
                sumsq[part] += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
            for p in 0..3 {
                acc[wi][p] += sumsq[p].sqrt();
            }
        }
    }

    let nb = probe.batches as f64;
    let stat = |wi: usize, p: usize| PartitionStat {
        l2: acc[wi][p] / nb,
        rms: if elements[p] > 0 {
            acc[wi][p] / nb / (elements[p] as f64).sqrt()
        } else {
            0.0
        },
        elements: elements[p],
    };
    let norms = |wi: usize| ProbeNorms {
        shared: stat(wi, 0),
        category_head: stat(wi, 1),
        pose_side: (elements[2] > 0).then(|| stat(wi, 2)),
    };
    Ok(GradProbeReport {
        category_only: norms(0),
        joint: norms(1),
        batches: probe.batches,
        lambda: probe.lambda,
    })
}

/// Plateau test: the run is near a critical point when the shared-partition
/// gradient RMS is tiny, or the train loss has stopped moving over the last
/// three epochs.
pub fn near_converged(shared_rms: f64, train_losses: &[f64]) -> bool {
    if shared_rms < CONVERGED_GRAD_RMS {
        return true;
    }
    let n = train_losses.len();
    n >= 4 && (train_losses[n - 4] - train_losses[n - 1]).abs() < CONVERGED_LOSS_DELTA
}

/// Trains until [`near_converged`] triggers or `config.epochs` runs out.
/// Returns the epoch log and whether the plateau test fired.
pub fn train_to_convergence<T: Real>(
    graph: &Graph,
    state: &mut TrainState<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<(Vec<EpochStat>, bool), AnalysisError> {
    let mut log: Vec<EpochStat> = Vec::new();
    let mut converged = false;
    while state.epoch < config.epochs {
        log.extend(train_segment(graph, state, train_set, test_set, config, 1)?);
        let report = gradient_probe(graph, &state.params, train_set, probe)?;
        let losses: Vec<f64> = log.iter().map(|s| s.train_loss).collect();
        if near_converged(report.joint.shared.rms, &losses) {
            converged = true;
            break;
        }
    }
    Ok((log, converged))
}

// ---------------------------------------------------------------------------
// Warm start

/// Which way parameters flow between the base network and the
/// multi-injection variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmstartDirection {
    /// Converged base weights seed the shared trunk and category head of a
    /// fresh pose-regularized network.
    BaseToMulti,
    /// A converged pose-regularized network is pruned and training of the
    /// base continues from its weights.
    MultiToBase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmstartReport {
    pub direction: WarmstartDirection,
    /// Category accuracy of the recipient right after the transplant,
    /// before any further updates.
    pub initial_acc: f64,
    /// One entry per continued-training epoch.
    pub log: Vec<EpochStat>,
}

/// Builds the recipient architecture, moves the donor's weights across, and
/// continues training under `config`. The donor must be converged for the
/// result to mean anything; this function just runs the mechanics.
pub fn warmstart_experiment<T: Real>(
    spec: &NetworkSpec,
    donor: &ParamStore<T>,
    direction: WarmstartDirection,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<WarmstartReport, AnalysisError> {
    let recipient_kind = match direction {
        WarmstartDirection::BaseToMulti => ArchKind::InjectMulti,
        WarmstartDirection::MultiToBase => ArchKind::Base,
    };
    let (graph, fresh) = build::<T>(spec, recipient_kind, &mut Rng::new(init_seed))?;
    let mut reinit_rng = Rng::new(derive_named(init_seed, "warmstart", 0));
    let (params, _) = transplant_filtered(donor, &fresh, &mut reinit_rng, |_| true)?;
    let initial_acc = evaluate(&graph, &params, test_set, EVAL_BATCH)?.accuracy;
    let mut state = TrainState::new(params, config.seed);
    let log = train_segment(&graph, &mut state, train_set, test_set, config, usize::MAX)?;
    Ok(WarmstartReport {
        direction,
        initial_acc,
        log,
    })
}

// ---------------------------------------------------------------------------
// Activation probes

fn node_output_dims(shape: &[usize]) -> Result<(usize, usize), AnalysisError> {
    match shape.len() {
        2 => Ok((shape[1], 1)),
        4 => Ok((shape[1], shape[2] * shape[3])),
        r => Err(AnalysisError::InvalidArg(format!(
            "cannot treat a rank-{r} output as units"
        ))),
    }
}

/// Which label stream partitions the data when accumulating per-class mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Category,
    Pose,
}

/// Per-unit, per-class response mass at one node: activations summed over
/// spatial positions and over every sample of the class. Channels are the
/// units of a spatial node; features are the units of a flat one.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitClassMass {
    pub units: usize,
    pub classes: usize,
    /// Unit-major: `mass[u * classes + c]`.
    pub mass: Vec<f64>,
}

impl UnitClassMass {
    pub fn row(&self, unit: usize) -> &[f64] {
        &self.mass[unit * self.classes..(unit + 1) * self.classes]
    }
}

/// Accumulates class-conditional mass at `node` over the whole dataset.
/// Meant for rectified outputs; mass is a sum of raw activations.
pub fn class_mass<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    node: &str,
    label: LabelKind,
    batch_size: usize,
) -> Result<UnitClassMass, AnalysisError> {
    if data.is_empty() {
        return Err(AnalysisError::InvalidArg("empty dataset".into()));
    }
    let id = graph.node_id(node)?;
    let classes = match label {
        LabelKind::Category => data.meta.categories as usize,
        LabelKind::Pose => data.meta.poses as usize,
    };
    let mut rng = Rng::new(0);
    let mut mass: Vec<f64> = Vec::new();
    let mut units = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk)?;
        let cache = graph.forward(params, &batch, Mode::Eval, Retain::OutputsOnly, &mut rng)?;
        let out = cache.output(id).ok_or(GraphError::NotRetained)?;
        let (u, spatial) = node_output_dims(out.shape())?;
        if mass.is_empty() {
            units = u;
            mass = vec![0.0; u * classes];
        }
        let d = out.data();
        for (bi, &si) in chunk.iter().enumerate() {
            let rec = &data.records[si];
            let class = match label {
                LabelKind::Category => rec.category as usize,
                LabelKind::Pose => rec.pose as usize,
            };
            for unit in 0..u {
                let start = (bi * u + unit) * spatial;
                let s: f64 = d[start..start + spatial].iter().map(|v| v.as_f64()).sum();
                mass[unit * classes + class] += s;
            }
        }
    }
    Ok(UnitClassMass {
        units,
        classes,
        mass,
    })
}

/// Entropy in bits of one unit's class-mass row, `None` when the unit is
/// dead (total mass below [`DEAD_MASS`]). Zero-mass classes contribute
/// nothing, matching the `0 log 0 = 0` convention.
pub fn unit_entropy(mass: &[f64]) -> Option<f64> {
    let total: f64 = mass.iter().sum();
    if total < DEAD_MASS {
        return None;
    }
    let mut e = 0.0;
    for &m in mass {
        if m > 0.0 {
            let p = m / total;
            e -= p * p.log2();
        }
    }
    Some(e)
}

/// Per-unit entropies for a whole mass table.
pub fn entropy_profile(mass: &UnitClassMass) -> Vec<Option<f64>> {
    (0..mass.units).map(|u| unit_entropy(mass.row(u))).collect()
}

/// How decoupled a layer's units are: the Pearson correlation between
/// category entropy and pose entropy across live units. Lower (more
/// negative) means units specialize in one factor or the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupleness {
    pub gamma: f64,
    pub units_used: usize,
    pub dead_units: usize,
}

pub fn decoupleness(
    category: &UnitClassMass,
    pose: &UnitClassMass,
) -> Result<Decoupleness, AnalysisError> {
    if category.units != pose.units {
        return Err(AnalysisError::InvalidArg(format!(
            "mass tables disagree on units: {} vs {}",
            category.units, pose.units
        )));
    }
    let ec = entropy_profile(category);
    let ep = entropy_profile(pose);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, p) in ec.iter().zip(&ep) {
        if let (Some(c), Some(p)) = (c, p) {
            xs.push(*c);
            ys.push(*p);
        }
    }
    let dead_units = category.units - xs.len();
    if xs.len() < 2 {
        return Err(AnalysisError::UndefinedCorrelation(format!(
            "only {} live units",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation(
            "an entropy profile has zero variance".into(),
        ));
    }
    Ok(Decoupleness {
        gamma: sxy / (sxx * syy).sqrt(),
        units_used: xs.len(),
        dead_units,
    })
}

// ---------------------------------------------------------------------------
// Receptive-field averages

/// Mean input image over the samples that drive one unit hardest.
#[derive(Debug, Clone, PartialEq)]
pub struct RfAverage {
    pub node: String,
    pub unit: usize,
    /// Channel-major `[C][H][W]` mean pixels, same layout as the inputs.
    pub image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// True when no sample moved the unit; the average then just covers the
    /// first `k` samples in dataset order.
    pub dead: bool,
}

/// Ranks samples by the unit's peak spatial response (ties keep dataset
/// order) and averages the top `k` input images.
pub fn rf_average<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    node: &str,
    unit: usize,
    k: usize,
    batch_size: usize,
) -> Result<RfAverage, AnalysisError> {
    if k == 0 || k > data.len() {
        return Err(AnalysisError::InvalidArg(format!(
            "k must be in 1..={}, got {k}",
            data.len()
        )));
    }
    let id = graph.node_id(node)?;
    let mut rng = Rng::new(0);
    let mut scores = vec![0.0f64; data.len()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk)?;
        let cache = graph.forward(params, &batch, Mode::Eval, Retain::OutputsOnly, &mut rng)?;
        let out = cache.output(id).ok_or(GraphError::NotRetained)?;
        let (units, spatial) = node_output_dims(out.shape())?;
        if unit >= units {
            return Err(AnalysisError::InvalidArg(format!(
                "node {node} has {units} units, asked for {unit}"
            )));
        }
        let d = out.data();
        for (bi, &si) in chunk.iter().enumerate() {
            let start = (bi * units + unit) * spatial;
            let peak = d[start..start + spatial]
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            scores[si] = peak;
        }
    }
    let dead = scores.iter().all(|&s| s.abs() < DEAD_MASS);
    let mut ranked: Vec<usize> = (0..data.len()).collect();
    if !dead {
        ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    }
    let meta = data.meta;
    let pixels = meta.pixels();
    let mut image = vec![0.0f64; pixels];
    for &si in ranked.iter().take(k) {
        for (i, &v) in data.records[si].image.iter().enumerate() {
            image[i] += v as f64;
        }
    }
    for v in &mut image {
        *v /= k as f64;
    }
    Ok(RfAverage {
        node: node.to_string(),
        unit,
        image,
        height: meta.height as usize,
        width: meta.width as usize,
        channels: meta.channels as usize,
        dead,
    })
}

/// Tiles single-channel averages into one 8-bit PGM, row-major with a
/// one-pixel white gutter between tiles. Pixels are assumed to already live
/// in [0, 1].
pub fn write_rf_grid(path: &Path, tiles: &[RfAverage], cols: usize) -> Result<(), AnalysisError> {
    if tiles.is_empty() || cols == 0 {
        return Err(AnalysisError::InvalidArg("nothing to write".into()));
    }
    let (h, w) = (tiles[0].height, tiles[0].width);
    for t in tiles {
        if t.channels != 1 || t.height != h || t.width != w {
            return Err(AnalysisError::InvalidArg(
                "grid tiles must be single-channel and uniformly sized".into(),
            ));
        }
    }
    let rows = tiles.len().div_ceil(cols);
    let gh = rows * h + rows - 1;
    let gw = cols * w + cols - 1;
    let mut canvas = vec![255u8; gh * gw];
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (oy, ox) = (r * (h + 1), c * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = (t.image[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas[(oy + y) * gw + ox + x] = v;
            }
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&canvas)?;
    f.flush()?;
    Ok(())
}

/// Flattened eval-mode activations at `node`, one row per sample.
pub fn node_activations<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    node: &str,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let id = graph.node_id(node)?;
    let mut rng = Rng::new(0);
    let mut rows = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk)?;
        let cache = graph.forward(params, &batch, Mode::Eval, Retain::OutputsOnly, &mut rng)?;
        let out = cache.output(id).ok_or(GraphError::NotRetained)?;
        let per = out.len() / chunk.len();
        let d = out.data();
        for bi in 0..chunk.len() {
            rows.push(d[bi * per..(bi + 1) * per].iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// One finite-difference comparison that disagreed with backward.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    pub param: String,
    pub index: usize,
    pub fd: f64,
    pub analytic: f64,
    pub rel: f64,
}

/// Outcome of a whole-graph gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    /// Largest floored relative error among samples where either side was
    /// above `FD_SMALL`.
    pub max_rel: f64,
    /// Largest absolute disagreement among samples where both sides were
    /// below `FD_SMALL` (guards against a silently zeroed gradient).
    pub max_small_abs: f64,
    pub worst: Option<FdSample>,
}

/// Below this magnitude a central difference is dominated by float
/// cancellation (roughly eps * |loss| / h), so a relative comparison says
/// nothing; such samples are held to an absolute agreement instead.
pub const FD_SMALL: f64 = 3e-4;

/// Central-difference check of the weighted total loss against backward,
/// over `samples` parameter elements drawn uniformly across all trainable
/// tensors plus one element of every tensor. The same RNG seed feeds every
/// forward, so train-mode dropout masks cancel between the two sides of
/// each difference.
pub fn fd_check<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    batch_indices: &[usize],
    weights: &[(&str, f64)],
    mode: Mode,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport, AnalysisError> {
    let batch = data.batch::<T>(batch_indices)?;
    let forward_seed = derive_named(seed, "fd-forward", 0);
    let total = |ps: &ParamStore<T>| -> Result<f64, AnalysisError> {
        let cache = graph.forward(ps, &batch, mode, Retain::OutputsOnly, &mut Rng::new(forward_seed))?;
        Ok(weights
            .iter()
            .map(|(name, w)| w * cache.losses[*name])
            .sum())
    };
    let cache = graph.forward(
        params,
        &batch,
        mode,
        Retain::ForBackward,
        &mut Rng::new(forward_seed),
    )?;
    let grads = graph.backward(params, &cache, weights)?;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(k, _)| k.clone())
        .collect();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| params.value(n).map(|t| t.len()))
        .collect::<Result<_, _>>()?;
    let total_elems: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = names.iter().enumerate().map(|(i, _)| (i, 0)).collect();
    let mut rng = Rng::new(derive_named(seed, "fd-pick", 0));
    for _ in 0..samples {
        let mut flat = rng.below(total_elems as u64) as usize;
        for (ti, &sz) in sizes.iter().enumerate() {
            if flat < sz {
                picks.push((ti, flat));
                break;
            }
            flat -= sz;
        }
    }

    let mut work = params.clone();
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        max_small_abs: 0.0,
        worst: None,
    };
    for (ti, idx) in picks {
        let name = &names[ti];
        let original = params.value(name)?.clone();
        let base = original.data()[idx].as_f64();
        let mut bumped = original.clone();
        bumped.data_mut()[idx] = T::from_f64(base + h);
        work.set_value(name, bumped)?;
        let up = total(&work)?;
        let mut dipped = original.clone();
        dipped.data_mut()[idx] = T::from_f64(base - h);
        work.set_value(name, dipped)?;
        let down = total(&work)?;
        work.set_value(name, original)?;
        let fd = (up - down) / (2.0 * h);
        let analytic = grads.get(name)?.data()[idx].as_f64();
        report.checked += 1;
        if fd.abs().max(analytic.abs()) < FD_SMALL {
            report.max_small_abs = report.max_small_abs.max((fd - analytic).abs());
            continue;
        }
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = Some(FdSample {
                param: name.clone(),
                index: idx,
                fd,
                analytic,
                rel,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// 2-D projection

/// PCA projection onto the top two principal axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One (x, y) pair per input vector.
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each kept axis (the top two eigenvalues).
    pub explained: [f64; 2],
    /// Variance left behind: the sum of all remaining eigenvalues.
    pub residual: f64,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix, row-major d x d.
/// Returns eigenvalues (descending) paired with column eigenvectors.
fn jacobi_eigh(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].partial_cmp(&a[i * d + i]).unwrap().then(i.cmp(&j)));
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut eigvecs = vec![0.0f64; d * d];
    for (col, &src) in order.iter().enumerate() {
        for i in 0..d {
            eigvecs[i * d + col] = v[i * d + src];
        }
    }
    (eigvals, eigvecs)
}

/// Projects vectors onto the top two principal components of their
/// covariance. Eigenvector signs follow a fixed convention: the coordinate
/// of largest magnitude is made positive, so reruns and refactors produce
/// identical output.
pub fn project_2d(vectors: &[Vec<f64>]) -> Result<Projection, AnalysisError> {
    let n = vectors.len();
    if n < 2 {
        return Err(AnalysisError::InvalidArg("need at least 2 vectors".into()));
    }
    let d = vectors[0].len();
    if d < 2 {
        return Err(AnalysisError::InvalidArg("need at least 2 dimensions".into()));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(AnalysisError::InvalidArg(format!(
                "vector {i} has {} dimensions, expected {d}",
                v.len()
            )));
        }
    }
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for j in 0..d {
            mean[j] += v[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for v in vectors {
        for i in 0..d {
            let di = v[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (eigvals, eigvecs) = jacobi_eigh(cov, d);
    if eigvals.len() < 2 || eigvals[1] <= 0.0 {
        return Err(AnalysisError::DegenerateSpectrum(format!(
            "fewer than 2 positive eigenvalues (top two: {:?})",
            &eigvals[..eigvals.len().min(2)]
        )));
    }
    let mut axes = [vec![0.0f64; d], vec![0.0f64; d]];
    for (k, axis) in axes.iter_mut().enumerate() {
        for i in 0..d {
            axis[i] = eigvecs[i * d + k];
        }
        let mut peak = 0usize;
        for i in 1..d {
            if axis[i].abs() > axis[peak].abs() {
                peak = i;
            }
        }
        if axis[peak] < 0.0 {
            for x in axis.iter_mut() {
                *x = -*x;
            }
        }
    }
    let coords = vectors
        .iter()
        .map(|v| {
            let mut xy = [0.0f64; 2];
            for (k, axis) in axes.iter().enumerate() {
                xy[k] = (0..d).map(|i| (v[i] - mean[i]) * axis[i]).sum();
            }
            xy
        })
        .collect();
    Ok(Projection {
        coords,
        explained: [eigvals[0], eigvals[1]],
        residual: (trace - eigvals[0] - eigvals[1]).max(0.0),
    })
}
