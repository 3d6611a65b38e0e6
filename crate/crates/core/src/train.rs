//! SGD training with the two-head loss, evaluation, and checkpoints.
//!
//! The loop follows a fixed-order protocol: one sample permutation is
//! derived from the config seed and reused every epoch, so a run is a pure
//! function of (graph, initial params, dataset, config). Checkpoints carry
//! parameters, momentum state, the epoch counter, and the training RNG, so
//! resuming reproduces exactly the run that never stopped.

use crate::data::{DataError, Dataset};
use crate::graph::{
    apply_bn_updates, Batch, Graph, GraphError, Mode, ParamStore, Partition, Retain,
};
use crate::netspec::ArchKind;
use crate::rng::{derive_named, fnv1a, Rng};
use crate::tensor::{Real, Tensor};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: GraphError,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

/// Training hyperparameters.
///
/// `dropout` is applied by the caller when building the graph (the rate
/// lives in dropout nodes); it is carried here so runs record it and
/// checkpoints can restore it. `lr_step: None` decays every `ceil(epochs/3)`
/// epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            lr_decay: 0.1,
            lr_step: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: None,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Per-architecture protocol defaults. All three variants currently
    /// share one recipe at this scale; the seam stays so a variant can
    /// diverge without touching call sites.
    pub fn for_arch(kind: ArchKind) -> Self {
        let _ = kind;
        TrainConfig {
            lr: 0.01,
            dropout: Some(0.5),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!("bad momentum {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("bad lambda {}", self.lambda)));
        }
        if let Some(r) = self.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::InvalidConfig(format!("bad dropout rate {r}")));
            }
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let step = match self.lr_step {
            Some(s) => s,
            None => self.epochs.div_ceil(3).max(1),
        };
        if step == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay.powi((epoch / step) as i32)
    }
}

/// The weighted two-head objective.
pub fn combined_loss(category_loss: f64, pose_loss: f64, lambda: f64) -> f64 {
    category_loss + lambda * pose_loss
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    /// Momentum buffers, one per trainable parameter.
    pub velocities: BTreeMap<String, Tensor<T>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Stream feeding dropout draws, advanced across all epochs.
    pub rng: Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParamStore<T>, seed: u64) -> Self {
        let velocities = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), Tensor::zeros(e.value.shape())))
            .collect();
        TrainState {
            params,
            velocities,
            epoch: 0,
            rng: Rng::new(derive_named(seed, "train", 0)),
        }
    }
}

/// One SGD step: `v = mu v - lr (g + wd p); p += v`, walking parameters in
/// name order.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    velocities: &mut BTreeMap<String, Tensor<T>>,
    grads: &crate::graph::Gradients<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), GraphError> {
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    for (name, entry) in params.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let g = grads.get(name)?;
        let v = velocities
            .get_mut(name)
            .ok_or_else(|| GraphError::UnknownParam(name.clone()))?;
        let p = entry.value.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        for i in 0..p.len() {
            vd[i] = mu * vd[i] - lr * (gd[i] + wd * p[i]);
            p[i] += vd[i];
        }
    }
    Ok(())
}

/// Per-epoch log row. `test_acc` is top-1 category accuracy on the held-out
/// set evaluated after the epoch's updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cat_loss: f64,
    pub train_pose_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

impl EpochStat {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,train_cat_loss,train_pose_loss,test_acc,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_cat_loss,
            self.train_pose_loss,
            self.test_acc,
            self.lr
        )
    }
}

/// Weights fed to backward: the category sink at 1, the pose sink (when the
/// graph has one) at lambda.
fn sink_weights(graph: &Graph, lambda: f64) -> Vec<(&'static str, f64)> {
    let mut w = vec![("category_loss", 1.0)];
    if graph.node_id("pose_loss").is_ok() {
        w.push(("pose_loss", lambda));
    }
    w
}

/// Runs one epoch of minibatch SGD over the fixed permutation, returning
/// the epoch's mean (category, pose) training losses.
pub fn train_epoch<T: Real>(
    graph: &Graph,
    state: &mut TrainState<T>,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    Rng::new(derive_named(config.seed, "order", 0)).shuffle(&mut order);
    let weights = sink_weights(graph, config.lambda);
    let lr = config.lr_at(state.epoch);
    let mut cat_sum = 0.0;
    let mut pose_sum = 0.0;
    let mut seen = 0usize;
    for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch: Batch<T> = train_set.batch(chunk)?;
        let cache = graph
            .forward(&state.params, &batch, Mode::Train, Retain::ForBackward, &mut state.rng)
            .map_err(|e| TrainError::Diverged {
                epoch: state.epoch,
                batch: bi,
                source: e,
            })?;
        let grads = graph.backward(&state.params, &cache, &weights)?;
        sgd_step(
            &mut state.params,
            &mut state.velocities,
            &grads,
            lr,
            config.momentum,
            config.weight_decay,
        )?;
        apply_bn_updates(graph, &mut state.params, &cache)?;
        let n = chunk.len() as f64;
        cat_sum += cache.losses["category_loss"] * n;
        pose_sum += cache.losses.get("pose_loss").copied().unwrap_or(0.0) * n;
        seen += chunk.len();
    }
    state.epoch += 1;
    Ok((cat_sum / seen as f64, pose_sum / seen as f64))
}

/// Runs at most `limit` epochs of the run described by `config`, stopping
/// early once `state.epoch` reaches `config.epochs`. Because the schedule
/// and permutation depend only on the config and the absolute epoch
/// counter, a run chopped into segments reproduces the uninterrupted run
/// exactly.
pub fn train_segment<T: Real>(
    graph: &Graph,
    state: &mut TrainState<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    limit: usize,
) -> Result<Vec<EpochStat>, TrainError> {
    config.validate()?;
    let mut log = Vec::new();
    while state.epoch < config.epochs && log.len() < limit {
        let lr = config.lr_at(state.epoch);
        let (cat, pose) = train_epoch(graph, state, train_set, config)?;
        let report = evaluate(graph, &state.params, test_set, EVAL_BATCH)?;
        log.push(EpochStat {
            epoch: state.epoch,
            train_loss: combined_loss(cat, pose, config.lambda),
            train_cat_loss: cat,
            train_pose_loss: pose,
            test_acc: report.accuracy,
            lr,
        });
    }
    Ok(log)
}

/// Trains until `state.epoch` reaches `config.epochs`, evaluating on
/// `test_set` after each epoch.
pub fn train<T: Real>(
    graph: &Graph,
    state: &mut TrainState<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochStat>, TrainError> {
    train_segment(graph, state, train_set, test_set, config, usize::MAX)
}

pub const EVAL_BATCH: usize = 128;

/// Test-set metrics. The confusion matrix is row-major with true category
/// as the row. `per_class_ap[c]` is NaN when the set has no samples of `c`;
/// such classes are excluded from the macro mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub pose_accuracy: Option<f64>,
    pub confusion: Vec<u32>,
    pub categories: usize,
    pub samples: usize,
}

/// One-vs-rest average precision over ranked scores: walk the list in
/// descending score order (ties by original index) and average the running
/// precision at every positive. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(sum / hits as f64)
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode metrics over a whole dataset, batched.
pub fn evaluate<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = data.meta.categories as usize;
    let n = data.len();
    let has_pose = graph.node_id("pose_loss").is_ok();
    let mut rng = Rng::new(0); // eval consumes no randomness
    let mut scores = vec![0.0f64; n * k];
    let mut correct = 0usize;
    let mut pose_correct = 0usize;
    let mut confusion = vec![0u32; k * k];
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch: Batch<T> = data.batch(chunk)?;
        let cache = graph.forward(params, &batch, Mode::Eval, Retain::OutputsOnly, &mut rng)?;
        let probs = cache.probs(graph, "category_loss")?;
        for (bi, &si) in chunk.iter().enumerate() {
            let row = &probs.data()[bi * k..(bi + 1) * k];
            let pred = argmax(row);
            let truth = data.records[si].category as usize;
            if pred == truth {
                correct += 1;
            }
            confusion[truth * k + pred] += 1;
            for c in 0..k {
                scores[si * k + c] = row[c].as_f64();
            }
        }
        if has_pose {
            let p = data.meta.poses as usize;
            let pose_probs = cache.probs(graph, "pose_loss")?;
            for (bi, &si) in chunk.iter().enumerate() {
                let row = &pose_probs.data()[bi * p..(bi + 1) * p];
                if argmax(row) == data.records[si].pose as usize {
                    pose_correct += 1;
                }
            }
        }
    }
    let mut per_class_ap = Vec::with_capacity(k);
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for c in 0..k {
        let class_scores: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let positive: Vec<bool> = (0..n)
            .map(|i| data.records[i].category as usize == c)
            .collect();
        match average_precision(&class_scores, &positive) {
            Some(ap) => {
                per_class_ap.push(ap);
                ap_sum += ap;
                ap_n += 1;
            }
            None => per_class_ap.push(f64::NAN),
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        per_class_ap,
        map: if ap_n > 0 { ap_sum / ap_n as f64 } else { f64::NAN },
        pose_accuracy: has_pose.then(|| pose_correct as f64 / n as f64),
        confusion,
        categories: k,
        samples: n,
    })
}

const CKPT_MAGIC: [u8; 4] = *b"WWCK";
const CKPT_VERSION: u32 = 1;

/// A resumable training snapshot plus everything needed to rebuild its
/// graph: the architecture kind and the full network description text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub arch: ArchKind,
    pub spec_text: String,
    pub config: TrainConfig,
    pub epoch: u32,
    pub rng_state: [u64; 4],
    pub params: ParamStore<T>,
    pub velocities: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_state(
        arch: ArchKind,
        spec_text: &str,
        config: &TrainConfig,
        state: &TrainState<T>,
    ) -> Self {
        Checkpoint {
            arch,
            spec_text: spec_text.to_string(),
            config: config.clone(),
            epoch: state.epoch as u32,
            rng_state: state.rng.state(),
            params: state.params.clone(),
            velocities: state.velocities.clone(),
        }
    }

    pub fn into_state(self) -> TrainState<T> {
        TrainState {
            params: self.params,
            velocities: self.velocities,
            epoch: self.epoch as usize,
            rng: Rng::from_state(self.rng_state),
        }
    }

    /// Hash of the embedded network description, for mismatch checks.
    pub fn spec_hash(&self) -> u64 {
        fnv1a(self.spec_text.as_bytes())
    }
}

/// Checkpoints restore at the precision they were saved with.
#[derive(Debug)]
pub enum LoadedCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn w_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn r_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn r_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(r_u64(r)?))
}

fn r_str(r: &mut impl Read) -> Result<String, TrainError> {
    let len = r_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(TrainError::BadCheckpoint(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TrainError::BadCheckpoint(format!("bad utf8: {e}")))
}

fn w_partition(w: &mut impl Write, p: &Partition) -> std::io::Result<()> {
    match p {
        Partition::Shared => w.write_all(&[0]),
        Partition::CategoryHead => w.write_all(&[1]),
        Partition::PoseHead => w.write_all(&[2]),
        Partition::PoseBranch(name) => {
            w.write_all(&[3])?;
            w_u16(w, name.len() as u16)?;
            w.write_all(name.as_bytes())
        }
    }
}

fn r_partition(r: &mut impl Read) -> Result<Partition, TrainError> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    Ok(match tag[0] {
        0 => Partition::Shared,
        1 => Partition::CategoryHead,
        2 => Partition::PoseHead,
        3 => {
            let len = r_u16(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            Partition::PoseBranch(
                String::from_utf8(buf)
                    .map_err(|e| TrainError::BadCheckpoint(format!("bad utf8: {e}")))?,
            )
        }
        t => return Err(TrainError::BadCheckpoint(format!("unknown partition tag {t}"))),
    })
}

fn w_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>, wide: bool) -> std::io::Result<()> {
    w.write_all(&[t.rank() as u8])?;
    for d in t.shape() {
        w_u32(w, *d as u32)?;
    }
    for v in t.data() {
        if wide {
            w_f64(w, v.as_f64())?;
        } else {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn r_tensor<T: Real>(r: &mut impl Read, wide: bool) -> Result<Tensor<T>, TrainError> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(r_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(TrainError::BadCheckpoint(format!("tensor of {n} elements is implausible")));
    }
    let mut data = Vec::with_capacity(n);
    if wide {
        for _ in 0..n {
            data.push(T::from_f64(r_f64(r)?));
        }
    } else {
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(T::from_f64(f32::from_le_bytes(b) as f64));
        }
    }
    Tensor::from_vec(&shape, data)
        .map_err(|e| TrainError::BadCheckpoint(format!("bad tensor: {e}")))
}

fn write_checkpoint_inner<T: Real>(
    w: &mut impl Write,
    c: &Checkpoint<T>,
    wide: bool,
) -> Result<(), TrainError> {
    w.write_all(&CKPT_MAGIC)?;
    w_u32(w, CKPT_VERSION)?;
    w.write_all(&[u8::from(wide), c.arch.code()])?;
    w_u32(w, c.epoch)?;
    for s in c.rng_state {
        w_u64(w, s)?;
    }
    let cfg = &c.config;
    w_u64(w, cfg.epochs as u64)?;
    w_u64(w, cfg.batch_size as u64)?;
    w_f64(w, cfg.lr)?;
    w_f64(w, cfg.lr_decay)?;
    w_u64(w, cfg.lr_step.map_or(u64::MAX, |s| s as u64))?;
    w_f64(w, cfg.momentum)?;
    w_f64(w, cfg.weight_decay)?;
    w_f64(w, cfg.dropout.unwrap_or(f64::NAN))?;
    w_f64(w, cfg.lambda)?;
    w_u64(w, cfg.seed)?;
    w_str(w, &c.spec_text)?;
    w_u64(w, c.spec_hash())?;
    w_u32(w, c.params.len() as u32)?;
    for (name, entry) in c.params.iter() {
        w_str(w, name)?;
        w_partition(w, &entry.partition)?;
        w.write_all(&[u8::from(entry.trainable)])?;
        w_tensor(w, &entry.value, wide)?;
    }
    w_u32(w, c.velocities.len() as u32)?;
    for (name, v) in &c.velocities {
        w_str(w, name)?;
        w_tensor(w, v, wide)?;
    }
    Ok(())
}

/// Serializes a checkpoint. `f64` runs write 8-byte values, `f32` runs
/// 4-byte; the file records which.
pub fn save_checkpoint<T: Real>(path: &Path, c: &Checkpoint<T>) -> Result<(), TrainError> {
    let wide = T::NAME == "f64";
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_inner(&mut w, c, wide)?;
    w.flush()?;
    Ok(())
}

fn read_checkpoint_inner<T: Real>(
    r: &mut impl Read,
    wide: bool,
) -> Result<Checkpoint<T>, TrainError> {
    let mut b2 = [0u8; 1];
    r.read_exact(&mut b2)?;
    let arch = ArchKind::from_code(b2[0])
        .ok_or_else(|| TrainError::BadCheckpoint(format!("unknown arch code {}", b2[0])))?;
    let epoch = r_u32(r)?;
    let mut rng_state = [0u64; 4];
    for s in &mut rng_state {
        *s = r_u64(r)?;
    }
    let epochs = r_u64(r)? as usize;
    let batch_size = r_u64(r)? as usize;
    let lr = r_f64(r)?;
    let lr_decay = r_f64(r)?;
    let lr_step = match r_u64(r)? {
        u64::MAX => None,
        s => Some(s as usize),
    };
    let momentum = r_f64(r)?;
    let weight_decay = r_f64(r)?;
    let dropout = match r_f64(r)? {
        v if v.is_nan() => None,
        v => Some(v),
    };
    let lambda = r_f64(r)?;
    let seed = r_u64(r)?;
    let spec_text = r_str(r)?;
    let stored_hash = r_u64(r)?;
    if stored_hash != fnv1a(spec_text.as_bytes()) {
        return Err(TrainError::BadCheckpoint(
            "embedded network description does not match its hash".into(),
        ));
    }
    let n_params = r_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = r_str(r)?;
        let partition = r_partition(r)?;
        let mut tb = [0u8; 1];
        r.read_exact(&mut tb)?;
        let value = r_tensor(r, wide)?;
        params
            .insert(&name, value, partition, tb[0] != 0)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    }
    let n_vel = r_u32(r)? as usize;
    let mut velocities = BTreeMap::new();
    for _ in 0..n_vel {
        let name = r_str(r)?;
        let v = r_tensor(r, wide)?;
        velocities.insert(name, v);
    }
    Ok(Checkpoint {
        arch,
        spec_text,
        config: TrainConfig {
            epochs,
            batch_size,
            lr,
            lr_decay,
            lr_step,
            momentum,
            weight_decay,
            dropout,
            lambda,
            seed,
        },
        epoch,
        rng_state,
        params,
        velocities,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic; not a checkpoint".into()));
    }
    let version = r_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(TrainError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let mut pb = [0u8; 1];
    r.read_exact(&mut pb)?;
    match pb[0] {
        0 => Ok(LoadedCheckpoint::F32(read_checkpoint_inner::<f32>(&mut r, false)?)),
        1 => Ok(LoadedCheckpoint::F64(read_checkpoint_inner::<f64>(&mut r, true)?)),
        p => Err(TrainError::BadCheckpoint(format!("unknown precision tag {p}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig, SampleRecord};
    use crate::netspec::{build, parse_spec};
    use crate::shapes::ShapeSet;

    const TINY_NET: &str = "\
input 8 8 1
layer c1 conv out=4 k=3 stride=1 pad=1
layer n1 bn
layer r1 relu
layer p1 pool window=2 stride=2
layer f1 fc out=16
layer r2 relu
layer d1 dropout rate=0.25
head category 3
head pose 4
inject p1 8 8
lambda 1.0
";

    fn tiny_data(seed: u64) -> Dataset {
        generate(&GenConfig {
            categories: 3,
            n_rot: 2,
            n_az: 2,
            instances: 4,
            backgrounds: 1,
            height: 8,
            width: 8,
            channels: 1,
            shape_set: ShapeSet::A,
            seed,
        })
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn combined_loss_is_the_weighted_sum() {
        assert_eq!(combined_loss(0.7, 1.2, 1.0), 1.9);
        assert_eq!(combined_loss(0.7, 1.2, 0.0), 0.7);
        for lambda in [0.5, 1.0, 2.0] {
            let v = combined_loss(0.3, 0.9, lambda);
            assert!((v - (0.3 + lambda * 0.9)).abs() < 1e-15, "linear in lambda");
        }
    }

    #[test]
    fn sgd_without_momentum_or_decay_is_plain_descent() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (g, p) = build::<f64>(&spec, ArchKind::Base, &mut Rng::new(1)).unwrap();
        let mut velocities: BTreeMap<String, Tensor<f64>> = p
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), Tensor::zeros(e.value.shape())))
            .collect();
        let data = tiny_data(0);
        let batch = data.batch::<f64>(&[0, 1, 2]).unwrap();
        let cache = g
            .forward(&p, &batch, Mode::Train, Retain::ForBackward, &mut Rng::new(0))
            .unwrap();
        let grads = g.backward(&p, &cache, &[("category_loss", 1.0)]).unwrap();
        let mut stepped = p.clone();
        sgd_step(&mut stepped, &mut velocities, &grads, 0.1, 0.0, 0.0).unwrap();
        for (name, entry) in p.iter() {
            if !entry.trainable {
                continue;
            }
            let g = grads.get(name).unwrap();
            let s = stepped.value(name).unwrap();
            for i in 0..g.len() {
                let want = entry.value.data()[i] - 0.1 * g.data()[i];
                assert_eq!(s.data()[i], want, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        // Single scalar parameter, two steps with fixed gradient 2.0:
        // v1 = -lr*(g + wd*p0); p1 = p0 + v1
        // v2 = mu*v1 - lr*(g + wd*p1); p2 = p1 + v2
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::filled(&[1], 1.0), Partition::Shared, true)
            .unwrap();
        let mut vel = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[1]))]);
        let mut grads_map = BTreeMap::new();
        grads_map.insert("w".to_string(), Tensor::filled(&[1], 2.0));
        let grads = crate::graph::Gradients::from_map(grads_map);
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        sgd_step(&mut p, &mut vel, &grads, lr, mu, wd).unwrap();
        let v1 = -lr * (2.0 + wd * 1.0);
        let p1 = 1.0 + v1;
        assert!((p.value("w").unwrap().data()[0] - p1).abs() < 1e-15);
        sgd_step(&mut p, &mut vel, &grads, lr, mu, wd).unwrap();
        let v2 = mu * v1 - lr * (2.0 + wd * p1);
        let p2 = p1 + v2;
        assert!((p.value("w").unwrap().data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (g, p) = build::<f32>(&spec, ArchKind::Base, &mut Rng::new(5)).unwrap();
        let data = tiny_data(1);
        let mut state = TrainState::new(p.clone(), 7);
        let config = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..quick_config(2)
        };
        train(&g, &mut state, &data, &data, &config).unwrap();
        for (name, entry) in p.iter() {
            if entry.trainable {
                assert_eq!(
                    state.params.value(name).unwrap().data(),
                    entry.value.data(),
                    "{name} moved"
                );
            }
        }
    }

    #[test]
    fn single_sample_overfits_to_near_zero_loss() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (g, p) = build::<f32>(&spec, ArchKind::Base, &mut Rng::new(2)).unwrap();
        let full = tiny_data(2);
        let one = Dataset {
            meta: full.meta,
            records: vec![full.records[5].clone()],
        };
        let mut state = TrainState::new(p, 11);
        let config = TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr: 0.05,
            lr_step: Some(1_000_000),
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 11,
            ..TrainConfig::default()
        };
        let log = train(&g, &mut state, &one, &one, &config).unwrap();
        let last = log.last().unwrap();
        assert!(
            last.train_loss < 0.01,
            "after 200 steps loss is {}",
            last.train_loss
        );
        assert_eq!(last.test_acc, 1.0);
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let spec = parse_spec(TINY_NET).unwrap();
        let data = tiny_data(3);
        let run = || {
            let (g, p) = build::<f32>(&spec, ArchKind::InjectTop, &mut Rng::new(9)).unwrap();
            let mut state = TrainState::new(p, 13);
            train(&g, &mut state, &data, &data, &quick_config(3)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_schedule_steps_down_by_thirds() {
        let config = TrainConfig {
            epochs: 30,
            lr: 0.01,
            lr_decay: 0.1,
            lr_step: None,
            ..TrainConfig::default()
        };
        assert_eq!(config.lr_at(0), 0.01);
        assert_eq!(config.lr_at(9), 0.01);
        assert!((config.lr_at(10) - 0.001).abs() < 1e-12);
        assert!((config.lr_at(29) - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn average_precision_matches_hand_enumeration() {
        // Ranked (true, false, true, false): AP = (1/1 + 2/3) / 2.
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // Equal scores fall back to index order.
        let tied = average_precision(&[0.5, 0.5, 0.5], &[false, true, true]).unwrap();
        assert!((tied - (1.0 / 2.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(average_precision(&[0.1, 0.2], &[false, false]).is_none());
        let perfect = average_precision(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(perfect, 1.0);
    }

    #[test]
    fn perfect_scores_give_perfect_metrics() {
        // Identity fc over a 3-pixel input; images are one-hot in the true
        // class, so the classifier is exactly right everywhere.
        let mut g = Graph::new(3, 1, 1);
        let mut p = ParamStore::<f64>::new();
        p.insert(
            "w",
            Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
            Partition::CategoryHead,
            true,
        )
        .unwrap();
        g.add("logits", crate::graph::Op::Fc { bias: false }, &["input"], vec!["w".into()])
            .unwrap();
        g.add(
            "category_loss",
            crate::graph::Op::Loss {
                target: crate::graph::TargetKind::Category,
            },
            &["logits"],
            vec![],
        )
        .unwrap();
        let meta = crate::data::DatasetMeta {
            categories: 3,
            poses: 1,
            n_rot: 1,
            n_az: 1,
            height: 1,
            width: 1,
            channels: 3,
        };
        let records = (0..6)
            .map(|i| {
                let cat = (i % 3) as u16;
                let mut image = vec![0.0f32; 3];
                image[cat as usize] = 1.0;
                SampleRecord {
                    image,
                    category: cat,
                    pose: 0,
                    instance: i as u16,
                    background: 0,
                }
            })
            .collect();
        let data = Dataset { meta, records };
        let report = evaluate(&g, &p, &data, 4).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.map, 1.0);
        assert!(report.pose_accuracy.is_none());
        for t in 0..3 {
            for q in 0..3 {
                assert_eq!(report.confusion[t * 3 + q], if t == q { 2 } else { 0 });
            }
        }
        assert!(evaluate(&g, &p, &Dataset { meta, records: vec![] }, 4).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (g, p) = build::<f32>(&spec, ArchKind::InjectMulti, &mut Rng::new(4)).unwrap();
        let data = tiny_data(4);
        let mut state = TrainState::new(p, 21);
        let config = quick_config(2);
        train(&g, &mut state, &data, &data, &config).unwrap();
        let ck = Checkpoint::from_state(ArchKind::InjectMulti, TINY_NET, &config, &state);
        let path = std::env::temp_dir().join(format!("wwck-test-{}.bin", std::process::id()));
        save_checkpoint(&path, &ck).unwrap();
        let back = match load_checkpoint(&path).unwrap() {
            LoadedCheckpoint::F32(c) => c,
            LoadedCheckpoint::F64(_) => panic!("expected f32"),
        };
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let spec = parse_spec(TINY_NET).unwrap();
        let data = tiny_data(5);
        let config = quick_config(4);

        let (g, p) = build::<f32>(&spec, ArchKind::InjectTop, &mut Rng::new(6)).unwrap();
        let mut full = TrainState::new(p.clone(), config.seed);
        let full_log = train(&g, &mut full, &data, &data, &config).unwrap();

        let mut head = TrainState::new(p, config.seed);
        let mut log_a = train_segment(&g, &mut head, &data, &data, &config, 2).unwrap();
        let ck = Checkpoint::from_state(ArchKind::InjectTop, TINY_NET, &config, &head);
        let path = std::env::temp_dir().join(format!("wwck-resume-{}.bin", std::process::id()));
        save_checkpoint(&path, &ck).unwrap();
        let restored = match load_checkpoint(&path).unwrap() {
            LoadedCheckpoint::F32(c) => c,
            _ => panic!("expected f32"),
        };
        std::fs::remove_file(&path).unwrap();
        let mut resumed = restored.into_state();
        let log_b = train(&g, &mut resumed, &data, &data, &config).unwrap();
        log_a.extend(log_b);
        assert_eq!(log_a, full_log, "stitched log must match the single run");
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.rng.state(), full.rng.state());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (_, p) = build::<f32>(&spec, ArchKind::Base, &mut Rng::new(0)).unwrap();
        let state = TrainState::new(p, 0);
        let ck = Checkpoint::from_state(ArchKind::Base, TINY_NET, &TrainConfig::default(), &state);
        let path = std::env::temp_dir().join(format!("wwck-corrupt-{}.bin", std::process::id()));
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0x55;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, TrainError::BadCheckpoint(_)));
        // Tamper with the embedded description text: hash check trips.
        let mut ok = std::fs::read(&path).unwrap();
        ok[0] ^= 0x55; // restore magic
        let pos = ok.windows(5).position(|w| w == b"input").unwrap();
        ok[pos] = b'x';
        std::fs::write(&path, &ok).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(err, TrainError::BadCheckpoint(m) if m.contains("hash")));
    }

    #[test]
    fn zero_lambda_training_matches_base_bit_for_bit() {
        // With the pose sink weighted 0, pose-side nodes contribute no
        // gradient and consume no randomness, so every parameter the two
        // graphs share must follow the exact same trajectory.
        let spec = parse_spec(TINY_NET).unwrap();
        let (gb, pb) = build::<f32>(&spec, ArchKind::Base, &mut Rng::new(17)).unwrap();
        let (gm, pm) = build::<f32>(&spec, ArchKind::InjectMulti, &mut Rng::new(17)).unwrap();
        let data = tiny_data(7);
        let config = TrainConfig {
            lambda: 0.0,
            ..quick_config(2)
        };
        let mut sb = TrainState::new(pb, 19);
        let mut sm = TrainState::new(pm, 19);
        let log_b = train(&gb, &mut sb, &data, &data, &config).unwrap();
        let log_m = train(&gm, &mut sm, &data, &data, &config).unwrap();
        for (name, entry) in sb.params.iter() {
            let m = sm.params.value(name).unwrap();
            assert_eq!(m.data(), entry.value.data(), "{name} diverged");
        }
        for (b, m) in log_b.iter().zip(&log_m) {
            assert_eq!(b.train_cat_loss, m.train_cat_loss);
            assert_eq!(b.test_acc, m.test_acc);
            assert_eq!(m.train_loss, m.train_cat_loss, "lambda 0 adds nothing");
            assert!(m.train_pose_loss > 0.0, "pose loss is still reported");
        }
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let spec = parse_spec(TINY_NET).unwrap();
        let (g, mut p) = build::<f32>(&spec, ArchKind::Base, &mut Rng::new(3)).unwrap();
        // Blow up a weight so the first forward produces a non-finite loss.
        let huge = Tensor::filled(&[16, 64], f32::MAX);
        p.set_value("f1.weight", huge).unwrap();
        let data = tiny_data(6);
        let mut state = TrainState::new(p, 2);
        let err = train(&g, &mut state, &data, &data, &quick_config(1)).unwrap_err();
        match err {
            TrainError::Diverged { epoch: 0, batch, .. } => assert_eq!(batch, 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
