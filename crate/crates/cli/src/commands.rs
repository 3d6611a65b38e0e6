//! Subcommand implementations. Each resolves its settings (defaults, then
//! config file, then flags), does the work through the library crate, writes
//! its artifacts, prints a one-line summary, and appends a manifest line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use whatwhere::analysis::{
    class_mass, decoupleness, entropy_profile, gradient_probe, node_activations, project_2d,
    rf_average, warmstart_experiment, write_rf_grid, LabelKind, PartitionStat, ProbeConfig,
    WarmstartDirection,
};
use whatwhere::data::{generate, read_dataset, split_by_instance, write_dataset, Dataset, GenConfig};
use whatwhere::graph::{Graph, Partition};
use whatwhere::netspec::{
    build, parse_spec, prune as prune_net, transplant_filtered, ArchKind, NetworkSpec,
    PruneOutcome, MINI_NET,
};
use whatwhere::rng::{derive_named, fnv1a, Rng};
use whatwhere::tensor::Real;
use whatwhere::train::{
    evaluate, load_checkpoint, save_checkpoint, train_segment, Checkpoint, EpochStat,
    LoadedCheckpoint, TrainConfig, TrainState,
};

use crate::manifest::RunClock;
use crate::{
    AnalyzeArgs, CliError, EvalArgs, GenDataArgs, ProbeArgs, PruneArgs, TrainArgs, TrainOverrides,
    TransplantArgs, WarmstartArgs,
};

// ---------------------------------------------------------------------------
// Shared plumbing

/// Output directories resolve under `WW_OUT_ROOT` when given a relative path.
fn make_out_dir(out: &Path) -> Result<PathBuf, CliError> {
    let dir = if out.is_absolute() {
        out.to_path_buf()
    } else {
        match std::env::var_os("WW_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(out),
            None => out.to_path_buf(),
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)?;
    Ok(())
}

fn parse_arch(s: &str) -> Result<ArchKind, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        }
    }
}

/// The parsed description, with the run's dropout override applied.
fn specialized(spec: &NetworkSpec, dropout: Option<f64>) -> NetworkSpec {
    let mut s = spec.clone();
    if let Some(rate) = dropout {
        s.override_dropout(rate);
    }
    s
}

/// Rebuilds the checkpoint's graph from its embedded description. Only the
/// structure matters; the freshly drawn parameters are discarded.
fn rebuild<T: Real>(c: &Checkpoint<T>) -> Result<(Graph, NetworkSpec), CliError> {
    let spec = parse_spec(&c.spec_text)?;
    let graph_spec = specialized(&spec, c.config.dropout);
    let (graph, _) = build::<T>(&graph_spec, c.arch, &mut Rng::new(0))?;
    Ok((graph, spec))
}

fn verify_net_hash<T: Real>(path: &Path, c: &Checkpoint<T>) -> Result<(), CliError> {
    let text = fs::read_to_string(path)?;
    let file_hash = fnv1a(text.as_bytes());
    if file_hash != c.spec_hash() {
        return Err(CliError::Input(format!(
            "network description hash mismatch: checkpoint {:016x}, {} {:016x}",
            c.spec_hash(),
            path.display(),
            file_hash
        )));
    }
    Ok(())
}

fn check_data(
    spec: &NetworkSpec,
    arch: ArchKind,
    data: &Dataset,
    what: &str,
) -> Result<(), CliError> {
    let (h, w, ch) = spec.input_hwc;
    let got = (
        data.meta.height as usize,
        data.meta.width as usize,
        data.meta.channels as usize,
    );
    if got != (h, w, ch) {
        return Err(CliError::Input(format!(
            "{what}: image geometry {}x{}x{} does not match the description's {h}x{w}x{ch}",
            got.0, got.1, got.2
        )));
    }
    if data.meta.categories as usize != spec.categories {
        return Err(CliError::Input(format!(
            "{what}: {} categories, the description expects {}",
            data.meta.categories, spec.categories
        )));
    }
    if arch != ArchKind::Base && spec.poses != data.meta.poses as usize {
        return Err(CliError::Input(format!(
            "{what}: {} poses, the description expects {}",
            data.meta.poses, spec.poses
        )));
    }
    Ok(())
}

fn epoch_csv(log: &[EpochStat]) -> String {
    let mut csv = String::from(EpochStat::CSV_HEADER);
    csv.push('\n');
    for row in log {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    csv
}

fn train_config_json(c: &TrainConfig, arch: ArchKind, precision: &str) -> serde_json::Value {
    json!({
        "arch": arch.label(),
        "precision": precision,
        "epochs": c.epochs,
        "batch_size": c.batch_size,
        "lr": c.lr,
        "lr_decay": c.lr_decay,
        "lr_step": c.lr_step,
        "momentum": c.momentum,
        "weight_decay": c.weight_decay,
        "dropout": c.dropout,
        "lambda": c.lambda,
        "seed": c.seed,
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenFile {
    categories: Option<usize>,
    n_rot: Option<usize>,
    n_az: Option<usize>,
    instances: Option<usize>,
    backgrounds: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    channels: Option<usize>,
    shape_set: Option<String>,
    seed: Option<u64>,
    train_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    lr_step: Option<usize>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    dropout: Option<f64>,
    lambda: Option<f64>,
    seed: Option<u64>,
}

impl TrainOverrides {
    /// Layers settings onto `base`: config file first, then flags. An
    /// `lr_step` of 0 clears the explicit step so the schedule derives
    /// thirds of the epoch budget. `spec_lambda`, when given, replaces the
    /// base lambda unless the file or a flag sets one.
    fn resolve(&self, base: TrainConfig, spec_lambda: Option<f64>) -> Result<TrainConfig, CliError> {
        let file: TrainFile = load_toml(self.config.as_deref())?;
        let mut c = base;
        if self.lambda.is_none() && file.lambda.is_none() {
            if let Some(l) = spec_lambda {
                c.lambda = l;
            }
        }
        let step = |v: usize| if v == 0 { None } else { Some(v) };
        if let Some(v) = file.epochs {
            c.epochs = v;
        }
        if let Some(v) = file.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = file.lr {
            c.lr = v;
        }
        if let Some(v) = file.lr_decay {
            c.lr_decay = v;
        }
        if let Some(v) = file.lr_step {
            c.lr_step = step(v);
        }
        if let Some(v) = file.momentum {
            c.momentum = v;
        }
        if let Some(v) = file.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = file.dropout {
            c.dropout = Some(v);
        }
        if let Some(v) = file.lambda {
            c.lambda = v;
        }
        if let Some(v) = file.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.lr_decay {
            c.lr_decay = v;
        }
        if let Some(v) = self.lr_step {
            c.lr_step = step(v);
        }
        if let Some(v) = self.momentum {
            c.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.dropout {
            c.dropout = Some(v);
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// gen-data

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    let file: GenFile = load_toml(a.config.as_deref())?;
    let mut cfg = GenConfig::default();
    if let Some(v) = file.categories {
        cfg.categories = v;
    }
    if let Some(v) = a.categories {
        cfg.categories = v;
    }
    if let Some(v) = file.n_rot {
        cfg.n_rot = v;
    }
    if let Some(v) = a.n_rot {
        cfg.n_rot = v;
    }
    if let Some(v) = file.n_az {
        cfg.n_az = v;
    }
    if let Some(v) = a.n_az {
        cfg.n_az = v;
    }
    if let Some(v) = file.instances {
        cfg.instances = v;
    }
    if let Some(v) = a.instances {
        cfg.instances = v;
    }
    if let Some(v) = file.backgrounds {
        cfg.backgrounds = v;
    }
    if let Some(v) = a.backgrounds {
        cfg.backgrounds = v;
    }
    if let Some(v) = file.height {
        cfg.height = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = file.width {
        cfg.width = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = file.channels {
        cfg.channels = v;
    }
    if let Some(v) = a.channels {
        cfg.channels = v;
    }
    if let Some(v) = file.shape_set.as_deref() {
        cfg.shape_set = v.parse().map_err(CliError::Usage)?;
    }
    if let Some(v) = a.shape_set.as_deref() {
        cfg.shape_set = v.parse().map_err(CliError::Usage)?;
    }
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let train_fraction = a.train_fraction.or(file.train_fraction).unwrap_or(0.75);
    cfg.validate()?;
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(CliError::Usage(format!(
            "train_fraction must be in (0, 1], got {train_fraction}"
        )));
    }
    let dir = make_out_dir(&a.out)?;
    let data = generate(&cfg)?;
    let holdout_seed = derive_named(cfg.seed, "holdout", 0);
    let mut outputs: Vec<PathBuf> = Vec::new();
    if train_fraction < 1.0 {
        let (train, test) = split_by_instance(&data, train_fraction, holdout_seed)?;
        let tp = dir.join("train.wwds");
        let ep = dir.join("test.wwds");
        write_dataset(&tp, &train)?;
        write_dataset(&ep, &test)?;
        println!(
            "wrote {} ({} records) and {} ({} records)",
            tp.display(),
            train.len(),
            ep.display(),
            test.len()
        );
        outputs.push(tp);
        outputs.push(ep);
    } else {
        let p = dir.join("data.wwds");
        write_dataset(&p, &data)?;
        println!("wrote {} ({} records)", p.display(), data.len());
        outputs.push(p);
    }
    let config = json!({
        "categories": cfg.categories,
        "n_rot": cfg.n_rot,
        "n_az": cfg.n_az,
        "instances": cfg.instances,
        "backgrounds": cfg.backgrounds,
        "height": cfg.height,
        "width": cfg.width,
        "channels": cfg.channels,
        "shape_set": cfg.shape_set.label(),
        "seed": cfg.seed,
        "train_fraction": train_fraction,
    });
    let seeds = json!({ "root": cfg.seed, "holdout": holdout_seed });
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    clock.finish(&dir, "gen-data", config, seeds, &inputs, &outs)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    // Flag sanity before any file is touched.
    let precision = a.precision.as_deref().unwrap_or("f32");
    if !matches!(precision, "f32" | "f64") {
        return Err(CliError::Usage(format!(
            "precision must be f32 or f64, got {precision:?}"
        )));
    }
    let flag_arch = a.arch.as_deref().map(parse_arch).transpose()?;
    if a.resume.is_none() && flag_arch.is_none() {
        return Err(CliError::Usage(
            "--arch is required unless resuming from a checkpoint".into(),
        ));
    }
    let dir = make_out_dir(&a.out)?;
    let train_set = read_dataset(&a.train_data)?;
    let test_set = read_dataset(&a.test_data)?;
    if let Some(resume) = a.resume.clone() {
        match load_checkpoint(&resume)? {
            LoadedCheckpoint::F32(c) => {
                check_precision(&a, "f32")?;
                resume_train(c, a, &train_set, &test_set, dir, clock)
            }
            LoadedCheckpoint::F64(c) => {
                check_precision(&a, "f64")?;
                resume_train(c, a, &train_set, &test_set, dir, clock)
            }
        }
    } else {
        let arch = flag_arch.expect("checked above");
        let spec_text = match &a.net {
            Some(p) => fs::read_to_string(p)?,
            None => MINI_NET.to_string(),
        };
        match precision {
            "f64" => fresh_train::<f64>(spec_text, arch, a, &train_set, &test_set, dir, clock),
            _ => fresh_train::<f32>(spec_text, arch, a, &train_set, &test_set, dir, clock),
        }
    }
}

fn check_precision(a: &TrainArgs, have: &str) -> Result<(), CliError> {
    match a.precision.as_deref() {
        None => Ok(()),
        Some(p) if p == have => Ok(()),
        Some(p) => Err(CliError::Usage(format!(
            "checkpoint stores {have} parameters; cannot resume at --precision {p}"
        ))),
    }
}

fn fresh_train<T: Real>(
    spec_text: String,
    arch: ArchKind,
    a: TrainArgs,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let spec = parse_spec(&spec_text)?;
    let config = a.overrides.resolve(TrainConfig::for_arch(arch), Some(spec.lambda))?;
    check_data(&spec, arch, train_set, "train data")?;
    check_data(&spec, arch, test_set, "test data")?;
    let init_seed = derive_named(config.seed, "init", 0);
    let graph_spec = specialized(&spec, config.dropout);
    let (graph, params) = build::<T>(&graph_spec, arch, &mut Rng::new(init_seed))?;
    let state = TrainState::new(params, config.seed);
    finish_training(
        graph,
        state,
        spec_text,
        arch,
        config,
        Some(init_seed),
        a,
        train_set,
        test_set,
        dir,
        clock,
    )
}

fn resume_train<T: Real>(
    c: Checkpoint<T>,
    a: TrainArgs,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    if let Some(s) = a.arch.as_deref() {
        let asked = parse_arch(s)?;
        if asked != c.arch {
            return Err(CliError::Usage(format!(
                "--arch {} conflicts with the checkpoint's {}",
                asked.label(),
                c.arch.label()
            )));
        }
    }
    if let Some(net) = &a.net {
        verify_net_hash(net, &c)?;
    }
    let config = a.overrides.resolve(c.config.clone(), None)?;
    let spec = parse_spec(&c.spec_text)?;
    check_data(&spec, c.arch, train_set, "train data")?;
    check_data(&spec, c.arch, test_set, "test data")?;
    let graph_spec = specialized(&spec, config.dropout);
    let (graph, _) = build::<T>(&graph_spec, c.arch, &mut Rng::new(0))?;
    let arch = c.arch;
    let spec_text = c.spec_text.clone();
    let state = c.into_state();
    finish_training(
        graph, state, spec_text, arch, config, None, a, train_set, test_set, dir, clock,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_training<T: Real>(
    graph: Graph,
    mut state: TrainState<T>,
    spec_text: String,
    arch: ArchKind,
    config: TrainConfig,
    init_seed: Option<u64>,
    a: TrainArgs,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let log = train_segment(&graph, &mut state, train_set, test_set, &config, usize::MAX)?;
    let csv_path = dir.join("epochs.csv");
    write_text(&csv_path, &epoch_csv(&log))?;
    let ckpt = Checkpoint::from_state(arch, &spec_text, &config, &state);
    let ckpt_path = dir.join("checkpoint.wwck");
    save_checkpoint(&ckpt_path, &ckpt)?;
    let acc = match log.last() {
        Some(row) => row.test_acc,
        None => evaluate(&graph, &state.params, test_set, config.batch_size.max(1))?.accuracy,
    };
    println!(
        "{} at epoch {}: test accuracy {:.4}",
        arch.label(),
        state.epoch,
        acc
    );
    let seeds = json!({
        "root": config.seed,
        "init": init_seed,
        "order": derive_named(config.seed, "order", 0),
        "train": derive_named(config.seed, "train", 0),
    });
    let cfg = train_config_json(&config, arch, T::NAME);
    let mut inputs: Vec<&Path> = vec![a.train_data.as_path(), a.test_data.as_path()];
    if let Some(p) = &a.net {
        inputs.push(p.as_path());
    }
    if let Some(p) = &a.resume {
        inputs.push(p.as_path());
    }
    if let Some(p) = &a.overrides.config {
        inputs.push(p.as_path());
    }
    clock.finish(
        &dir,
        "train",
        cfg,
        seeds,
        &inputs,
        &[csv_path.as_path(), ckpt_path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.checkpoint)? {
        LoadedCheckpoint::F32(c) => eval_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => eval_inner(c, a, dir, clock),
    }
}

fn eval_inner<T: Real>(
    c: Checkpoint<T>,
    a: EvalArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    if let Some(net) = &a.net {
        verify_net_hash(net, &c)?;
    }
    let data = read_dataset(&a.data)?;
    let batch = a.batch_size.unwrap_or(128).max(1);
    let (graph, _) = rebuild(&c)?;
    let report = evaluate(&graph, &c.params, &data, batch)?;

    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("accuracy,{}\n", report.accuracy));
    csv.push_str(&format!("map,{}\n", report.map));
    if let Some(p) = report.pose_accuracy {
        csv.push_str(&format!("pose_accuracy,{p}\n"));
    }
    csv.push_str(&format!("samples,{}\n", report.samples));
    csv.push_str(&format!("categories,{}\n", report.categories));
    for (i, ap) in report.per_class_ap.iter().enumerate() {
        csv.push_str(&format!("ap_{i},{ap}\n"));
    }
    let eval_path = dir.join("eval.csv");
    write_text(&eval_path, &csv)?;

    let k = report.categories;
    let mut conf = String::from("true_category,predicted_category,count\n");
    for t in 0..k {
        for p in 0..k {
            conf.push_str(&format!("{t},{p},{}\n", report.confusion[t * k + p]));
        }
    }
    let conf_path = dir.join("confusion.csv");
    write_text(&conf_path, &conf)?;

    match report.pose_accuracy {
        Some(p) => println!(
            "accuracy {:.4}  map {:.4}  pose accuracy {:.4}  ({} samples)",
            report.accuracy, report.map, p, report.samples
        ),
        None => println!(
            "accuracy {:.4}  map {:.4}  ({} samples)",
            report.accuracy, report.map, report.samples
        ),
    }
    let cfg = json!({
        "arch": c.arch.label(),
        "precision": T::NAME,
        "checkpoint_epoch": c.epoch,
        "batch_size": batch,
    });
    let mut inputs: Vec<&Path> = vec![a.checkpoint.as_path(), a.data.as_path()];
    if let Some(p) = &a.net {
        inputs.push(p.as_path());
    }
    clock.finish(
        &dir,
        "eval",
        cfg,
        json!({}),
        &inputs,
        &[eval_path.as_path(), conf_path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prune

pub fn prune(a: PruneArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.checkpoint)? {
        LoadedCheckpoint::F32(c) => prune_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => prune_inner(c, a, dir, clock),
    }
}

fn prune_inner<T: Real>(
    c: Checkpoint<T>,
    a: PruneArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let (graph, _) = rebuild(&c)?;
    let (_, pruned, outcome) = prune_net(&graph, &c.params)?;
    let velocities: BTreeMap<_, _> = c
        .velocities
        .iter()
        .filter(|(name, _)| pruned.contains(name))
        .map(|(name, v)| (name.clone(), v.clone()))
        .collect();
    let out_ckpt = Checkpoint {
        arch: ArchKind::Base,
        spec_text: c.spec_text.clone(),
        config: c.config.clone(),
        epoch: c.epoch,
        rng_state: c.rng_state,
        params: pruned,
        velocities,
    };
    let path = dir.join("pruned.wwck");
    save_checkpoint(&path, &out_ckpt)?;
    match outcome {
        PruneOutcome::Pruned {
            removed_nodes,
            removed_params,
        } => println!("removed {removed_nodes} nodes and {removed_params} parameters"),
        PruneOutcome::AlreadyBase => println!("already a base network; copied unchanged"),
    }
    let cfg = json!({
        "arch": c.arch.label(),
        "precision": T::NAME,
        "checkpoint_epoch": c.epoch,
    });
    clock.finish(
        &dir,
        "prune",
        cfg,
        json!({}),
        &[a.checkpoint.as_path()],
        &[path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// transplant

pub fn transplant(a: TransplantArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    parse_arch(&a.arch)?;
    if !matches!(a.keep.as_deref().unwrap_or("all"), "all" | "shared") {
        return Err(CliError::Usage(format!(
            "keep must be all or shared, got {:?}",
            a.keep.as_deref().unwrap_or("")
        )));
    }
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.from)? {
        LoadedCheckpoint::F32(c) => transplant_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => transplant_inner(c, a, dir, clock),
    }
}

fn transplant_inner<T: Real>(
    donor: Checkpoint<T>,
    a: TransplantArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let dst_arch = parse_arch(&a.arch)?;
    let keep = a.keep.as_deref().unwrap_or("all");
    let keep_fn: fn(&Partition) -> bool = match keep {
        "all" => |_| true,
        "shared" => |p| matches!(p, Partition::Shared),
        other => {
            return Err(CliError::Usage(format!(
                "keep must be all or shared, got {other:?}"
            )))
        }
    };
    let seed = a.seed.unwrap_or(0);
    let spec = parse_spec(&donor.spec_text)?;
    let graph_spec = specialized(&spec, donor.config.dropout);
    let init_seed = derive_named(seed, "init", 0);
    let (_, fresh) = build::<T>(&graph_spec, dst_arch, &mut Rng::new(init_seed))?;
    let reinit_seed = derive_named(seed, "reinit", 0);
    let mut reinit = Rng::new(reinit_seed);
    let (params, report) = transplant_filtered(&donor.params, &fresh, &mut reinit, keep_fn)?;
    let mut config = TrainConfig::for_arch(dst_arch);
    config.lambda = spec.lambda;
    config.seed = seed;
    let state = TrainState::new(params, config.seed);
    let ckpt = Checkpoint::from_state(dst_arch, &donor.spec_text, &config, &state);
    let path = dir.join("transplant.wwck");
    save_checkpoint(&path, &ckpt)?;
    println!(
        "copied {} parameters into {}, re-initialized {}",
        report.copied.len(),
        dst_arch.label(),
        report.reinitialized.len()
    );
    let cfg = json!({
        "donor_arch": donor.arch.label(),
        "arch": dst_arch.label(),
        "keep": keep,
        "precision": T::NAME,
        "seed": seed,
    });
    let seeds = json!({ "root": seed, "init": init_seed, "reinit": reinit_seed });
    clock.finish(
        &dir,
        "transplant",
        cfg,
        seeds,
        &[a.from.as_path()],
        &[path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// probe

pub fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.checkpoint)? {
        LoadedCheckpoint::F32(c) => probe_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => probe_inner(c, a, dir, clock),
    }
}

fn probe_inner<T: Real>(
    c: Checkpoint<T>,
    a: ProbeArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let data = read_dataset(&a.data)?;
    let (graph, _) = rebuild(&c)?;
    let probe = ProbeConfig {
        batches: a.batches.unwrap_or(4),
        batch_size: a.batch_size.unwrap_or(64),
        lambda: a.lambda.unwrap_or(c.config.lambda),
        seed: a.seed.unwrap_or(0),
    };
    let report = gradient_probe(&graph, &c.params, &data, &probe)?;
    let mut csv = String::from("weighting,partition,l2,rms,elements\n");
    let mut push = |weighting: &str, partition: &str, s: &PartitionStat| {
        csv.push_str(&format!(
            "{weighting},{partition},{},{},{}\n",
            s.l2, s.rms, s.elements
        ));
    };
    for (weighting, norms) in [
        ("category_only", &report.category_only),
        ("joint", &report.joint),
    ] {
        push(weighting, "shared", &norms.shared);
        push(weighting, "category_head", &norms.category_head);
        if let Some(ps) = &norms.pose_side {
            push(weighting, "pose_side", ps);
        }
    }
    let path = dir.join("probe.csv");
    write_text(&path, &csv)?;
    match &report.joint.pose_side {
        Some(ps) => println!(
            "joint shared rms {:e}, pose side rms {:e} over {} batches",
            report.joint.shared.rms, ps.rms, report.batches
        ),
        None => println!(
            "joint shared rms {:e} over {} batches",
            report.joint.shared.rms, report.batches
        ),
    }
    let cfg = json!({
        "arch": c.arch.label(),
        "precision": T::NAME,
        "checkpoint_epoch": c.epoch,
        "batches": probe.batches,
        "batch_size": probe.batch_size,
        "lambda": probe.lambda,
        "seed": probe.seed,
    });
    clock.finish(
        &dir,
        "probe",
        cfg,
        json!({ "root": probe.seed, "probe": derive_named(probe.seed, "probe", 0) }),
        &[a.checkpoint.as_path(), a.data.as_path()],
        &[path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// warmstart

pub fn warmstart(a: WarmstartArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    parse_direction(&a.direction)?;
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.donor)? {
        LoadedCheckpoint::F32(c) => warmstart_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => warmstart_inner(c, a, dir, clock),
    }
}

fn parse_direction(s: &str) -> Result<WarmstartDirection, CliError> {
    match s {
        "base-to-multi" => Ok(WarmstartDirection::BaseToMulti),
        "multi-to-base" => Ok(WarmstartDirection::MultiToBase),
        other => Err(CliError::Usage(format!(
            "direction must be base-to-multi or multi-to-base, got {other:?}"
        ))),
    }
}

fn warmstart_inner<T: Real>(
    donor: Checkpoint<T>,
    a: WarmstartArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let direction = parse_direction(&a.direction)?;
    let (src_arch, dst_arch) = match direction {
        WarmstartDirection::BaseToMulti => (ArchKind::Base, ArchKind::InjectMulti),
        WarmstartDirection::MultiToBase => (ArchKind::InjectMulti, ArchKind::Base),
    };
    if donor.arch != src_arch {
        return Err(CliError::Usage(format!(
            "direction {} needs a {} donor, the checkpoint holds {}",
            a.direction,
            src_arch.label(),
            donor.arch.label()
        )));
    }
    let train_set = read_dataset(&a.train_data)?;
    let test_set = read_dataset(&a.test_data)?;
    let spec = parse_spec(&donor.spec_text)?;
    let config = a
        .overrides
        .resolve(TrainConfig::for_arch(dst_arch), Some(spec.lambda))?;
    check_data(&spec, dst_arch, &train_set, "train data")?;
    check_data(&spec, dst_arch, &test_set, "test data")?;
    let graph_spec = specialized(&spec, config.dropout);

    let warm_init = derive_named(config.seed, "warm-init", 0);
    let report = warmstart_experiment(
        &graph_spec,
        &donor.params,
        direction,
        &train_set,
        &test_set,
        &config,
        warm_init,
    )?;
    let warm_path = dir.join("warm.csv");
    write_text(&warm_path, &epoch_csv(&report.log))?;

    let cold_init = derive_named(config.seed, "cold-init", 0);
    let (graph, params) = build::<T>(&graph_spec, dst_arch, &mut Rng::new(cold_init))?;
    let mut cold_state = TrainState::new(params, config.seed);
    let cold_log = train_segment(
        &graph,
        &mut cold_state,
        &train_set,
        &test_set,
        &config,
        usize::MAX,
    )?;
    let cold_path = dir.join("cold.csv");
    write_text(&cold_path, &epoch_csv(&cold_log))?;

    let warm_final = report
        .log
        .last()
        .map(|r| r.test_acc)
        .unwrap_or(report.initial_acc);
    let cold_final = cold_log.last().map(|r| r.test_acc).unwrap_or(f64::NAN);
    println!(
        "warm {:.4} -> {:.4}, cold -> {:.4} over {} epochs",
        report.initial_acc,
        warm_final,
        cold_final,
        config.epochs
    );
    let cfg = {
        let mut v = train_config_json(&config, dst_arch, T::NAME);
        v["direction"] = json!(a.direction);
        v["donor_arch"] = json!(donor.arch.label());
        v
    };
    let seeds = json!({
        "root": config.seed,
        "warm_init": warm_init,
        "cold_init": cold_init,
        "order": derive_named(config.seed, "order", 0),
        "train": derive_named(config.seed, "train", 0),
    });
    let mut inputs: Vec<&Path> = vec![
        a.donor.as_path(),
        a.train_data.as_path(),
        a.test_data.as_path(),
    ];
    if let Some(p) = &a.overrides.config {
        inputs.push(p.as_path());
    }
    clock.finish(
        &dir,
        "warmstart",
        cfg,
        seeds,
        &inputs,
        &[warm_path.as_path(), cold_path.as_path()],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let clock = RunClock::start();
    if !matches!(a.which.as_str(), "decouple" | "rf" | "embed") {
        return Err(CliError::Usage(format!(
            "which must be decouple, rf, or embed, got {:?}",
            a.which
        )));
    }
    if a.which == "rf" && a.node.is_none() {
        return Err(CliError::Usage("rf needs --node".into()));
    }
    let dir = make_out_dir(&a.out)?;
    match load_checkpoint(&a.checkpoint)? {
        LoadedCheckpoint::F32(c) => analyze_inner(c, a, dir, clock),
        LoadedCheckpoint::F64(c) => analyze_inner(c, a, dir, clock),
    }
}

const DEFAULT_PROFILE_NODES: &str = "pool1,pool2,conv3,conv4,fc7";

fn analyze_inner<T: Real>(
    c: Checkpoint<T>,
    a: AnalyzeArgs,
    dir: PathBuf,
    clock: RunClock,
) -> Result<(), CliError> {
    let data = read_dataset(&a.data)?;
    let (graph, _) = rebuild(&c)?;
    let batch = a.batch_size.unwrap_or(128).max(1);
    let mut outputs: Vec<PathBuf> = Vec::new();
    let cfg_extra;
    match a.which.as_str() {
        "decouple" => {
            let list = a
                .nodes
                .clone()
                .unwrap_or_else(|| DEFAULT_PROFILE_NODES.to_string());
            let nodes: Vec<String> = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if nodes.is_empty() {
                return Err(CliError::Usage("--nodes named no nodes".into()));
            }
            let mut dec = String::from("node,gamma,units_used,dead_units\n");
            let mut ent = String::from("node,unit,e_category,e_pose\n");
            for node in &nodes {
                let cat = class_mass(&graph, &c.params, &data, node, LabelKind::Category, batch)?;
                let pose = class_mass(&graph, &c.params, &data, node, LabelKind::Pose, batch)?;
                let d = decoupleness(&cat, &pose)?;
                dec.push_str(&format!(
                    "{node},{},{},{}\n",
                    d.gamma, d.units_used, d.dead_units
                ));
                let ec = entropy_profile(&cat);
                let ep = entropy_profile(&pose);
                let cell = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
                for u in 0..cat.units {
                    ent.push_str(&format!("{node},{u},{},{}\n", cell(ec[u]), cell(ep[u])));
                }
                println!(
                    "{node}: gamma {:.4} over {} units ({} dead)",
                    d.gamma, d.units_used, d.dead_units
                );
            }
            let dec_path = dir.join("decouple.csv");
            let ent_path = dir.join("entropy.csv");
            write_text(&dec_path, &dec)?;
            write_text(&ent_path, &ent)?;
            outputs.push(dec_path);
            outputs.push(ent_path);
            cfg_extra = json!({ "nodes": nodes, "batch_size": batch });
        }
        "rf" => {
            let node = a
                .node
                .clone()
                .ok_or_else(|| CliError::Usage("rf needs --node".into()))?;
            let k = a.k.unwrap_or_else(|| 100.min(data.len()));
            let total = class_mass(&graph, &c.params, &data, &node, LabelKind::Category, batch)?
                .units;
            let n_units = a.units.unwrap_or(16).min(total);
            if n_units == 0 {
                return Err(CliError::Usage("--units must be at least 1".into()));
            }
            let cols = a.cols.unwrap_or(8).max(1);
            let mut tiles = Vec::with_capacity(n_units);
            let mut csv = String::from("unit,dead\n");
            for unit in 0..n_units {
                let tile = rf_average(&graph, &c.params, &data, &node, unit, k, batch)?;
                csv.push_str(&format!("{unit},{}\n", tile.dead));
                tiles.push(tile);
            }
            let pgm_path = dir.join(format!("rf_{node}.pgm"));
            let csv_path = dir.join(format!("rf_{node}.csv"));
            write_rf_grid(&pgm_path, &tiles, cols)?;
            write_text(&csv_path, &csv)?;
            println!(
                "wrote {} ({} of {} units, k {})",
                pgm_path.display(),
                n_units,
                total,
                k
            );
            outputs.push(pgm_path);
            outputs.push(csv_path);
            cfg_extra = json!({
                "node": node,
                "k": k,
                "units": n_units,
                "cols": cols,
                "batch_size": batch,
            });
        }
        "embed" => {
            let node = a.node.clone().unwrap_or_else(|| "fc7".to_string());
            let features = node_activations(&graph, &c.params, &data, &node, batch)?;
            let proj = project_2d(&features)?;
            let mut csv = String::from("sample,category,pose,x,y\n");
            for (i, rec) in data.records.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{},{},{}\n",
                    rec.category, rec.pose, proj.coords[i][0], proj.coords[i][1]
                ));
            }
            let path = dir.join("embed.csv");
            write_text(&path, &csv)?;
            println!(
                "explained {} + {}, residual {}",
                proj.explained[0], proj.explained[1], proj.residual
            );
            outputs.push(path);
            cfg_extra = json!({ "node": node, "batch_size": batch });
        }
        other => {
            return Err(CliError::Usage(format!(
                "which must be decouple, rf, or embed, got {other:?}"
            )))
        }
    }
    let mut cfg = json!({
        "which": a.which,
        "arch": c.arch.label(),
        "precision": T::NAME,
        "checkpoint_epoch": c.epoch,
    });
    if let (Some(dst), Some(src)) = (cfg.as_object_mut(), cfg_extra.as_object()) {
        for (key, value) in src {
            dst.insert(key.clone(), value.clone());
        }
    }
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    clock.finish(
        &dir,
        "analyze",
        cfg,
        json!({}),
        &[a.checkpoint.as_path(), a.data.as_path()],
        &outs,
    )?;
    Ok(())
}
