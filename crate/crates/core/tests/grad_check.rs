//! Whole-graph gradient checks: central finite differences against
//! backward on the full multi-injection network at 64-bit precision.
//!
//! The check runs at a well-scaled point: weights are drawn 10x larger
//! than the training init and batch-norm running statistics are warmed to
//! match the probe batch. A freshly initialized net would put most
//! pre-activations within the difference step of a relu kink (batch-norm
//! divides by a tiny batch sigma there), where central differences measure
//! the kink instead of the one-sided derivative.

use whatwhere::analysis::fd_check;
use whatwhere::data::{generate, Dataset, GenConfig};
use whatwhere::graph::{apply_bn_updates, Graph, Mode, ParamStore, Retain};
use whatwhere::netspec::{build, parse_spec, ArchKind, MINI_NET};
use whatwhere::rng::Rng;
use whatwhere::shapes::ShapeSet;

const WEIGHTS: &[(&str, f64)] = &[("category_loss", 1.0), ("pose_loss", 0.7)];
const BATCH: [usize; 3] = [0, 5, 11];

fn setup() -> (Graph, ParamStore<f64>, Dataset) {
    let spec = parse_spec(MINI_NET).unwrap();
    let (graph, mut params) =
        build::<f64>(&spec, ArchKind::InjectMulti, &mut Rng::new(40)).unwrap();
    let data = generate(&GenConfig {
        categories: 4,
        n_rot: 2,
        n_az: 2,
        instances: 1,
        backgrounds: 1,
        height: 32,
        width: 32,
        channels: 1,
        shape_set: ShapeSet::A,
        seed: 12,
    })
    .unwrap();

    let names: Vec<String> = params
        .iter()
        .filter(|(k, _)| k.ends_with(".weight"))
        .map(|(k, _)| k.clone())
        .collect();
    for n in names {
        let mut t = params.value(&n).unwrap().clone();
        t.scale(10.0);
        params.set_value(&n, t).unwrap();
    }
    let batch = data.batch::<f64>(&BATCH).unwrap();
    for _ in 0..80 {
        let cache = graph
            .forward(&params, &batch, Mode::Train, Retain::OutputsOnly, &mut Rng::new(1))
            .unwrap();
        apply_bn_updates(&graph, &mut params, &cache).unwrap();
    }
    (graph, params, data)
}

fn run(mode: Mode, seed: u64) {
    let (graph, params, data) = setup();
    let report = fd_check(&graph, &params, &data, &BATCH, WEIGHTS, mode, 510, 1e-6, seed).unwrap();
    assert!(report.checked >= 510);
    assert!(
        report.max_rel < 1e-5,
        "max rel {} at {:?}",
        report.max_rel,
        report.worst
    );
    assert!(
        report.max_small_abs < 1e-7,
        "small-gradient drift {}",
        report.max_small_abs
    );
}

#[test]
fn full_graph_matches_finite_differences_in_train_mode() {
    run(Mode::Train, 77);
}

#[test]
fn full_graph_matches_finite_differences_in_eval_mode() {
    run(Mode::Eval, 78);
}
