//! Shared fixtures for the criterion benchmarks.

use whatwhere::data::{generate, Dataset, GenConfig};
use whatwhere::graph::{Graph, ParamStore};
use whatwhere::netspec::{build, parse_spec, ArchKind, MINI_NET};
use whatwhere::rng::Rng;
use whatwhere::tensor::Real;

/// The default architecture in its heaviest variant, ready to run.
pub fn mini_multi<T: Real>() -> (Graph, ParamStore<T>) {
    let spec = parse_spec(MINI_NET).expect("parse built-in description");
    build(&spec, ArchKind::InjectMulti, &mut Rng::new(7)).expect("build")
}

/// A small rendered dataset matching the default architecture's input.
pub fn small_dataset() -> Dataset {
    let config = GenConfig {
        categories: 4,
        n_rot: 4,
        n_az: 2,
        instances: 2,
        backgrounds: 1,
        seed: 3,
        ..GenConfig::default()
    };
    generate(&config).expect("generate")
}
