#![allow(dead_code)]

use modlib::adapters::{default_scaling, BuilderTag, Expert, Library, LoraAdapter, Provenance};
use modlib::evalharness::base_model;
use modlib::librarian::BuildConfig;
use modlib::linalg::Matrix;
use modlib::rng::Rng;
use modlib::synthtasks::{generate_benchmark, Benchmark, BenchmarkConfig};
use modlib::toymodel::{Architecture, BaseParams, PretrainConfig, ToyModel};

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Expert with Gaussian factors on every layer.
pub fn random_expert(dim: usize, depth: usize, rank: usize, seed: u64, name: &str, tasks: Vec<usize>) -> Expert<f64> {
    let mut rng = Rng::new(seed);
    let adapters = (0..depth)
        .map(|l| {
            let a = gaussian(dim, rank, &mut rng);
            let b = gaussian(dim, rank, &mut rng).scale(0.1);
            LoraAdapter::new(l, a, b, default_scaling(rank)).unwrap()
        })
        .collect();
    Expert::new(name, adapters, Provenance::new(BuilderTag::Private, tasks)).unwrap()
}

/// Library of `n` random experts, expert `i` covering task `i`.
pub fn random_library(model: &ToyModel<f64>, n: usize, seed: u64) -> Library<f64> {
    let experts = (0..n)
        .map(|i| {
            random_expert(
                model.width(),
                model.depth(),
                4,
                seed * 1000 + i as u64,
                &format!("task-{i}"),
                vec![i],
            )
        })
        .collect();
    Library::new(experts, model.fingerprint(), BuilderTag::Private, seed).unwrap()
}

pub fn random_model(seed: u64) -> ToyModel<f64> {
    ToyModel::freeze(BaseParams::random(&Architecture::default(), 1.2, seed)).unwrap()
}

/// A benchmark small enough for quick structural checks: 3 clusters of 3 tasks.
pub fn small_config(seed: u64) -> BenchmarkConfig {
    BenchmarkConfig {
        n_clusters: 3,
        tasks_per_cluster: 3,
        n_train: 128,
        n_valid: 32,
        n_test: 32,
        held_out_task_count: 0,
        master_seed: seed,
        ..BenchmarkConfig::default()
    }
}

/// Benchmark plus its frozen base model.
pub fn fixture(cfg: &BenchmarkConfig) -> (Benchmark<f64>, ToyModel<f64>) {
    let bench = generate_benchmark::<f64>(cfg).unwrap();
    let model = base_model(
        &bench,
        &PretrainConfig {
            steps: 0,
            seed: cfg.master_seed,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    (bench, model)
}

pub fn default_fixture(seed: u64) -> (Benchmark<f64>, ToyModel<f64>) {
    fixture(&BenchmarkConfig {
        master_seed: seed,
        ..BenchmarkConfig::default()
    })
}

pub fn quick_build(seed: u64, steps: usize) -> BuildConfig {
    let mut cfg = BuildConfig {
        seed,
        ..BuildConfig::default()
    };
    cfg.budget.total_steps_per_task = steps;
    cfg
}
