//! Synthetic multi-task regression benchmark with planted task clusters.
//!
//! Every task is a teacher network with the toy model's architecture: a
//! shared reference network whose layer weights are shifted by a task delta
//! `Δ_t = Δ_c + E_t`. Cluster centers `Δ_c` are low-rank per layer and
//! separated in angle; `E_t` is a dense Gaussian perturbation. Inputs have
//! most of their variance inside a low-dimensional subspace owned by the
//! cluster, so tasks in one cluster share both their function and their
//! input region. Each task's inputs are centered at a small offset inside
//! that subspace; an optional per-cluster mean (`input_shift`, zero by
//! default) moves whole clusters away from the origin.
//! All values are rounded to f32 so exported datasets reload exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cosine_similarity_matrix, Matrix};
use crate::rng::{derive_seed, tags, Rng};
use crate::scalar::{dot, norm, Scalar};
use crate::toymodel::{Activation, Architecture, BaseParams, ToyModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot place {clusters} centers {separation_deg} degrees apart: {reason}")]
    Infeasible {
        clusters: usize,
        separation_deg: f64,
        reason: String,
    },
    #[error("generated tasks violate the cluster structure: {0}")]
    Invariant(String),
    #[error("fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset<T> {
    pub task_id: usize,
    pub cluster_id: usize,
    pub train: Vec<Example<T>>,
    pub valid: Vec<Example<T>>,
    pub test: Vec<Example<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec<T> {
    pub task_id: usize,
    pub cluster_id: usize,
    /// Flattened per-layer weight deltas of the teacher relative to the reference network.
    pub teacher_params: Vec<T>,
    pub noise_std: f64,
    /// Mean of the task's input distribution.
    pub input_mean: Vec<T>,
    /// Orthonormal `input_dim x input_subspace_dim` basis of the cluster's input subspace.
    pub input_basis: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_clusters: usize,
    pub tasks_per_cluster: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub noise_std: f64,
    /// Per-entry std of a task's perturbation relative to the rms entry of its cluster center.
    pub intra_cluster_perturbation: f64,
    /// Minimum angle between cluster centers, in degrees.
    pub inter_cluster_separation_deg: f64,
    /// Rank of each layer's cluster-center delta.
    pub teacher_rank: usize,
    /// Frobenius norm of each center delta relative to the reference layer weight.
    pub delta_scale: f64,
    /// Make each center delta read from the dominant directions of its
    /// cluster's hidden states under the reference network, instead of
    /// from random directions.
    pub aligned_deltas: bool,
    /// Norm of each cluster's input mean.
    pub input_shift: f64,
    /// Norm of a task's input-mean offset from its cluster mean.
    pub input_task_shift: f64,
    /// Dimension of each cluster's input subspace.
    pub input_subspace_dim: usize,
    /// Standard deviation of inputs along the cluster subspace.
    pub input_scale: f64,
    /// Standard deviation of the isotropic input component.
    pub input_floor: f64,
    pub reference_gain: f64,
    pub held_out_task_count: usize,
    pub master_seed: u64,
    pub max_attempts: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            tasks_per_cluster: 8,
            input_dim: 16,
            output_dim: 16,
            depth: 4,
            n_train: 512,
            n_valid: 128,
            n_test: 128,
            noise_std: 0.05,
            intra_cluster_perturbation: 0.2,
            inter_cluster_separation_deg: 60.0,
            teacher_rank: 4,
            delta_scale: 0.4,
            aligned_deltas: true,
            input_shift: 0.0,
            input_task_shift: 0.25,
            input_subspace_dim: 4,
            input_scale: 1.0,
            input_floor: 0.0,
            reference_gain: 1.2,
            held_out_task_count: 4,
            master_seed: 0,
            max_attempts: 1000,
        }
    }
}

impl BenchmarkConfig {
    pub fn n_tasks(&self) -> usize {
        self.n_clusters * self.tasks_per_cluster
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            width: self.input_dim,
            depth: self.depth,
            output_dim: self.output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_clusters == 0 || self.tasks_per_cluster == 0 {
            return bad("need at least one cluster and one task per cluster");
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.depth == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_train == 0 || self.n_valid == 0 || self.n_test == 0 {
            return bad("every split needs at least one example");
        }
        if self.teacher_rank == 0 || self.teacher_rank > self.input_dim {
            return bad("teacher rank must be in 1..=input_dim");
        }
        if self.input_subspace_dim == 0 || self.input_subspace_dim > self.input_dim {
            return bad("input subspace dimension must be in 1..=input_dim");
        }
        if self.held_out_task_count >= self.n_tasks() {
            return bad("held-out count must be below the task count");
        }
        if !(0.0..180.0).contains(&self.inter_cluster_separation_deg) {
            return bad("separation must be in [0, 180) degrees");
        }
        for v in [
            self.noise_std,
            self.intra_cluster_perturbation,
            self.delta_scale,
            self.input_shift,
            self.input_task_shift,
            self.input_scale,
            self.input_floor,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("scales must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// A generated benchmark: teachers, datasets and the held-out split.
#[derive(Debug, Clone)]
pub struct Benchmark<T> {
    pub config: BenchmarkConfig,
    pub reference: BaseParams<T>,
    pub specs: Vec<TaskSpec<T>>,
    pub datasets: Vec<TaskDataset<T>>,
    pub train_tasks: Vec<usize>,
    pub heldout_tasks: Vec<usize>,
}

impl<T: Scalar> Benchmark<T> {
    pub fn dataset(&self, task_id: usize) -> &TaskDataset<T> {
        &self.datasets[task_id]
    }

    pub fn train_datasets(&self) -> Vec<&TaskDataset<T>> {
        self.train_tasks.iter().map(|&t| &self.datasets[t]).collect()
    }

    pub fn heldout_datasets(&self) -> Vec<&TaskDataset<T>> {
        self.heldout_tasks.iter().map(|&t| &self.datasets[t]).collect()
    }

    /// Planted cluster ids of `task_ids`.
    pub fn planted_labels(&self, task_ids: &[usize]) -> Vec<usize> {
        task_ids.iter().map(|&t| self.specs[t].cluster_id).collect()
    }

    /// Noise-free teacher output for task `task_id`.
    pub fn teacher_output(&self, task_id: usize, x: &[T]) -> Vec<T> {
        let deltas = unflatten_deltas(&self.specs[task_id].teacher_params, self.config.input_dim);
        self.reference.forward_with_deltas(x, &deltas)
    }
}

fn unflatten_deltas<T: Scalar>(flat: &[T], d: usize) -> Vec<Matrix<T>> {
    flat.chunks(d * d)
        .map(|c| Matrix::from_vec(d, d, c.to_vec()).expect("delta block"))
        .collect()
}

fn gaussian_vec<T: Scalar>(rng: &mut Rng, n: usize, sd: f64) -> Vec<T> {
    (0..n).map(|_| T::of(sd * rng.normal())).collect()
}

fn angle_deg<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).as_f64().clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Draws one cluster-center delta: per layer a rank-`teacher_rank` matrix
/// `U Vᵀ` with Frobenius norm `delta_scale · ‖W_ref‖_F`. `V` is either given
/// per layer or Gaussian.
fn sample_center<T: Scalar>(
    cfg: &BenchmarkConfig,
    reference: &BaseParams<T>,
    row_spaces: Option<&[Matrix<T>]>,
    rng: &mut Rng,
) -> Vec<T> {
    let d = cfg.input_dim;
    let r = cfg.teacher_rank;
    let mut flat = Vec::with_capacity(cfg.depth * d * d);
    for (l, layer) in reference.layers.iter().enumerate() {
        let u = Matrix::<T>::from_fn(d, r, |_, _| T::of(rng.normal()));
        let v = match row_spaces {
            Some(spaces) => spaces[l].clone(),
            None => Matrix::<T>::from_fn(d, r, |_, _| T::of(rng.normal())),
        };
        let uv = u.matmul_t(&v).expect("square");
        let target = T::of(cfg.delta_scale) * layer.weight.frobenius_norm();
        let s = target / uv.frobenius_norm();
        flat.extend(uv.as_slice().iter().map(|&x| x * s));
    }
    flat
}

/// Leading `teacher_rank` eigenvectors of the second moment of each layer's
/// input under `reference`, for inputs drawn from one cluster.
fn cluster_row_spaces<T: Scalar>(
    cfg: &BenchmarkConfig,
    reference: &ToyModel<T>,
    basis: &Matrix<T>,
    mean: &[T],
    rng: &mut Rng,
) -> Vec<Matrix<T>> {
    const PROBES: usize = 512;
    let d = cfg.input_dim;
    let mut moments = vec![Matrix::<T>::zeros(d, d); cfg.depth];
    for _ in 0..PROBES {
        let x = sample_input(cfg, basis, mean, rng);
        let trace = reference.trace(&x).expect("probe input matches the reference");
        for (m, h) in moments.iter_mut().zip(&trace.layers) {
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += h[i] * h[j];
                }
            }
        }
    }
    moments
        .iter()
        .map(|m| {
            let (u, _, _) = crate::linalg::thin_svd(m).expect("finite moments");
            u.leading_columns(cfg.teacher_rank)
        })
        .collect()
}

fn sample_input<T: Scalar>(cfg: &BenchmarkConfig, basis: &Matrix<T>, mean: &[T], rng: &mut Rng) -> Vec<T> {
    let z: Vec<T> = gaussian_vec(rng, cfg.input_subspace_dim, cfg.input_scale);
    let along = basis.matvec(&z);
    mean.iter()
        .zip(&along)
        .map(|(&m, &a)| (m + a + T::of(cfg.input_floor * rng.normal())).snap_f32())
        .collect()
}

/// Orthonormal input bases per cluster. When the subspaces fit they are
/// mutually orthogonal blocks of one random rotation; otherwise each cluster
/// draws its own.
fn input_bases<T: Scalar>(cfg: &BenchmarkConfig, rng: &mut Rng) -> Vec<Matrix<T>> {
    let (d, m, c) = (cfg.input_dim, cfg.input_subspace_dim, cfg.n_clusters);
    let draw = |rng: &mut Rng, cols: usize| {
        let g = Matrix::<T>::from_fn(d, cols, |_, _| T::of(rng.normal()));
        crate::linalg::qr_reduced(&g).expect("tall gaussian matrix").0
    };
    let bases: Vec<Matrix<T>> = if c * m <= d {
        let q = draw(rng, c * m);
        (0..c)
            .map(|k| Matrix::from_fn(d, m, |i, j| q[(i, k * m + j)]))
            .collect()
    } else {
        (0..c).map(|_| draw(rng, m)).collect()
    };
    bases.into_iter().map(|b| b.map(|v| v.snap_f32())).collect()
}

/// Generates the benchmark described by `cfg`.
pub fn generate_benchmark<T: Scalar>(cfg: &BenchmarkConfig) -> Result<Benchmark<T>> {
    cfg.validate()?;
    let seed = cfg.master_seed;
    let d = cfg.input_dim;
    let c = cfg.n_clusters;
    let theta = cfg.inter_cluster_separation_deg;
    if c >= 2 {
        let simplex = (-1.0 / (c as f64 - 1.0)).acos().to_degrees();
        if theta > simplex + 1e-12 {
            return Err(SynthError::Infeasible {
                clusters: c,
                separation_deg: theta,
                reason: format!("no configuration of {c} directions exceeds {simplex:.3} degrees pairwise"),
            });
        }
    }
    let mut reference = BaseParams::<T>::random(
        &cfg.architecture(),
        cfg.reference_gain,
        derive_seed(seed, &[tags::BENCH_REFERENCE]),
    );
    for l in &mut reference.layers {
        l.weight = l.weight.map(|v| v.snap_f32());
    }
    reference.head = reference.head.map(|v| v.snap_f32());

    let mut rng = Rng::stream(seed, &[tags::BENCH_CENTERS]);
    let bases = input_bases::<T>(cfg, &mut rng);
    let m = cfg.input_subspace_dim;
    // Means live inside the cluster's own subspace.
    let cluster_means: Vec<Vec<T>> = bases
        .iter()
        .map(|q| {
            let u: Vec<T> = gaussian_vec(&mut rng, m, 1.0);
            let dir = q.matvec(&u);
            let n = norm(&dir);
            dir.iter().map(|&v| T::of(cfg.input_shift) * v / n).collect()
        })
        .collect();
    let probe_model = if cfg.aligned_deltas {
        Some(ToyModel::freeze(reference.clone()).map_err(|e| SynthError::Invariant(e.to_string()))?)
    } else {
        None
    };
    let mut centers: Vec<Vec<T>> = Vec::with_capacity(c);
    for k in 0..c {
        let row_spaces = probe_model.as_ref().map(|pm| {
            let mut prng = Rng::stream(seed, &[tags::BENCH_PROBE, k as u64]);
            cluster_row_spaces(cfg, pm, &bases[k], &cluster_means[k], &mut prng)
        });
        let mut placed = None;
        for _ in 0..cfg.max_attempts.max(1) {
            let cand = sample_center(cfg, &reference, row_spaces.as_deref(), &mut rng);
            if centers.iter().all(|prev| angle_deg(prev, &cand) >= theta) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(p) => centers.push(p),
            None => {
                return Err(SynthError::Infeasible {
                    clusters: c,
                    separation_deg: theta,
                    reason: format!("rejection sampling gave up after {} attempts", cfg.max_attempts),
                })
            }
        }
    }

    let mut specs = Vec::with_capacity(cfg.n_tasks());
    for cluster_id in 0..c {
        let center = &centers[cluster_id];
        let rms = (center.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / center.len() as f64).sqrt();
        for i in 0..cfg.tasks_per_cluster {
            let task_id = cluster_id * cfg.tasks_per_cluster + i;
            let mut trng = Rng::stream(seed, &[tags::BENCH_TASK, task_id as u64]);
            let perturb = gaussian_vec::<T>(&mut trng, center.len(), cfg.intra_cluster_perturbation * rms);
            let teacher_params: Vec<T> = center.iter().zip(&perturb).map(|(&a, &b)| (a + b).snap_f32()).collect();
            let offset = bases[cluster_id].matvec(&gaussian_vec::<T>(
                &mut trng,
                m,
                cfg.input_task_shift / (m as f64).sqrt(),
            ));
            let input_mean = cluster_means[cluster_id]
                .iter()
                .zip(&offset)
                .map(|(&a, &b)| a + b)
                .collect();
            specs.push(TaskSpec {
                task_id,
                cluster_id,
                teacher_params,
                noise_std: cfg.noise_std,
                input_mean,
                input_basis: bases[cluster_id].clone(),
            });
        }
    }
    check_block_structure(&specs)?;

    let snap_all = |v: Vec<T>| -> Vec<T> { v.into_iter().map(|x| x.snap_f32()).collect() };
    let datasets = specs
        .iter()
        .map(|spec| {
            let deltas = unflatten_deltas(&spec.teacher_params, d);
            let mut drng = Rng::stream(seed, &[tags::BENCH_DATA, spec.task_id as u64]);
            let mut split = |n: usize| -> Vec<Example<T>> {
                (0..n)
                    .map(|_| {
                        let x = sample_input(cfg, &spec.input_basis, &spec.input_mean, &mut drng);
                        let clean = reference.forward_with_deltas(&x, &deltas);
                        let y = snap_all(
                            clean
                                .into_iter()
                                .map(|v| v + T::of(cfg.noise_std * drng.normal()))
                                .collect(),
                        );
                        Example { x, y }
                    })
                    .collect()
            };
            TaskDataset {
                task_id: spec.task_id,
                cluster_id: spec.cluster_id,
                train: split(cfg.n_train),
                valid: split(cfg.n_valid),
                test: split(cfg.n_test),
            }
        })
        .collect();
    let (train_tasks, heldout_tasks) = heldout_split(&specs, cfg);
    Ok(Benchmark {
        config: *cfg,
        reference,
        specs,
        datasets,
        train_tasks,
        heldout_tasks,
    })
}

/// Every intra-cluster teacher similarity must exceed every inter-cluster one.
fn check_block_structure<T: Scalar>(specs: &[TaskSpec<T>]) -> Result<()> {
    let vectors: Vec<Vec<T>> = specs.iter().map(|s| s.teacher_params.clone()).collect();
    let sim = cosine_similarity_matrix(&vectors).map_err(|e| SynthError::Invariant(e.to_string()))?;
    let (mut min_intra, mut max_inter) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..specs.len() {
        for j in (i + 1)..specs.len() {
            let v = sim.get(i, j).as_f64();
            if specs[i].cluster_id == specs[j].cluster_id {
                min_intra = min_intra.min(v);
            } else {
                max_inter = max_inter.max(v);
            }
        }
    }
    if min_intra.is_finite() && max_inter.is_finite() && min_intra <= max_inter {
        return Err(SynthError::Invariant(format!(
            "min intra-cluster similarity {min_intra:.4} <= max inter-cluster similarity {max_inter:.4}"
        )));
    }
    Ok(())
}

/// Splits task ids into (train, held-out), spreading the held-out tasks over
/// the planted clusters as evenly as possible. Lower-indexed clusters take
/// the remainder. Both lists are ascending.
pub fn heldout_split<T>(specs: &[TaskSpec<T>], cfg: &BenchmarkConfig) -> (Vec<usize>, Vec<usize>) {
    let n_clusters = specs.iter().map(|s| s.cluster_id + 1).max().unwrap_or(0);
    let h = cfg.held_out_task_count.min(specs.len());
    let mut heldout = Vec::with_capacity(h);
    if n_clusters > 0 {
        for c in 0..n_clusters {
            let quota = h / n_clusters + usize::from(c < h % n_clusters);
            let mut members: Vec<usize> = specs.iter().filter(|s| s.cluster_id == c).map(|s| s.task_id).collect();
            Rng::stream(cfg.master_seed, &[tags::HELDOUT, c as u64]).shuffle(&mut members);
            heldout.extend(members.into_iter().take(quota));
        }
    }
    heldout.sort_unstable();
    let train = specs
        .iter()
        .map(|s| s.task_id)
        .filter(|t| heldout.binary_search(t).is_err())
        .collect();
    (train, heldout)
}

/// Number of examples kept by [`subsample_fraction`]: `ceil(fraction · n)`,
/// at least one. The product is nudged down by a relative `1e-9` first so that
/// e.g. `0.005 · 8000` keeps 40 rather than 41.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    ((raw * (1.0 - 1e-9)).ceil() as usize).clamp(1, n.max(1))
}

/// Keeps `subsample_count(n, fraction)` training examples chosen at random,
/// in their original order. Validation and test splits are untouched.
pub fn subsample_fraction<T: Clone>(ds: &TaskDataset<T>, fraction: f64, seed: u64) -> Result<TaskDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SynthError::FractionOutOfRange(fraction));
    }
    let n = ds.train.len();
    let keep = subsample_count(n, fraction);
    let mut idx = Rng::stream(seed, &[tags::SUBSAMPLE, ds.task_id as u64]).permutation(n);
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(TaskDataset {
        task_id: ds.task_id,
        cluster_id: ds.cluster_id,
        train: idx.into_iter().map(|i| ds.train[i].clone()).collect(),
        valid: ds.valid.clone(),
        test: ds.test.clone(),
    })
}
