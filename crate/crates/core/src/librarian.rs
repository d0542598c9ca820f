//! Library construction.
//!
//! * **Private**: one expert per task, `N` steps each.
//! * **Shared**: one expert on the task union, `T·N` steps.
//! * **Clustered** (MBC and its ablations): stage 1 trains private experts for
//!   `n = round(f·N)` steps; the tasks (or their pooled examples) are then
//!   partitioned into `K` groups, and stage 2 trains one expert per group on
//!   the group's data for `(N - n)` steps per member task. Total compute
//!   matches the private build.
//! * **Poly**: `K` skills mixed per task by a learned softmax-normalized
//!   routing matrix `Z`, trained jointly for `T·N` steps.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    combine_layer, compose, flatten_expert, AdapterError, BuilderTag, Expert, Library, LoraAdapter, Provenance,
};
use crate::linalg::{
    adjusted_rand_index, cosine_similarity_matrix, kmeans, svd_reduce, ClusterAssignment, LinalgError, Matrix,
};
use crate::rng::{derive_seed, tags, Rng};
use crate::scalar::{softmax, Scalar};
use crate::synthtasks::{Example, TaskDataset};
use crate::toymodel::{
    adapter_backprop, expert_is_finite, fresh_expert, lr_at, pooled_train, train_adapter_on, AdapterInit, BatchSampler,
    LayerFactors, ModelError, OptimizerState, ToyModel, TrainConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid build configuration: {0}")]
    InvalidConfig(String),
    #[error("K = {k} exceeds the {available} available items")]
    TooManyClusters { k: usize, available: usize },
    #[error("clustering method {0} needs the stage-1 private experts")]
    MissingPrivateExperts(ClusterMethod),
}

pub type Result<T, E = BuildError> = std::result::Result<T, E>;

/// Per-task step budget and the share of it spent before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildBudget {
    pub total_steps_per_task: usize,
    pub clustering_fraction: f64,
}

impl Default for BuildBudget {
    fn default() -> Self {
        Self {
            total_steps_per_task: 150,
            clustering_fraction: 0.4,
        }
    }
}

impl BuildBudget {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps_per_task == 0 {
            return Err(BuildError::InvalidConfig("N must be positive".into()));
        }
        if !(self.clustering_fraction > 0.0 && self.clustering_fraction < 1.0) {
            return Err(BuildError::InvalidConfig(format!(
                "clustering fraction {} is outside (0, 1)",
                self.clustering_fraction
            )));
        }
        let n = self.clustering_steps();
        if n == 0 || n >= self.total_steps_per_task {
            return Err(BuildError::InvalidConfig(format!(
                "budget split {n}/{} leaves a stage without steps",
                self.total_steps_per_task
            )));
        }
        Ok(())
    }

    /// Stage-1 steps per task, `round(f·N)`.
    pub fn clustering_steps(&self) -> usize {
        (self.clustering_fraction * self.total_steps_per_task as f64).round() as usize
    }

    /// Stage-2 steps per member task, `N - n`.
    pub fn stage2_steps(&self) -> usize {
        self.total_steps_per_task - self.clustering_steps()
    }
}

/// What k-means runs on in the MBC pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmeansInput {
    /// Rows of the cosine-similarity matrix of the reduced adapter vectors.
    SimilarityRows,
    /// The reduced adapter vectors themselves.
    ReducedVectors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyConfig {
    /// Step-size multiplier for the routing logits relative to the skills.
    pub routing_lr_multiplier: f64,
}

impl Default for PolyConfig {
    fn default() -> Self {
        Self {
            routing_lr_multiplier: 10.0,
        }
    }
}

/// Everything a builder needs besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub budget: BuildBudget,
    /// Optimizer settings; `steps` and `seed` are set per training job.
    pub train: TrainConfig,
    pub seed: u64,
    /// Components kept by the SVD reduction; `None` means `min(T, 64)`.
    pub k_reduce: Option<usize>,
    pub kmeans_input: KmeansInput,
    pub kmeans_iters: usize,
    /// Start stage-2 experts from the factor mean of their members' stage-1 experts.
    pub warm_start: bool,
    pub poly: PolyConfig,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            budget: BuildBudget::default(),
            train: TrainConfig::default(),
            seed: 0,
            k_reduce: None,
            kmeans_input: KmeansInput::SimilarityRows,
            kmeans_iters: 100,
            warm_start: true,
            poly: PolyConfig::default(),
        }
    }
}

impl BuildConfig {
    /// Adapter init shared by every expert of one build.
    pub fn adapter_init(&self) -> AdapterInit {
        AdapterInit {
            seed: derive_seed(self.seed, &[tags::ADAPTER_INIT]),
            ..self.train.init
        }
    }

    /// Training config for a job over `members` (ascending task ids) with `steps` steps.
    /// The batch-order seed depends only on the build seed, `members` and `shard`.
    pub fn job(&self, members: &[usize], shard: Option<usize>, steps: usize) -> TrainConfig {
        let mut tagv = vec![tags::ADAPTER_BATCHES];
        tagv.extend(members.iter().map(|&t| t as u64));
        if let Some(s) = shard {
            tagv.push(u64::MAX);
            tagv.push(s as u64);
        }
        TrainConfig {
            steps,
            seed: derive_seed(self.seed, &tagv),
            init: self.adapter_init(),
            ..self.train
        }
    }
}

/// A built library and the number of adapter-training steps it consumed.
#[derive(Debug, Clone)]
pub struct Built<T> {
    pub library: Library<T>,
    pub steps: usize,
}

fn task_name(t: usize) -> String {
    format!("task-{t}")
}

fn check_nonempty<T>(datasets: &[&TaskDataset<T>]) -> Result<()> {
    if datasets.is_empty() {
        return Err(BuildError::InvalidConfig("no training tasks".into()));
    }
    Ok(())
}

/// Private experts for each dataset, `steps` steps each, in input order.
fn private_experts<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
    steps: usize,
) -> Result<Vec<Expert<T>>> {
    datasets
        .par_iter()
        .map(|ds| {
            let job = cfg.job(&[ds.task_id], None, steps);
            let prov = Provenance::new(BuilderTag::Private, vec![ds.task_id]);
            let pool: Vec<&Example<T>> = ds.train.iter().collect();
            let mut e = train_adapter_on(model, &pool, &job, None, prov)?;
            e.name = task_name(ds.task_id);
            Ok(e)
        })
        .collect()
}

/// One expert per task, trained independently for `N` steps.
pub fn build_private<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
) -> Result<Built<T>> {
    cfg.budget.validate()?;
    check_nonempty(datasets)?;
    let n = cfg.budget.total_steps_per_task;
    let experts = private_experts(model, datasets, cfg, n)?;
    let library = Library::new(experts, model.fingerprint(), BuilderTag::Private, cfg.seed)?;
    Ok(Built {
        library,
        steps: n * datasets.len(),
    })
}

/// One expert trained on the union of all tasks for `T·N` steps.
pub fn build_shared<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
) -> Result<Built<T>> {
    cfg.budget.validate()?;
    check_nonempty(datasets)?;
    let members: Vec<usize> = datasets
        .iter()
        .map(|d| d.task_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let steps = cfg.budget.total_steps_per_task * datasets.len();
    let job = cfg.job(&members, None, steps);
    let mut e = train_adapter_on(
        model,
        &pooled_train(datasets),
        &job,
        None,
        Provenance::new(BuilderTag::Shared, members),
    )?;
    e.name = "shared".into();
    let library = Library::new(vec![e], model.fingerprint(), BuilderTag::Shared, cfg.seed)?;
    Ok(Built { library, steps })
}

/// How tasks are grouped before stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    /// k-means over the similarity of flattened private adapters.
    Mbc,
    /// Uniformly random balanced partition of the tasks.
    RandomTask,
    /// Uniformly random balanced partition of the pooled examples.
    RandomExamples,
    /// k-means on each task's mean base-model representation `h_L`.
    Embeddings,
}

impl ClusterMethod {
    pub const ALL: [ClusterMethod; 4] = [Self::Mbc, Self::RandomTask, Self::RandomExamples, Self::Embeddings];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mbc => "mbc",
            Self::RandomTask => "random_task",
            Self::RandomExamples => "random_examples",
            Self::Embeddings => "embeddings",
        }
    }

    pub fn builder_tag(self) -> BuilderTag {
        match self {
            Self::Mbc => BuilderTag::Mbc,
            Self::RandomTask => BuilderTag::RandomTask,
            Self::RandomExamples => BuilderTag::RandomExamples,
            Self::Embeddings => BuilderTag::Embeddings,
        }
    }
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown clustering method {s:?}"))
    }
}

/// Outcome of partitioning the training tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub method: ClusterMethod,
    /// Labels over `task_ids` for task-level methods, over the pooled
    /// training examples (task order, then example order) for `random_examples`.
    pub assignment: ClusterAssignment,
    pub task_ids: Vec<usize>,
    /// Mean pairwise cosine similarity of the flattened cluster experts; set
    /// once the experts exist. With a single cluster it is 1 by convention
    /// and `similarity_degenerate` is set.
    pub mean_pairwise_cluster_similarity: Option<f64>,
    pub similarity_degenerate: bool,
    /// Adjusted Rand index of `assignment` against the planted cluster of each item.
    pub ari_vs_planted: f64,
}

impl ClusteringReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inputs available to [`cluster_tasks`].
pub struct ClusterInputs<'a, T> {
    pub model: &'a ToyModel<T>,
    pub datasets: &'a [&'a TaskDataset<T>],
    /// Stage-1 private experts aligned with `datasets` (needed by `mbc`).
    pub private: Option<&'a [Expert<T>]>,
    pub k_reduce: Option<usize>,
    pub kmeans_input: KmeansInput,
    pub kmeans_iters: usize,
}

/// Clustering up to the k-means step: flatten, SVD-reduce, cosine similarity, k-means.
pub fn mbc_assignment<T: Scalar>(
    experts: &[Expert<T>],
    k: usize,
    seed: u64,
    k_reduce: Option<usize>,
    input: KmeansInput,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    let rows: Vec<Vec<T>> = experts.iter().map(|e| flatten_expert(e).values).collect();
    let m = Matrix::from_rows(&rows)?;
    let full = m.rows().min(m.cols());
    let kr = k_reduce.unwrap_or_else(|| m.rows().min(64)).min(full);
    let reduced = svd_reduce(&m, kr)?;
    let points = match input {
        KmeansInput::SimilarityRows => {
            let vecs: Vec<Vec<T>> = (0..reduced.rows()).map(|i| reduced.row(i).to_vec()).collect();
            cosine_similarity_matrix(&vecs)?.into_matrix()
        }
        KmeansInput::ReducedVectors => reduced,
    };
    Ok(kmeans(&points, k, seed, max_iters)?)
}

/// Balanced random partition of `n` items into `k` groups.
fn balanced_random_labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let perm = rng.permutation(n);
    let mut labels = vec![0; n];
    for (pos, &item) in perm.iter().enumerate() {
        labels[item] = pos % k;
    }
    labels
}

/// Partitions the training tasks (or their examples) into `k` groups.
pub fn cluster_tasks<T: Scalar>(
    method: ClusterMethod,
    inputs: &ClusterInputs<'_, T>,
    k: usize,
    seed: u64,
) -> Result<ClusteringReport> {
    let datasets = inputs.datasets;
    let task_ids: Vec<usize> = datasets.iter().map(|d| d.task_id).collect();
    let planted_tasks: Vec<usize> = datasets.iter().map(|d| d.cluster_id).collect();
    let t = datasets.len();
    let cluster_seed = derive_seed(seed, &[tags::CLUSTER]);
    let (assignment, planted) = match method {
        ClusterMethod::Mbc => {
            if k > t {
                return Err(BuildError::TooManyClusters { k, available: t });
            }
            let private = inputs.private.ok_or(BuildError::MissingPrivateExperts(method))?;
            if private.len() != t {
                return Err(BuildError::MissingPrivateExperts(method));
            }
            let a = mbc_assignment(
                private,
                k,
                cluster_seed,
                inputs.k_reduce,
                inputs.kmeans_input,
                inputs.kmeans_iters,
            )?;
            (a, planted_tasks)
        }
        ClusterMethod::Embeddings => {
            if k > t {
                return Err(BuildError::TooManyClusters { k, available: t });
            }
            let rows = datasets
                .iter()
                .map(|ds| mean_features(inputs.model, &ds.train))
                .collect::<Result<Vec<_>>>()?;
            (
                kmeans(&Matrix::from_rows(&rows)?, k, cluster_seed, inputs.kmeans_iters)?,
                planted_tasks,
            )
        }
        ClusterMethod::RandomTask => {
            if k > t || k == 0 {
                return Err(BuildError::TooManyClusters { k, available: t });
            }
            let mut rng = Rng::stream(seed, &[tags::RANDOM_PARTITION, 0]);
            let a = ClusterAssignment {
                labels: balanced_random_labels(t, k, &mut rng),
                k,
                inertia: f64::NAN,
                seed,
            }
            .canonicalize();
            (a, planted_tasks)
        }
        ClusterMethod::RandomExamples => {
            let planted: Vec<usize> = datasets
                .iter()
                .flat_map(|d| d.train.iter().map(|_| d.cluster_id))
                .collect();
            let n = planted.len();
            if k > n || k == 0 {
                return Err(BuildError::TooManyClusters { k, available: n });
            }
            let mut rng = Rng::stream(seed, &[tags::RANDOM_PARTITION, 1]);
            let a = ClusterAssignment {
                labels: balanced_random_labels(n, k, &mut rng),
                k,
                inertia: f64::NAN,
                seed,
            }
            .canonicalize();
            (a, planted)
        }
    };
    let ari_vs_planted = adjusted_rand_index(&assignment.labels, &planted);
    Ok(ClusteringReport {
        method,
        assignment,
        task_ids,
        mean_pairwise_cluster_similarity: None,
        similarity_degenerate: false,
        ari_vs_planted,
    })
}

/// Mean base-model `h_L` over `examples`.
pub fn mean_features<T: Scalar>(model: &ToyModel<T>, examples: &[Example<T>]) -> Result<Vec<T>> {
    if examples.is_empty() {
        return Err(ModelError::EmptyData.into());
    }
    let mut acc = vec![T::zero(); model.width()];
    for ex in examples {
        let tr = model.trace(&ex.x)?;
        for (a, v) in acc.iter_mut().zip(&tr.features) {
            *a += *v;
        }
    }
    let n = T::of(examples.len() as f64);
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Mean pairwise cosine similarity of flattened experts; `(1, true)` for one expert.
pub fn mean_pairwise_similarity<T: Scalar>(experts: &[Expert<T>]) -> Result<(f64, bool)> {
    let vecs: Vec<Vec<T>> = experts.iter().map(|e| flatten_expert(e).values).collect();
    let s = cosine_similarity_matrix(&vecs)?;
    Ok(match s.mean_off_diagonal() {
        Some(m) => (m.as_f64(), false),
        None => (1.0, true),
    })
}

/// Uniform factor mean of `experts`.
fn factor_mean<T: Scalar>(experts: &[&Expert<T>]) -> Result<Expert<T>> {
    let w = vec![T::one() / T::of(experts.len() as f64); experts.len()];
    Ok(compose(experts, &w)?)
}

/// Output of a clustered build.
#[derive(Debug, Clone)]
pub struct ClusteredBuild<T> {
    pub built: Built<T>,
    pub report: ClusteringReport,
    /// The stage-1 private experts, aligned with the input datasets.
    pub stage1: Vec<Expert<T>>,
}

/// Stage 1 of a clustered build: private experts trained for `n` steps.
pub fn stage1_experts<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
) -> Result<Vec<Expert<T>>> {
    cfg.budget.validate()?;
    check_nonempty(datasets)?;
    private_experts(model, datasets, cfg, cfg.budget.clustering_steps())
}

/// Model-based clustering with compute matched to the private build.
pub fn build_mbc<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
    k: usize,
) -> Result<ClusteredBuild<T>> {
    build_clustered(ClusterMethod::Mbc, model, datasets, cfg, k)
}

/// Stage 1, partition with `method`, stage 2.
pub fn build_clustered<T: Scalar>(
    method: ClusterMethod,
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
    k: usize,
) -> Result<ClusteredBuild<T>> {
    let stage1 = stage1_experts(model, datasets, cfg)?;
    build_clustered_from_stage1(method, model, datasets, cfg, k, stage1)
}

/// [`build_clustered`] reusing already trained stage-1 experts, so several
/// partitions can be compared with identical stage-1 work.
pub fn build_clustered_from_stage1<T: Scalar>(
    method: ClusterMethod,
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
    k: usize,
    stage1: Vec<Expert<T>>,
) -> Result<ClusteredBuild<T>> {
    cfg.budget.validate()?;
    check_nonempty(datasets)?;
    if k == 0 {
        return Err(BuildError::InvalidConfig("K must be positive".into()));
    }
    let inputs = ClusterInputs {
        model,
        datasets,
        private: Some(&stage1),
        k_reduce: cfg.k_reduce,
        kmeans_input: cfg.kmeans_input,
        kmeans_iters: cfg.kmeans_iters,
    };
    let mut report = cluster_tasks(method, &inputs, k, cfg.seed)?;
    let t = datasets.len();
    let stage2 = cfg.budget.stage2_steps();
    let stage1_refs: Vec<&Expert<T>> = stage1.iter().collect();

    // (members, example pool, steps, warm-start sources) per cluster.
    struct Job<'a, T> {
        members: Vec<usize>,
        pool: Vec<&'a Example<T>>,
        steps: usize,
        sources: Vec<&'a Expert<T>>,
        shard: Option<usize>,
    }
    let mut jobs: Vec<Job<'_, T>> = Vec::with_capacity(k);
    match method {
        ClusterMethod::RandomExamples => {
            let pooled: Vec<(usize, &Example<T>)> = datasets
                .iter()
                .flat_map(|d| d.train.iter().map(move |ex| (d.task_id, ex)))
                .collect();
            let total = t * stage2;
            for (shard, idx) in report.assignment.members().into_iter().enumerate() {
                let members: BTreeSet<usize> = idx.iter().map(|&i| pooled[i].0).collect();
                jobs.push(Job {
                    members: members.into_iter().collect(),
                    pool: idx.iter().map(|&i| pooled[i].1).collect(),
                    steps: total / k + usize::from(shard < total % k),
                    sources: stage1_refs.clone(),
                    shard: Some(shard),
                });
            }
        }
        _ => {
            for idx in report.assignment.members() {
                let members: Vec<usize> = idx.iter().map(|&i| datasets[i].task_id).collect();
                let group: Vec<&TaskDataset<T>> = idx.iter().map(|&i| datasets[i]).collect();
                jobs.push(Job {
                    members,
                    pool: pooled_train(&group),
                    steps: idx.len() * stage2,
                    sources: idx.iter().map(|&i| &stage1[i]).collect(),
                    shard: None,
                });
            }
        }
    }
    let tag = method.builder_tag();
    let experts = jobs
        .par_iter()
        .enumerate()
        .map(|(c, job)| {
            let mut members = job.members.clone();
            members.sort_unstable();
            let init = if cfg.warm_start {
                Some(factor_mean(&job.sources)?)
            } else {
                None
            };
            let tc = cfg.job(&members, job.shard, job.steps);
            let mut e = train_adapter_on(model, &job.pool, &tc, init.as_ref(), Provenance::new(tag, members))?;
            e.name = format!("cluster-{c}");
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let (sim, degenerate) = mean_pairwise_similarity(&experts)?;
    report.mean_pairwise_cluster_similarity = Some(sim);
    report.similarity_degenerate = degenerate;
    let steps = t * cfg.budget.clustering_steps() + jobs.iter().map(|j| j.steps).sum::<usize>();
    let mut library = Library::new(experts, model.fingerprint(), tag, cfg.seed)?;
    if method != ClusterMethod::RandomExamples {
        let mut a = report.assignment.clone();
        a.seed = cfg.seed;
        library.cluster_assignment = Some(a);
    }
    Ok(ClusteredBuild {
        built: Built { library, steps },
        report,
        stage1,
    })
}

/// A Poly library: skills plus the learned task-to-skill routing.
#[derive(Debug, Clone)]
pub struct PolyLibrary<T> {
    /// Skills as experts; `skill_tasks` and `skill_routing` are set.
    pub library: Library<T>,
    /// Raw routing logits, `T x K`.
    pub logits: Matrix<T>,
    pub steps: usize,
}

impl<T: Scalar> PolyLibrary<T> {
    /// Row-normalized routing `Z`.
    pub fn routing(&self) -> &Matrix<T> {
        self.library.skill_routing.as_ref().expect("poly library has routing")
    }

    pub fn k(&self) -> usize {
        self.library.len()
    }
}

fn row_softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..logits.rows()).map(|i| softmax(logits.row(i))).collect();
    Matrix::from_rows(&rows).expect("same shape")
}

/// Skill weights' gradient from the combined-factor gradient:
/// `g_w[k] = Σ_l ⟨dA_l, A_k,l⟩ + ⟨dB_l, B_k,l⟩`.
pub fn weight_grad<T: Scalar>(experts: &[&Expert<T>], combined_grad: &[T], layers: &[usize]) -> Vec<T> {
    experts
        .iter()
        .map(|e| {
            let mut acc = T::zero();
            let mut off = 0;
            for (l, ad) in e.adapters.iter().enumerate() {
                let n = ad.a.rows() * ad.a.cols();
                if layers.contains(&l) {
                    acc += crate::scalar::dot(&combined_grad[off..off + n], ad.a.as_slice());
                    acc += crate::scalar::dot(&combined_grad[off + n..off + 2 * n], ad.b.as_slice());
                }
                off += 2 * n;
            }
            acc
        })
        .collect()
}

/// Softmax Jacobian-vector product: `w ⊙ (g - ⟨w, g⟩)`.
pub fn softmax_backward<T: Scalar>(w: &[T], g: &[T]) -> Vec<T> {
    let inner = crate::scalar::dot(w, g);
    w.iter().zip(g).map(|(&wi, &gi)| wi * (gi - inner)).collect()
}

/// Combined per-layer factors `Σ_k w[l][k] (A_k, B_k)`.
pub fn combined_factors<T: Scalar>(experts: &[&Expert<T>], weights: &[Vec<T>]) -> Vec<(Matrix<T>, Matrix<T>)> {
    weights
        .iter()
        .enumerate()
        .map(|(l, w)| combine_layer(experts, l, w))
        .collect()
}

/// Joint training of `K` skills and the task routing `Z` (softmax rows).
///
/// Each step draws one task, takes a batch from it, and descends on the
/// skills through the task's mixture and on that task's routing logits.
pub fn build_poly<T: Scalar>(
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    cfg: &BuildConfig,
    k: usize,
) -> Result<PolyLibrary<T>> {
    cfg.budget.validate()?;
    check_nonempty(datasets)?;
    let t = datasets.len();
    if k == 0 || k > t {
        return Err(BuildError::TooManyClusters { k, available: t });
    }
    let depth = model.depth();
    let base_init = cfg.adapter_init();
    let all: Vec<usize> = datasets
        .iter()
        .map(|d| d.task_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut skills = (0..k)
        .map(|s| {
            let init = AdapterInit {
                seed: derive_seed(base_init.seed, &[tags::POLY, s as u64]),
                ..base_init
            };
            Ok(fresh_expert(
                model,
                &init,
                format!("skill-{s}"),
                Provenance::new(BuilderTag::Poly, all.clone()),
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut logits = Matrix::<T>::zeros(t, k);
    let per_skill = skills[0].shape().flat_len();
    let mut opt = OptimizerState::new(cfg.train.optimizer, per_skill * k);
    let mut task_sampler = BatchSampler::new(t, 1, derive_seed(cfg.seed, &[tags::POLY]));
    let mut samplers: Vec<BatchSampler> = datasets
        .iter()
        .map(|d| BatchSampler::new(d.train.len(), cfg.train.batch_size, cfg.job(&[d.task_id], None, 1).seed))
        .collect();
    let steps = cfg.budget.total_steps_per_task * t;
    let scaling = skills[0].scaling();
    let layers: Vec<usize> = (0..depth).collect();
    let mut grad = vec![T::zero(); per_skill];
    for step in 0..steps {
        let ti = task_sampler.next_batch()[0];
        let batch: Vec<&Example<T>> = samplers[ti]
            .next_batch()
            .iter()
            .map(|&i| &datasets[ti].train[i])
            .collect();
        let w = softmax(logits.row(ti));
        let refs: Vec<&Expert<T>> = skills.iter().collect();
        let combined = combined_factors(&refs, &vec![w.clone(); depth]);
        let factors: Vec<LayerFactors<'_, T>> = combined.iter().map(|(a, b)| Some((a, b))).collect();
        grad.iter_mut().for_each(|g| *g = T::zero());
        let loss = adapter_backprop(model.params(), &factors, scaling, &batch, Some(&mut grad), None);
        if !loss.is_finite() {
            return Err(ModelError::Divergence {
                step,
                loss: loss.as_f64(),
            }
            .into());
        }
        let gw = weight_grad(&refs, &grad, &layers);
        let g_logits = softmax_backward(&w, &gw);
        let lr = T::of(lr_at(cfg.train.learning_rate, step, steps, cfg.train.warmup_fraction));
        for (s, skill) in skills.iter_mut().enumerate() {
            if w[s] == T::zero() {
                continue;
            }
            let scaled: Vec<T> = grad.iter().map(|&g| g * w[s]).collect();
            let mut shifted = OptimizerShift {
                inner: &mut opt,
                offset: s * per_skill,
            };
            shifted.apply(skill, &scaled, lr);
        }
        let zlr = lr * T::of(cfg.poly.routing_lr_multiplier);
        for (z, g) in logits.row_mut(ti).iter_mut().zip(&g_logits) {
            *z -= zlr * *g;
        }
    }
    if !skills.iter().all(expert_is_finite) || !logits.is_finite() {
        return Err(ModelError::Divergence {
            step: steps,
            loss: f64::NAN,
        }
        .into());
    }
    let mut library = Library::new(skills, model.fingerprint(), BuilderTag::Poly, cfg.seed)?;
    library.skill_tasks = Some(datasets.iter().map(|d| d.task_id).collect());
    library.skill_routing = Some(row_softmax(&logits));
    Ok(PolyLibrary { library, logits, steps })
}

/// Applies an expert update into a sub-range of a larger optimizer state.
struct OptimizerShift<'a, T> {
    inner: &'a mut OptimizerState<T>,
    offset: usize,
}

impl<T: Scalar> OptimizerShift<'_, T> {
    fn apply(&mut self, e: &mut Expert<T>, grad: &[T], lr: T) {
        let mut off = 0;
        for ad in &mut e.adapters {
            let LoraAdapter { a, b, .. } = ad;
            let n = a.rows() * a.cols();
            self.inner
                .update(self.offset + off, a.as_mut_slice(), &grad[off..off + n], lr);
            off += n;
            self.inner
                .update(self.offset + off, b.as_mut_slice(), &grad[off..off + n], lr);
            off += n;
        }
    }
}
