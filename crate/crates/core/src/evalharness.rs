//! Desk-scale experiments over a benchmark and its libraries.
//!
//! Every experiment returns plain row structs that serialize to CSV. Scores
//! are average Gaussian log-likelihoods (higher is better) with the matching
//! MSE alongside. Held-out tasks are never trained on by zero-shot methods;
//! [`run_zeroshot_eval`] checks that by hashing the library before and after.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{flatten_expert, BuilderTag, Expert, Library, Provenance};
use crate::librarian::{
    build_clustered_from_stage1, build_private, mean_pairwise_similarity, stage1_experts, BuildConfig, BuildError,
    ClusterMethod,
};
use crate::linalg::cosine_similarity_matrix;
use crate::rng::{derive_seed, tags, Rng};
use crate::router::{
    arrow_init, cm_init, default_top_k, expert_datasets, lorahub_fit, mu_composition, poly_fit, tp_route, tp_train,
    ArrowRouter, CmRouter, FitConfig, LoraHubConfig, MuRouter, OracleRouter, RouteError, Router, RoutingDistribution,
    TaskPredictor, TpConfig,
};
use crate::scalar::{norm, Scalar};
use crate::synthtasks::{subsample_fraction, Benchmark, Example, SynthError, TaskDataset};
use crate::toymodel::{
    evaluate, pretrain_from, train_adapter_on, AdapterInit, AdapterSource, LayerRouter, Metrics, ModelError,
    PretrainConfig, RouteQuery, ToyModel, TrainConfig,
};

/// Denominator norms below this exclude a norm-ratio sample.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("library changed during zero-shot evaluation ({before} -> {after})")]
    LibraryMutated { before: String, after: String },
    #[error("every sample was excluded")]
    NoSamples,
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// The frozen base used by the experiments: the benchmark's reference
/// network, optionally trained further on the pooled training tasks.
pub fn base_model<T: Scalar>(bench: &Benchmark<T>, pretrain: &PretrainConfig) -> Result<ToyModel<T>> {
    Ok(pretrain_from(
        bench.reference.clone(),
        pretrain,
        &bench.train_datasets(),
    )?)
}

/// Rows serialized with a header line, in order.
pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

// ---------------------------------------------------------------- statistics

/// Pearson correlation; `None` when either side has zero variance or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

fn cosine<T: Scalar>(a: &Expert<T>, b: &Expert<T>) -> Result<f64> {
    let s = cosine_similarity_matrix(&[flatten_expert(a).values, flatten_expert(b).values])
        .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    Ok(s.get(0, 1).as_f64())
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Divergence { .. })
}

// ---------------------------------------------------------------- transfer

/// One task pair of the transfer experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub task_i: usize,
    pub task_j: usize,
    pub same_cluster: bool,
    /// Cosine similarity of the two flattened private experts.
    pub weight_cosine_similarity: f64,
    /// Joint minus private test log-likelihood, averaged over both tasks.
    pub transfer_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub records: Vec<TransferRecord>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Pairs dropped because a training run diverged.
    pub excluded: Vec<(usize, usize)>,
}

/// `n_pairs` distinct training-task pairs, the first half within a planted
/// cluster and the rest across clusters (fewer if the benchmark runs out).
pub fn sample_pairs<T>(bench: &Benchmark<T>, n_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = Rng::stream(seed, &[tags::TRANSFER]);
    let tasks = &bench.train_tasks;
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for (a, &i) in tasks.iter().enumerate() {
        for &j in &tasks[a + 1..] {
            if bench.specs[i].cluster_id == bench.specs[j].cluster_id {
                intra.push((i, j));
            } else {
                inter.push((i, j));
            }
        }
    }
    rng.shuffle(&mut intra);
    rng.shuffle(&mut inter);
    let n_intra = (n_pairs / 2).min(intra.len());
    let n_inter = (n_pairs - n_intra).min(inter.len());
    let mut pairs: Vec<_> = intra[..n_intra].to_vec();
    pairs.extend_from_slice(&inter[..n_inter]);
    pairs
}

/// Transfer experiment: private experts on `t_i` and `t_j` for `N` steps
/// each, a joint expert on the union for `2N` steps, and the correlation of
/// the private experts' weight similarity with the transfer delta.
pub fn run_transfer_experiment<T: Scalar>(
    model: &ToyModel<T>,
    bench: &Benchmark<T>,
    n_pairs: usize,
    cfg: &BuildConfig,
    seed: u64,
) -> Result<TransferReport> {
    if n_pairs < 2 {
        return Err(EvalError::InvalidConfig(format!(
            "need at least 2 pairs, got {n_pairs}"
        )));
    }
    let n = cfg.budget.total_steps_per_task;
    let pairs = sample_pairs(bench, n_pairs, seed);
    let outcomes: Vec<Result<Option<TransferRecord>>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let run = || -> std::result::Result<TransferRecord, ModelError> {
                let (di, dj) = (bench.dataset(i), bench.dataset(j));
                let private = |d: &TaskDataset<T>| {
                    let pool: Vec<&Example<T>> = d.train.iter().collect();
                    let prov = Provenance::new(BuilderTag::Private, vec![d.task_id]);
                    train_adapter_on(model, &pool, &cfg.job(&[d.task_id], None, n), None, prov)
                };
                let ei = private(di)?;
                let ej = private(dj)?;
                let pool: Vec<&Example<T>> = di.train.iter().chain(&dj.train).collect();
                let prov = Provenance::new(BuilderTag::Shared, vec![i, j]);
                let joint = train_adapter_on(model, &pool, &cfg.job(&[i, j], None, 2 * n), None, prov)?;
                let ll = |e: &Expert<T>, d: &TaskDataset<T>| {
                    evaluate(model, &AdapterSource::Expert(e), &d.test, None).map(|m| m.avg_log_likelihood)
                };
                let delta = 0.5 * ((ll(&joint, di)? - ll(&ei, di)?) + (ll(&joint, dj)? - ll(&ej, dj)?));
                let sim = cosine(&ei, &ej).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
                Ok(TransferRecord {
                    task_i: i,
                    task_j: j,
                    same_cluster: bench.specs[i].cluster_id == bench.specs[j].cluster_id,
                    weight_cosine_similarity: sim,
                    transfer_delta: delta,
                })
            };
            match run() {
                Ok(r) => Ok(Some(r)),
                Err(e) if is_divergence(&e) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (pair, out) in pairs.iter().zip(outcomes) {
        match out? {
            Some(r) => records.push(r),
            None => excluded.push(*pair),
        }
    }
    let x: Vec<f64> = records.iter().map(|r| r.weight_cosine_similarity).collect();
    let y: Vec<f64> = records.iter().map(|r| r.transfer_delta).collect();
    Ok(TransferReport {
        pearson: pearson(&x, &y),
        spearman: spearman(&x, &y),
        records,
        excluded,
    })
}

// ---------------------------------------------------------------- norm ratio

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRatioReport {
    /// Layer-averaged ratio per kept sample.
    pub ratios: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    pub fraction_above_one: f64,
    /// Layers averaged per sample.
    pub n_layers: usize,
    /// Samples dropped for a near-zero denominator.
    pub excluded: usize,
}

/// Equal-width histogram over `[min, max]` of `values`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Norm-ratio analysis on a private library.
///
/// For each sample an expert `i` and one of its task's validation examples
/// are drawn; the example is propagated through the model patched with
/// expert `i`, and at every layer the norm of `i`'s update of the hidden
/// state is divided by that of a freshly drawn other expert `j`.
pub fn run_norm_analysis<T: Scalar>(
    library: &Library<T>,
    model: &ToyModel<T>,
    datasets: &[&TaskDataset<T>],
    n_samples: usize,
    seed: u64,
) -> Result<NormRatioReport> {
    model.check_library(library)?;
    if n_samples == 0 {
        return Err(EvalError::InvalidConfig("n_samples must be positive".into()));
    }
    if library.len() < 2 {
        return Err(EvalError::InvalidConfig("need at least two experts".into()));
    }
    // (expert index, dataset) for every single-task expert with data.
    let owners: Vec<(usize, &TaskDataset<T>)> = library
        .experts
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match e.provenance.member_tasks.as_slice() {
            [t] => datasets
                .iter()
                .find(|d| d.task_id == *t && !d.valid.is_empty())
                .map(|d| (i, *d)),
            _ => None,
        })
        .collect();
    if owners.is_empty() {
        return Err(EvalError::InvalidConfig(
            "no single-task expert has validation data".into(),
        ));
    }
    let depth = model.depth();
    let mut rng = Rng::stream(seed, &[tags::NORM_ANALYSIS]);
    let mut ratios = Vec::with_capacity(n_samples);
    let mut excluded = 0;
    for _ in 0..n_samples {
        let (i, ds) = owners[rng.below(owners.len())];
        let ex = &ds.valid[rng.below(ds.valid.len())];
        let (_, trace) = model.forward(&AdapterSource::Expert(&library.experts[i]), &ex.x, None)?;
        let mut r = 0.0;
        let mut ok = true;
        for (l, h) in trace.layers.iter().enumerate() {
            let mut j = rng.below(library.len() - 1);
            if j >= i {
                j += 1;
            }
            let num = norm(&library.experts[i].adapters[l].delta(h)).as_f64();
            let den = norm(&library.experts[j].adapters[l].delta(h)).as_f64();
            if den < NORM_FLOOR {
                ok = false;
                continue;
            }
            r += num / den / depth as f64;
        }
        if ok {
            ratios.push(r);
        } else {
            excluded += 1;
        }
    }
    if ratios.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let above = ratios.iter().filter(|&&r| r > 1.0).count();
    Ok(NormRatioReport {
        fraction_above_one: above as f64 / ratios.len() as f64,
        histogram: histogram(&ratios, 20),
        ratios,
        n_layers: depth,
        excluded,
    })
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task_id: usize,
    pub avg_log_likelihood: f64,
    pub mse: f64,
    pub n: usize,
}

/// What produced an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFingerprint {
    /// Content hash of the evaluated library; `None` for the bare base model.
    pub library_hash: Option<String>,
    pub method: String,
    pub model: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskMetric>,
    pub mean_log_likelihood: f64,
    pub mean_mse: f64,
    pub fingerprint: ReportFingerprint,
}

impl EvalReport {
    pub fn new(per_task: Vec<TaskMetric>, fingerprint: ReportFingerprint) -> Self {
        let n = per_task.len().max(1) as f64;
        Self {
            mean_log_likelihood: per_task.iter().map(|m| m.avg_log_likelihood).sum::<f64>() / n,
            mean_mse: per_task.iter().map(|m| m.mse).sum::<f64>() / n,
            per_task,
            fingerprint,
        }
    }
}

fn metric(task_id: usize, m: Metrics) -> TaskMetric {
    TaskMetric {
        task_id,
        avg_log_likelihood: m.avg_log_likelihood,
        mse: m.mse,
        n: m.n,
    }
}

/// Which split of each dataset an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn of<T>(self, d: &TaskDataset<T>) -> &[Example<T>] {
        match self {
            Split::Train => &d.train,
            Split::Valid => &d.valid,
            Split::Test => &d.test,
        }
    }
}

// ---------------------------------------------------------------- zero-shot routers

/// A zero-shot router choice, independent of any library.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouterSpec {
    Mu,
    Arrow { top_k: Option<usize>, temperature: f64 },
    Cm { top_k: Option<usize>, temperature: f64 },
    Tp(TpConfig),
    Oracle,
}

impl RouterSpec {
    pub fn arrow() -> Self {
        Self::Arrow {
            top_k: None,
            temperature: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mu => "mu",
            Self::Arrow { .. } => "arrow",
            Self::Cm { .. } => "cm",
            Self::Tp(_) => "tp",
            Self::Oracle => "oracle",
        }
    }

    /// Builds the router for `library`. CM and TP read `support`, the
    /// training datasets of the library's tasks.
    pub fn bind<'a, T: Scalar>(
        &self,
        library: &'a Library<T>,
        model: &'a ToyModel<T>,
        support: &[&TaskDataset<T>],
    ) -> Result<BoundRouter<'a, T>> {
        model.check_library(library)?;
        let check_k = |k: Option<usize>| match k {
            Some(0) => Err(RouteError::InvalidParameter("top-k must be positive".into())),
            _ => Ok(()),
        };
        Ok(match *self {
            Self::Mu => BoundRouter::Mu(MuRouter {
                library_size: library.len(),
            }),
            Self::Arrow { top_k, temperature } => {
                check_k(top_k)?;
                BoundRouter::Arrow(ArrowRouter {
                    bank: arrow_init(library)?,
                    top_k: top_k.unwrap_or_else(|| default_top_k(library.len())).min(library.len()),
                    temperature,
                })
            }
            Self::Cm { top_k, temperature } => {
                check_k(top_k)?;
                BoundRouter::Cm(CmRouter {
                    bank: cm_init(library, &expert_datasets(library, support), model)?,
                    top_k: top_k.map(|k| k.min(library.len())),
                    temperature,
                })
            }
            Self::Tp(cfg) => {
                let covered = library.covered_tasks();
                let data: Vec<&TaskDataset<T>> = support
                    .iter()
                    .copied()
                    .filter(|d| covered.contains(&d.task_id))
                    .collect();
                BoundRouter::Tp {
                    predictor: tp_train(&data, model, &cfg)?,
                    model,
                    library,
                }
            }
            Self::Oracle => BoundRouter::Oracle(OracleRouter::new(library)),
        })
    }
}

/// A [`RouterSpec`] bound to a library.
pub enum BoundRouter<'a, T> {
    Mu(MuRouter),
    Arrow(ArrowRouter<T>),
    Cm(CmRouter<T>),
    Tp {
        predictor: TaskPredictor<T>,
        model: &'a ToyModel<T>,
        library: &'a Library<T>,
    },
    Oracle(OracleRouter),
}

impl<T: Scalar> Router<T> for BoundRouter<'_, T> {
    fn route(&self, q: &RouteQuery<'_, T>) -> crate::router::Result<RoutingDistribution<T>> {
        match self {
            Self::Mu(r) => r.route(q),
            Self::Arrow(r) => r.route(q),
            Self::Cm(r) => r.route(q),
            Self::Tp {
                predictor,
                model,
                library,
            } => tp_route(predictor, model, q.input, library),
            Self::Oracle(r) => r.route(q),
        }
    }
}

impl<T: Scalar> LayerRouter<T> for BoundRouter<'_, T> {
    fn layer_weights(&self, q: &RouteQuery<'_, T>) -> std::result::Result<Vec<T>, String> {
        self.route(q).map(|d| d.weights).map_err(|e| e.to_string())
    }
}

/// Evaluates `source` on `split` of every dataset. With `pass_task_id` the
/// task id reaches the router (needed by the Oracle).
pub fn evaluate_datasets<T: Scalar>(
    model: &ToyModel<T>,
    source: &AdapterSource<'_, T>,
    datasets: &[&TaskDataset<T>],
    split: Split,
    pass_task_id: bool,
) -> Result<Vec<TaskMetric>> {
    datasets
        .par_iter()
        .map(|d| {
            let m = evaluate(model, source, split.of(d), pass_task_id.then_some(d.task_id))?;
            Ok(metric(d.task_id, m))
        })
        .collect()
}

fn fingerprint<T: Scalar>(
    library: Option<&Library<T>>,
    method: impl Into<String>,
    model: &ToyModel<T>,
    seed: u64,
) -> ReportFingerprint {
    ReportFingerprint {
        library_hash: library.map(|l| l.content_hash()),
        method: method.into(),
        model: model.fingerprint().to_string(),
        seed,
    }
}

/// Upstream evaluation: each training task's validation split under each
/// router, with the task id available (so the Oracle applies).
pub fn run_upstream_eval<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    routers: &[RouterSpec],
    datasets: &[&TaskDataset<T>],
) -> Result<Vec<EvalReport>> {
    routers
        .iter()
        .map(|spec| {
            let router = spec.bind(library, model, datasets)?;
            let src = AdapterSource::Routed {
                library,
                router: &router,
            };
            let per_task = evaluate_datasets(model, &src, datasets, Split::Valid, true)?;
            Ok(EvalReport::new(
                per_task,
                fingerprint(Some(library), spec.name(), model, library.build_seed),
            ))
        })
        .collect()
}

/// Zero-shot evaluation on held-out test splits. `library = None` evaluates
/// the bare base model. Fails if the library hash changes.
pub fn run_zeroshot_eval<T: Scalar>(
    model: &ToyModel<T>,
    library: Option<&Library<T>>,
    router: &RouterSpec,
    heldout: &[&TaskDataset<T>],
    support: &[&TaskDataset<T>],
) -> Result<EvalReport> {
    let Some(lib) = library else {
        let per_task = evaluate_datasets(model, &AdapterSource::None, heldout, Split::Test, false)?;
        return Ok(EvalReport::new(per_task, fingerprint(None, "base", model, 0)));
    };
    let before = lib.content_hash();
    let bound = router.bind(lib, model, support)?;
    let src = AdapterSource::Routed {
        library: lib,
        router: &bound,
    };
    let per_task = evaluate_datasets(model, &src, heldout, Split::Test, false)?;
    let after = lib.content_hash();
    if before != after {
        return Err(EvalError::LibraryMutated { before, after });
    }
    Ok(EvalReport::new(
        per_task,
        fingerprint(Some(lib), router.name(), model, lib.build_seed),
    ))
}

// ---------------------------------------------------------------- supervised

/// How a held-out task is adapted from its (subsampled) training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedMethod {
    /// Per-layer routing and the experts trained jointly.
    Poly,
    /// Per-layer routing only; experts frozen.
    PolyZ,
    /// Gradient-free search over one merging vector.
    LoraHub,
    /// A fresh adapter from random init.
    None,
    /// A fresh adapter started from the library's uniform composition.
    SharedInit,
}

impl SupervisedMethod {
    pub const ALL: [SupervisedMethod; 5] = [Self::Poly, Self::PolyZ, Self::LoraHub, Self::None, Self::SharedInit];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Poly => "poly",
            Self::PolyZ => "polyz",
            Self::LoraHub => "lorahub",
            Self::None => "none",
            Self::SharedInit => "shared-init",
        }
    }
}

impl std::str::FromStr for SupervisedMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown adaptation method {s:?}"))
    }
}

/// Fits `method` on one held-out task's training examples and evaluates on its test split.
pub fn adapt_task<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    method: SupervisedMethod,
    data: &TaskDataset<T>,
    fit: &FitConfig,
) -> Result<Metrics> {
    let seed = derive_seed(fit.seed, &[data.task_id as u64]);
    let cfg = FitConfig { seed, ..*fit };
    let train_cfg = TrainConfig {
        steps: fit.steps,
        learning_rate: fit.learning_rate,
        batch_size: fit.batch_size,
        seed,
        optimizer: fit.optimizer,
        warmup_fraction: fit.warmup_fraction,
        init: AdapterInit {
            rank: library.rank,
            seed: derive_seed(seed, &[tags::ADAPTER_INIT]),
            ..AdapterInit::default()
        },
    };
    let prov = || Provenance::new(BuilderTag::Private, vec![data.task_id]);
    let pool: Vec<&Example<T>> = data.train.iter().collect();
    let m = match method {
        SupervisedMethod::Poly | SupervisedMethod::PolyZ => {
            let f = poly_fit(model, library, &data.train, &cfg, method == SupervisedMethod::Poly)?;
            let lib = f.library(library);
            let routing = f.routing();
            evaluate(
                model,
                &AdapterSource::Routed {
                    library: &lib,
                    router: &routing,
                },
                &data.test,
                None,
            )?
        }
        SupervisedMethod::LoraHub => {
            let hub = LoraHubConfig {
                forward_budget: LoraHubConfig::matched_budget(fit.steps, fit.batch_size),
                seed,
                ..LoraHubConfig::default()
            };
            let f = lorahub_fit(model, library, &data.train, &hub)?;
            let routing = crate::toymodel::StaticRouting::uniform_layers(f.weights, library.n_layers());
            evaluate(
                model,
                &AdapterSource::Routed {
                    library,
                    router: &routing,
                },
                &data.test,
                None,
            )?
        }
        SupervisedMethod::None => {
            let e = train_adapter_on(model, &pool, &train_cfg, None, prov())?;
            evaluate(model, &AdapterSource::Expert(&e), &data.test, None)?
        }
        SupervisedMethod::SharedInit => {
            let init = mu_composition(library)?;
            let e = train_adapter_on(model, &pool, &train_cfg, Some(&init), prov())?;
            evaluate(model, &AdapterSource::Expert(&e), &data.test, None)?
        }
    };
    Ok(m)
}

/// Supervised adaptation of every held-out task on a `data_fraction`
/// subsample of its training split.
pub fn run_supervised_adaptation<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    method: SupervisedMethod,
    heldout: &[&TaskDataset<T>],
    data_fraction: f64,
    fit: &FitConfig,
) -> Result<EvalReport> {
    model.check_library(library)?;
    let per_task = heldout
        .par_iter()
        .map(|d| {
            let sub = subsample_fraction(d, data_fraction, fit.seed)?;
            Ok(metric(d.task_id, adapt_task(model, library, method, &sub, fit)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let label = format!("{}@{}", method.as_str(), data_fraction);
    Ok(EvalReport::new(
        per_task,
        fingerprint(Some(library), label, model, fit.seed),
    ))
}

/// The held-out score used by the sweep and the ablation: PolyZ fitted on
/// each held-out task's full training split, scored on its test split.
pub fn heldout_score<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    heldout: &[&TaskDataset<T>],
    fit: &FitConfig,
) -> Result<EvalReport> {
    run_supervised_adaptation(model, library, SupervisedMethod::PolyZ, heldout, 1.0, fit)
}

// ---------------------------------------------------------------- sweep & ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    /// Oracle-routed validation log-likelihood over the training tasks.
    pub upstream_valid: f64,
    /// [`heldout_score`] mean log-likelihood.
    pub heldout: f64,
    pub ari_vs_planted: f64,
}

/// MBC builds for each `K` (sharing one stage 1) with their upstream and held-out scores.
pub fn run_cluster_sweep<T: Scalar>(
    model: &ToyModel<T>,
    bench: &Benchmark<T>,
    cfg: &BuildConfig,
    k_values: &[usize],
    fit: &FitConfig,
) -> Result<Vec<SweepRow>> {
    let train = bench.train_datasets();
    let heldout = bench.heldout_datasets();
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > train.len()) {
        return Err(EvalError::InvalidConfig(format!("K = {k} outside 1..={}", train.len())));
    }
    let stage1 = stage1_experts(model, &train, cfg)?;
    k_values
        .iter()
        .map(|&k| {
            let cb = build_clustered_from_stage1(ClusterMethod::Mbc, model, &train, cfg, k, stage1.clone())?;
            let lib = &cb.built.library;
            let up = run_upstream_eval(model, lib, &[RouterSpec::Oracle], &train)?;
            Ok(SweepRow {
                k,
                upstream_valid: up[0].mean_log_likelihood,
                heldout: heldout_score(model, lib, &heldout, fit)?.mean_log_likelihood,
                ari_vs_planted: cb.report.ari_vs_planted,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: ClusterMethod,
    pub heldout: f64,
    /// Mean pairwise cosine similarity of the cluster experts.
    pub similarity: f64,
    pub ari_vs_planted: f64,
}

/// The four task groupings at `K` with matched compute and a shared stage 1.
/// Also returns the libraries so the similarity column can be recomputed.
pub fn run_cluster_ablation<T: Scalar>(
    model: &ToyModel<T>,
    bench: &Benchmark<T>,
    cfg: &BuildConfig,
    k: usize,
    fit: &FitConfig,
) -> Result<(Vec<AblationRow>, Vec<Library<T>>)> {
    let train = bench.train_datasets();
    let heldout = bench.heldout_datasets();
    let stage1 = stage1_experts(model, &train, cfg)?;
    let mut rows = Vec::new();
    let mut libs = Vec::new();
    for method in ClusterMethod::ALL {
        let cb = build_clustered_from_stage1(method, model, &train, cfg, k, stage1.clone())?;
        let lib = cb.built.library;
        rows.push(AblationRow {
            method,
            heldout: heldout_score(model, &lib, &heldout, fit)?.mean_log_likelihood,
            similarity: cb.report.mean_pairwise_cluster_similarity.unwrap_or(f64::NAN),
            ari_vs_planted: cb.report.ari_vs_planted,
        });
        libs.push(lib);
    }
    Ok((rows, libs))
}

/// Recomputes the similarity column from the experts themselves.
pub fn recompute_similarity<T: Scalar>(library: &Library<T>) -> Result<f64> {
    Ok(mean_pairwise_similarity(&library.experts)?.0)
}

// ---------------------------------------------------------------- full report

/// Row of the zero-shot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub library: String,
    pub router: String,
    pub heldout_log_likelihood: f64,
    pub heldout_mse: f64,
}

/// Base, Private-μ, Private-Arrow and MBC-μ on the held-out tasks, with the
/// private and MBC libraries built from one model.
pub fn run_zeroshot_table<T: Scalar>(
    model: &ToyModel<T>,
    bench: &Benchmark<T>,
    cfg: &BuildConfig,
    k: usize,
) -> Result<(Vec<ZeroShotRow>, Library<T>, Library<T>)> {
    let train = bench.train_datasets();
    let heldout = bench.heldout_datasets();
    let private = build_private(model, &train, cfg)?.library;
    let mbc = crate::librarian::build_mbc(model, &train, cfg, k)?.built.library;
    let mut rows = Vec::new();
    let mut push = |name: &str, lib: Option<&Library<T>>, spec: RouterSpec| -> Result<()> {
        let r = run_zeroshot_eval(model, lib, &spec, &heldout, &train)?;
        rows.push(ZeroShotRow {
            library: name.into(),
            router: if lib.is_some() { spec.name().into() } else { "-".into() },
            heldout_log_likelihood: r.mean_log_likelihood,
            heldout_mse: r.mean_mse,
        });
        Ok(())
    };
    push("base", None, RouterSpec::Mu)?;
    push("private", Some(&private), RouterSpec::Mu)?;
    push("private", Some(&private), RouterSpec::arrow())?;
    push("mbc", Some(&mbc), RouterSpec::Mu)?;
    push("mbc", Some(&mbc), RouterSpec::arrow())?;
    Ok((rows, private, mbc))
}

// ---------------------------------------------------------------- plots

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"480\" height=\"360\" fill=\"white\"/>\n\
         <text x=\"240\" y=\"20\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"60\" y1=\"310\" x2=\"460\" y2=\"310\" stroke=\"black\"/>\n\
         <line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"310\" stroke=\"black\"/>\n\
         <text x=\"260\" y=\"345\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"15\" y=\"175\" text-anchor=\"middle\" transform=\"rotate(-90 15 175)\">{y_label}</text>\n\
         {body}</svg>\n"
    );
    s
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Scatter of weight similarity against transfer delta; intra-cluster pairs filled.
pub fn transfer_scatter_svg(report: &TransferReport) -> String {
    let (x0, x1) = span(report.records.iter().map(|r| r.weight_cosine_similarity));
    let (y0, y1) = span(report.records.iter().map(|r| r.transfer_delta));
    let mut body = String::new();
    for r in &report.records {
        let px = 60.0 + 400.0 * (r.weight_cosine_similarity - x0) / (x1 - x0);
        let py = 310.0 - 270.0 * (r.transfer_delta - y0) / (y1 - y0);
        let fill = if r.same_cluster { "steelblue" } else { "none" };
        let _ = writeln!(
            body,
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"4\" fill=\"{fill}\" stroke=\"steelblue\"/>"
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"60\" y=\"325\">{x0:.3}</text><text x=\"460\" y=\"325\" text-anchor=\"end\">{x1:.3}</text>"
    );
    let _ = writeln!(body, "<text x=\"55\" y=\"310\" text-anchor=\"end\">{y0:.3}</text><text x=\"55\" y=\"45\" text-anchor=\"end\">{y1:.3}</text>");
    let title = match report.pearson {
        Some(p) => format!("transfer vs. weight similarity (r = {p:.3})"),
        None => "transfer vs. weight similarity".into(),
    };
    svg_frame(
        &title,
        "cosine similarity of private adapters",
        "joint - private log-likelihood",
        &body,
    )
}

/// Histogram of norm ratios with a marker at `r = 1`.
pub fn norm_histogram_svg(report: &NormRatioReport) -> String {
    let bins = &report.histogram;
    let mut body = String::new();
    if let (Some(first), Some(last)) = (bins.first(), bins.last()) {
        let (lo, hi) = (first.lo.min(1.0), last.hi.max(1.0));
        let max = bins.iter().map(|b| b.count).max().unwrap_or(1).max(1) as f64;
        for b in bins {
            let x = 60.0 + 400.0 * (b.lo - lo) / (hi - lo);
            let w = 400.0 * (b.hi - b.lo) / (hi - lo);
            let h = 270.0 * b.count as f64 / max;
            let _ = writeln!(body, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"steelblue\" stroke=\"white\"/>", 310.0 - h);
        }
        let one = 60.0 + 400.0 * (1.0 - lo) / (hi - lo);
        let _ = writeln!(
            body,
            "<line x1=\"{one:.1}\" y1=\"40\" x2=\"{one:.1}\" y2=\"310\" stroke=\"crimson\" stroke-dasharray=\"4 3\"/>"
        );
        let _ = writeln!(
            body,
            "<text x=\"60\" y=\"325\">{lo:.2}</text><text x=\"460\" y=\"325\" text-anchor=\"end\">{hi:.2}</text>"
        );
    }
    let title = format!("norm ratio (fraction above one = {:.3})", report.fraction_above_one);
    svg_frame(&title, "layer-averaged norm ratio r", "count", &body)
}
