//! Routing over a fixed library.
//!
//! Zero-shot routers need no data from the target task: uniform (μ),
//! Arrow, centroid matching (CM), task predictor (TP), and the Oracle that
//! knows the task. Supervised routers fit merging weights on target data:
//! Poly / PolyZ by gradient descent and a LoraHub-style evolutionary search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{compose, AdapterError, Expert, Library};
use crate::librarian::{combined_factors, softmax_backward, weight_grad};
use crate::linalg::{low_rank_svd, LinalgError, Matrix};
use crate::rng::{derive_seed, tags, Rng};
use crate::scalar::{dot, norm, softmax, sum_tolerance, Scalar};
use crate::synthtasks::{Example, TaskDataset};
use crate::toymodel::{
    adapter_backprop, expert_is_finite, lr_at, squared_error, AdapterSource, BatchSampler, LayerFactors, LayerRouter,
    ModelError, OptimizerKind, OptimizerState, RouteQuery, ToyModel,
};

/// Tolerance on `Σ w = 1` for a valid distribution in `f64`; see [`sum_tolerance`].
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("empty library")]
    EmptyLibrary,
    #[error("task {0} is not covered by any expert")]
    UnknownTask(usize),
    #[error("the oracle router needs the task id")]
    MissingTaskId,
    #[error("expert {expert} has a zero update at layer {layer}; its prototype is undefined")]
    ZeroAdapter { expert: String, layer: usize },
    #[error("invalid routing parameter: {0}")]
    InvalidParameter(String),
    #[error("expert {0} has no data")]
    EmptyExpertData(String),
    #[error("{0}")]
    Shape(String),
    #[error("evaluation budget {budget} is below the population size {population}")]
    BudgetTooSmall { budget: usize, population: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

pub type Result<T, E = RouteError> = std::result::Result<T, E>;

/// Probability vector over the experts of a library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution<T> {
    pub weights: Vec<T>,
    pub k_active: usize,
    /// Set when the router could not discriminate (zero hidden state) and fell back to uniform.
    pub degenerate: bool,
}

impl<T: Scalar> RoutingDistribution<T> {
    /// Validates non-negativity and normalization.
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(RouteError::EmptyLibrary);
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(RouteError::InvalidParameter(format!(
                "weights {weights:?} are not a distribution"
            )));
        }
        let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (sum - 1.0).abs() > sum_tolerance::<T>(SUM_TOLERANCE, weights.len()) {
            return Err(RouteError::InvalidParameter(format!("weights sum to {sum}")));
        }
        let k_active = weights.iter().filter(|w| **w > T::zero()).count();
        Ok(Self {
            weights,
            k_active,
            degenerate: false,
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(RouteError::EmptyLibrary);
        }
        Ok(Self {
            weights: vec![T::one() / T::of(n as f64); n],
            k_active: n,
            degenerate: false,
        })
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut weights = vec![T::zero(); n];
        weights[index] = T::one();
        Self {
            weights,
            k_active: 1,
            degenerate: false,
        }
    }

    fn degenerate_uniform(n: usize) -> Self {
        Self {
            degenerate: true,
            ..Self::uniform(n).expect("n > 0")
        }
    }
}

/// A router yields a distribution over experts for each routed layer.
pub trait Router<T: Scalar>: Sync {
    fn route(&self, query: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>>;
}

/// Adapts any [`Router`] to the model's per-layer routing hook.
pub struct AsLayerRouter<'a, R: ?Sized>(pub &'a R);

impl<T: Scalar, R: Router<T> + ?Sized> LayerRouter<T> for AsLayerRouter<'_, R> {
    fn layer_weights(&self, q: &RouteQuery<'_, T>) -> std::result::Result<Vec<T>, String> {
        self.0.route(q).map(|d| d.weights).map_err(|e| e.to_string())
    }
}

/// Uniform weights over `library_size` experts.
pub fn mu_route<T: Scalar>(library_size: usize) -> Result<RoutingDistribution<T>> {
    RoutingDistribution::uniform(library_size)
}

/// One-hot on the first expert whose provenance covers `task_id`.
pub fn oracle_route<T: Scalar>(task_id: usize, library: &Library<T>) -> Result<RoutingDistribution<T>> {
    let idx = library
        .experts
        .iter()
        .position(|e| e.provenance.covers(task_id))
        .ok_or(RouteError::UnknownTask(task_id))?;
    Ok(RoutingDistribution::one_hot(library.len(), idx))
}

#[derive(Debug, Clone, Copy)]
pub struct MuRouter {
    pub library_size: usize,
}

impl<T: Scalar> Router<T> for MuRouter {
    fn route(&self, _: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>> {
        mu_route(self.library_size)
    }
}

/// Oracle routing with the task-to-expert map precomputed.
#[derive(Debug, Clone)]
pub struct OracleRouter {
    map: BTreeMap<usize, usize>,
    n: usize,
}

impl OracleRouter {
    pub fn new<T: Scalar>(library: &Library<T>) -> Self {
        let mut map = BTreeMap::new();
        for (i, e) in library.experts.iter().enumerate() {
            for &t in &e.provenance.member_tasks {
                map.entry(t).or_insert(i);
            }
        }
        Self { map, n: library.len() }
    }
}

impl<T: Scalar> Router<T> for OracleRouter {
    fn route(&self, q: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>> {
        let t = q.task_id.ok_or(RouteError::MissingTaskId)?;
        let i = *self.map.get(&t).ok_or(RouteError::UnknownTask(t))?;
        Ok(RoutingDistribution::one_hot(self.n, i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    Arrow,
    Cm,
}

/// Per-layer routing prototypes, one row per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<T> {
    pub source: PrototypeSource,
    pub layers: Vec<Matrix<T>>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn n_experts(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows())
    }
}

/// Arrow prototypes: the first right singular vector of each expert's `A Bᵀ` per layer.
pub fn arrow_init<T: Scalar>(library: &Library<T>) -> Result<PrototypeBank<T>> {
    if library.is_empty() {
        return Err(RouteError::EmptyLibrary);
    }
    let layers = (0..library.n_layers())
        .map(|l| {
            let rows = library
                .experts
                .iter()
                .map(|e| {
                    let ad = &e.adapters[l];
                    let svd = low_rank_svd(&ad.a, &ad.b)?;
                    if svd.rank() == 0 {
                        return Err(RouteError::ZeroAdapter {
                            expert: e.name.clone(),
                            layer: ad.layer_id,
                        });
                    }
                    Ok(svd.v.column(0))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Matrix::from_rows(&rows)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeBank {
        source: PrototypeSource::Arrow,
        layers,
    })
}

fn check_topk(k: usize, temperature: f64) -> Result<()> {
    if k == 0 {
        return Err(RouteError::InvalidParameter("top-k must be at least 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(RouteError::InvalidParameter(format!(
            "temperature {temperature} must be positive"
        )));
    }
    Ok(())
}

/// Keeps the `k` largest logits (ties go to the lower index), masks the rest
/// with `-inf`, and applies softmax.
///
/// A kept entry whose probability underflows is raised to the smallest
/// positive value, so the support is always exactly the kept set.
pub fn top_k_softmax<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    let mut masked = vec![T::neg_infinity(); logits.len()];
    for &i in order.iter().take(k) {
        masked[i] = logits[i];
    }
    let mut p = softmax(&masked);
    for &i in order.iter().take(k) {
        if p[i] == T::zero() {
            p[i] = T::min_positive_value();
        }
    }
    p
}

/// Arrow routing at one layer: `softmax(top_k(|W_l h| / temperature))`.
pub fn arrow_route<T: Scalar>(
    bank: &PrototypeBank<T>,
    layer: usize,
    hidden: &[T],
    k: usize,
    temperature: f64,
) -> Result<RoutingDistribution<T>> {
    check_topk(k, temperature)?;
    let w = bank
        .layers
        .get(layer)
        .ok_or_else(|| RouteError::Shape(format!("no prototypes for layer {layer}")))?;
    if w.cols() != hidden.len() {
        return Err(RouteError::Shape(format!(
            "hidden size {} vs prototypes {}",
            hidden.len(),
            w.cols()
        )));
    }
    let t = T::of(temperature);
    let logits: Vec<T> = w.matvec(hidden).into_iter().map(|v| v.abs() / t).collect();
    if logits.iter().all(|v| *v == T::zero()) {
        return Ok(RoutingDistribution::degenerate_uniform(logits.len()));
    }
    let weights = top_k_softmax(&logits, k.min(logits.len()));
    let k_active = weights.iter().filter(|w| **w > T::zero()).count();
    Ok(RoutingDistribution {
        weights,
        k_active,
        degenerate: false,
    })
}

/// Centroid-matching prototypes: per layer, the mean base-model `h_l` over each expert's data.
pub fn cm_init<T: Scalar>(
    library: &Library<T>,
    expert_data: &[Vec<&Example<T>>],
    model: &ToyModel<T>,
) -> Result<PrototypeBank<T>> {
    if library.is_empty() {
        return Err(RouteError::EmptyLibrary);
    }
    if expert_data.len() != library.len() {
        return Err(RouteError::Shape(format!(
            "{} datasets for {} experts",
            expert_data.len(),
            library.len()
        )));
    }
    let d = model.width();
    let depth = model.depth();
    let mut layers = vec![Matrix::zeros(library.len(), d); depth];
    for (i, (e, data)) in library.experts.iter().zip(expert_data).enumerate() {
        if data.is_empty() {
            return Err(RouteError::EmptyExpertData(e.name.clone()));
        }
        for ex in data {
            let tr = model.trace(&ex.x)?;
            for (l, h) in tr.layers.iter().enumerate() {
                for (acc, v) in layers[l].row_mut(i).iter_mut().zip(h) {
                    *acc += *v;
                }
            }
        }
        let n = T::of(data.len() as f64);
        for m in &mut layers {
            m.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(PrototypeBank {
        source: PrototypeSource::Cm,
        layers,
    })
}

/// Training examples of the tasks each expert covers, for [`cm_init`].
pub fn expert_datasets<'a, T>(library: &Library<T>, datasets: &[&'a TaskDataset<T>]) -> Vec<Vec<&'a Example<T>>> {
    library
        .experts
        .iter()
        .map(|e| {
            datasets
                .iter()
                .filter(|d| e.provenance.covers(d.task_id))
                .flat_map(|d| d.train.iter())
                .collect()
        })
        .collect()
}

/// CM routing: softmax of cosine similarities to the layer's centroids,
/// optionally restricted to the top `k`.
pub fn cm_route<T: Scalar>(
    bank: &PrototypeBank<T>,
    layer: usize,
    hidden: &[T],
    top_k: Option<usize>,
    temperature: f64,
) -> Result<RoutingDistribution<T>> {
    check_topk(top_k.unwrap_or(1), temperature)?;
    let w = bank
        .layers
        .get(layer)
        .ok_or_else(|| RouteError::Shape(format!("no prototypes for layer {layer}")))?;
    let hn = norm(hidden);
    if hn == T::zero() {
        return Ok(RoutingDistribution::degenerate_uniform(w.rows()));
    }
    let t = T::of(temperature);
    let logits: Vec<T> = (0..w.rows())
        .map(|i| {
            let p = w.row(i);
            let pn = norm(p);
            if pn == T::zero() {
                T::zero()
            } else {
                dot(p, hidden) / (pn * hn) / t
            }
        })
        .collect();
    let k = top_k.unwrap_or(logits.len()).min(logits.len());
    let weights = top_k_softmax(&logits, k);
    let k_active = weights.iter().filter(|w| **w > T::zero()).count();
    Ok(RoutingDistribution {
        weights,
        k_active,
        degenerate: false,
    })
}

/// Default number of active experts: `min(4, |L|)`.
pub fn default_top_k(library_size: usize) -> usize {
    library_size.min(4)
}

#[derive(Debug, Clone)]
pub struct ArrowRouter<T> {
    pub bank: PrototypeBank<T>,
    pub top_k: usize,
    pub temperature: f64,
}

impl<T: Scalar> Router<T> for ArrowRouter<T> {
    fn route(&self, q: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>> {
        arrow_route(&self.bank, q.layer, q.hidden, self.top_k, self.temperature)
    }
}

#[derive(Debug, Clone)]
pub struct CmRouter<T> {
    pub bank: PrototypeBank<T>,
    pub top_k: Option<usize>,
    pub temperature: f64,
}

impl<T: Scalar> Router<T> for CmRouter<T> {
    fn route(&self, q: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>> {
        cm_route(&self.bank, q.layer, q.hidden, self.top_k, self.temperature)
    }
}

/// Multinomial logistic regression from standardized base-model `h_L` to task id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPredictor<T> {
    /// `n_tasks x (features + 1)`; the last column is the bias.
    pub weights: Matrix<T>,
    pub feature_mean: Vec<T>,
    pub feature_std: Vec<T>,
    /// Task id of each class.
    pub task_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Training examples used per task.
    pub max_per_task: usize,
    pub seed: u64,
}

impl Default for TpConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.5,
            l2: 1e-4,
            max_per_task: 128,
            seed: 0,
        }
    }
}

impl<T: Scalar> TaskPredictor<T> {
    fn standardize(&self, f: &[T]) -> Vec<T> {
        let mut z: Vec<T> = f
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect();
        z.push(T::one());
        z
    }

    /// Task probabilities for one input.
    pub fn predict(&self, model: &ToyModel<T>, x: &[T]) -> Result<Vec<T>> {
        let f = model.trace(x)?.features;
        Ok(softmax(&self.weights.matvec(&self.standardize(&f))))
    }

    /// Aggregates task probabilities into expert probabilities: each task's
    /// mass is split evenly across the experts covering it.
    pub fn aggregate(&self, probs: &[T], library: &Library<T>) -> Result<RoutingDistribution<T>> {
        let mut out = vec![T::zero(); library.len()];
        for (&t, &p) in self.task_ids.iter().zip(probs) {
            let covering = library.experts_covering(t);
            if covering.is_empty() {
                return Err(RouteError::UnknownTask(t));
            }
            let share = p / T::of(covering.len() as f64);
            for i in covering {
                out[i] += share;
            }
        }
        let sum: T = out.iter().copied().sum();
        out.iter_mut().for_each(|v| *v /= sum);
        let k_active = out.iter().filter(|w| **w > T::zero()).count();
        Ok(RoutingDistribution {
            weights: out,
            k_active,
            degenerate: false,
        })
    }
}

/// Fits a [`TaskPredictor`] by full-batch gradient descent on cross-entropy.
pub fn tp_train<T: Scalar>(
    datasets: &[&TaskDataset<T>],
    model: &ToyModel<T>,
    cfg: &TpConfig,
) -> Result<TaskPredictor<T>> {
    if datasets.is_empty() {
        return Err(RouteError::EmptyLibrary);
    }
    let mut feats: Vec<Vec<T>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (c, ds) in datasets.iter().enumerate() {
        let mut idx = Rng::stream(cfg.seed, &[tags::TASK_PREDICTOR, ds.task_id as u64]).permutation(ds.train.len());
        idx.truncate(cfg.max_per_task.max(1));
        idx.sort_unstable();
        for i in idx {
            feats.push(model.trace(&ds.train[i].x)?.features);
            labels.push(c);
        }
    }
    let f = model.width();
    let n = feats.len();
    let nf = T::of(n as f64);
    let mean: Vec<T> = (0..f).map(|j| feats.iter().map(|r| r[j]).sum::<T>() / nf).collect();
    let std: Vec<T> = (0..f)
        .map(|j| {
            let v = feats.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<T>() / nf;
            let s = v.sqrt();
            if s > T::of(1e-12) {
                s
            } else {
                T::one()
            }
        })
        .collect();
    let mut tp = TaskPredictor {
        weights: Matrix::zeros(datasets.len(), f + 1),
        feature_mean: mean,
        feature_std: std,
        task_ids: datasets.iter().map(|d| d.task_id).collect(),
    };
    let xs: Vec<Vec<T>> = feats.iter().map(|r| tp.standardize(r)).collect();
    let k = datasets.len();
    for _ in 0..cfg.steps {
        let mut g = Matrix::<T>::zeros(k, f + 1);
        for (x, &y) in xs.iter().zip(&labels) {
            let p = softmax(&tp.weights.matvec(x));
            for c in 0..k {
                let r = p[c] - if c == y { T::one() } else { T::zero() };
                for (gv, xv) in g.row_mut(c).iter_mut().zip(x) {
                    *gv += r * *xv;
                }
            }
        }
        let lr = T::of(cfg.learning_rate);
        let l2 = T::of(cfg.l2);
        for (w, gv) in tp.weights.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= lr * (*gv / nf + l2 * *w);
        }
    }
    Ok(tp)
}

/// TP routing for one input, identical across layers.
pub fn tp_route<T: Scalar>(
    tp: &TaskPredictor<T>,
    model: &ToyModel<T>,
    x: &[T],
    library: &Library<T>,
) -> Result<RoutingDistribution<T>> {
    let probs = tp.predict(model, x)?;
    tp.aggregate(&probs, library)
}

/// TP router bound to a model and library.
pub struct TpRouter<'a, T> {
    pub predictor: &'a TaskPredictor<T>,
    pub model: &'a ToyModel<T>,
    pub library: &'a Library<T>,
}

impl<T: Scalar> Router<T> for TpRouter<'_, T> {
    fn route(&self, q: &RouteQuery<'_, T>) -> Result<RoutingDistribution<T>> {
        tp_route(self.predictor, self.model, q.input, self.library)
    }
}

/// Supervised-fit hyperparameters shared by Poly / PolyZ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub warmup_fraction: f64,
    /// Step-size multiplier for the routing logits.
    pub routing_lr_multiplier: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            warmup_fraction: 0.05,
            routing_lr_multiplier: 100.0,
        }
    }
}

/// Result of [`poly_fit`].
#[derive(Debug, Clone)]
pub struct PolyFit<T> {
    /// Softmax-normalized weights per layer.
    pub per_layer_weights: Vec<Vec<T>>,
    /// Co-trained experts (Poly); `None` for PolyZ.
    pub experts: Option<Vec<Expert<T>>>,
    pub final_loss: f64,
}

impl<T: Scalar> PolyFit<T> {
    /// The library to evaluate the fit with: co-trained experts when present.
    pub fn library(&self, original: &Library<T>) -> Library<T> {
        let mut lib = original.clone();
        if let Some(e) = &self.experts {
            lib.experts = e.clone();
        }
        lib
    }

    /// Fixed per-layer routing matching the fitted weights.
    pub fn routing(&self) -> crate::toymodel::StaticRouting<T> {
        crate::toymodel::StaticRouting {
            per_layer: self.per_layer_weights.clone(),
        }
    }
}

/// Fits per-layer merging weights (softmax of logits initialized at zero) on
/// `examples` by gradient descent; with `tune_experts` the expert factors are
/// co-trained.
pub fn poly_fit<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    examples: &[Example<T>],
    cfg: &FitConfig,
    tune_experts: bool,
) -> Result<PolyFit<T>> {
    model.check_library(library)?;
    if examples.is_empty() {
        return Err(ModelError::EmptyData.into());
    }
    let depth = model.depth();
    let n = library.len();
    let mut experts = library.experts.clone();
    let mut logits = vec![vec![T::zero(); n]; depth];
    let per_expert = experts[0].shape().flat_len();
    let mut opt = OptimizerState::new(cfg.optimizer, per_expert * n);
    let mut sampler = BatchSampler::new(examples.len(), cfg.batch_size, derive_seed(cfg.seed, &[tags::POLY_FIT]));
    let scaling = library.scaling;
    let mut grad = vec![T::zero(); per_expert];
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<&Example<T>> = sampler.next_batch().iter().map(|&i| &examples[i]).collect();
        let w: Vec<Vec<T>> = logits.iter().map(|l| softmax(l)).collect();
        let refs: Vec<&Expert<T>> = experts.iter().collect();
        let combined = combined_factors(&refs, &w);
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
        last_loss = loss.as_f64();
        let lr = T::of(lr_at(cfg.learning_rate, step, cfg.steps, cfg.warmup_fraction));
        if n > 1 {
            let zlr = lr * T::of(cfg.routing_lr_multiplier);
            for l in 0..depth {
                let gw = weight_grad(&refs, &grad, &[l]);
                let gl = softmax_backward(&w[l], &gw);
                for (z, g) in logits[l].iter_mut().zip(gl) {
                    *z -= zlr * g;
                }
            }
        }
        if tune_experts {
            let block = 2 * model.width() * library.rank;
            for (i, e) in experts.iter_mut().enumerate() {
                let mut off = 0;
                for (l, ad) in e.adapters.iter_mut().enumerate() {
                    let wl = w[l][i];
                    let half = block / 2;
                    let ga: Vec<T> = grad[off..off + half].iter().map(|&g| g * wl).collect();
                    let gb: Vec<T> = grad[off + half..off + block].iter().map(|&g| g * wl).collect();
                    opt.update(i * per_expert + off, ad.a.as_mut_slice(), &ga, lr);
                    opt.update(i * per_expert + off + half, ad.b.as_mut_slice(), &gb, lr);
                    off += block;
                }
            }
        }
    }
    if tune_experts && !experts.iter().all(expert_is_finite) {
        return Err(ModelError::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        }
        .into());
    }
    Ok(PolyFit {
        per_layer_weights: logits.iter().map(|l| softmax(l)).collect(),
        experts: tune_experts.then_some(experts),
        final_loss: last_loss,
    })
}

/// Gradient-free search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraHubConfig {
    /// Total example forward passes available.
    pub forward_budget: usize,
    /// Parents kept per generation (μ).
    pub parents: usize,
    /// Offspring per generation (λ).
    pub offspring: usize,
    /// Mutation standard deviation.
    pub sigma: f64,
    /// Project candidates onto the probability simplex before composing.
    pub project_simplex: bool,
    /// Share of the training examples used by the objective.
    pub objective_fraction: f64,
    pub seed: u64,
}

impl Default for LoraHubConfig {
    fn default() -> Self {
        Self {
            forward_budget: 0,
            parents: 4,
            offspring: 8,
            sigma: 0.2,
            project_simplex: true,
            objective_fraction: 0.5,
            seed: 0,
        }
    }
}

impl LoraHubConfig {
    /// Forward budget matched to a gradient fit of `steps` batches of
    /// `batch_size`: one backward pass costs two forwards, and the search gets
    /// 1.5 times the resulting forward count.
    pub fn matched_budget(steps: usize, batch_size: usize) -> usize {
        steps * batch_size * 3 * 3 / 2
    }
}

/// Result of [`lorahub_fit`].
#[derive(Debug, Clone)]
pub struct LoraHubFit<T> {
    /// Weights used for composition (projected when projection is on).
    pub weights: Vec<T>,
    /// Best objective after the initial population and after every generation.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut u: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<T> = v.iter().map(|x| T::of((x.as_f64() - theta).max(0.0))).collect();
    let s: T = out.iter().copied().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

fn composed_loss<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    weights: &[T],
    data: &[&Example<T>],
) -> Result<f64> {
    let refs = library.expert_refs();
    let composed = crate::adapters::combine_layerwise(
        &refs,
        &vec![weights.to_vec(); library.n_layers()],
        "candidate",
        crate::adapters::Provenance::new(crate::adapters::BuilderTag::Composed, vec![]),
    )?;
    let src = AdapterSource::Expert(&composed);
    let mut total = 0.0;
    for ex in data {
        total += squared_error(&ex.y, &model.predict(&src, &ex.x, None)?);
    }
    Ok(total / data.len() as f64)
}

/// (μ+λ) evolutionary search over one weight vector shared by all layers.
///
/// The search starts from μ copies of the uniform vector (one evaluation).
/// Each generation mutates λ offspring from uniformly chosen parents and keeps
/// the best μ of parents and offspring, so the best objective never rises.
/// The objective is the training loss of the composed expert on a fixed
/// random `objective_fraction` of `examples`.
pub fn lorahub_fit<T: Scalar>(
    model: &ToyModel<T>,
    library: &Library<T>,
    examples: &[Example<T>],
    cfg: &LoraHubConfig,
) -> Result<LoraHubFit<T>> {
    model.check_library(library)?;
    if examples.is_empty() {
        return Err(ModelError::EmptyData.into());
    }
    if cfg.parents == 0 || cfg.offspring == 0 {
        return Err(RouteError::InvalidParameter("population sizes must be positive".into()));
    }
    let n = library.len();
    let uniform = vec![T::one() / T::of(n as f64); n];
    if n == 1 {
        return Ok(LoraHubFit {
            weights: uniform,
            history: Vec::new(),
            evaluations: 0,
        });
    }
    let mut rng = Rng::stream(cfg.seed, &[tags::LORAHUB]);
    let keep = crate::synthtasks::subsample_count(examples.len(), cfg.objective_fraction);
    let mut idx = rng.permutation(examples.len());
    idx.truncate(keep);
    idx.sort_unstable();
    let data: Vec<&Example<T>> = idx.iter().map(|&i| &examples[i]).collect();
    let evaluations_available = cfg.forward_budget / data.len();
    if evaluations_available < cfg.parents {
        return Err(RouteError::BudgetTooSmall {
            budget: evaluations_available,
            population: cfg.parents,
        });
    }
    let realize = |v: &[T]| {
        if cfg.project_simplex {
            project_to_simplex(v)
        } else {
            v.to_vec()
        }
    };
    let first = composed_loss(model, library, &realize(&uniform), &data)?;
    let mut evaluations = 1;
    let mut parents: Vec<(f64, Vec<T>)> = vec![(first, uniform.clone()); cfg.parents];
    let mut history = vec![first];
    while evaluations + cfg.offspring <= evaluations_available {
        let mut pool = parents.clone();
        for _ in 0..cfg.offspring {
            let p = &parents[rng.below(parents.len())].1;
            let child: Vec<T> = p.iter().map(|&v| v + T::of(cfg.sigma * rng.normal())).collect();
            let loss = composed_loss(model, library, &realize(&child), &data)?;
            evaluations += 1;
            pool.push((if loss.is_finite() { loss } else { f64::INFINITY }, child));
        }
        // Stable sort: earlier (older) candidates win ties.
        pool.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
        pool.truncate(cfg.parents);
        parents = pool;
        history.push(parents[0].0);
    }
    Ok(LoraHubFit {
        weights: realize(&parents[0].1),
        history,
        evaluations,
    })
}

/// Uniform factor composition, the expert μ routing is equivalent to.
pub fn mu_composition<T: Scalar>(library: &Library<T>) -> Result<Expert<T>> {
    let w = mu_route::<T>(library.len())?.weights;
    Ok(compose(&library.expert_refs(), &w)?)
}
