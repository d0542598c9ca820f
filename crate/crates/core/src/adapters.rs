//! LoRA adapter algebra.
//!
//! A patched linear layer computes `h = W x + s · A (Bᵀ x)` with frozen `W`
//! and trainable rank-`r` factors `A, B` of shape `d x r`. Experts carry one
//! adapter per patched layer; libraries are ordered collections of experts
//! over the same base model.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{ClusterAssignment, Matrix};
use crate::scalar::{sum_tolerance, Scalar};

/// Default LoRA rank.
pub const DEFAULT_RANK: usize = 4;
/// Default LoRA alpha; the scaling is `alpha / rank`.
pub const DEFAULT_ALPHA: f64 = 16.0;
/// Tolerance on `Σ w = 1` for [`compose`] in `f64`; see [`sum_tolerance`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scaling {0} must be >= 1 (use LoraAdapter::with_any_scaling to override)")]
    Scaling(f64),
    #[error("experts are not structurally compatible: {0}")]
    Incompatible(String),
    #[error("weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("{experts} experts but {weights} weights")]
    WeightCount { experts: usize, weights: usize },
    #[error("duplicate expert name {0:?}")]
    DuplicateName(String),
    #[error("empty expert list")]
    Empty,
    #[error("flat vector has {got} values, expected {expected}")]
    FlatLength { got: usize, expected: usize },
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

/// Default scaling `alpha / rank`.
pub fn default_scaling(rank: usize) -> f64 {
    DEFAULT_ALPHA / rank as f64
}

/// One layer's low-rank update `s · A Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter<T> {
    pub layer_id: usize,
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub scaling: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Validates shapes and enforces `scaling >= 1`.
    pub fn new(layer_id: usize, a: Matrix<T>, b: Matrix<T>, scaling: T) -> Result<Self> {
        if scaling < T::one() {
            return Err(AdapterError::Scaling(scaling.as_f64()));
        }
        Self::with_any_scaling(layer_id, a, b, scaling)
    }

    /// Like [`LoraAdapter::new`] but accepts any positive scaling.
    pub fn with_any_scaling(layer_id: usize, a: Matrix<T>, b: Matrix<T>, scaling: T) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(AdapterError::Shape(format!(
                "A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if !(scaling > T::zero()) || !scaling.is_finite() {
            return Err(AdapterError::Scaling(scaling.as_f64()));
        }
        Ok(Self {
            layer_id,
            a,
            b,
            scaling,
        })
    }

    pub fn zeros(layer_id: usize, dim: usize, rank: usize, scaling: T) -> Self {
        Self {
            layer_id,
            a: Matrix::zeros(dim, rank),
            b: Matrix::zeros(dim, rank),
            scaling,
        }
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    /// `s · A (Bᵀ x)`, evaluated right to left.
    pub fn delta(&self, x: &[T]) -> Vec<T> {
        let u = self.b.matvec_t(x);
        let mut out = self.a.matvec(&u);
        for v in &mut out {
            *v *= self.scaling;
        }
        out
    }
}

/// `W x + s · A (Bᵀ x)` without materializing `A Bᵀ`.
pub fn apply_adapter<T: Scalar>(adapter: &LoraAdapter<T>, base_weight: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    let d = adapter.dim();
    if base_weight.shape() != (d, d) || x.len() != d {
        return Err(AdapterError::Shape(format!(
            "adapter dim {d}, weight {:?}, input {}",
            base_weight.shape(),
            x.len()
        )));
    }
    let mut out = base_weight.matvec(x);
    for (o, dv) in out.iter_mut().zip(adapter.delta(x)) {
        *o += dv;
    }
    Ok(out)
}

/// How an expert was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuilderTag {
    Private,
    Shared,
    Mbc,
    Poly,
    Composed,
    RandomTask,
    RandomExamples,
    Embeddings,
    Adapted,
}

impl BuilderTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Private => "private",
            Self::Shared => "shared",
            Self::Mbc => "mbc",
            Self::Poly => "poly",
            Self::Composed => "composed",
            Self::RandomTask => "random_task",
            Self::RandomExamples => "random_examples",
            Self::Embeddings => "embeddings",
            Self::Adapted => "adapted",
        }
    }
}

impl fmt::Display for BuilderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub builder: BuilderTag,
    /// Tasks whose data trained this expert, ascending.
    pub member_tasks: Vec<usize>,
    /// Composition weights, for composed experts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Provenance {
    pub fn new(builder: BuilderTag, mut member_tasks: Vec<usize>) -> Self {
        member_tasks.sort_unstable();
        member_tasks.dedup();
        Self {
            builder,
            member_tasks,
            weights: None,
        }
    }

    pub fn covers(&self, task_id: usize) -> bool {
        self.member_tasks.binary_search(&task_id).is_ok()
    }
}

/// Per-layer adapters for one task or task cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert<T> {
    pub name: String,
    pub adapters: Vec<LoraAdapter<T>>,
    pub provenance: Provenance,
}

/// Structural description of an expert, enough to rebuild one from a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertShape {
    pub layer_ids: Vec<usize>,
    pub dim: usize,
    pub rank: usize,
}

impl ExpertShape {
    pub fn flat_len(&self) -> usize {
        self.layer_ids.len() * 2 * self.dim * self.rank
    }
}

impl<T: Scalar> Expert<T> {
    /// Checks one adapter per layer (ascending, distinct) with shared rank, dim and scaling.
    pub fn new(name: impl Into<String>, adapters: Vec<LoraAdapter<T>>, provenance: Provenance) -> Result<Self> {
        let first = adapters.first().ok_or(AdapterError::Empty)?;
        let (dim, rank, scaling) = (first.dim(), first.rank(), first.scaling);
        for pair in adapters.windows(2) {
            if pair[1].layer_id <= pair[0].layer_id {
                return Err(AdapterError::Incompatible(
                    "layer ids must be strictly ascending".into(),
                ));
            }
        }
        if adapters
            .iter()
            .any(|a| a.dim() != dim || a.rank() != rank || a.scaling != scaling)
        {
            return Err(AdapterError::Incompatible(
                "adapters differ in dim, rank or scaling".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            adapters,
            provenance,
        })
    }

    pub fn shape(&self) -> ExpertShape {
        ExpertShape {
            layer_ids: self.adapters.iter().map(|a| a.layer_id).collect(),
            dim: self.adapters[0].dim(),
            rank: self.adapters[0].rank(),
        }
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    pub fn scaling(&self) -> T {
        self.adapters[0].scaling
    }

    pub fn n_layers(&self) -> usize {
        self.adapters.len()
    }

    /// Adapter patching `layer_id`, if any.
    pub fn layer(&self, layer_id: usize) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.layer_id == layer_id)
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.scaling() == other.scaling()
    }

    /// Rebuilds an expert with this expert's structure from flat values.
    pub fn unflatten_like(&self, values: &[T]) -> Result<Self> {
        let shape = self.shape();
        unflatten(
            values,
            &shape,
            self.scaling(),
            self.name.clone(),
            self.provenance.clone(),
        )
    }

    /// SHA-256 over the name and all factor bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        hash_expert(&mut h, self);
        hex::encode(h.finalize())
    }
}

fn hash_expert<T: Scalar>(h: &mut Sha256, e: &Expert<T>) {
    h.update(e.name.as_bytes());
    h.update([0u8]);
    for ad in &e.adapters {
        h.update((ad.layer_id as u64).to_le_bytes());
        h.update(ad.scaling.as_f64().to_le_bytes());
        for v in ad.a.as_slice().iter().chain(ad.b.as_slice()) {
            h.update(v.as_f64().to_le_bytes());
        }
    }
}

/// Flattened factors of one expert: per layer (ascending), row-major `A` then row-major `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector<T> {
    pub values: Vec<T>,
    pub source_expert: String,
}

/// Concatenates every layer's row-major `A` followed by its row-major `B`.
/// The scaling is not included.
pub fn flatten_expert<T: Scalar>(e: &Expert<T>) -> FlatVector<T> {
    let mut values = Vec::with_capacity(e.shape().flat_len());
    for ad in &e.adapters {
        values.extend_from_slice(ad.a.as_slice());
        values.extend_from_slice(ad.b.as_slice());
    }
    FlatVector {
        values,
        source_expert: e.name.clone(),
    }
}

/// Inverse of [`flatten_expert`].
pub fn unflatten<T: Scalar>(
    values: &[T],
    shape: &ExpertShape,
    scaling: T,
    name: String,
    provenance: Provenance,
) -> Result<Expert<T>> {
    let expected = shape.flat_len();
    if values.len() != expected {
        return Err(AdapterError::FlatLength {
            got: values.len(),
            expected,
        });
    }
    let block = shape.dim * shape.rank;
    let adapters = shape
        .layer_ids
        .iter()
        .enumerate()
        .map(|(i, &layer_id)| {
            let off = 2 * i * block;
            let a = Matrix::from_vec(shape.dim, shape.rank, values[off..off + block].to_vec())
                .map_err(|e| AdapterError::Shape(e.to_string()))?;
            let b = Matrix::from_vec(shape.dim, shape.rank, values[off + block..off + 2 * block].to_vec())
                .map_err(|e| AdapterError::Shape(e.to_string()))?;
            LoraAdapter::with_any_scaling(layer_id, a, b, scaling)
        })
        .collect::<Result<Vec<_>>>()?;
    Expert::new(name, adapters, provenance)
}

fn check_compatible<T: Scalar>(experts: &[&Expert<T>]) -> Result<()> {
    let first = experts.first().ok_or(AdapterError::Empty)?;
    for e in &experts[1..] {
        if !first.is_compatible(e) {
            return Err(AdapterError::Incompatible(format!("{} vs {}", first.name, e.name)));
        }
    }
    Ok(())
}

/// Weighted factor sum `(Σ wᵢAᵢ, Σ wᵢBᵢ)` for one layer index. Zero weights are skipped.
pub fn combine_layer<T: Scalar>(experts: &[&Expert<T>], layer_index: usize, weights: &[T]) -> (Matrix<T>, Matrix<T>) {
    let template = &experts[0].adapters[layer_index];
    let mut a = Matrix::zeros(template.dim(), template.rank());
    let mut b = Matrix::zeros(template.dim(), template.rank());
    for (e, &w) in experts.iter().zip(weights) {
        if w == T::zero() {
            continue;
        }
        a.axpy(w, &e.adapters[layer_index].a);
        b.axpy(w, &e.adapters[layer_index].b);
    }
    (a, b)
}

/// Per-layer weighted factor combination with no normalization requirement.
/// `layer_weights[l]` weights the experts at layer index `l`.
pub fn combine_layerwise<T: Scalar>(
    experts: &[&Expert<T>],
    layer_weights: &[Vec<T>],
    name: impl Into<String>,
    provenance: Provenance,
) -> Result<Expert<T>> {
    check_compatible(experts)?;
    let n_layers = experts[0].n_layers();
    if layer_weights.len() != n_layers {
        return Err(AdapterError::Shape(format!(
            "{} weight rows for {n_layers} layers",
            layer_weights.len()
        )));
    }
    let mut adapters = Vec::with_capacity(n_layers);
    for (l, w) in layer_weights.iter().enumerate() {
        if w.len() != experts.len() {
            return Err(AdapterError::WeightCount {
                experts: experts.len(),
                weights: w.len(),
            });
        }
        let (a, b) = combine_layer(experts, l, w);
        let t = &experts[0].adapters[l];
        adapters.push(LoraAdapter {
            layer_id: t.layer_id,
            a,
            b,
            scaling: t.scaling,
        });
    }
    Expert::new(name, adapters, provenance)
}

/// Linear factor composition `A* = Σ wᵢAᵢ`, `B* = Σ wᵢBᵢ` at every layer.
/// Weights must sum to one.
pub fn compose<T: Scalar>(experts: &[&Expert<T>], weights: &[T]) -> Result<Expert<T>> {
    if experts.len() != weights.len() {
        return Err(AdapterError::WeightCount {
            experts: experts.len(),
            weights: weights.len(),
        });
    }
    let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
    if (sum - 1.0).abs() > sum_tolerance::<T>(WEIGHT_SUM_TOLERANCE, weights.len())
        || weights.iter().any(|w| !w.is_finite())
    {
        return Err(AdapterError::WeightsNotNormalized(sum));
    }
    check_compatible(experts)?;
    let members: BTreeSet<usize> = experts
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w != T::zero())
        .flat_map(|(e, _)| e.provenance.member_tasks.iter().copied())
        .collect();
    let mut provenance = Provenance::new(BuilderTag::Composed, members.into_iter().collect());
    provenance.weights = Some(weights.iter().map(|w| w.as_f64()).collect());
    let per_layer = vec![weights.to_vec(); experts[0].n_layers()];
    combine_layerwise(experts, &per_layer, "composed", provenance)
}

/// Ordered collection of experts over one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct Library<T> {
    pub experts: Vec<Expert<T>>,
    pub base_model_fingerprint: String,
    pub rank: usize,
    pub scaling: T,
    pub builder: BuilderTag,
    pub build_seed: u64,
    pub cluster_assignment: Option<ClusterAssignment>,
    /// Task ids whose rows make up `skill_routing` (Poly libraries only).
    pub skill_tasks: Option<Vec<usize>>,
    /// Row-normalized task-to-skill routing `Z` (Poly libraries only).
    pub skill_routing: Option<Matrix<T>>,
}

impl<T: Scalar> Library<T> {
    pub fn new(
        experts: Vec<Expert<T>>,
        base_model_fingerprint: impl Into<String>,
        builder: BuilderTag,
        build_seed: u64,
    ) -> Result<Self> {
        let first = experts.first().ok_or(AdapterError::Empty)?;
        let (rank, scaling) = (first.rank(), first.scaling());
        let mut names = BTreeSet::new();
        for e in &experts {
            if !names.insert(e.name.as_str()) {
                return Err(AdapterError::DuplicateName(e.name.clone()));
            }
            if !first.is_compatible(e) {
                return Err(AdapterError::Incompatible(format!("{} vs {}", first.name, e.name)));
            }
        }
        Ok(Self {
            experts,
            base_model_fingerprint: base_model_fingerprint.into(),
            rank,
            scaling,
            builder,
            build_seed,
            cluster_assignment: None,
            skill_tasks: None,
            skill_routing: None,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn expert_refs(&self) -> Vec<&Expert<T>> {
        self.experts.iter().collect()
    }

    pub fn n_layers(&self) -> usize {
        self.experts[0].n_layers()
    }

    /// Indices of experts whose provenance covers `task_id`.
    pub fn experts_covering(&self, task_id: usize) -> Vec<usize> {
        self.experts
            .iter()
            .enumerate()
            .filter(|(_, e)| e.provenance.covers(task_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Every task id mentioned in any expert's provenance.
    pub fn covered_tasks(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .experts
            .iter()
            .flat_map(|e| e.provenance.member_tasks.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    /// SHA-256 over all experts and the library-level fields.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base_model_fingerprint.as_bytes());
        h.update(self.builder.as_str().as_bytes());
        h.update(self.build_seed.to_le_bytes());
        for e in &self.experts {
            hash_expert(&mut h, e);
        }
        if let Some(z) = &self.skill_routing {
            for v in z.as_slice() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
