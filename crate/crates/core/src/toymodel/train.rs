//! Manual backpropagation and SGD trainers for adapters and the base model.

use serde::{Deserialize, Serialize};

use super::{Architecture, BaseParams, ModelError, Result, ToyModel};
use crate::adapters::{BuilderTag, Expert, LoraAdapter, Provenance};
use crate::linalg::Matrix;
use crate::rng::{tags, Rng};
use crate::scalar::Scalar;
use crate::synthtasks::{Example, TaskDataset};

/// How fresh adapters are initialized: `A ~ N(0, std²)`, `B = 0`.
///
/// `A` is drawn from a stream keyed by `seed` and the layer only, so every
/// adapter initialized with the same `AdapterInit` starts from the same point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub rank: usize,
    pub scaling: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self {
            rank: crate::adapters::DEFAULT_RANK,
            scaling: crate::adapters::default_scaling(crate::adapters::DEFAULT_RANK),
            std: 0.25,
            seed: 0,
        }
    }
}

/// A zero-delta expert (`B = 0`) for every layer of `model`.
pub fn fresh_expert<T: Scalar>(
    model: &ToyModel<T>,
    init: &AdapterInit,
    name: impl Into<String>,
    provenance: Provenance,
) -> Result<Expert<T>> {
    let d = model.width();
    if init.rank == 0 || init.rank > d {
        return Err(ModelError::InvalidConfig(format!("rank {} for width {d}", init.rank)));
    }
    let adapters = (0..model.depth())
        .map(|l| {
            let mut rng = Rng::stream(init.seed, &[tags::ADAPTER_INIT, l as u64]);
            let a = Matrix::from_fn(d, init.rank, |_, _| T::of(init.std * rng.normal()));
            LoraAdapter::new(l, a, Matrix::zeros(d, init.rank), T::of(init.scaling))
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Expert::new(name, adapters, provenance).map_err(|e| ModelError::InvalidConfig(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
}

/// SGD state over a flat parameter layout; callers address blocks by offset.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    velocity: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let velocity = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Momentum { .. } => vec![T::zero(); n_params],
        };
        Self { kind, velocity }
    }

    /// Updates `params` in place from `grad`; `offset` locates the block in the flat layout.
    pub fn update(&mut self, offset: usize, params: &mut [T], grad: &[T], lr: T) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * *g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                let beta = T::of(beta);
                let v = &mut self.velocity[offset..offset + params.len()];
                for ((p, g), vi) in params.iter_mut().zip(grad).zip(v) {
                    *vi = beta * *vi + *g;
                    *p -= lr * *vi;
                }
            }
        }
    }
}

/// Epoch-shuffled mini-batches over `0..n`.
///
/// Each epoch is a fresh permutation; a batch never straddles two epochs, so
/// a trailing remainder smaller than the batch size is skipped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0, "empty sampler");
        Self {
            order: Vec::new(),
            pos: n,
            batch: batch_size.clamp(1, n),
            rng: Rng::stream(seed, &[tags::ADAPTER_BATCHES]),
        }
        .with_len(n)
    }

    fn with_len(mut self, n: usize) -> Self {
        self.order = (0..n).collect();
        self.pos = n;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

/// Step size with linear warmup over the first `warmup_fraction` of `steps`.
pub fn lr_at(base: f64, step: usize, steps: usize, warmup_fraction: f64) -> f64 {
    let warm = (warmup_fraction * steps as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * (step + 1) as f64 / warm as f64
    }
}

/// Adapter training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the batch order.
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub warmup_fraction: f64,
    /// Used when no initial expert is supplied.
    pub init: AdapterInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            warmup_fraction: 0.05,
            init: AdapterInit::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ModelError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Gradients of the base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
    pub head: Matrix<T>,
}

impl<T: Scalar> BaseGrads<T> {
    pub fn zeros(params: &BaseParams<T>) -> Self {
        let d = params.width();
        Self {
            weights: vec![Matrix::zeros(d, d); params.depth()],
            biases: vec![vec![T::zero(); d]; params.depth()],
            head: Matrix::zeros(params.output_dim(), d),
        }
    }
}

/// Per-layer LoRA factors for [`adapter_backprop`]; `None` leaves a layer unpatched.
pub type LayerFactors<'a, T> = Option<(&'a Matrix<T>, &'a Matrix<T>)>;

/// Loss `mean_batch ‖y - t‖²` and its gradients.
///
/// Factor gradients are accumulated into `factor_grad`, laid out like
/// [`crate::adapters::flatten_expert`]: per layer, `dA` row-major then `dB`
/// row-major (layers without factors are skipped). Base gradients go to
/// `base_grad` when supplied. Both accumulators are added to, not overwritten.
pub fn adapter_backprop<T: Scalar>(
    params: &BaseParams<T>,
    factors: &[LayerFactors<'_, T>],
    scaling: T,
    batch: &[&Example<T>],
    mut factor_grad: Option<&mut [T]>,
    mut base_grad: Option<&mut BaseGrads<T>>,
) -> T {
    let d = params.width();
    let depth = params.depth();
    let act = params.activation;
    debug_assert_eq!(factors.len(), depth);
    let offsets: Vec<usize> = {
        let mut off = 0;
        factors
            .iter()
            .map(|f| {
                let o = off;
                if let Some((a, _)) = f {
                    off += 2 * a.rows() * a.cols();
                }
                o
            })
            .collect()
    };
    let inv_b = T::one() / T::of(batch.len() as f64);
    let two_inv_b = T::of(2.0) * inv_b;
    let mut hs: Vec<Vec<T>> = vec![vec![T::zero(); d]; depth + 1];
    let mut us: Vec<Vec<T>> = factors
        .iter()
        .map(|f| vec![T::zero(); f.map_or(0, |(a, _)| a.cols())])
        .collect();
    let mut z = vec![T::zero(); d];
    let mut g_h = vec![T::zero(); d];
    let mut g_z = vec![T::zero(); d];
    let mut loss = T::zero();
    for ex in batch {
        hs[0].copy_from_slice(&ex.x);
        for l in 0..depth {
            let (before, after) = hs.split_at_mut(l + 1);
            let h = &before[l];
            params.layers[l].weight.matvec_into(h, &mut z);
            if let Some((a, b)) = factors[l] {
                b.matvec_t_into(h, &mut us[l]);
                let au = a.matvec(&us[l]);
                for i in 0..d {
                    z[i] += scaling * au[i];
                }
            }
            for i in 0..d {
                after[0][i] = act.apply(z[i] + params.layers[l].bias[i]);
            }
        }
        let y = params.head.matvec(&hs[depth]);
        let mut g_y = vec![T::zero(); y.len()];
        for k in 0..y.len() {
            let r = y[k] - ex.y[k];
            loss += r * r * inv_b;
            g_y[k] = two_inv_b * r;
        }
        if let Some(bg) = base_grad.as_deref_mut() {
            for k in 0..y.len() {
                let row = bg.head.row_mut(k);
                for i in 0..d {
                    row[i] += g_y[k] * hs[depth][i];
                }
            }
        }
        params.head.matvec_t_into(&g_y, &mut g_h);
        for l in (0..depth).rev() {
            let h_in = &hs[l];
            for i in 0..d {
                g_z[i] = g_h[i] * act.derivative_from_output(hs[l + 1][i]);
            }
            if let Some(bg) = base_grad.as_deref_mut() {
                let gw = &mut bg.weights[l];
                for i in 0..d {
                    let row = gw.row_mut(i);
                    for j in 0..d {
                        row[j] += g_z[i] * h_in[j];
                    }
                    bg.biases[l][i] += g_z[i];
                }
            }
            params.layers[l].weight.matvec_t_into(&g_z, &mut g_h);
            if let Some((a, b)) = factors[l] {
                let r = a.cols();
                let g_u: Vec<T> = a.matvec_t(&g_z).into_iter().map(|v| v * scaling).collect();
                if let Some(fg) = factor_grad.as_deref_mut() {
                    let off = offsets[l];
                    let (ga, gb) = fg[off..off + 2 * d * r].split_at_mut(d * r);
                    let u = &us[l];
                    for i in 0..d {
                        for c in 0..r {
                            ga[i * r + c] += scaling * g_z[i] * u[c];
                            gb[i * r + c] += h_in[i] * g_u[c];
                        }
                    }
                }
                let bgu = b.matvec(&g_u);
                for i in 0..d {
                    g_h[i] += bgu[i];
                }
            }
        }
    }
    loss
}

pub(crate) fn factor_refs<T>(e: &Expert<T>) -> Vec<LayerFactors<'_, T>> {
    e.adapters.iter().map(|ad| Some((&ad.a, &ad.b))).collect()
}

/// Pools the training splits of `data`.
pub fn pooled_train<'a, T>(data: &[&'a TaskDataset<T>]) -> Vec<&'a Example<T>> {
    data.iter().flat_map(|ds| ds.train.iter()).collect()
}

/// Trains LoRA factors on the union of the training splits of `data`.
///
/// Starts from `init` when given, otherwise from [`fresh_expert`] with
/// `cfg.init`. Only the factors move; the base model is untouched. The
/// returned expert is named `"expert"` with private provenance over the
/// datasets' task ids; callers rename as needed.
pub fn train_adapter<T: Scalar>(
    model: &ToyModel<T>,
    data: &[&TaskDataset<T>],
    cfg: &TrainConfig,
    init: Option<&Expert<T>>,
) -> Result<Expert<T>> {
    let provenance = Provenance::new(BuilderTag::Private, data.iter().map(|ds| ds.task_id).collect());
    train_adapter_on(model, &pooled_train(data), cfg, init, provenance)
}

/// [`train_adapter`] over an explicit example pool.
pub fn train_adapter_on<T: Scalar>(
    model: &ToyModel<T>,
    pool: &[&Example<T>],
    cfg: &TrainConfig,
    init: Option<&Expert<T>>,
    provenance: Provenance,
) -> Result<Expert<T>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let mut expert = match init {
        Some(e) => {
            model.check_expert(e)?;
            let mut e = e.clone();
            e.provenance = provenance;
            e
        }
        None => fresh_expert(model, &cfg.init, "expert", provenance)?,
    };
    let n_params = expert.shape().flat_len();
    let mut grad = vec![T::zero(); n_params];
    let mut opt = OptimizerState::new(cfg.optimizer, n_params);
    let mut sampler = BatchSampler::new(pool.len(), cfg.batch_size, cfg.seed);
    let scaling = expert.scaling();
    let mut batch = Vec::with_capacity(sampler.batch_size());
    for step in 0..cfg.steps {
        batch.clear();
        batch.extend(sampler.next_batch().iter().map(|&i| pool[i]));
        grad.iter_mut().for_each(|g| *g = T::zero());
        let loss = adapter_backprop(
            model.params(),
            &factor_refs(&expert),
            scaling,
            &batch,
            Some(&mut grad),
            None,
        );
        if !loss.is_finite() {
            return Err(ModelError::Divergence {
                step,
                loss: loss.as_f64(),
            });
        }
        let lr = T::of(lr_at(cfg.learning_rate, step, cfg.steps, cfg.warmup_fraction));
        apply_expert_update(&mut expert, &mut opt, &grad, lr);
    }
    if !expert_is_finite(&expert) {
        return Err(ModelError::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(expert)
}

/// One optimizer step on every factor of `e`, with `grad` in flatten layout.
pub fn apply_expert_update<T: Scalar>(e: &mut Expert<T>, opt: &mut OptimizerState<T>, grad: &[T], lr: T) {
    let mut off = 0;
    for ad in &mut e.adapters {
        let n = ad.a.rows() * ad.a.cols();
        opt.update(off, ad.a.as_mut_slice(), &grad[off..off + n], lr);
        off += n;
        opt.update(off, ad.b.as_mut_slice(), &grad[off..off + n], lr);
        off += n;
    }
}

pub fn expert_is_finite<T: Scalar>(e: &Expert<T>) -> bool {
    e.adapters.iter().all(|ad| ad.a.is_finite() && ad.b.is_finite())
}

/// Base-model pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_gain: f64,
    pub optimizer: OptimizerKind,
    pub warmup_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            init_gain: 1.2,
            optimizer: OptimizerKind::Momentum { beta: 0.9 },
            warmup_fraction: 0.05,
        }
    }
}

/// Random init followed by full-parameter SGD on the pooled training splits
/// of `data`, then frozen. Zero steps yields the frozen random init.
pub fn pretrain_base<T: Scalar>(
    arch: &Architecture,
    cfg: &PretrainConfig,
    data: &[&TaskDataset<T>],
) -> Result<ToyModel<T>> {
    pretrain_from(BaseParams::random(arch, cfg.init_gain, cfg.seed), cfg, data)
}

/// [`pretrain_base`] starting from given parameters instead of a random init.
pub fn pretrain_from<T: Scalar>(
    mut params: BaseParams<T>,
    cfg: &PretrainConfig,
    data: &[&TaskDataset<T>],
) -> Result<ToyModel<T>> {
    params.validate()?;
    let arch = &params.architecture();
    if cfg.steps == 0 {
        return ToyModel::freeze(params);
    }
    let pool = pooled_train(data);
    if pool.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let d = arch.width;
    if pool[0].x.len() != d || pool[0].y.len() != arch.output_dim {
        return Err(ModelError::Shape("data does not match the architecture".into()));
    }
    let n_params = arch.depth * (d * d + d) + arch.output_dim * d;
    let mut opt = OptimizerState::new(cfg.optimizer, n_params);
    let mut sampler = BatchSampler::new(pool.len(), cfg.batch_size, derive_train_seed(cfg.seed));
    let no_factors: Vec<LayerFactors<'_, T>> = vec![None; arch.depth];
    let mut batch = Vec::with_capacity(sampler.batch_size());
    for step in 0..cfg.steps {
        batch.clear();
        batch.extend(sampler.next_batch().iter().map(|&i| pool[i]));
        let mut g = BaseGrads::zeros(&params);
        let loss = adapter_backprop(&params, &no_factors, T::one(), &batch, None, Some(&mut g));
        if !loss.is_finite() {
            return Err(ModelError::Divergence {
                step,
                loss: loss.as_f64(),
            });
        }
        let lr = T::of(lr_at(cfg.learning_rate, step, cfg.steps, cfg.warmup_fraction));
        let mut off = 0;
        for (layer, (gw, gb)) in params.layers.iter_mut().zip(g.weights.iter().zip(&g.biases)) {
            opt.update(off, layer.weight.as_mut_slice(), gw.as_slice(), lr);
            off += d * d;
            opt.update(off, &mut layer.bias, gb, lr);
            off += d;
        }
        opt.update(off, params.head.as_mut_slice(), g.head.as_slice(), lr);
    }
    ToyModel::freeze(params)
}

fn derive_train_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, &[tags::BASE_TRAIN])
}
