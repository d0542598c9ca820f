//! A small frozen base model with patchable linear layers.
//!
//! The network is a residual-free MLP: `h_{l+1} = act(W_l h_l + b_l)` with
//! `h_0 = x`, followed by a bias-free linear head `y = H h_L`. Every layer's
//! linear transform can be patched by a LoRA adapter, either a fixed expert or
//! a per-layer routed combination of library experts.

mod train;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{combine_layer, Expert, Library};
use crate::linalg::Matrix;
use crate::rng::{tags, Rng};
use crate::scalar::Scalar;
use crate::synthtasks::Example;

pub use train::{
    adapter_backprop, apply_expert_update, expert_is_finite, fresh_expert, lr_at, pooled_train, pretrain_base,
    pretrain_from, train_adapter, train_adapter_on, AdapterInit, BaseGrads, BatchSampler, LayerFactors, OptimizerKind,
    OptimizerState, PretrainConfig, TrainConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("library was built on base model {library}, this model is {model}")]
    FingerprintMismatch { library: String, model: String },
    #[error("routing failed at layer {layer}: {message}")]
    Routing { layer: usize, message: String },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("no training data")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear network; used to check the trainer against closed-form solutions.
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Self::Tanh => z.tanh(),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, out: T) -> T {
        match self {
            Self::Tanh => T::one() - out * out,
            Self::Identity => T::one(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        }
    }
}

/// Network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Hidden width; also the input dimension.
    pub width: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 4,
            output_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Mutable parameters of the base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams<T> {
    pub layers: Vec<Layer<T>>,
    pub head: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> BaseParams<T> {
    /// Scaled orthogonal init `W = gain·Q`, zero bias, head `~ N(0, 1/d)`.
    pub fn random(arch: &Architecture, gain: f64, seed: u64) -> Self {
        let d = arch.width;
        let layers = (0..arch.depth)
            .map(|l| {
                let mut rng = Rng::stream(seed, &[tags::BASE_INIT, l as u64]);
                let g = Matrix::from_fn(d, d, |_, _| T::of(rng.normal()));
                let (q, _) = crate::linalg::qr_reduced(&g).expect("square gaussian matrix");
                Layer {
                    weight: q.scale(T::of(gain)),
                    bias: vec![T::zero(); d],
                }
            })
            .collect();
        let mut rng = Rng::stream(seed, &[tags::BASE_INIT, u64::MAX]);
        let head_sd = 1.0 / (d as f64).sqrt();
        let head = Matrix::from_fn(arch.output_dim, d, |_, _| T::of(head_sd * rng.normal()));
        Self {
            layers,
            head,
            activation: arch.activation,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            width: self.width(),
            depth: self.depth(),
            output_dim: self.output_dim(),
            activation: self.activation,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.head.cols()
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.head.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.layers.is_empty() {
            return Err(ModelError::Shape("model has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.shape() != (d, d) || layer.bias.len() != d {
                return Err(ModelError::Shape(format!("layer {l} is not {d}x{d}")));
            }
        }
        Ok(())
    }

    /// Forward pass where layer `l` uses `W_l + deltas[l]`.
    pub fn forward_with_deltas(&self, x: &[T], deltas: &[Matrix<T>]) -> Vec<T> {
        let mut h = x.to_vec();
        let mut z = vec![T::zero(); self.width()];
        for (layer, delta) in self.layers.iter().zip(deltas) {
            layer.weight.matvec_into(&h, &mut z);
            let extra = delta.matvec(&h);
            for i in 0..z.len() {
                h[i] = self.activation.apply(z[i] + extra[i] + layer.bias[i]);
            }
        }
        self.head.matvec(&h)
    }

    fn for_each_value(&self, mut f: impl FnMut(T)) {
        for layer in &self.layers {
            layer.weight.as_slice().iter().copied().for_each(&mut f);
            layer.bias.iter().copied().for_each(&mut f);
        }
        self.head.as_slice().iter().copied().for_each(&mut f);
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_value(|v| ok &= v.is_finite());
        ok
    }

    /// SHA-256 over the architecture and the f32 little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.activation.as_str().as_bytes());
        for n in [self.width(), self.depth(), self.output_dim()] {
            h.update((n as u64).to_le_bytes());
        }
        self.for_each_value(|v| h.update((v.as_f64() as f32).to_le_bytes()));
        hex::encode(h.finalize())
    }
}

/// Per-layer hidden states of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace<T> {
    /// `layers[l]` is the pre-adapter input `h_l` of layer `l`.
    pub layers: Vec<Vec<T>>,
    /// `h_L`, the representation fed to the head.
    pub features: Vec<T>,
}

/// What a routed layer sees when asking for expert weights.
#[derive(Debug, Clone, Copy)]
pub struct RouteQuery<'a, T> {
    pub layer: usize,
    pub hidden: &'a [T],
    pub input: &'a [T],
    pub task_id: Option<usize>,
}

/// Per-layer expert weights for a routed forward pass.
pub trait LayerRouter<T>: Sync {
    fn layer_weights(&self, query: &RouteQuery<'_, T>) -> std::result::Result<Vec<T>, String>;
}

/// Fixed weights, optionally different per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRouting<T> {
    pub per_layer: Vec<Vec<T>>,
}

impl<T: Scalar> StaticRouting<T> {
    pub fn uniform_layers(weights: Vec<T>, depth: usize) -> Self {
        Self {
            per_layer: vec![weights; depth],
        }
    }
}

impl<T: Scalar> LayerRouter<T> for StaticRouting<T> {
    fn layer_weights(&self, q: &RouteQuery<'_, T>) -> std::result::Result<Vec<T>, String> {
        self.per_layer
            .get(q.layer)
            .cloned()
            .ok_or_else(|| format!("no weights for layer {}", q.layer))
    }
}

/// Which adapters patch the base model during a forward pass.
#[derive(Clone, Copy)]
pub enum AdapterSource<'a, T> {
    None,
    Expert(&'a Expert<T>),
    Routed {
        library: &'a Library<T>,
        router: &'a dyn LayerRouter<T>,
    },
}

/// Mean squared error (summed over output dimensions) and the matching
/// unit-variance Gaussian average log-likelihood `-mse / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub avg_log_likelihood: f64,
    pub n: usize,
}

/// Frozen base model. Parameters are rounded to f32 when frozen, so a saved
/// checkpoint reloads to exactly the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    params: BaseParams<T>,
    fingerprint: String,
}

impl<T: Scalar> ToyModel<T> {
    pub fn freeze(mut params: BaseParams<T>) -> Result<Self> {
        params.validate()?;
        if !params.is_finite() {
            return Err(ModelError::InvalidConfig("non-finite base parameters".into()));
        }
        for layer in &mut params.layers {
            snap(layer.weight.as_mut_slice());
            snap(&mut layer.bias);
        }
        snap(params.head.as_mut_slice());
        let fingerprint = params.fingerprint();
        Ok(Self { params, fingerprint })
    }

    pub fn params(&self) -> &BaseParams<T> {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn width(&self) -> usize {
        self.params.width()
    }

    pub fn depth(&self) -> usize {
        self.params.depth()
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim()
    }

    pub fn architecture(&self) -> Architecture {
        self.params.architecture()
    }

    /// Errors unless `lib` was built on this model.
    pub fn check_library(&self, lib: &Library<T>) -> Result<()> {
        if lib.base_model_fingerprint != self.fingerprint {
            return Err(ModelError::FingerprintMismatch {
                library: lib.base_model_fingerprint.clone(),
                model: self.fingerprint.clone(),
            });
        }
        self.check_expert(&lib.experts[0])
    }

    /// Errors unless `e` patches exactly layers `0..depth` at this width.
    pub fn check_expert(&self, e: &Expert<T>) -> Result<()> {
        let shape = e.shape();
        if shape.dim != self.width() || shape.layer_ids != (0..self.depth()).collect::<Vec<_>>() {
            return Err(ModelError::Shape(format!(
                "expert {} patches layers {:?} at width {}, model has {} layers of width {}",
                e.name,
                shape.layer_ids,
                shape.dim,
                self.depth(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Runs the network, patching each layer according to `source`.
    ///
    /// A routed layer asks the router for weights given its pre-adapter hidden
    /// state, then uses the weighted factor combination of the library experts.
    pub fn forward(
        &self,
        source: &AdapterSource<'_, T>,
        x: &[T],
        task_id: Option<usize>,
    ) -> Result<(Vec<T>, HiddenTrace<T>)> {
        let d = self.width();
        if x.len() != d {
            return Err(ModelError::Shape(format!(
                "input has {} values, model width is {d}",
                x.len()
            )));
        }
        match source {
            AdapterSource::None => {}
            AdapterSource::Expert(e) => self.check_expert(e)?,
            AdapterSource::Routed { library, .. } => self.check_library(library)?,
        }
        let mut h = x.to_vec();
        let mut z = vec![T::zero(); d];
        let mut trace = Vec::with_capacity(self.depth());
        for (l, layer) in self.params.layers.iter().enumerate() {
            layer.weight.matvec_into(&h, &mut z);
            let factors: Option<(Cow<'_, Matrix<T>>, Cow<'_, Matrix<T>>, T)> = match source {
                AdapterSource::None => None,
                AdapterSource::Expert(e) => {
                    let ad = &e.adapters[l];
                    Some((Cow::Borrowed(&ad.a), Cow::Borrowed(&ad.b), ad.scaling))
                }
                AdapterSource::Routed { library, router } => {
                    let query = RouteQuery {
                        layer: l,
                        hidden: &h,
                        input: x,
                        task_id,
                    };
                    let w = router
                        .layer_weights(&query)
                        .map_err(|message| ModelError::Routing { layer: l, message })?;
                    if w.len() != library.len() {
                        return Err(ModelError::Routing {
                            layer: l,
                            message: format!("{} weights for {} experts", w.len(), library.len()),
                        });
                    }
                    let refs = library.expert_refs();
                    let (a, b) = combine_layer(&refs, l, &w);
                    Some((Cow::Owned(a), Cow::Owned(b), library.scaling))
                }
            };
            if let Some((a, b, s)) = factors {
                let u = b.matvec_t(&h);
                let au = a.matvec(&u);
                for i in 0..d {
                    z[i] += s * au[i];
                }
            }
            let act = self.params.activation;
            let next: Vec<T> = z.iter().zip(&layer.bias).map(|(&zi, &bi)| act.apply(zi + bi)).collect();
            trace.push(std::mem::replace(&mut h, next));
        }
        let y = self.params.head.matvec(&h);
        Ok((
            y,
            HiddenTrace {
                layers: trace,
                features: h,
            },
        ))
    }

    /// Base-model hidden states, no adapters.
    pub fn trace(&self, x: &[T]) -> Result<HiddenTrace<T>> {
        Ok(self.forward(&AdapterSource::None, x, None)?.1)
    }

    pub fn predict(&self, source: &AdapterSource<'_, T>, x: &[T], task_id: Option<usize>) -> Result<Vec<T>> {
        Ok(self.forward(source, x, task_id)?.0)
    }
}

fn snap<T: Scalar>(values: &mut [T]) {
    for v in values {
        *v = v.snap_f32();
    }
}

/// `‖y - ŷ‖²` accumulated in f64.
pub fn squared_error<T: Scalar>(y: &[T], yhat: &[T]) -> f64 {
    y.iter()
        .zip(yhat)
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum()
}

/// Mean squared error and average log-likelihood of `source` on `examples`.
pub fn evaluate<T: Scalar>(
    model: &ToyModel<T>,
    source: &AdapterSource<'_, T>,
    examples: &[Example<T>],
    task_id: Option<usize>,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let mut total = 0.0;
    for ex in examples {
        let yhat = model.predict(source, &ex.x, task_id)?;
        total += squared_error(&ex.y, &yhat);
    }
    let mse = total / examples.len() as f64;
    Ok(Metrics {
        mse,
        avg_log_likelihood: -0.5 * mse,
        n: examples.len(),
    })
}
