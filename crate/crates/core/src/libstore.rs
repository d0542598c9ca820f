//! On-disk persistence for base models, libraries, prototype banks and task
//! datasets, plus the flat `key=value` configuration format used by the CLI.
//!
//! Every artifact is a directory holding a JSON `manifest.json` and raw tensor
//! blobs under `tensors/`. A blob is
//!
//! ```text
//! "MLIB" | version: u16 | dtype: u8 (1 = f32) | ndim: u8 | dims: u32 x ndim | payload: f32 x prod(dims)
//! ```
//!
//! with every integer and float little-endian and the payload row-major.
//! Values are held as `f64` in memory and truncated to `f32` on disk.
//!
//! The manifest's `content_hash` is the SHA-256 of the manifest serialized
//! with an empty hash field, followed by each referenced blob's relative path
//! and bytes in manifest order. Loading recomputes and checks it.
//!
//! Saves take an exclusive advisory lock on `<dir>/.lock`; loads take a shared
//! one, so concurrent readers of a finished artifact do not block each other.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{AdapterError, BuilderTag, Expert, Library, LoraAdapter, Provenance};
use crate::linalg::{ClusterAssignment, Matrix};
use crate::router::{PrototypeBank, PrototypeSource};
use crate::scalar::Scalar;
use crate::synthtasks::{generate_benchmark, Benchmark, BenchmarkConfig, Example, SynthError, TaskDataset};
use crate::toymodel::{Architecture, BaseParams, Layer, ModelError, ToyModel};

/// Blob magic bytes.
pub const MAGIC: &[u8; 4] = b"MLIB";
/// Blob and manifest format version written by this build.
pub const FORMAT_VERSION: u16 = 1;
/// Blob dtype tag for little-endian `f32`.
pub const DTYPE_F32: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const TENSOR_DIR: &str = "tensors";
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MODLIB_OUT";
/// Output root used when neither `--out` nor `MODLIB_OUT` is set.
pub const DEFAULT_OUT: &str = "modlib-out";

const HEADER_FIXED: usize = 4 + 2 + 1 + 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("content hash mismatch: manifest records {expected}, contents hash to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("not a tensor blob (bad magic)")]
    BadMagic,
    #[error("truncated blob: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor {path}: expected shape {expected:?}, found {actual:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("artifact is a {actual}, expected a {expected}")]
    WrongKind { expected: &'static str, actual: String },
    #[error("invalid artifact: {0}")]
    Invalid(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("config key {key}: cannot parse {value:?}")]
    ConfigValue { key: String, value: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A dense `f32` tensor in the blob format.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(StoreError::Invalid(format!("dims {dims:?} do not fit the blob header")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(StoreError::Invalid(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn from_vector<T: Scalar>(v: &[T]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|x| x.as_f64() as f32).collect(),
        }
    }

    /// Stacks equal-length rows into a 2-D blob; `width` fixes the shape when there are no rows.
    pub fn from_rows<T: Scalar>(rows: &[&[T]], width: usize) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().map(|x| x.as_f64() as f32)).collect();
        Self {
            dims: vec![rows.len(), width],
            data,
        }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        let [r, c] = self.dims[..] else {
            return Err(StoreError::Invalid(format!(
                "expected a 2-D tensor, found dims {:?}",
                self.dims
            )));
        };
        Matrix::from_vec(r, c, self.values()).map_err(|e| StoreError::Invalid(e.to_string()))
    }

    pub fn to_vector<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dims.len() != 1 {
            return Err(StoreError::Invalid(format!(
                "expected a 1-D tensor, found dims {:?}",
                self.dims
            )));
        }
        Ok(self.values())
    }

    fn values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::of(v as f64)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_FIXED {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(StoreError::BadMagic);
            }
            return Err(StoreError::Truncated {
                expected: HEADER_FIXED,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        if bytes[6] != DTYPE_F32 {
            return Err(StoreError::UnsupportedDtype(bytes[6]));
        }
        let ndim = bytes[7] as usize;
        let header = HEADER_FIXED + 4 * ndim;
        if bytes.len() < header {
            return Err(StoreError::Truncated {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| StoreError::Invalid(format!("dims {dims:?} overflow")))?;
        let expected = n
            .checked_mul(4)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| StoreError::Invalid(format!("dims {dims:?} overflow")))?;
        if bytes.len() != expected {
            return Err(StoreError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

/// A manifest type stored as `manifest.json` next to its blobs.
trait Manifest: Serialize + DeserializeOwned {
    const KIND: &'static str;
    fn header(&self) -> &Header;
    fn header_mut(&mut self) -> &mut Header;
    /// Relative blob paths in hashing order.
    fn blob_paths(&self) -> Vec<&str>;
}

/// Fields common to every manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u16,
    pub kind: String,
    #[serde(default)]
    pub content_hash: String,
}

impl Header {
    fn new(kind: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            content_hash: String::new(),
        }
    }
}

/// Only the header, for dispatching on the artifact kind.
#[derive(Debug, Deserialize)]
struct HeaderOnly {
    #[serde(flatten)]
    header: Header,
}

fn manifest_bytes<M: Manifest>(m: &M) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(m).expect("manifest types serialize infallibly");
    v.push(b'\n');
    v
}

fn compute_hash<M: Manifest + Clone>(m: &M, blobs: &BTreeMap<String, Vec<u8>>) -> Result<String> {
    let mut bare = m.clone();
    bare.header_mut().content_hash.clear();
    let mut h = Sha256::new();
    h.update(manifest_bytes(&bare));
    for p in m.blob_paths() {
        let bytes = blobs
            .get(p)
            .ok_or_else(|| StoreError::Invalid(format!("manifest references missing tensor {p}")))?;
        h.update(p.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Advisory lock on `<dir>/.lock`, released on drop.
struct DirLock(File);

impl DirLock {
    fn exclusive(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        Ok(Self(f))
    }

    /// Shared lock; `None` when the directory has no lock file (it was never saved by this module).
    fn shared(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(LOCK_FILE);
        match File::open(&path) {
            Ok(f) => {
                f.lock_shared().map_err(io_err(&path))?;
                Ok(Some(Self(f)))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

/// Writes `blobs` and the hashed manifest into `dir`, replacing any previous tensors.
fn save_artifact<M: Manifest + Clone>(dir: &Path, mut manifest: M, blobs: BTreeMap<String, Vec<u8>>) -> Result<M> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let _lock = DirLock::exclusive(dir)?;
    manifest.header_mut().content_hash = compute_hash(&manifest, &blobs)?;
    let tensor_root = dir.join(TENSOR_DIR);
    if tensor_root.exists() {
        fs::remove_dir_all(&tensor_root).map_err(io_err(&tensor_root))?;
    }
    for (rel, bytes) in &blobs {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&manifest_bytes(&manifest)).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    let target = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &target).map_err(io_err(&target))?;
    Ok(manifest)
}

fn read_header(dir: &Path) -> Result<Header> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let h: HeaderOnly = serde_json::from_slice(&text).map_err(|source| StoreError::Json { path, source })?;
    if h.header.format_version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(h.header.format_version));
    }
    Ok(h.header)
}

/// Artifact kind recorded in `<dir>/manifest.json` (`library`, `model`, `prototypes` or `datasets`).
pub fn artifact_kind(dir: &Path) -> Result<String> {
    Ok(read_header(dir)?.kind)
}

/// Reads, verifies and decodes an artifact. Returns the manifest and its blobs by relative path.
fn load_artifact<M: Manifest + Clone>(dir: &Path) -> Result<(M, BTreeMap<String, TensorBlob>)> {
    let _lock = DirLock::shared(dir)?;
    let header = read_header(dir)?;
    if header.kind != M::KIND {
        return Err(StoreError::WrongKind {
            expected: M::KIND,
            actual: header.kind,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let manifest: M = serde_json::from_slice(&text).map_err(|source| StoreError::Json { path, source })?;
    let mut raw = BTreeMap::new();
    for rel in manifest.blob_paths() {
        if Path::new(rel).is_absolute() || rel.split('/').any(|c| c == "..") {
            return Err(StoreError::Invalid(format!(
                "tensor path {rel} escapes the artifact directory"
            )));
        }
        let p = dir.join(rel);
        raw.insert(rel.to_string(), fs::read(&p).map_err(io_err(&p))?);
    }
    let actual = compute_hash(&manifest, &raw)?;
    if actual != manifest.header().content_hash {
        return Err(StoreError::HashMismatch {
            expected: manifest.header().content_hash.clone(),
            actual,
        });
    }
    let blobs = raw
        .into_iter()
        .map(|(k, v)| TensorBlob::from_bytes(&v).map(|b| (k, b)))
        .collect::<Result<_>>()?;
    Ok((manifest, blobs))
}

fn take<'a>(blobs: &'a BTreeMap<String, TensorBlob>, path: &str, dims: &[usize]) -> Result<&'a TensorBlob> {
    let b = &blobs[path];
    if b.dims != dims {
        return Err(StoreError::Shape {
            path: path.to_string(),
            expected: dims.to_vec(),
            actual: b.dims.clone(),
        });
    }
    Ok(b)
}

#[derive(Default)]
struct BlobWriter(BTreeMap<String, Vec<u8>>);

impl BlobWriter {
    fn put(&mut self, rel: String, blob: TensorBlob) -> String {
        self.0.insert(rel.clone(), blob.to_bytes());
        rel
    }
}

// ---------------------------------------------------------------------------
// Libraries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: usize,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub name: String,
    pub provenance: Provenance,
    pub layers: Vec<LayerEntry>,
}

/// Manifest of a saved [`Library`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    #[serde(flatten)]
    pub header: Header,
    pub base_model_fingerprint: String,
    pub dim: usize,
    pub rank: usize,
    pub scaling: f64,
    pub builder: BuilderTag,
    pub build_seed: u64,
    pub experts: Vec<ExpertEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_assignment: Option<ClusterAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill_tasks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill_routing: Option<String>,
}

impl Manifest for LibraryManifest {
    const KIND: &'static str = "library";

    fn header(&self) -> &Header {
        &self.header
    }

    fn header_mut(&mut self) -> &mut Header {
        &mut self.header
    }

    fn blob_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .experts
            .iter()
            .flat_map(|e| e.layers.iter().flat_map(|l| [l.a.as_str(), l.b.as_str()]))
            .collect();
        out.extend(self.skill_routing.as_deref());
        out
    }
}

/// Saves `lib` under `dir`. Returns the written manifest.
pub fn save_library<T: Scalar>(lib: &Library<T>, dir: &Path) -> Result<LibraryManifest> {
    let mut w = BlobWriter::default();
    let experts = lib
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| ExpertEntry {
            name: e.name.clone(),
            provenance: e.provenance.clone(),
            layers: e
                .adapters
                .iter()
                .map(|ad| LayerEntry {
                    layer_id: ad.layer_id,
                    a: w.put(
                        format!("{TENSOR_DIR}/expert_{i:04}/layer_{}_a.mlib", ad.layer_id),
                        TensorBlob::from_matrix(&ad.a),
                    ),
                    b: w.put(
                        format!("{TENSOR_DIR}/expert_{i:04}/layer_{}_b.mlib", ad.layer_id),
                        TensorBlob::from_matrix(&ad.b),
                    ),
                })
                .collect(),
        })
        .collect();
    let skill_routing = lib
        .skill_routing
        .as_ref()
        .map(|z| w.put(format!("{TENSOR_DIR}/skill_routing.mlib"), TensorBlob::from_matrix(z)));
    let manifest = LibraryManifest {
        header: Header::new(LibraryManifest::KIND),
        base_model_fingerprint: lib.base_model_fingerprint.clone(),
        dim: lib.experts[0].adapters[0].dim(),
        rank: lib.rank,
        scaling: lib.scaling.as_f64(),
        builder: lib.builder,
        build_seed: lib.build_seed,
        experts,
        cluster_assignment: lib.cluster_assignment.clone(),
        skill_tasks: lib.skill_tasks.clone(),
        skill_routing,
    };
    save_artifact(dir, manifest, w.0)
}

/// Loads and verifies a library saved by [`save_library`].
pub fn load_library<T: Scalar>(dir: &Path) -> Result<Library<T>> {
    load_library_with_manifest(dir).map(|(lib, _)| lib)
}

pub fn load_library_with_manifest<T: Scalar>(dir: &Path) -> Result<(Library<T>, LibraryManifest)> {
    let (m, blobs) = load_artifact::<LibraryManifest>(dir)?;
    let shape = [m.dim, m.rank];
    let scaling = T::of(m.scaling);
    let experts = m
        .experts
        .iter()
        .map(|e| {
            let adapters = e
                .layers
                .iter()
                .map(|l| {
                    let a = take(&blobs, &l.a, &shape)?.to_matrix()?;
                    let b = take(&blobs, &l.b, &shape)?.to_matrix()?;
                    Ok(LoraAdapter::with_any_scaling(l.layer_id, a, b, scaling)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Expert::new(e.name.clone(), adapters, e.provenance.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lib = Library::new(experts, m.base_model_fingerprint.clone(), m.builder, m.build_seed)?;
    lib.cluster_assignment = m.cluster_assignment.clone();
    lib.skill_tasks = m.skill_tasks.clone();
    lib.skill_routing = match (&m.skill_routing, &m.skill_tasks) {
        (Some(p), Some(tasks)) => Some(take(&blobs, p, &[tasks.len(), lib.len()])?.to_matrix()?),
        (None, None) => None,
        _ => {
            return Err(StoreError::Invalid(
                "skill_routing and skill_tasks must be present together".into(),
            ))
        }
    };
    Ok((lib, m))
}

// ---------------------------------------------------------------------------
// Base models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayerEntry {
    pub weight: String,
    pub bias: String,
}

/// Manifest of a saved frozen base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(flatten)]
    pub header: Header,
    pub architecture: Architecture,
    pub fingerprint: String,
    pub layers: Vec<ModelLayerEntry>,
    pub head: String,
}

impl Manifest for ModelManifest {
    const KIND: &'static str = "model";

    fn header(&self) -> &Header {
        &self.header
    }

    fn header_mut(&mut self) -> &mut Header {
        &mut self.header
    }

    fn blob_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_str(), l.bias.as_str()])
            .collect();
        out.push(&self.head);
        out
    }
}

pub fn save_model<T: Scalar>(model: &ToyModel<T>, dir: &Path) -> Result<ModelManifest> {
    let p = model.params();
    let mut w = BlobWriter::default();
    let layers = p
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| ModelLayerEntry {
            weight: w.put(
                format!("{TENSOR_DIR}/layer_{l}_weight.mlib"),
                TensorBlob::from_matrix(&layer.weight),
            ),
            bias: w.put(
                format!("{TENSOR_DIR}/layer_{l}_bias.mlib"),
                TensorBlob::from_vector(&layer.bias),
            ),
        })
        .collect();
    let head = w.put(format!("{TENSOR_DIR}/head.mlib"), TensorBlob::from_matrix(&p.head));
    let manifest = ModelManifest {
        header: Header::new(ModelManifest::KIND),
        architecture: model.architecture(),
        fingerprint: model.fingerprint().to_string(),
        layers,
        head,
    };
    save_artifact(dir, manifest, w.0)
}

/// Loads a base model and checks its fingerprint against the manifest.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<ToyModel<T>> {
    let (m, blobs) = load_artifact::<ModelManifest>(dir)?;
    let arch = m.architecture;
    if m.layers.len() != arch.depth {
        return Err(StoreError::Invalid(format!(
            "{} layers for depth {}",
            m.layers.len(),
            arch.depth
        )));
    }
    let d = arch.width;
    let layers = m
        .layers
        .iter()
        .map(|l| {
            Ok(Layer {
                weight: take(&blobs, &l.weight, &[d, d])?.to_matrix()?,
                bias: take(&blobs, &l.bias, &[d])?.to_vector()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = BaseParams {
        layers,
        head: take(&blobs, &m.head, &[arch.output_dim, d])?.to_matrix()?,
        activation: arch.activation,
    };
    let model = ToyModel::freeze(params)?;
    if model.fingerprint() != m.fingerprint {
        return Err(StoreError::Invalid(format!(
            "model fingerprint {} does not match manifest {}",
            model.fingerprint(),
            m.fingerprint
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Prototype banks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeManifest {
    #[serde(flatten)]
    pub header: Header,
    pub source: PrototypeSource,
    /// Content hash of the library the prototypes were computed from.
    pub library_hash: String,
    pub layers: Vec<String>,
}

impl Manifest for PrototypeManifest {
    const KIND: &'static str = "prototypes";

    fn header(&self) -> &Header {
        &self.header
    }

    fn header_mut(&mut self) -> &mut Header {
        &mut self.header
    }

    fn blob_paths(&self) -> Vec<&str> {
        self.layers.iter().map(String::as_str).collect()
    }
}

/// Saves a prototype bank computed from the library with content hash `library_hash`.
pub fn save_prototypes<T: Scalar>(
    bank: &PrototypeBank<T>,
    library_hash: &str,
    dir: &Path,
) -> Result<PrototypeManifest> {
    let mut w = BlobWriter::default();
    let layers = bank
        .layers
        .iter()
        .enumerate()
        .map(|(l, m)| w.put(format!("{TENSOR_DIR}/layer_{l}.mlib"), TensorBlob::from_matrix(m)))
        .collect();
    let manifest = PrototypeManifest {
        header: Header::new(PrototypeManifest::KIND),
        source: bank.source,
        library_hash: library_hash.to_string(),
        layers,
    };
    save_artifact(dir, manifest, w.0)
}

pub fn load_prototypes<T: Scalar>(dir: &Path) -> Result<(PrototypeBank<T>, PrototypeManifest)> {
    let (m, blobs) = load_artifact::<PrototypeManifest>(dir)?;
    let layers = m
        .layers
        .iter()
        .map(|p| blobs[p].to_matrix())
        .collect::<Result<Vec<Matrix<T>>>>()?;
    if layers.windows(2).any(|w| w[0].shape() != w[1].shape()) {
        return Err(StoreError::Invalid("prototype layers differ in shape".into()));
    }
    Ok((
        PrototypeBank {
            source: m.source,
            layers,
        },
        m,
    ))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub x: String,
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: usize,
    pub cluster_id: usize,
    pub train: SplitEntry,
    pub valid: SplitEntry,
    pub test: SplitEntry,
}

/// Manifest of saved task datasets, optionally with the benchmark config that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub header: Header,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkConfig>,
    pub train_tasks: Vec<usize>,
    pub heldout_tasks: Vec<usize>,
    pub tasks: Vec<TaskEntry>,
}

impl Manifest for DatasetManifest {
    const KIND: &'static str = "datasets";

    fn header(&self) -> &Header {
        &self.header
    }

    fn header_mut(&mut self) -> &mut Header {
        &mut self.header
    }

    fn blob_paths(&self) -> Vec<&str> {
        self.tasks
            .iter()
            .flat_map(|t| {
                [&t.train, &t.valid, &t.test]
                    .into_iter()
                    .flat_map(|s| [s.x.as_str(), s.y.as_str()])
            })
            .collect()
    }
}

fn dims_of<T>(datasets: &[TaskDataset<T>]) -> Result<(usize, usize)> {
    let first = datasets
        .iter()
        .flat_map(|d| d.train.iter().chain(&d.valid).chain(&d.test))
        .next()
        .ok_or_else(|| StoreError::Invalid("no examples to save".into()))?;
    Ok((first.x.len(), first.y.len()))
}

/// Saves a whole benchmark: its config, the train/held-out partition and every dataset.
pub fn save_benchmark<T: Scalar>(bench: &Benchmark<T>, dir: &Path) -> Result<DatasetManifest> {
    save_datasets_inner(
        &bench.datasets,
        Some(bench.config),
        &bench.train_tasks,
        &bench.heldout_tasks,
        dir,
    )
}

/// Saves bare datasets; all tasks are listed as training tasks.
pub fn save_datasets<T: Scalar>(datasets: &[TaskDataset<T>], dir: &Path) -> Result<DatasetManifest> {
    let ids: Vec<usize> = datasets.iter().map(|d| d.task_id).collect();
    save_datasets_inner(datasets, None, &ids, &[], dir)
}

fn save_datasets_inner<T: Scalar>(
    datasets: &[TaskDataset<T>],
    config: Option<BenchmarkConfig>,
    train_tasks: &[usize],
    heldout_tasks: &[usize],
    dir: &Path,
) -> Result<DatasetManifest> {
    let (din, dout) = dims_of(datasets)?;
    let mut w = BlobWriter::default();
    let mut split = |t: usize, name: &str, ex: &[Example<T>]| -> Result<SplitEntry> {
        if ex.iter().any(|e| e.x.len() != din || e.y.len() != dout) {
            return Err(StoreError::Invalid(format!("task {t} {name}: ragged examples")));
        }
        let xs: Vec<&[T]> = ex.iter().map(|e| e.x.as_slice()).collect();
        let ys: Vec<&[T]> = ex.iter().map(|e| e.y.as_slice()).collect();
        Ok(SplitEntry {
            x: w.put(
                format!("{TENSOR_DIR}/task_{t:04}/{name}_x.mlib"),
                TensorBlob::from_rows(&xs, din),
            ),
            y: w.put(
                format!("{TENSOR_DIR}/task_{t:04}/{name}_y.mlib"),
                TensorBlob::from_rows(&ys, dout),
            ),
        })
    };
    let tasks = datasets
        .iter()
        .map(|d| {
            Ok(TaskEntry {
                task_id: d.task_id,
                cluster_id: d.cluster_id,
                train: split(d.task_id, "train", &d.train)?,
                valid: split(d.task_id, "valid", &d.valid)?,
                test: split(d.task_id, "test", &d.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        header: Header::new(DatasetManifest::KIND),
        input_dim: din,
        output_dim: dout,
        benchmark: config,
        train_tasks: train_tasks.to_vec(),
        heldout_tasks: heldout_tasks.to_vec(),
        tasks,
    };
    save_artifact(dir, manifest, w.0)
}

pub fn load_datasets<T: Scalar>(dir: &Path) -> Result<(Vec<TaskDataset<T>>, DatasetManifest)> {
    let (m, blobs) = load_artifact::<DatasetManifest>(dir)?;
    let split = |s: &SplitEntry| -> Result<Vec<Example<T>>> {
        let x = blobs[&s.x].to_matrix::<T>()?;
        let y = blobs[&s.y].to_matrix::<T>()?;
        if x.cols() != m.input_dim || y.cols() != m.output_dim || x.rows() != y.rows() {
            return Err(StoreError::Invalid(format!(
                "split {} / {} has inconsistent shapes",
                s.x, s.y
            )));
        }
        Ok((0..x.rows())
            .map(|i| Example {
                x: x.row(i).to_vec(),
                y: y.row(i).to_vec(),
            })
            .collect())
    };
    let datasets = m
        .tasks
        .iter()
        .map(|t| {
            Ok(TaskDataset {
                task_id: t.task_id,
                cluster_id: t.cluster_id,
                train: split(&t.train)?,
                valid: split(&t.valid)?,
                test: split(&t.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((datasets, m))
}

/// Loads a benchmark saved by [`save_benchmark`]. Teachers and the reference
/// network are regenerated from the stored config; the datasets are the stored
/// (`f32`-precision) ones.
pub fn load_benchmark<T: Scalar>(dir: &Path) -> Result<Benchmark<T>> {
    let (datasets, m) = load_datasets::<T>(dir)?;
    let config = m
        .benchmark
        .ok_or_else(|| StoreError::Invalid("datasets were saved without a benchmark config".into()))?;
    let mut bench = generate_benchmark::<T>(&config)?;
    let ids: Vec<usize> = datasets.iter().map(|d| d.task_id).collect();
    let expected: Vec<usize> = bench.datasets.iter().map(|d| d.task_id).collect();
    if ids != expected || m.train_tasks != bench.train_tasks || m.heldout_tasks != bench.heldout_tasks {
        return Err(StoreError::Invalid(
            "stored task partition does not match the benchmark config".into(),
        ));
    }
    bench.datasets = datasets;
    Ok(bench)
}

// ---------------------------------------------------------------------------
// key=value configuration

/// Flat `key = value` configuration. Keys are namespaced with dots
/// (`bench.n_clusters`); `#` starts a comment; later entries override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for KvConfig {
    type Err = StoreError;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| StoreError::Config {
                line: i + 1,
                message: format!("expected key=value, found {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.chars().any(char::is_whitespace) {
                return Err(StoreError::Config {
                    line: i + 1,
                    message: format!("invalid key {k:?}"),
                });
            }
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(Self { entries })
    }
}

impl KvConfig {
    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path).map_err(io_err(path))?.parse()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse().map_err(|_| StoreError::ConfigValue {
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .transpose()
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn apply<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// `explicit`, else `$MODLIB_OUT`, else `modlib-out`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
    }
}

/// SHA-256 over every file under `dir` (relative path and bytes, sorted by path).
/// Two directories with equal digests hold byte-identical trees.
pub fn directory_digest(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let path = entry.path();
            if entry.file_type().map_err(io_err(&path))?.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
