//! Dense linear-algebra kernels: a row-major matrix, QR/SVD factorizations,
//! the factored low-rank SVD, cosine similarity, seeded k-means.

mod cluster;
mod decomp;
mod matrix;

pub use cluster::{adjusted_rand_index, cosine_similarity_matrix, kmeans, ClusterAssignment, SimilarityMatrix};
pub use decomp::{low_rank_svd, qr_reduced, svd_reduce, svd_reduce_with_basis, thin_svd, SvdResult};
pub use matrix::Matrix;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("vector {index} has zero norm; cosine similarity is undefined")]
    ZeroVector { index: usize },
    #[error("requested k = {k} is outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("max_iters must be at least 1")]
    NoIterations,
    #[error("empty input")]
    Empty,
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;
