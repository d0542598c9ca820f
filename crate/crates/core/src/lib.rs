//! Libraries of low-rank adapters over a small frozen base model: building them
//! (private, shared, clustered by adapter similarity, Poly), routing inputs
//! across them (uniform, Arrow, centroid matching, task predictor, oracle,
//! supervised merging), and the experiments that measure all of the above on
//! synthetic multi-task benchmarks with planted cluster structure.

pub mod adapters;
pub mod evalharness;
pub mod librarian;
pub mod libstore;
pub mod linalg;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod synthtasks;
pub mod toymodel;

pub use scalar::Scalar;
