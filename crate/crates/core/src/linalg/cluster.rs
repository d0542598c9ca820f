use serde::{Deserialize, Serialize};

use super::{LinalgError, Matrix, Result};
use crate::rng::Rng;
use crate::scalar::{dot, norm, Scalar};

/// Symmetric matrix of pairwise cosine similarities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.values
    }

    /// Mean of the strictly upper-triangular entries; `None` for fewer than two items.
    pub fn mean_off_diagonal(&self) -> Option<T> {
        let n = self.n();
        if n < 2 {
            return None;
        }
        let mut acc = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                acc += self.values[(i, j)];
            }
        }
        Some(acc / T::of((n * (n - 1) / 2) as f64))
    }
}

/// `S[i][j] = ⟨vᵢ,vⱼ⟩ / (‖vᵢ‖‖vⱼ‖)`. Zero vectors are an error.
pub fn cosine_similarity_matrix<T: Scalar>(vectors: &[Vec<T>]) -> Result<SimilarityMatrix<T>> {
    let n = vectors.len();
    let len = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != len) {
        return Err(LinalgError::DimensionMismatch("vectors of different lengths".into()));
    }
    let mut norms = Vec::with_capacity(n);
    for (index, v) in vectors.iter().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite("similarity input"));
        }
        let nv = norm(v);
        if nv == T::zero() {
            return Err(LinalgError::ZeroVector { index });
        }
        norms.push(nv);
    }
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = T::one();
        for j in (i + 1)..n {
            let c = (dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j]))
                .max(-T::one())
                .min(T::one());
            values[(i, j)] = c;
            values[(j, i)] = c;
        }
    }
    Ok(SimilarityMatrix { values })
}

/// Result of [`kmeans`]. Labels are canonical: clusters are numbered in order
/// of their first member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterAssignment {
    /// Member indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Renumbers labels in order of first appearance.
    pub fn canonicalize(mut self) -> Self {
        self.labels = canonical_labels(&self.labels);
        self
    }
}

pub(crate) fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Lloyd's algorithm with k-means++ seeding drawn from `seed`.
///
/// Stops when no label changes or after `max_iters` update rounds. An empty
/// cluster is reseeded with the point farthest from its current centroid.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let n = points.rows();
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if k == 0 || k > n {
        return Err(LinalgError::KOutOfRange { k, max: n });
    }
    if max_iters == 0 {
        return Err(LinalgError::NoIterations);
    }
    if !points.is_finite() {
        return Err(LinalgError::NonFinite("k-means points"));
    }
    let dim = points.cols();
    let mut rng = Rng::new(seed);

    // k-means++ seeding.
    let mut centroids = Matrix::<T>::zeros(k, dim);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut nearest: Vec<T> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: T = nearest.iter().copied().sum();
        let pick = if total > T::zero() {
            let target = T::of(rng.uniform()) * total;
            let mut acc = T::zero();
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && d > T::zero() {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }

    let assign = |centroids: &Matrix<T>, labels: &mut [usize]| -> T {
        let mut inertia = T::zero();
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(points.row(i), centroids.row(0));
            for c in 1..k {
                let d = sq_dist(points.row(i), centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            *label = best;
            inertia += best_d;
        }
        inertia
    };

    let mut labels = vec![0usize; n];
    let mut inertia = assign(&centroids, &mut labels);
    for _ in 0..max_iters {
        // Update step.
        let mut sums = Matrix::<T>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &p) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += p;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::of(counts[c] as f64);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let candidate = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .map(|i| (i, sq_dist(points.row(i), centroids.row(labels[i]))))
                    .fold(None, |best: Option<(usize, T)>, cur| match best {
                        Some(b) if b.1 >= cur.1 => Some(b),
                        _ => Some(cur),
                    });
                let Some((far, _)) = candidate else { continue };
                let old = labels[far];
                counts[old] -= 1;
                counts[c] = 1;
                labels[far] = c;
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        let mut next = labels.clone();
        let next_inertia = assign(&centroids, &mut next);
        debug_assert!(
            next_inertia <= inertia + inertia.abs() * T::of(1e-12) + T::of(1e-300),
            "k-means inertia increased: {inertia} -> {next_inertia}"
        );
        let changed = next != labels;
        labels = next;
        inertia = next_inertia;
        if !changed {
            break;
        }
    }

    Ok(ClusterAssignment {
        labels: canonical_labels(&labels),
        k,
        inertia: inertia.as_f64(),
        seed,
    })
}

/// Adjusted Rand index between two labelings of the same items.
/// Two identical trivial partitions score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "label vectors differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = table.iter().map(|row| c2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|row| row[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return if canonical_labels(a) == canonical_labels(b) {
            1.0
        } else {
            0.0
        };
    }
    (sum_cells - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_have_unit_similarity() {
        let s = cosine_similarity_matrix(&[vec![1.0f64, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_vectors_have_zero_similarity() {
        let s = cosine_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
    }

    #[test]
    fn zero_vector_is_an_error() {
        let err = cosine_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert_eq!(err, LinalgError::ZeroVector { index: 1 });
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let pts = Matrix::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let a = kmeans(&pts, 1, 5, 10).unwrap();
        assert_eq!(a.labels, vec![0; 4]);
        // Inertia around the mean (1,1): four points at squared distance 2.
        assert!((a.inertia - 8.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_errors() {
        let pts = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(kmeans(&pts, 4, 0, 10), Err(LinalgError::KOutOfRange { .. })));
        assert!(matches!(kmeans(&pts, 2, 0, 0), Err(LinalgError::NoIterations)));
        let mut bad = pts.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(kmeans(&bad, 1, 0, 1).is_err());
    }

    #[test]
    fn kmeans_identical_points_k_equals_n() {
        // All points coincide: seeding falls back to uniform picks, reseeding fills empties.
        let pts = Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let a = kmeans(&pts, 3, 2, 5).unwrap();
        assert!(a.labels.iter().all(|&l| l < 3));
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts = Matrix::from_vec(6, 2, vec![0.0, 0.1, 5.0, 5.2, 0.3, 0.0, 5.1, 4.9, 9.0, 0.0, 8.8, 0.2]).unwrap();
        let a = kmeans(&pts, 3, 0, 50).unwrap();
        let b = kmeans(&pts, 3, 0, 50).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
    }

    #[test]
    fn ari_of_identical_and_permuted_partitions() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((-0.5..0.0).contains(&ari));
    }

    #[test]
    fn mean_off_diagonal_requires_two_items() {
        let s = cosine_similarity_matrix(&[vec![1.0]]).unwrap();
        assert_eq!(s.mean_off_diagonal(), None);
    }
}
