//! Affinity construction and normalized-cut spectral clustering of tokens.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::ssc_admm::SelfExpressionMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Fraction of each column's ℓ1 mass kept by [`threshold_columns`].
    pub threshold_c: f64,
    pub n_subspaces: usize,
    /// Nearest-neighbor sparsification; only 0 (keep all edges) is active.
    pub knn: usize,
    pub kmeans_seed: u64,
    pub kmeans_restarts: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            threshold_c: 1.0,
            n_subspaces: 24,
            knn: 0,
            kmeans_seed: crate::kmeans::DEFAULT_SEED,
            kmeans_restarts: crate::kmeans::DEFAULT_RESTARTS,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_c > 0.0 && self.threshold_c <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold_c must lie in (0, 1], got {}",
                self.threshold_c
            )));
        }
        if self.n_subspaces == 0 {
            return Err(Error::InvalidConfig("n_subspaces must be >= 1".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::InvalidConfig("kmeans_restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.n_subspaces,
            seed: self.kmeans_seed,
            restarts: self.kmeans_restarts,
        }
    }
}

/// Symmetric, nonnegative, zero-diagonal token graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(DMatrix<f64>);

impl AffinityMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!("affinity must be square, got {:?}", m.shape())));
        }
        let n = m.nrows();
        for i in 0..n {
            if m[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("affinity diagonal entry {i} is non-zero")));
            }
            for j in 0..i {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::InvalidArgument(format!("affinity is not symmetric at ({i},{j})")));
                }
                if !(m[(i, j)] >= 0.0) || !m[(i, j)].is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "affinity entry ({i},{j}) = {} is not a finite nonnegative weight",
                        m[(i, j)]
                    )));
                }
            }
        }
        Ok(AffinityMatrix(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }
}

/// Cluster label per visual token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Token count per cluster id; sums to the number of tokens.
    pub cluster_sizes: Vec<usize>,
}

impl SubspaceAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut cluster_sizes = vec![0; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::InvalidArgument(format!("label {l} out of range for k = {k}")));
            }
            cluster_sizes[l] += 1;
        }
        Ok(SubspaceAssignment {
            labels,
            k,
            cluster_sizes,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.labels.len()
    }

    /// Size of the cluster containing token `i`.
    pub fn size_of(&self, i: usize) -> usize {
        self.cluster_sizes[self.labels[i]]
    }
}

/// Keeps, per column, the largest-magnitude entries until their cumulative
/// |·| reaches `threshold_c` of the column's ℓ1 mass; zeroes the rest.
pub fn threshold_columns(w: &SelfExpressionMatrix, threshold_c: f64) -> Result<SelfExpressionMatrix> {
    if !(threshold_c > 0.0 && threshold_c <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold_c must lie in (0, 1], got {threshold_c}"
        )));
    }
    let mut out = w.clone();
    if threshold_c == 1.0 {
        return Ok(out);
    }
    let n = w.w.nrows();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (src, mut dst) in w.w.column_iter().zip(out.w.column_iter_mut()) {
        let mass: f64 = src.iter().map(|v| v.abs()).sum();
        if mass == 0.0 {
            continue;
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| src[b].abs().total_cmp(&src[a].abs()));
        // slack absorbs rounding in the cumulative sum
        let target = threshold_c * mass * (1.0 - 1e-12);
        let mut cumulative = 0.0;
        let mut kept = 0;
        for &i in &order {
            if cumulative >= target {
                break;
            }
            cumulative += src[i].abs();
            kept += 1;
        }
        for &i in &order[kept..] {
            dst[i] = 0.0;
        }
    }
    Ok(out)
}

/// `|W| + |W|ᵀ` with a zero diagonal.
pub fn build_affinity(w: &SelfExpressionMatrix) -> Result<AffinityMatrix> {
    let m = &w.w;
    if !m.is_square() {
        return Err(Error::Shape(format!("W must be square, got {:?}", m.shape())));
    }
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m[(i, j)].abs() + m[(j, i)].abs();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(AffinityMatrix(out))
}

/// Symmetric normalized Laplacian `I - D^{-1/2} M D^{-1/2}`. Isolated
/// vertices get an identity row.
pub fn normalized_laplacian(m: &AffinityMatrix) -> DMatrix<f64> {
    let a = m.matrix();
    let n = a.nrows();
    let inv_sqrt_deg: Vec<f64> = a
        .row_iter()
        .map(|r| {
            let d: f64 = r.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let off = a[(i, j)] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    })
}

/// Row-normalized eigenvectors of the `k` smallest Laplacian eigenvalues.
pub fn spectral_embedding(m: &AffinityMatrix, k: usize) -> Result<DMatrix<f64>> {
    let n = m.n_tokens();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot embed {n} tokens into {k} dimensions")));
    }
    let lap = normalized_laplacian(m);
    let eig = SymmetricEigen::try_new(lap, f64::EPSILON, 100 * n.max(10))
        .ok_or_else(|| Error::Eigen(format!("no convergence for a {n}x{n} Laplacian")))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut emb = eig.eigenvectors.select_columns(&order[..k]);
    for mut row in emb.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok(emb)
}

/// Normalized-cut clustering with the library's fixed k-means seed.
pub fn spectral_cluster(m: &AffinityMatrix, k: usize) -> Result<SubspaceAssignment> {
    spectral_cluster_with(m, &KMeansParams::new(k))
}

pub fn spectral_cluster_with(m: &AffinityMatrix, params: &KMeansParams) -> Result<SubspaceAssignment> {
    let n = m.n_tokens();
    let k = params.k;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} tokens")));
    }
    if k == 1 {
        return SubspaceAssignment::new(vec![0; n], 1);
    }
    let emb = spectral_embedding(m, k)?;
    let fit = kmeans(&emb, params)?;
    SubspaceAssignment::new(fit.labels, k)
}

/// Threshold, symmetrize, and cluster according to `cfg`.
pub fn cluster_tokens(
    w: &SelfExpressionMatrix,
    cfg: &GraphConfig,
) -> Result<(SelfExpressionMatrix, AffinityMatrix, SubspaceAssignment)> {
    cfg.validate()?;
    if cfg.knn > 0 {
        warn!("knn = {} requested; nearest-neighbor sparsification is not applied", cfg.knn);
    }
    let thresholded = threshold_columns(w, cfg.threshold_c)?;
    let affinity = build_affinity(&thresholded)?;
    let assignment = spectral_cluster_with(&affinity, &cfg.kmeans_params())?;
    Ok((thresholded, affinity, assignment))
}
