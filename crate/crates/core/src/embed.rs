//! Spectral embedding through the normalized Laplacian of a k-NN graph.

use nalgebra::DMatrix;

use crate::error::{FiralError, Result};
use crate::linalg::SymEigen;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub k: usize,
    pub d_out: usize,
}

impl EmbeddingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k >= n {
            return Err(FiralError::InvalidInput(format!("need 1 <= k < N (k={}, N={n})", self.k)));
        }
        if self.d_out == 0 || self.d_out > n {
            return Err(FiralError::InvalidInput(format!("need 1 <= d_out <= N (d_out={}, N={n})", self.d_out)));
        }
        Ok(())
    }
}

/// Symmetric 0/1 adjacency lists: `j ∈ adj[i]` iff `j` is among the `k`
/// nearest neighbors of `i`, or `i` among those of `j`. Distance ties break
/// toward the smaller index. Rows of `x` are points.
pub fn knn_graph(x: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(FiralError::InvalidInput(format!("need 1 <= k < N (k={k}, N={n})")));
    }
    let norms: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
    let gram = x * x.transpose();
    let mut marks = vec![vec![false; n]; n];
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((norms[i] + norms[j] - 2.0 * gram[(i, j)]).max(0.0), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            marks[i][j] = true;
            marks[j][i] = true;
        }
    }
    Ok(marks
        .into_iter()
        .map(|row| row.into_iter().enumerate().filter(|(_, m)| *m).map(|(j, _)| j).collect())
        .collect())
}

/// `I − D^{-1/2} A D^{-1/2}` for unit edge weights.
pub fn normalized_laplacian(adj: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let n = adj.len();
    if let Some(i) = adj.iter().position(|a| a.is_empty()) {
        return Err(FiralError::InvalidInput(format!("vertex {i} is isolated")));
    }
    let inv_sqrt_deg: Vec<f64> = adj.iter().map(|a| 1.0 / (a.len() as f64).sqrt()).collect();
    let mut l = DMatrix::identity(n, n);
    for (i, nbrs) in adj.iter().enumerate() {
        for &j in nbrs {
            l[(i, j)] -= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Ok(l)
}

#[derive(Debug, Clone)]
pub struct Embedding {
    /// `N × d_out`, one row per input point.
    pub coords: DMatrix<f64>,
    /// The `d_out` smallest Laplacian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Full Laplacian spectrum, ascending.
    pub spectrum: Vec<f64>,
}

/// Eigenvectors of the normalized Laplacian for the `d_out` smallest
/// eigenvalues. Each vector's largest-magnitude entry is made positive.
pub fn spectral_embed(x: &DMatrix<f64>, config: EmbeddingConfig) -> Result<Embedding> {
    config.validate(x.nrows())?;
    let adj = knn_graph(x, config.k)?;
    let l = normalized_laplacian(&adj)?;
    let eig = SymEigen::new(&l);
    if !eig.values.iter().all(|v| v.is_finite()) {
        return Err(FiralError::NonFinite("Laplacian spectrum".into()));
    }
    let n = x.nrows();
    let mut coords = DMatrix::zeros(n, config.d_out);
    for j in 0..config.d_out {
        let mut v = eig.vectors.column(j).clone_owned();
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        coords.set_column(j, &v);
    }
    Ok(Embedding {
        coords,
        eigenvalues: eig.values.iter().take(config.d_out).cloned().collect(),
        spectrum: eig.values.iter().cloned().collect(),
    })
}
