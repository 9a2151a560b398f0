use nalgebra::{DMatrix, SymmetricEigen};
use stb_tensor::Tensor;

use super::{CsrMatrix, NodeEmbedding, Provenance};
use crate::error::{Error, Result};

/// Largest graph accepted by the dense eigensolver.
pub const SPECTRAL_MAX_NODES: usize = 2000;

/// `H = U_M Λ_M^{1/2}` from the `m` largest eigenpairs of the Laplacian, so
/// `H Hᵀ` is the best rank-`m` Frobenius approximation of `L`.
///
/// Each column's sign is fixed so that its largest-magnitude entry is
/// positive.
pub fn spectral_embedding(l: &CsrMatrix, m: usize) -> Result<NodeEmbedding> {
    let n = l.n;
    if m == 0 || m > n {
        return Err(Error::config("embed_rank", format!("rank {m} must lie in 1..={n}")));
    }
    if n > SPECTRAL_MAX_NODES {
        return Err(Error::config(
            "embed_init",
            format!("dense eigendecomposition limited to {SPECTRAL_MAX_NODES} nodes, graph has {n}"),
        ));
    }
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, v) in l.row(i) {
            dense[(i, j)] = v;
        }
    }
    let eig = SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut h = vec![0.0; n * m];
    for (k, &col) in order.iter().take(m).enumerate() {
        let scale = eig.eigenvalues[col].max(0.0).sqrt();
        let vec = eig.eigenvectors.column(col);
        let pivot = (0..n)
            .max_by(|&a, &b| vec[a].abs().total_cmp(&vec[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if vec[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            h[i * m + k] = sign * scale * vec[i];
        }
    }
    Ok(NodeEmbedding {
        h: Tensor::new(vec![n, m], h)?,
        provenance: Provenance::Spectral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, SparseGraph};

    #[test]
    fn two_node_path_rank_one() {
        let g = SparseGraph::undirected(2, &[(0, 1, 1.0)]).unwrap();
        let l = build_laplacian(&g).unwrap();
        let e = spectral_embedding(&l, 1).unwrap();
        let (a, b) = (e.row(0)[0], e.row(1)[0]);
        assert!((a.abs() - 1.0).abs() < 1e-12 && (a + b).abs() < 1e-12);
        assert!((e.dot(0, 0) - 1.0).abs() < 1e-12);
        assert!((e.dot(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_bounds() {
        let g = SparseGraph::undirected(3, &[(0, 1, 1.0)]).unwrap();
        let l = build_laplacian(&g).unwrap();
        assert!(matches!(spectral_embedding(&l, 4), Err(Error::Config { .. })));
        assert!(spectral_embedding(&l, 0).is_err());
    }
}
