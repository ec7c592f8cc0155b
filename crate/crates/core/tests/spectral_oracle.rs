//! Power-iteration eigenpairs against a dense symmetric eigensolver.

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, SymmetricEigen};

use wnet_core::contour::spectral::{intervening_contour_graph, leading_eigenvectors, IcGraph};
use wnet_core::contour::{BoundaryMap, SpectralParams};
use wnet_core::Rng;

fn dense_laplacian(g: &IcGraph) -> DMatrix<f64> {
    let n = g.len();
    let mut m = DMatrix::identity(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        g.normalized_apply(&e, &mut col);
        for i in 0..n {
            m[(i, j)] -= col[i];
        }
    }
    m
}

fn ridge_map(h: usize, w: usize, seed: u64) -> BoundaryMap {
    let mut rng = Rng::new(seed);
    let s = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let ridge = if x == w / 2 || y == h / 3 { 0.8 } else { 0.0 };
            ridge + 0.05 * rng.uniform()
        })
        .collect();
    BoundaryMap::new(h, w, s)
}

#[test]
fn eigenpairs_match_dense_solver() {
    for (h, w, seed) in [(7, 9, 1), (10, 6, 2), (8, 8, 3)] {
        let params = SpectralParams::default();
        let g = intervening_contour_graph(&ridge_map(h, w, seed), &params);
        let dense = dense_laplacian(&g);
        assert_abs_diff_eq!(dense.clone(), dense.transpose(), epsilon = 1e-12);
        let eig = SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        assert_abs_diff_eq!(eig.eigenvalues[order[0]], 0.0, epsilon = 1e-10);

        let found = leading_eigenvectors(&g, &params).unwrap();
        assert!(found.converged);
        let k = found.vectors.len();
        let outside = eig.eigenvalues[order[k + 1]] - eig.eigenvalues[order[k]];
        assert!(outside > 1e-3, "fixture has no gap after the wanted vectors");
        for (i, lambda) in found.values.iter().enumerate() {
            assert_abs_diff_eq!(*lambda, eig.eigenvalues[order[i + 1]], epsilon = 1e-8);
        }
        // clustered eigenvalues: compare invariant subspaces, not vectors
        for &idx in &order[1..=k] {
            let reference = eig.eigenvectors.column(idx);
            let captured: f64 = found
                .vectors
                .iter()
                .map(|v| v.iter().zip(reference.iter()).map(|(a, b)| a * b).sum::<f64>().powi(2))
                .sum();
            assert_abs_diff_eq!(captured, 1.0, epsilon = 1e-8);
        }
    }
}
