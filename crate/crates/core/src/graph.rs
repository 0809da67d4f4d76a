//! Graph types and constructions: unsigned and signed adjacency matrices,
//! their combinatorial Laplacians, the projection onto the feasible adjacency
//! set and Gaussian-weighted k-nearest-neighbor graphs.

use ndarray::{Array2, Axis};

use crate::error::{check_square, Error, Result};
use crate::matrix::Mat;

/// Symmetric, nonnegative, hollow weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix(Mat);

/// Symmetric, hollow weight matrix whose entries may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedAdjacency(Mat);

/// `L = diag(W1) − W` of an unsigned graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(Mat);

/// `L̄ = diag(|W̄|1) − W̄`, or any matrix with the same guarantees
/// (symmetric, diagonally dominant, hence PSD).
#[derive(Debug, Clone, PartialEq)]
pub struct SignedLaplacian(Mat);

fn symmetry_tol(w: &Mat) -> f64 {
    1e-12 * (1.0 + crate::matrix::max_abs(w))
}

fn check_symmetric_hollow(w: &Mat) -> Result<()> {
    check_square("adjacency", w.nrows(), w.ncols())?;
    let n = w.nrows();
    let tol = symmetry_tol(w);
    for i in 0..n {
        if w[[i, i]] != 0.0 {
            return Err(Error::Validation(format!("adjacency is not hollow: W[{i},{i}] = {}", w[[i, i]])));
        }
        for j in (i + 1)..n {
            if (w[[i, j]] - w[[j, i]]).abs() > tol || !w[[i, j]].is_finite() {
                return Err(Error::Validation(format!(
                    "adjacency is not symmetric: W[{i},{j}] = {} but W[{j},{i}] = {}",
                    w[[i, j]],
                    w[[j, i]]
                )));
            }
        }
    }
    Ok(())
}

impl AdjacencyMatrix {
    pub fn new(w: Mat) -> Result<Self> {
        check_symmetric_hollow(&w)?;
        if let Some(((i, j), v)) = w.indexed_iter().find(|(_, v)| **v < 0.0) {
            return Err(Error::Validation(format!("adjacency has a negative weight: W[{i},{j}] = {v}")));
        }
        Ok(AdjacencyMatrix(w))
    }

    pub fn zeros(n: usize) -> Self {
        AdjacencyMatrix(Array2::zeros((n, n)))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn weights(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn degrees(&self) -> ndarray::Array1<f64> {
        self.0.sum_axis(Axis(1))
    }

    /// Number of nonzero entries in each row.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.0.rows().into_iter().map(|r| r.iter().filter(|v| **v > 0.0).count()).collect()
    }

    pub fn is_connected(&self) -> bool {
        is_connected(&self.0)
    }
}

impl SignedAdjacency {
    pub fn new(w: Mat) -> Result<Self> {
        check_symmetric_hollow(&w)?;
        Ok(SignedAdjacency(w))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn weights(&self) -> &Mat {
        &self.0
    }

    /// Entrywise magnitude `|W̄|` as an unsigned adjacency.
    pub fn magnitude(&self) -> AdjacencyMatrix {
        AdjacencyMatrix(self.0.mapv(f64::abs))
    }
}

impl From<AdjacencyMatrix> for SignedAdjacency {
    fn from(w: AdjacencyMatrix) -> Self {
        SignedAdjacency(w.0)
    }
}

impl Laplacian {
    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    /// Recovers the adjacency `W = diag(L) − L` (off-diagonal part, negated).
    pub fn adjacency(&self) -> AdjacencyMatrix {
        let mut w = self.0.mapv(|v| -v);
        w.diag_mut().fill(0.0);
        w.mapv_inplace(|v| if v == 0.0 { 0.0 } else { v });
        AdjacencyMatrix(w)
    }

    pub fn identity(n: usize) -> Self {
        Laplacian(Array2::eye(n))
    }

    /// Wraps a matrix without validation. Intended for tests and for
    /// precision-matrix stand-ins such as the identity.
    pub fn from_matrix_unchecked(l: Mat) -> Self {
        Laplacian(l)
    }
}

impl SignedLaplacian {
    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn from_matrix_unchecked(l: Mat) -> Self {
        SignedLaplacian(l)
    }

    /// Off-diagonal part negated: the signed adjacency this Laplacian encodes.
    pub fn adjacency(&self) -> SignedAdjacency {
        let mut w = self.0.mapv(|v| -v);
        w.diag_mut().fill(0.0);
        w.mapv_inplace(|v| if v == 0.0 { 0.0 } else { v });
        SignedAdjacency(w)
    }
}

impl From<Laplacian> for SignedLaplacian {
    fn from(l: Laplacian) -> Self {
        SignedLaplacian(l.0)
    }
}

fn laplacian_of(w: &Mat, abs_degree: bool) -> Mat {
    let n = w.nrows();
    let mut l = w.mapv(|v| -v);
    for i in 0..n {
        let mut d = 0.0;
        for j in 0..n {
            d += if abs_degree { w[[i, j]].abs() } else { w[[i, j]] };
        }
        // W_ii = 0, so the diagonal is the degree itself.
        l[[i, i]] = d;
    }
    l
}

pub fn laplacian_from_adjacency(w: &AdjacencyMatrix) -> Laplacian {
    Laplacian(laplacian_of(&w.0, false))
}

pub fn signed_laplacian(w: &SignedAdjacency) -> SignedLaplacian {
    SignedLaplacian(laplacian_of(&w.0, true))
}

/// Validating convenience: builds the Laplacian of a raw weight matrix.
pub fn laplacian(w: Mat) -> Result<Laplacian> {
    Ok(laplacian_from_adjacency(&AdjacencyMatrix::new(w)?))
}

/// Euclidean projection onto the set of symmetric, hollow, nonnegative
/// matrices: symmetrize, zero the diagonal, clamp negatives.
pub fn project_adjacency(a: &Mat) -> AdjacencyMatrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "project_adjacency needs a square matrix");
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ((a[[i, j]] + a[[j, i]]) / 2.0).max(0.0);
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    AdjacencyMatrix(w)
}

fn sq_dist(points: &Mat, i: usize, j: usize) -> f64 {
    points.row(i).iter().zip(points.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Gaussian-weighted kNN graph over the rows of `points`.
///
/// Each node selects its `k` nearest rows (ties broken by index); an edge is
/// kept when either endpoint selects the other. With `scale = None` the
/// bandwidth is the mean distance over all selected (node, neighbor) pairs.
pub fn knn_graph(points: &Mat, k: usize, scale: Option<f64>) -> Result<AdjacencyMatrix> {
    let n = points.nrows();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("knn needs 1 <= k < n, got k={k}, n={n}")));
    }
    if let Some(s) = scale {
        if !(s > 0.0) {
            return Err(Error::Parameter(format!("knn bandwidth must be positive, got {s}")));
        }
    }
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(points, i, j);
            d2[[i, j]] = d;
            d2[[j, i]] = d;
        }
    }
    let mut selected = Array2::<bool>::from_elem((n, n), false);
    let mut dist_sum = 0.0;
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d2[[i, a]].total_cmp(&d2[[i, b]]).then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            selected[[i, j]] = true;
            dist_sum += d2[[i, j]].sqrt();
        }
    }
    let bandwidth = match scale {
        Some(s) => s,
        None => {
            let mean = dist_sum / (n * k) as f64;
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };
    let denom = 2.0 * bandwidth * bandwidth;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && (selected[[i, j]] || selected[[j, i]]) {
                w[[i, j]] = (-d2[[i, j]] / denom).exp();
            }
        }
    }
    Ok(AdjacencyMatrix(w))
}

/// Path graph over `n` nodes with unit weights.
pub fn path_graph(n: usize) -> AdjacencyMatrix {
    let mut w = Array2::zeros((n, n));
    for i in 1..n {
        w[[i - 1, i]] = 1.0;
        w[[i, i - 1]] = 1.0;
    }
    AdjacencyMatrix(w)
}

/// Connectivity of the graph whose edges are the nonzero entries of `w`.
pub fn is_connected(w: &Mat) -> bool {
    let n = w.nrows();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && w[[i, j]] != 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{max_abs, min_eigenvalue};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_adjacency(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if rng.random::<f64>() < 0.6 { rng.random::<f64>() * 10.0 } else { 0.0 };
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        w
    }

    fn random_signed(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(-2.0..2.0);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        w
    }

    #[test]
    fn two_node_laplacian() {
        let l = laplacian(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(l.matrix(), &array![[1.0, -1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn empty_graph_laplacian_is_zero() {
        let l = laplacian(Array2::zeros((3, 3))).unwrap();
        assert_eq!(l.matrix(), &Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn random_laplacian_is_psd_with_zero_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let l = laplacian(random_adjacency(5, &mut rng)).unwrap();
            assert!(min_eigenvalue(l.matrix()) >= -1e-10);
            for s in l.matrix().sum_axis(Axis(1)).iter() {
                assert!(s.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_validation_names_the_violation() {
        let asym = AdjacencyMatrix::new(array![[0.0, 1.0], [2.0, 0.0]]).unwrap_err();
        assert!(asym.to_string().contains("symmetric"));
        let neg = AdjacencyMatrix::new(array![[0.0, -1.0], [-1.0, 0.0]]).unwrap_err();
        assert!(neg.to_string().contains("negative"));
        let loopy = AdjacencyMatrix::new(array![[1.0, 1.0], [1.0, 0.0]]).unwrap_err();
        assert!(loopy.to_string().contains("hollow"));
        assert!(SignedAdjacency::new(array![[0.0, -1.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn single_negative_edge_signed_laplacian() {
        let l = signed_laplacian(&SignedAdjacency::new(array![[0.0, -1.0], [-1.0, 0.0]]).unwrap());
        assert_eq!(l.matrix(), &array![[1.0, 1.0], [1.0, 1.0]]);
        let (vals, _) = crate::matrix::sym_eigen(l.matrix());
        assert!(vals[0].abs() < 1e-14 && (vals[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn signed_laplacian_reduces_bitwise_on_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = random_adjacency(7, &mut rng);
            let a = laplacian_from_adjacency(&AdjacencyMatrix::new(w.clone()).unwrap());
            let b = signed_laplacian(&SignedAdjacency::new(w).unwrap());
            for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn random_signed_laplacian_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let l = signed_laplacian(&SignedAdjacency::new(random_signed(6, &mut rng)).unwrap());
            assert!(min_eigenvalue(l.matrix()) >= -1e-10);
        }
    }

    #[test]
    fn signed_quadratic_form_nonnegative_on_random_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = signed_laplacian(&SignedAdjacency::new(random_signed(9, &mut rng)).unwrap());
        for _ in 0..100 {
            let x = ndarray::Array1::from_iter((0..9).map(|_| rng.random_range(-1.0f64..1.0)));
            let x = &x / x.dot(&x).sqrt();
            assert!(x.dot(&l.matrix().dot(&x)) >= -1e-10);
        }
    }

    #[test]
    fn projection_examples() {
        let p = project_adjacency(&array![[5.0, -2.0], [4.0, 3.0]]);
        assert_eq!(p.weights(), &array![[0.0, 1.0], [1.0, 0.0]]);
        let feasible = array![[0.0, 0.5, 2.0], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(project_adjacency(&feasible).weights(), &feasible);
        let neg_eye = -Array2::<f64>::eye(4);
        assert_eq!(project_adjacency(&neg_eye).weights(), &Array2::<f64>::zeros((4, 4)));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(vals in proptest::collection::vec(-5.0f64..5.0, 36)) {
            let a = Array2::from_shape_vec((6, 6), vals).unwrap();
            let once = project_adjacency(&a);
            let twice = project_adjacency(once.weights());
            prop_assert_eq!(once.weights(), twice.weights());
            prop_assert!(AdjacencyMatrix::new(once.into_inner()).is_ok());
        }

        #[test]
        fn laplacian_rows_sum_to_zero(vals in proptest::collection::vec(0.0f64..10.0, 64)) {
            let a = Array2::from_shape_vec((8, 8), vals).unwrap();
            let w = project_adjacency(&a);
            let l = laplacian_from_adjacency(&w);
            for s in l.matrix().sum_axis(Axis(1)).iter() {
                prop_assert!(s.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn knn_collinear_points() {
        let pts = array![[0.0], [1.0], [2.0]];
        let scale = 0.7;
        let w = knn_graph(&pts, 1, Some(scale)).unwrap();
        let expect = (-1.0 / (2.0 * scale * scale)).exp();
        assert!((w.weights()[[0, 1]] - expect).abs() < 1e-15);
        assert!((w.weights()[[1, 2]] - expect).abs() < 1e-15);
        assert_eq!(w.weights()[[0, 2]], 0.0);
    }

    #[test]
    fn knn_identical_points_get_unit_weight() {
        let pts = Array2::from_elem((4, 2), 0.3);
        let w = knn_graph(&pts, 1, None).unwrap();
        for v in w.weights().iter() {
            assert!(*v == 0.0 || *v == 1.0);
        }
        assert!(w.weights().iter().any(|v| *v == 1.0));
    }

    #[test]
    fn knn_union_gives_min_degree_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = Array2::from_shape_fn((50, 2), |_| rng.random::<f64>());
        let w = knn_graph(&pts, 6, None).unwrap();
        assert!(w.neighbor_counts().iter().all(|&c| c >= 6));
        assert!(asym_free(w.weights()));
    }

    fn asym_free(w: &Mat) -> bool {
        max_abs(&(w - &w.t())) == 0.0
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pts = Array2::zeros((3, 2));
        assert!(matches!(knn_graph(&pts, 3, None), Err(Error::Parameter(_))));
        assert!(matches!(knn_graph(&pts, 0, None), Err(Error::Parameter(_))));
    }

    #[test]
    fn path_graph_is_connected() {
        let p = path_graph(5);
        assert!(p.is_connected());
        assert_eq!(p.neighbor_counts(), vec![1, 2, 2, 2, 1]);
    }
}
