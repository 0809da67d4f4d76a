//! Dense matrix helpers shared by every module: Frobenius algebra, symmetric
//! eigendecomposition, dense solves, truncated SVD and the two on-disk
//! encodings (headerless CSV and a `{rows, cols, data}` JSON wrapper).

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

pub fn frob_inner(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn frob_norm(a: &Mat) -> f64 {
    frob_inner(a, a).sqrt()
}

pub fn trace(a: &Mat) -> f64 {
    a.diag().sum()
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Largest absolute deviation from symmetry.
pub fn asymmetry(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Mat) -> Mat {
    (a + &a.t()) * 0.5
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub(crate) fn to_na(a: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigendecomposition of a symmetric matrix; eigenvalues ascending, eigenvectors
/// in the matching columns.
pub fn sym_eigen(a: &Mat) -> (Array1<f64>, Mat) {
    let eig = to_na(&symmetrize(a)).symmetric_eigen();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn min_eigenvalue(a: &Mat) -> f64 {
    sym_eigen(a).0[0]
}

/// `f(A)` for symmetric `A`, applied through the eigendecomposition.
pub fn sym_apply(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let (vals, vecs) = sym_eigen(a);
    let scaled = &vecs * &vals.mapv(f);
    scaled.dot(&vecs.t())
}

/// Moore-Penrose pseudo-inverse square root of a PSD matrix; eigenvalues at or
/// below `cutoff` are treated as exact zeros.
pub fn pinv_sqrt(a: &Mat, cutoff: f64) -> Mat {
    sym_apply(a, |l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 })
}

pub fn pinv_sym(a: &Mat, cutoff: f64) -> Mat {
    sym_apply(a, |l| if l > cutoff { 1.0 / l } else { 0.0 })
}

/// Dense solve `A x = b` by LU. Returns the solution and the 2-norm condition
/// number of `A` (from its singular values).
pub fn solve_dense(a: &Mat, b: &Array1<f64>) -> Result<(Array1<f64>, f64)> {
    let na = to_na(a);
    let sv = na.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let rhs = nalgebra::DVector::from_iterator(b.len(), b.iter().cloned());
    let x = na.lu().solve(&rhs).ok_or_else(|| Error::Numerical("dense system is singular".into()))?;
    Ok((Array1::from_iter(x.iter().cloned()), cond))
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncated_svd(a: &Mat, r: usize) -> Mat {
    let svd = to_na(a).svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = Array2::zeros((a.nrows(), a.ncols()));
    for &k in idx.iter().take(r) {
        let s = svd.singular_values[k];
        for i in 0..a.nrows() {
            let ui = u[(i, k)] * s;
            for j in 0..a.ncols() {
                out[[i, j]] += ui * vt[(k, j)];
            }
        }
    }
    out
}

/// Column-major vectorization, `vec(X)`.
pub fn vec_cols(a: &Mat) -> Array1<f64> {
    Array1::from_iter(a.t().iter().cloned())
}

pub fn unvec_cols(v: &Array1<f64>, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |(i, j)| v[j * rows + i])
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

/// JSON wrapper: row-major data with explicit shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for MatrixJson {
    fn from(a: &Mat) -> Self {
        MatrixJson { rows: a.nrows(), cols: a.ncols(), data: a.iter().cloned().collect() }
    }
}

impl MatrixJson {
    pub fn into_matrix(self) -> Result<Mat> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix json declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes a matrix as headerless CSV, one row per line. Values use Rust's
/// shortest round-trip formatting so a read gives back identical bits.
pub fn write_csv<W: Write>(a: &Mat, mut w: W) -> Result<()> {
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Mat> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: cannot parse {s:?}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::Format(format!("line {}: expected {c} columns, found {}", lineno + 1, vals.len())))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_csv(a: &Mat, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_csv(a, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Mat> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f))
}

pub fn save_json(a: &Mat, path: impl AsRef<Path>) -> Result<()> {
    let s = serde_json::to_string(&MatrixJson::from(a))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_json(path: impl AsRef<Path>) -> Result<Mat> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str::<MatrixJson>(&s)?.into_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let a = array![[1.0, -2.5e-17, 3.0], [0.1 + 0.2, f64::MIN_POSITIVE, -0.0]];
        let mut buf = Vec::new();
        write_csv(&a, &mut buf).unwrap();
        let b = read_csv(&buf[..]).unwrap();
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let err = read_csv(&b"1,2\n3\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn json_wrapper_is_row_major() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let j = MatrixJson::from(&a);
        assert_eq!((j.rows, j.cols), (3, 2));
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = serde_json::to_string(&j).unwrap();
        let back: MatrixJson = serde_json::from_str(&s).unwrap();
        assert_eq!(back.into_matrix().unwrap(), a);
    }

    #[test]
    fn kron_vec_identity() {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let a = array![[1.0, 2.0], [0.5, -1.0]];
        let x = array![[1.0, 0.0, 2.0], [3.0, -1.0, 1.0]];
        let b = array![[2.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 3.0]];
        let lhs = vec_cols(&a.dot(&x).dot(&b));
        let rhs = kron(&b.t().to_owned(), &a).dot(&vec_cols(&x));
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() < 1e-12);
        }
        assert_eq!(unvec_cols(&vec_cols(&x), 2, 3), x);
    }

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]];
        let (vals, vecs) = sym_eigen(&a);
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        let back = (&vecs * &vals).dot(&vecs.t());
        assert!(max_abs(&(back - &a)) < 1e-12);
    }
}
