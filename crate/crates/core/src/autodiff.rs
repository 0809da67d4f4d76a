//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Every node holds an `Array2<f64>` value; scalars are `1×1`. Operations
//! record a closure mapping the output cotangent to one cotangent per parent.
//! Only the operations the unrolled network needs are provided.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::learn::degree_prox_weighted;
use crate::matrix::Mat;

type Backward = Box<dyn Fn(&Mat) -> Vec<Mat>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Cotangents of every node with respect to one output.
pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    /// Cotangent of a scalar node, 0 when it does not reach the output.
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, |g| g[[0, 0]])
    }
}

fn scalar_mat(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 20.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(scalar_mat(v))
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        self.val(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.val(a) + &*self.val(b);
        self.push(value, vec![a.0, b.0], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.val(a) - &*self.val(b);
        self.push(value, vec![a.0, b.0], Some(Box::new(|g| vec![g.clone(), -g])))
    }

    /// `c·a` for a constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = &*self.val(a) * c;
        self.push(value, vec![a.0], Some(Box::new(move |g| vec![g * c])))
    }

    /// `s·a` for a `1×1` node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let av = self.val(a);
        let sv = self.scalar_value(s);
        let value = &*av * sv;
        self.push(value, vec![a.0, s.0], Some(Box::new(move |g| vec![g * sv, scalar_mat((g * &*av).sum())])))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let value = av.dot(&*bv);
        self.push(value, vec![a.0, b.0], Some(Box::new(move |g| vec![g.dot(&bv.t()), av.t().dot(g)])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.val(a).t().to_owned();
        self.push(value, vec![a.0], Some(Box::new(|g| vec![g.t().to_owned()])))
    }

    /// `(a + aᵀ)/2`.
    pub fn symmetrize(&self, a: Var) -> Var {
        let av = self.val(a);
        let value = (&*av + &av.t()) * 0.5;
        self.push(value, vec![a.0], Some(Box::new(|g| vec![(g + &g.t()) * 0.5])))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let value = &*av * &*bv;
        self.push(value, vec![a.0, b.0], Some(Box::new(move |g| vec![g * &*bv, g * &*av])))
    }

    /// `a ∘ c` for a constant matrix `c`.
    pub fn hadamard_const(&self, a: Var, c: Rc<Mat>) -> Var {
        let value = &*self.val(a) * &*c;
        self.push(value, vec![a.0], Some(Box::new(move |g| vec![g * &*c])))
    }

    /// Frobenius inner product, `1×1`.
    pub fn inner(&self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let value = scalar_mat((&*av * &*bv).sum());
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let s = g[[0, 0]];
                vec![&*bv * s, &*av * s]
            })),
        )
    }

    /// `1/s` for a `1×1` node.
    pub fn recip(&self, s: Var) -> Var {
        let v = self.scalar_value(s);
        self.push(scalar_mat(1.0 / v), vec![s.0], Some(Box::new(move |g| vec![g * (-1.0 / (v * v))])))
    }

    /// `√s` for a `1×1` node.
    pub fn sqrt(&self, s: Var) -> Var {
        let r = self.scalar_value(s).sqrt();
        self.push(scalar_mat(r), vec![s.0], Some(Box::new(move |g| vec![g * (0.5 / r)])))
    }

    /// Elementwise [`softplus`].
    pub fn softplus(&self, a: Var) -> Var {
        let av = self.val(a);
        let value = av.mapv(softplus);
        self.push(value, vec![a.0], Some(Box::new(move |g| vec![g * &av.mapv(sigmoid)])))
    }

    /// Row sums as an `n×1` column.
    pub fn row_sums(&self, a: Var) -> Var {
        let av = self.val(a);
        let cols = av.ncols();
        let value = av.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let gc = g.column(0).to_owned();
                vec![Array2::from_shape_fn((gc.len(), cols), |(i, _)| gc[i])]
            })),
        )
    }

    /// `u1ᵀ + 1uᵀ` for an `n×1` column `u`.
    pub fn outer_sum(&self, u: Var) -> Var {
        let uv = self.val(u);
        let n = uv.nrows();
        let value = Array2::from_shape_fn((n, n), |(i, j)| uv[[i, 0]] + uv[[j, 0]]);
        self.push(
            value,
            vec![u.0],
            Some(Box::new(move |g| {
                let gu = g.sum_axis(Axis(1)) + g.sum_axis(Axis(0));
                vec![gu.insert_axis(Axis(1))]
            })),
        )
    }

    /// `diag(v)` for an `n×1` column.
    pub fn diag_matrix(&self, v: Var) -> Var {
        let vv = self.val(v);
        let n = vv.nrows();
        let value = Array2::from_shape_fn((n, n), |(i, j)| if i == j { vv[[i, 0]] } else { 0.0 });
        self.push(value, vec![v.0], Some(Box::new(|g| vec![g.diag().to_owned().insert_axis(Axis(1))])))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag_of(&self, a: Var) -> Var {
        let av = self.val(a);
        let n = av.nrows();
        let value = av.diag().to_owned().insert_axis(Axis(1));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = Array2::zeros((n, n));
                for i in 0..n {
                    out[[i, i]] = g[[i, 0]];
                }
                vec![out]
            })),
        )
    }

    /// Projection onto symmetric, hollow, nonnegative matrices; same
    /// arithmetic as [`crate::graph::project_adjacency`]. Entries clamped to
    /// zero pass no gradient.
    pub fn project_adjacency(&self, a: Var) -> Var {
        let value = crate::graph::project_adjacency(&self.val(a)).into_inner();
        let active = Rc::new(value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let gm = g * &*active;
                vec![(&gm + &gm.t()) * 0.5]
            })),
        )
    }

    /// Elementwise clamp to `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.val(a);
        let value = av.mapv(|v| v.clamp(lo, hi));
        let pass = av.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
        self.push(value, vec![a.0], Some(Box::new(move |g| vec![g * &pass])))
    }

    /// Column `j` as an `n×1` node.
    pub fn column(&self, a: Var, j: usize) -> Var {
        let av = self.val(a);
        let shape = av.dim();
        let value = av.column(j).to_owned().insert_axis(Axis(1));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = Array2::zeros(shape);
                out.column_mut(j).assign(&g.column(0));
                vec![out]
            })),
        )
    }

    /// Concatenates `n×1` columns.
    pub fn hstack(&self, cols: &[Var]) -> Var {
        let vals: Vec<Rc<Mat>> = cols.iter().map(|&c| self.val(c)).collect();
        let n = vals[0].nrows();
        let mut value = Array2::zeros((n, cols.len()));
        for (j, v) in vals.iter().enumerate() {
            value.column_mut(j).assign(&v.column(0));
        }
        let k = cols.len();
        self.push(
            value,
            cols.iter().map(|c| c.0).collect(),
            Some(Box::new(move |g| (0..k).map(|j| g.column(j).to_owned().insert_axis(Axis(1))).collect())),
        )
    }

    /// Scales each row to unit norm; rows with norm below `eps` become the
    /// first coordinate axis and pass no gradient.
    pub fn row_normalize(&self, a: Var, eps: f64) -> Var {
        let av = self.val(a);
        let value = crate::learn::row_normalize(&av);
        let norms: Vec<f64> = av.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let out = Rc::new(value.clone());
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Array2::zeros(g.dim());
                for (i, &norm) in norms.iter().enumerate() {
                    if norm < eps {
                        continue;
                    }
                    let r = out.row(i);
                    let gi = g.row(i);
                    let proj = r.dot(&gi);
                    let mut row = ga.row_mut(i);
                    row.assign(&((&gi - &(&r * proj)) / norm));
                }
                vec![ga]
            })),
        )
    }

    /// Per-coordinate [`degree_prox_weighted`] for `n×1` columns `v` and `k`
    /// and `1×1` weights. Differentiated through the stationarity condition
    /// `a d² + b d − γ = 0`, `a = 2β + ρ`, `b = αk − ρv`.
    pub fn degree_prox(&self, v: Var, k: Var, alpha: Var, beta: Var, gamma: Var, rho: Var) -> Var {
        let vv = self.val(v);
        let kv = self.val(k);
        let (al, be, ga, rh) =
            (self.scalar_value(alpha), self.scalar_value(beta), self.scalar_value(gamma), self.scalar_value(rho));
        let n = vv.nrows();
        let d = Array2::from_shape_fn((n, 1), |(i, _)| degree_prox_weighted(vv[[i, 0]], kv[[i, 0]], al, be, ga, rh));
        let dv = d.clone();
        self.push(
            d,
            vec![v.0, k.0, alpha.0, beta.0, gamma.0, rho.0],
            Some(Box::new(move |g| {
                let a = 2.0 * be + rh;
                let mut gv = Array2::zeros((n, 1));
                let mut gk = Array2::zeros((n, 1));
                let (mut g_al, mut g_be, mut g_ga, mut g_rh) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    let di = dv[[i, 0]];
                    let b = al * kv[[i, 0]] - rh * vv[[i, 0]];
                    // dd/dp = −(∂F/∂p)/(∂F/∂d)
                    let w = -g[[i, 0]] / (2.0 * a * di + b);
                    gv[[i, 0]] = w * di * (-rh);
                    gk[[i, 0]] = w * di * al;
                    g_al += w * di * kv[[i, 0]];
                    g_be += w * di * di * 2.0;
                    g_ga -= w;
                    g_rh += w * (di * di - di * vv[[i, 0]]);
                }
                vec![gv, gk, scalar_mat(g_al), scalar_mat(g_be), scalar_mat(g_ga), scalar_mat(g_rh)]
            })),
        )
    }

    /// Cotangents of all nodes with respect to the `1×1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[out.0] = Some(Array2::ones(nodes[out.0].value.dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &nodes[i].backward {
                for (p, gp) in nodes[i].parents.iter().zip(bw(&g)) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &gp,
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }
}
