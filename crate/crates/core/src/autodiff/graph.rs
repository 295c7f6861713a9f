use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::sblu::{sigmoid, softplus};

/// Variance floor shared by every normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Maps the upstream gradient of a node to one gradient per parent.
pub type BackFn = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    tracked: bool,
}

/// Tape of 2-D operations. Nodes are appended in creation order, which is a
/// valid topological order, and the backward sweep walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn row_vec(v: ndarray::Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((1, n)).expect("row")
}

fn col_vec(v: ndarray::Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((n, 1)).expect("col")
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Array2<f64>,
        parents: Vec<usize>,
        backward: Option<BackFn>,
        tracked: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a {:?} node", a.dim());
        a[[0, 0]]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked_any(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].tracked)
    }

    fn op(
        &mut self,
        value: Array2<f64>,
        parents: &[Var],
        make: impl FnOnce(&Self) -> BackFn,
    ) -> Var {
        if self.tracked_any(parents) {
            let back = make(self);
            self.push(
                value,
                parents.iter().map(|p| p.0).collect(),
                Some(back),
                true,
            )
        } else {
            self.constant(value)
        }
    }

    /// Node with a caller-supplied backward rule.
    pub fn custom(&mut self, value: Array2<f64>, parents: &[Var], backward: BackFn) -> Var {
        self.op(value, parents, |_| backward)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Reverse sweep seeded with ones, i.e. the gradient of `sum(root)`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, gp) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p].tracked {
                        continue;
                    }
                    debug_assert_eq!(
                        gp.dim(),
                        self.nodes[p].value.dim(),
                        "gradient shape for node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => *acc += &gp,
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.op(out, &[a, b], |_| Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.op(out, &[a, b], |_| Box::new(|g| vec![g.clone(), -g]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.op(out, &[a, b], |s| {
            let (va, vb) = (s.value(a).clone(), s.value(b).clone());
            Box::new(move |g| vec![g * &vb, g * &va])
        })
    }

    /// `a + row`, with `row` of shape `1 x n` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(
            vr.nrows() == 1 && vr.ncols() == va.ncols(),
            "add_row: {:?} + {:?}",
            va.dim(),
            vr.dim()
        );
        let out = va + vr;
        self.op(out, &[a, row], |_| {
            Box::new(|g| vec![g.clone(), row_vec(g.sum_axis(Axis(0)))])
        })
    }

    /// `a * row`, with `row` of shape `1 x n` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(
            vr.nrows() == 1 && vr.ncols() == va.ncols(),
            "mul_row: {:?} * {:?}",
            va.dim(),
            vr.dim()
        );
        let out = va * vr;
        self.op(out, &[a, row], |s| {
            let (va, vr) = (s.value(a).clone(), s.value(row).clone());
            Box::new(move |g| vec![g * &vr, row_vec((g * &va).sum_axis(Axis(0)))])
        })
    }

    /// `a + col`, with `col` of shape `m x 1` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(
            vc.ncols() == 1 && vc.nrows() == va.nrows(),
            "add_col: {:?} + {:?}",
            va.dim(),
            vc.dim()
        );
        let out = va + vc;
        self.op(out, &[a, col], |_| {
            Box::new(|g| vec![g.clone(), col_vec(g.sum_axis(Axis(1)))])
        })
    }

    /// `a * col`, with `col` of shape `m x 1` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(
            vc.ncols() == 1 && vc.nrows() == va.nrows(),
            "mul_col: {:?} * {:?}",
            va.dim(),
            vc.dim()
        );
        let out = va * vc;
        self.op(out, &[a, col], |s| {
            let (va, vc) = (s.value(a).clone(), s.value(col).clone());
            Box::new(move |g| vec![g * &vc, col_vec((g * &va).sum_axis(Axis(1)))])
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.op(out, &[a], |_| Box::new(move |g| vec![g * k]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.op(out, &[a], |_| Box::new(|g| vec![g.clone()]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.op(out, &[a, b], |s| {
            let (va, vb) = (s.value(a).clone(), s.value(b).clone());
            Box::new(move |g| vec![g.dot(&vb.t()), va.t().dot(g)])
        })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.op(out, &[a], |_| {
            Box::new(|g| vec![g.t().as_standard_layout().into_owned()])
        })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        let dim = va.dim();
        assert_eq!(
            dim.0 * dim.1,
            rows * cols,
            "reshape {:?} -> ({rows}, {cols})",
            dim
        );
        let out = Array2::from_shape_vec((rows, cols), flat(va)).expect("reshape");
        self.op(out, &[a], |_| {
            Box::new(move |g| vec![Array2::from_shape_vec(dim, flat(g)).expect("reshape")])
        })
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(
            start <= end && end <= va.nrows(),
            "slice_rows {start}..{end} of {:?}",
            va.dim()
        );
        let dim = va.dim();
        let out = va.slice(s![start..end, ..]).to_owned();
        self.op(out, &[a], |_| {
            Box::new(move |g| {
                let mut full = Array2::zeros(dim);
                full.slice_mut(s![start..end, ..]).assign(g);
                vec![full]
            })
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(
            start <= end && end <= va.ncols(),
            "slice_cols {start}..{end} of {:?}",
            va.dim()
        );
        let dim = va.dim();
        let out = va.slice(s![.., start..end]).to_owned();
        self.op(out, &[a], |_| {
            Box::new(move |g| {
                let mut full = Array2::zeros(dim);
                full.slice_mut(s![.., start..end]).assign(g);
                vec![full]
            })
        })
    }

    fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(axis, &views).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = views.iter().map(|v| v.len_of(axis)).collect();
        self.op(out, parts, |_| {
            Box::new(move |g| {
                let mut at = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let piece = g.slice_axis(axis, (at..at + n).into()).to_owned();
                        at += n;
                        piece
                    })
                    .collect()
            })
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.concat(parts, Axis(0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.concat(parts, Axis(1))
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        assert!(
            idx.iter().all(|&i| i < va.nrows()),
            "gather_rows index out of range"
        );
        let out = va.select(Axis(0), idx);
        let dim = va.dim();
        let idx = idx.to_vec();
        self.op(out, &[a], |_| {
            Box::new(move |g| {
                let mut full = Array2::zeros(dim);
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = full.row_mut(i);
                    row += &g.row(r);
                }
                vec![full]
            })
        })
    }

    /// General index map: `out.flat[i] = a.flat[idx[i]]` in row-major order.
    pub fn gather_flat(&mut self, a: Var, shape: (usize, usize), idx: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(
            idx.len(),
            shape.0 * shape.1,
            "gather_flat: index count vs shape"
        );
        let src = flat(va);
        assert!(
            idx.iter().all(|&i| i < src.len()),
            "gather_flat index out of range"
        );
        let out =
            Array2::from_shape_vec(shape, idx.iter().map(|&i| src[i]).collect()).expect("shape");
        let dim = va.dim();
        let idx = idx.to_vec();
        self.op(out, &[a], |_| {
            Box::new(move |g| {
                let mut acc = vec![0.0; dim.0 * dim.1];
                for (gi, &i) in g.as_standard_layout().iter().zip(&idx) {
                    acc[i] += gi;
                }
                vec![Array2::from_shape_vec(dim, acc).expect("shape")]
            })
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let dim = va.dim();
        let out = Array2::from_elem((1, 1), va.sum());
        self.op(out, &[a], |_| {
            Box::new(move |g| vec![Array2::from_elem(dim, g[[0, 0]])])
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.nrows();
        assert!(m > 0, "mean_rows of an empty matrix");
        let dim = va.dim();
        let out = row_vec(va.mean_axis(Axis(0)).expect("non-empty"));
        self.op(out, &[a], |_| {
            Box::new(move |g| vec![Array2::from_shape_fn(dim, |(_, j)| g[[0, j]] / m as f64)])
        })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let out = self.value(a).mapv(f);
        self.op(out, &[a], |s| {
            let va = s.value(a).clone();
            Box::new(move |g| vec![Zip::from(g).and(&va).map_collect(|&g, &x| g * df(x))])
        })
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.op(out.clone(), &[a], |_| {
            Box::new(move |g| {
                let mut gi = g * &out;
                for (mut row, srow) in gi.rows_mut().into_iter().zip(out.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row)
                        .and(&srow)
                        .for_each(|r, &s| *r -= s * dot);
                }
                vec![gi]
            })
        })
    }

    /// `log sum_j exp(a[i, j])` per row, `m x 1`. Entries equal to
    /// `-inf` are excluded exactly.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut soft = va.clone();
        let mut lse = Array2::zeros((va.nrows(), 1));
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
            lse[[i, 0]] = m + z.ln();
        }
        self.op(lse, &[a], |_| Box::new(move |g| vec![&soft * g]))
    }

    /// Affine-free normalisation of every row to zero mean and unit variance,
    /// with the variance floored at [`NORM_EPS`].
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let mut out = va.clone();
        let mut inv = Vec::with_capacity(va.nrows());
        let mut floored = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mu = row.sum() / n;
            row.mapv_inplace(|v| v - mu);
            let var = row.fold(0.0, |s, &v| s + v * v) / n;
            let r = 1.0 / var.max(NORM_EPS).sqrt();
            row *= r;
            inv.push(r);
            floored.push(var < NORM_EPS);
        }
        self.op(out.clone(), &[a], |_| {
            Box::new(move |g| {
                let mut gi = g.clone();
                for (i, (mut row, yrow)) in gi.rows_mut().into_iter().zip(out.rows()).enumerate() {
                    let gm = row.sum() / n;
                    let gy = if floored[i] { 0.0 } else { row.dot(&yrow) / n };
                    let r = inv[i];
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|v, &y| *v = r * (*v - gm - y * gy));
                }
                vec![gi]
            })
        })
    }

    /// Rows scaled to unit Euclidean norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let nrm = row.dot(&row).sqrt().max(1e-12);
            row /= nrm;
            norms.push(nrm);
        }
        self.op(out.clone(), &[a], |_| {
            Box::new(move |g| {
                let mut gi = g.clone();
                for (i, (mut row, yrow)) in gi.rows_mut().into_iter().zip(out.rows()).enumerate() {
                    let d = row.dot(&yrow);
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|v, &y| *v = (*v - y * d) / norms[i]);
                }
                vec![gi]
            })
        })
    }

    /// Per-row non-overlapping patch filter: `x` is `C x T`, `w` is `C x P`,
    /// output `C x T/P` with `out[c, j] = sum_p w[c, p] x[c, jP + p]`.
    pub fn depthwise_patch(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (c, t) = vx.dim();
        let p = vw.ncols();
        assert!(
            vw.nrows() == c && p > 0 && t % p == 0,
            "depthwise_patch: x {:?}, w {:?}",
            vx.dim(),
            vw.dim()
        );
        let tp = t / p;
        let out = Array2::from_shape_fn((c, tp), |(ch, j)| {
            (0..p).map(|k| vw[[ch, k]] * vx[[ch, j * p + k]]).sum()
        });
        self.op(out, &[x, w], |s| {
            let (vx, vw) = (s.value(x).clone(), s.value(w).clone());
            Box::new(move |g| {
                let mut gx = Array2::zeros((c, t));
                let mut gw = Array2::zeros((c, p));
                for ch in 0..c {
                    for j in 0..tp {
                        let gv = g[[ch, j]];
                        for k in 0..p {
                            gx[[ch, j * p + k]] += gv * vw[[ch, k]];
                            gw[[ch, k]] += gv * vx[[ch, j * p + k]];
                        }
                    }
                }
                vec![gx, gw]
            })
        })
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[3.0, 4.0]]);
        let c = g.mul(a, b);
        assert!(!g.is_tracked(c));
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(g.scalar(s), 11.0);
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let a = g.param(array![[3.0]]);
        let sq = g.mul(a, a);
        let grads = g.backward(sq);
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.param(array![[2.0, -1.0]]);
        let d = g.detach(a);
        let p = g.mul(a, d);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &array![[2.0, -1.0]]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn layer_norm_rows_moments_and_floor() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0, 4.0, 9.0], [5.0, 5.0, 5.0, 5.0]]);
        let y = g.layer_norm_rows(a);
        let v = g.value(y);
        let r0 = v.row(0);
        assert!(r0.sum().abs() < 1e-12);
        assert!((r0.dot(&r0) / 4.0 - 1.0).abs() < 1e-12);
        assert!(v.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logsumexp_excludes_negative_infinity() {
        let mut g = Graph::new();
        let a = g.constant(array![[f64::NEG_INFINITY, 0.0, 0.0, 0.0]]);
        let l = g.logsumexp_rows(a);
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x * Phi(x) at x = 1: Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gather_flat_scatter_adds() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.gather_flat(a, (1, 3), &[3, 3, 0]);
        assert_eq!(g.value(b), &array![[4.0, 4.0, 1.0]]);
        let s = g.sum_all(b);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 0.0], [0.0, 2.0]]);
    }
}
