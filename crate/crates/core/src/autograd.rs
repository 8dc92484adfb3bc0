//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! returns gradients for every leaf that requires one.
//!
//! Besides the usual elementwise and matrix primitives the tape offers a few
//! fused operations used by the motion model: grouped attention over
//! arbitrary row subsets, per-frame part mixing and per-part projections.
//! Fusing them keeps the tape short and the backward passes explicit.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>, &Mat) -> Vec<Option<Mat>>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Parent values and gradient requirements handed to an operation's backward closure.
pub struct BackwardCtx<'a> {
    parents: Vec<&'a Mat>,
    needs: Vec<bool>,
    out: &'a Mat,
}

impl BackwardCtx<'_> {
    fn parent(&self, i: usize) -> &Mat {
        self.parents[i]
    }

    fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Row groups for [`Tape::attention`]: every query row in a group attends
/// over the listed key rows. A query row must belong to at most one group.
#[derive(Debug, Clone, Default)]
pub struct AttnPlan {
    pub groups: Vec<AttnGroup>,
}

#[derive(Debug, Clone, Default)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}

fn scatter_add_rows(dst: &mut Mat, rows: &[usize], src: &Mat) {
    for (i, &r) in rows.iter().enumerate() {
        let mut d = dst.row_mut(r);
        d += &src.row(i);
    }
}

fn gather_cols(m: &Mat, cols: &[usize]) -> Mat {
    let mut out = Mat::zeros((m.nrows(), cols.len()));
    for (j, &c) in cols.iter().enumerate() {
        out.column_mut(j).assign(&m.column(c));
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_with_grad(x).0
}

// tanh through exp, which is much cheaper than libm's tanh here.
fn fast_tanh(u: f64) -> f64 {
    if u > 20.0 {
        1.0
    } else if u < -20.0 {
        -1.0
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    }
}

fn gelu_with_grad(x: f64) -> (f64, f64) {
    let th = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    let value = 0.5 * x * (1.0 + th);
    let grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (value, grad)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf_rc(Rc::new(value), false)
    }

    /// A leaf whose gradient is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&mut self, value: Rc<Mat>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Mat, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar (1×1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                parents: node.parents.iter().map(|&p| &*self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
                out: &node.value,
            };
            let parent_grads = backward(&ctx, &g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.backward.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise and matrix primitives
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(
            value,
            &[a, b],
            Box::new(|ctx, g| {
                let da = ctx.needs(0).then(|| g.dot(&ctx.parent(1).t()));
                let db = ctx.needs(1).then(|| ctx.parent(0).t().dot(g));
                vec![da, db]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx, g| {
                vec![ctx.needs(0).then(|| g.clone()), ctx.needs(1).then(|| g.clone())]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx, g| vec![ctx.needs(0).then(|| g.clone()), ctx.needs(1).then(|| -g)]),
        )
    }

    /// Sum of several same-shaped nodes, accumulated left to right.
    pub fn sum_all(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|ctx, g| {
                vec![
                    ctx.needs(0).then(|| g * ctx.parent(1)),
                    ctx.needs(1).then(|| g * ctx.parent(0)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, &[a], Box::new(move |_, g| vec![Some(g * c)]))
    }

    /// Adds a `1×n` row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, ca), "add_row: bias shape mismatch");
        let _ = ra;
        let value = self.value(a) + self.value(row);
        self.push(
            value,
            &[a, row],
            Box::new(|ctx, g| {
                vec![
                    ctx.needs(0).then(|| g.clone()),
                    ctx.needs(1).then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    /// `x·w + b` with `b` a `1×n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, &[a], Box::new(|ctx, g| vec![Some(g * ctx.out)]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros(src.dim());
        let mut slope = Mat::zeros(src.dim());
        ndarray::Zip::from(&mut value)
            .and(&mut slope)
            .and(src)
            .for_each(|v, s, &x| (*v, *s) = gelu_with_grad(x));
        self.push(
            value,
            &[a],
            Box::new(move |_, g| vec![Some(&slope * g)]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, &[a], Box::new(|_, g| vec![Some(g.t().to_owned())]))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let na = self.value(a).nrows();
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column mismatch");
        self.push(
            value,
            &[a, b],
            Box::new(move |ctx, g| {
                vec![
                    ctx.needs(0).then(|| g.slice(s![..na, ..]).to_owned()),
                    ctx.needs(1).then(|| g.slice(s![na.., ..]).to_owned()),
                ]
            }),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        let (r0, c0) = src.dim();
        assert_eq!(r0 * c0, rows * cols, "reshape: element count mismatch");
        let value = Mat::from_shape_vec((rows, cols), src.iter().copied().collect())
            .expect("reshape");
        self.push(
            value,
            &[a],
            Box::new(move |_, g| {
                vec![Some(
                    Mat::from_shape_vec((r0, c0), g.iter().copied().collect()).expect("reshape"),
                )]
            }),
        )
    }

    /// Multiplies row `i` by `mask[i]` (a constant `n×1` column).
    pub fn mask_rows(&mut self, a: Var, mask: &[f64]) -> Var {
        let mask: Rc<Vec<f64>> = Rc::new(mask.to_vec());
        assert_eq!(self.value(a).nrows(), mask.len(), "mask_rows: length mismatch");
        let mut value = self.value(a).clone();
        for (mut row, &m) in value.rows_mut().into_iter().zip(mask.iter()) {
            row *= m;
        }
        self.push(
            value,
            &[a],
            Box::new(move |_, g| {
                let mut d = g.clone();
                for (mut row, &m) in d.rows_mut().into_iter().zip(mask.iter()) {
                    row *= m;
                }
                vec![Some(d)]
            }),
        )
    }

    /// Repeats each row of `emb` (`B×d`) `repeat` times: row `b·repeat + r` = `emb[b]`.
    pub fn repeat_rows(&mut self, emb: Var, repeat: usize) -> Var {
        let e = self.value(emb);
        let (b, d) = e.dim();
        let mut value = Mat::zeros((b * repeat, d));
        for i in 0..b {
            value
                .slice_mut(s![i * repeat..(i + 1) * repeat, ..])
                .assign(&e.row(i).broadcast((repeat, d)).unwrap());
        }
        self.push(
            value,
            &[emb],
            Box::new(move |_, g| {
                let mut d_emb = Mat::zeros((b, d));
                for i in 0..b {
                    d_emb
                        .row_mut(i)
                        .assign(&g.slice(s![i * repeat..(i + 1) * repeat, ..]).sum_axis(Axis(0)));
                }
                vec![Some(d_emb)]
            }),
        )
    }

    /// Mean over contiguous row segments `[start, end)`, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let src = self.value(x);
        let (n, d) = src.dim();
        let segments: Rc<Vec<(usize, usize)>> = Rc::new(segments.to_vec());
        let mut value = Mat::zeros((segments.len(), d));
        for (i, &(a, b)) in segments.iter().enumerate() {
            assert!(b > a && b <= n, "segment_mean: bad segment");
            value
                .row_mut(i)
                .assign(&(src.slice(s![a..b, ..]).sum_axis(Axis(0)) / (b - a) as f64));
        }
        self.push(
            value,
            &[x],
            Box::new(move |_, g| {
                let mut dx = Mat::zeros((n, d));
                for (i, &(a, b)) in segments.iter().enumerate() {
                    let gi = &g.row(i) / (b - a) as f64;
                    for r in a..b {
                        dx.row_mut(r).assign(&gi);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scales row `i` of `h` by `gates[i, col]`.
    pub fn row_scale(&mut self, h: Var, gates: Var, col: usize) -> Var {
        let hv = self.value(h);
        let gv = self.value(gates);
        assert_eq!(hv.nrows(), gv.nrows(), "row_scale: row mismatch");
        let mut value = hv.clone();
        for (mut row, &gate) in value.rows_mut().into_iter().zip(gv.column(col).iter()) {
            row *= gate;
        }
        self.push(
            value,
            &[h, gates],
            Box::new(move |ctx, g| {
                let hv = ctx.parent(0);
                let gv = ctx.parent(1);
                let dh = ctx.needs(0).then(|| {
                    let mut d = g.clone();
                    for (mut row, &gate) in d.rows_mut().into_iter().zip(gv.column(col).iter()) {
                        row *= gate;
                    }
                    d
                });
                let dg = ctx.needs(1).then(|| {
                    let mut d = Mat::zeros(gv.dim());
                    for i in 0..hv.nrows() {
                        d[[i, col]] = hv.row(i).dot(&g.row(i));
                    }
                    d
                });
                vec![dh, dg]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(
            value,
            &[a],
            Box::new(|ctx, g| {
                let p = ctx.out;
                let mut d = g * p;
                let rowdot = d.sum_axis(Axis(1));
                for (mut row, (prow, &s)) in d.rows_mut().into_iter().zip(p.rows().into_iter().zip(rowdot.iter())) {
                    row.scaled_add(-s, &prow);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            Zip::from(xhat.row_mut(i))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let xhat = Rc::new(xhat);
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx, g| {
                let gamma = ctx.parent(1);
                let dx = ctx.needs(0).then(|| {
                    let dxhat = g * gamma;
                    let mut dx = Mat::zeros((n, d));
                    for i in 0..n {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let m1 = dr.sum() / d as f64;
                        let m2 = dr.dot(&xr) / d as f64;
                        Zip::from(dx.row_mut(i))
                            .and(dr)
                            .and(xr)
                            .for_each(|o, &a, &b| *o = inv_std[i] * (a - m1 - b * m2));
                    }
                    dx
                });
                let dgamma = ctx
                    .needs(1)
                    .then(|| (g * &*xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dbeta = ctx
                    .needs(2)
                    .then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Mean squared error between equally shaped nodes, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = self.sub(a, b);
        let sq = self.mul(diff, diff);
        self.mean(sq)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let count = v.len() as f64;
        let dim = v.dim();
        let value = Mat::from_elem((1, 1), v.sum() / count);
        self.push(
            value,
            &[a],
            Box::new(move |_, g| vec![Some(Mat::from_elem(dim, g[[0, 0]] / count))]),
        )
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let dim = v.dim();
        let value = Mat::from_elem((1, 1), v.sum());
        self.push(
            value,
            &[a],
            Box::new(move |_, g| vec![Some(Mat::from_elem(dim, g[[0, 0]]))]),
        )
    }

    /// Divides every row by its Euclidean norm (plus `eps`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt() + eps).collect();
        let mut value = v.clone();
        for (mut row, &nrm) in value.rows_mut().into_iter().zip(norms.iter()) {
            row /= nrm;
        }
        let norms = Rc::new(norms);
        self.push(
            value,
            &[a],
            Box::new(move |ctx, g| {
                let x = ctx.parent(0);
                let y = ctx.out;
                let mut d = Mat::zeros(x.dim());
                for i in 0..x.nrows() {
                    // y = x / (|x| + eps); dy/dx = I/n - x xᵀ / (n² |x|)
                    let n = norms[i];
                    let xn = n - eps;
                    let gy = g.row(i);
                    let coeff = if xn > 0.0 { gy.dot(&y.row(i)) / xn } else { 0.0 };
                    let mut dr = d.row_mut(i);
                    dr.assign(&(&gy / n));
                    if xn > 0.0 {
                        dr.scaled_add(-coeff / n, &x.row(i));
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean cross-entropy of each row's softmax against the diagonal target.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Var {
        let l = self.value(logits);
        let n = l.nrows();
        assert_eq!(n, l.ncols(), "diag_cross_entropy: square logits required");
        let p = softmax_rows(l);
        let loss = (0..n).map(|i| -p[[i, i]].ln()).sum::<f64>() / n as f64;
        let p = Rc::new(p);
        self.push(
            Mat::from_elem((1, 1), loss),
            &[logits],
            Box::new(move |_, g| {
                let mut d = (*p).clone();
                for i in 0..n {
                    d[[i, i]] -= 1.0;
                }
                d *= g[[0, 0]] / n as f64;
                vec![Some(d)]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Fused operations for the motion model
    // ------------------------------------------------------------------

    /// Grouped scaled dot-product attention. For each group, the listed query
    /// rows attend over the listed key/value rows with weights
    /// `softmax(q kᵀ · scale)`. Rows of `q` outside every group produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Rc<AttnPlan>, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.ncols(), kv.ncols(), "attention: q/k width mismatch");
        assert_eq!(kv.nrows(), vv.nrows(), "attention: k/v row mismatch");
        let mut out = Mat::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(plan.groups.len());
        for grp in &plan.groups {
            let qg = gather_rows(qv, &grp.queries);
            let kg = gather_rows(kv, &grp.keys);
            let vg = gather_rows(vv, &grp.keys);
            let p = softmax_rows(&(qg.dot(&kg.t()) * scale));
            let og = p.dot(&vg);
            for (i, &r) in grp.queries.iter().enumerate() {
                out.row_mut(r).assign(&og.row(i));
            }
            probs.push(p);
        }
        self.push(
            out,
            &[q, k, v],
            Box::new(move |ctx, g| {
                let (qv, kv, vv) = (ctx.parent(0), ctx.parent(1), ctx.parent(2));
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                for (grp, p) in plan.groups.iter().zip(probs.iter()) {
                    let go = gather_rows(g, &grp.queries);
                    let kg = gather_rows(kv, &grp.keys);
                    let vg = gather_rows(vv, &grp.keys);
                    let dp = go.dot(&vg.t());
                    let mut ds = &dp * p;
                    let rowdot = ds.sum_axis(Axis(1));
                    for (mut row, (prow, &s)) in
                        ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(rowdot.iter()))
                    {
                        row.scaled_add(-s, &prow);
                    }
                    ds *= scale;
                    if ctx.needs(0) {
                        scatter_add_rows(&mut dq, &grp.queries, &ds.dot(&kg));
                    }
                    if ctx.needs(1) {
                        let qg = gather_rows(qv, &grp.queries);
                        scatter_add_rows(&mut dk, &grp.keys, &ds.t().dot(&qg));
                    }
                    if ctx.needs(2) {
                        scatter_add_rows(&mut dv, &grp.keys, &p.t().dot(&go));
                    }
                }
                vec![
                    ctx.needs(0).then_some(dq),
                    ctx.needs(1).then_some(dk),
                    ctx.needs(2).then_some(dv),
                ]
            }),
        )
    }

    /// Mixes part tokens inside every frame with a shared `parts×parts`
    /// matrix: rows `g·parts + p` of the output are `Σ_q a[p,q]·h[g·parts + q]`.
    pub fn part_mix(&mut self, a: Var, h: Var) -> Var {
        let av = self.value(a);
        let hv = self.value(h);
        let n = av.nrows();
        assert_eq!(av.ncols(), n, "part_mix: adjacency must be square");
        assert_eq!(hv.nrows() % n, 0, "part_mix: rows not a multiple of parts");
        let groups = hv.nrows() / n;
        let mut out = Mat::zeros(hv.dim());
        for gi in 0..groups {
            let rows = s![gi * n..(gi + 1) * n, ..];
            ndarray::linalg::general_mat_mul(1.0, av, &hv.slice(rows), 0.0, &mut out.slice_mut(rows));
        }
        self.push(
            out,
            &[a, h],
            Box::new(move |ctx, g| {
                let (av, hv) = (ctx.parent(0), ctx.parent(1));
                let mut da = ctx.needs(0).then(|| Mat::zeros(av.dim()));
                let mut dh = ctx.needs(1).then(|| Mat::zeros(hv.dim()));
                for gi in 0..groups {
                    let rows = s![gi * n..(gi + 1) * n, ..];
                    let gg = g.slice(rows);
                    if let Some(da) = da.as_mut() {
                        ndarray::linalg::general_mat_mul(1.0, &gg, &hv.slice(rows).t(), 1.0, da);
                    }
                    if let Some(dh) = dh.as_mut() {
                        ndarray::linalg::general_mat_mul(1.0, &av.t(), &gg, 0.0, &mut dh.slice_mut(rows));
                    }
                }
                vec![da, dh]
            }),
        )
    }

    /// Per-part affine map on part tokens. Row `g·P + p` is mapped by
    /// `weights[p]`/`biases[p]`; all parts share input and output widths.
    pub fn part_linear(&mut self, x: Var, weights: &[Var], biases: &[Var]) -> Var {
        let parts = weights.len();
        assert_eq!(biases.len(), parts);
        let xv = self.value(x);
        assert_eq!(xv.nrows() % parts, 0, "part_linear: rows not a multiple of parts");
        let groups = xv.nrows() / parts;
        let dout = self.value(weights[0]).ncols();
        let mut out = Mat::zeros((xv.nrows(), dout));
        for p in 0..parts {
            let xp = xv.slice(s![p..;parts, ..]);
            let mut yp = xp.dot(self.value(weights[p]));
            yp += self.value(biases[p]);
            out.slice_mut(s![p..;parts, ..]).assign(&yp);
        }
        let _ = groups;
        let mut parents = vec![x];
        parents.extend_from_slice(weights);
        parents.extend_from_slice(biases);
        self.push(
            out,
            &parents,
            Box::new(move |ctx, g| {
                let xv = ctx.parent(0);
                let mut grads: Vec<Option<Mat>> = Vec::with_capacity(1 + 2 * parts);
                let mut dx = ctx.needs(0).then(|| Mat::zeros(xv.dim()));
                let mut dws = Vec::with_capacity(parts);
                let mut dbs = Vec::with_capacity(parts);
                for p in 0..parts {
                    let gp = g.slice(s![p..;parts, ..]);
                    let xp = xv.slice(s![p..;parts, ..]);
                    if let Some(dx) = dx.as_mut() {
                        dx.slice_mut(s![p..;parts, ..]).assign(&gp.dot(&ctx.parent(1 + p).t()));
                    }
                    dws.push(ctx.needs(1 + p).then(|| xp.t().dot(&gp)));
                    dbs.push(
                        ctx.needs(1 + parts + p)
                            .then(|| gp.sum_axis(Axis(0)).insert_axis(Axis(0))),
                    );
                }
                grads.push(dx);
                grads.extend(dws);
                grads.extend(dbs);
                grads
            }),
        )
    }

    /// Encodes channel slices of each row of `x` (`G×D`) into part tokens:
    /// output row `g·P + p` = `x[g, cols[p]]·weights[p] + biases[p]`.
    pub fn part_encode(
        &mut self,
        x: Var,
        cols: Rc<Vec<Vec<usize>>>,
        weights: &[Var],
        biases: &[Var],
    ) -> Var {
        let parts = cols.len();
        assert_eq!(weights.len(), parts);
        assert_eq!(biases.len(), parts);
        let xv = self.value(x);
        let groups = xv.nrows();
        let dout = self.value(weights[0]).ncols();
        let mut out = Mat::zeros((groups * parts, dout));
        for p in 0..parts {
            let xp = gather_cols(xv, &cols[p]);
            let mut yp = xp.dot(self.value(weights[p]));
            yp += self.value(biases[p]);
            out.slice_mut(s![p..;parts, ..]).assign(&yp);
        }
        let mut parents = vec![x];
        parents.extend_from_slice(weights);
        parents.extend_from_slice(biases);
        self.push(
            out,
            &parents,
            Box::new(move |ctx, g| {
                let xv = ctx.parent(0);
                let mut dx = ctx.needs(0).then(|| Mat::zeros(xv.dim()));
                let mut dws = Vec::with_capacity(parts);
                let mut dbs = Vec::with_capacity(parts);
                for p in 0..parts {
                    let gp = g.slice(s![p..;parts, ..]);
                    if let Some(dx) = dx.as_mut() {
                        let dxp = gp.dot(&ctx.parent(1 + p).t());
                        for (j, &c) in cols[p].iter().enumerate() {
                            let mut col = dx.column_mut(c);
                            col += &dxp.column(j);
                        }
                    }
                    dws.push(ctx.needs(1 + p).then(|| gather_cols(xv, &cols[p]).t().dot(&gp)));
                    dbs.push(
                        ctx.needs(1 + parts + p)
                            .then(|| gp.sum_axis(Axis(0)).insert_axis(Axis(0))),
                    );
                }
                let mut grads = vec![dx];
                grads.extend(dws);
                grads.extend(dbs);
                grads
            }),
        )
    }

    /// Inverse layout of [`Tape::part_encode`]: decodes part tokens
    /// (`G·P × d`) back into `G×width` rows, writing `cols[p]` from part `p`.
    pub fn part_decode(
        &mut self,
        tokens: Var,
        cols: Rc<Vec<Vec<usize>>>,
        width: usize,
        weights: &[Var],
        biases: &[Var],
    ) -> Var {
        let parts = cols.len();
        assert_eq!(weights.len(), parts);
        assert_eq!(biases.len(), parts);
        let tv = self.value(tokens);
        assert_eq!(tv.nrows() % parts, 0, "part_decode: rows not a multiple of parts");
        let groups = tv.nrows() / parts;
        let mut out = Mat::zeros((groups, width));
        for p in 0..parts {
            let tp = tv.slice(s![p..;parts, ..]);
            let mut yp = tp.dot(self.value(weights[p]));
            yp += self.value(biases[p]);
            for (j, &c) in cols[p].iter().enumerate() {
                out.column_mut(c).assign(&yp.column(j));
            }
        }
        let mut parents = vec![tokens];
        parents.extend_from_slice(weights);
        parents.extend_from_slice(biases);
        self.push(
            out,
            &parents,
            Box::new(move |ctx, g| {
                let tv = ctx.parent(0);
                let mut dt = ctx.needs(0).then(|| Mat::zeros(tv.dim()));
                let mut dws = Vec::with_capacity(parts);
                let mut dbs = Vec::with_capacity(parts);
                for p in 0..parts {
                    let gp = gather_cols(g, &cols[p]);
                    if let Some(dt) = dt.as_mut() {
                        dt.slice_mut(s![p..;parts, ..]).assign(&gp.dot(&ctx.parent(1 + p).t()));
                    }
                    dws.push(
                        ctx.needs(1 + p)
                            .then(|| tv.slice(s![p..;parts, ..]).t().dot(&gp)),
                    );
                    dbs.push(
                        ctx.needs(1 + parts + p)
                            .then(|| gp.sum_axis(Axis(0)).insert_axis(Axis(0))),
                    );
                }
                let mut grads = vec![dt];
                grads.extend(dws);
                grads.extend(dbs);
                grads
            }),
        )
    }
}
