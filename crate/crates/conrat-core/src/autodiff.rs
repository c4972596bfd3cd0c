//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Graph`] is a tape of nodes created in topological order. Every value is
//! an `Array2<f64>`; scalars are `1x1`, row vectors `1xN`, column vectors
//! `Mx1`. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node reachable from the loss.
//!
//! The tape is rebuilt per batch: parameters live outside the graph and are
//! attached as leaves each step.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise add; rhs may be a `1xN` row broadcast against `MxN`.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of same-shape matrices.
    Mul(NodeId, NodeId),
    /// `MxN` scaled per row by an `Mx1` column.
    MulCol(NodeId, NodeId),
    /// `MxN` scaled by a `1x1` graph scalar.
    ScaleBy(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    MeanAll(NodeId),
    /// Row-wise softmax over positions where `support > 0`; rows with empty
    /// support yield all zeros.
    MaskedSoftmaxRows(NodeId, Array2<f64>),
    LogSoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Row gather from an embedding-style table.
    GatherRows(NodeId, Vec<usize>),
    /// Sliding window sum over the last `width` positions of each row.
    CausalWindowSum(NodeId, usize),
    /// Forward value is the hard sample; gradient flows to the surrogate
    /// untouched.
    StraightThrough(NodeId),
    /// Row-wise cosine similarity between two `MxN` operands -> `Mx1`.
    /// Zero-norm rows produce 0 with no gradient.
    CosineRows(NodeId, NodeId),
    /// Mean negative log-likelihood of the given class per row -> `1x1`.
    NllMean(NodeId, Vec<usize>),
    /// One fused GRU cell update over a batch row-block. Kept as a single
    /// node so long sequences do not blow up the tape.
    GruStep(Box<GruStepData>),
}

#[derive(Debug)]
pub struct GruStepData {
    x: NodeId,
    h_prev: NodeId,
    wx: NodeId,
    wh: NodeId,
    bx: NodeId,
    bh: NodeId,
    /// `Bx1` indicator: 1 = real token, 0 = pad (carries `h_prev` through).
    pad_keep: Array2<f64>,
    // forward intermediates needed by backward
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if the node is
    /// unreachable from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf. Leaves receive gradients like any other node; whether
    /// they are parameters or constants is the caller's business.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.dim() == vb.dim() {
            va + vb
        } else if vb.nrows() == 1 && vb.ncols() == va.ncols() {
            va + &vb.row(0)
        } else {
            panic!("add: incompatible shapes {:?} and {:?}", va.dim(), vb.dim());
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.dim() == vb.dim() {
            va - vb
        } else if vb.nrows() == 1 && vb.ncols() == va.ncols() {
            va - &vb.row(0)
        } else {
            panic!("sub: incompatible shapes {:?} and {:?}", va.dim(), vb.dim());
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        let value = va * vb;
        self.push(value, Op::Mul(a, b))
    }

    /// `a: MxN`, `col: Mx1` -> every row of `a` scaled by its entry of `col`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        assert_eq!(vc.ncols(), 1, "mul_col: rhs must be a column");
        assert_eq!(va.nrows(), vc.nrows(), "mul_col: row mismatch");
        let value = va * vc;
        self.push(value, Op::MulCol(a, col))
    }

    /// Scale a matrix by a `1x1` node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let value = &self.nodes[a.0].value * sv;
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = if va.dim() == c.dim() {
            va + c
        } else if c.nrows() == 1 && c.ncols() == va.ncols() {
            va + &c.row(0)
        } else {
            panic!("add_const: incompatible shapes");
        };
        self.push(value, Op::AddConst(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[a.0].value + c;
        // Same backward as MulConst with factor 1.
        self.push(value, Op::MulConst(a, 1.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1));
        let n = v.len();
        self.push(v.into_shape_with_order((n, 1)).unwrap(), Op::SumRows(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    /// Row softmax restricted to `support > 0`. Rows whose support is empty
    /// come out all-zero instead of NaN.
    pub fn masked_softmax_rows(&mut self, a: NodeId, support: Array2<f64>) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.dim(), support.dim(), "masked_softmax: shape mismatch");
        let value = masked_softmax(va, &support);
        self.push(value, Op::MaskedSoftmaxRows(a, support))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut value = va.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            value
                .slice_mut(ndarray::s![.., at..at + v.ncols()])
                .assign(v);
            at += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut value = Array2::zeros((indices.len(), t.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            value.row_mut(i).assign(&t.row(ix));
        }
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// `y[r, t] = sum_{j = max(0, t-width+1)}^{t} x[r, j]`
    pub fn causal_window_sum(&mut self, a: NodeId, width: usize) -> NodeId {
        let value = causal_window_sum(&self.nodes[a.0].value, width);
        self.push(value, Op::CausalWindowSum(a, width))
    }

    /// Straight-through substitution: forward takes `hard`, backward treats
    /// the node as if it were `surrogate`.
    pub fn straight_through(&mut self, surrogate: NodeId, hard: Array2<f64>) -> NodeId {
        assert_eq!(
            self.nodes[surrogate.0].value.dim(),
            hard.dim(),
            "straight_through: shape mismatch"
        );
        self.push(hard, Op::StraightThrough(surrogate))
    }

    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.dim(), vb.dim(), "cosine_rows: shape mismatch");
        let mut value = Array2::zeros((va.nrows(), 1));
        for r in 0..va.nrows() {
            let (ra, rb) = (va.row(r), vb.row(r));
            let dot: f64 = ra.dot(&rb);
            let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
            value[(r, 0)] = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
        }
        self.push(value, Op::CosineRows(a, b))
    }

    /// `-(1/M) * sum_r logp[r, labels[r]]` -> `1x1`.
    pub fn nll_mean(&mut self, logp: NodeId, labels: &[usize]) -> NodeId {
        let v = &self.nodes[logp.0].value;
        assert_eq!(v.nrows(), labels.len(), "nll_mean: label count mismatch");
        let m = labels.len() as f64;
        let s: f64 = labels.iter().enumerate().map(|(r, &c)| v[(r, c)]).sum();
        self.push(Array2::from_elem((1, 1), -s / m), Op::NllMean(logp, labels.to_vec()))
    }

    /// One GRU cell update: `h = pad_keep * GRU(x, h_prev) + (1 - pad_keep) * h_prev`.
    ///
    /// Gate layout in `wx` (`Dx3H`), `wh` (`Hx3H`), `bx`, `bh` (`1x3H`):
    /// reset | update | candidate. The candidate uses the reset-scaled hidden
    /// projection `tanh(gx_n + r * gh_n)`.
    pub fn gru_step(
        &mut self,
        x: NodeId,
        h_prev: NodeId,
        wx: NodeId,
        wh: NodeId,
        bx: NodeId,
        bh: NodeId,
        pad_keep: Array2<f64>,
    ) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let vh = &self.nodes[h_prev.0].value;
        let (b, hdim) = vh.dim();
        assert_eq!(vx.nrows(), b, "gru_step: batch mismatch");
        assert_eq!(pad_keep.dim(), (b, 1), "gru_step: pad column shape");

        let gx = vx.dot(&self.nodes[wx.0].value) + &self.nodes[bx.0].value.row(0);
        let gh = vh.dot(&self.nodes[wh.0].value) + &self.nodes[bh.0].value.row(0);
        assert_eq!(gx.ncols(), 3 * hdim, "gru_step: gate width");

        let s = |m: &Array2<f64>, i: usize| m.slice(ndarray::s![.., i * hdim..(i + 1) * hdim]).to_owned();
        let r = (s(&gx, 0) + s(&gh, 0)).mapv(sigmoid);
        let z = (s(&gx, 1) + s(&gh, 1)).mapv(sigmoid);
        let gh_n = s(&gh, 2);
        let n = (s(&gx, 2) + &r * &gh_n).mapv(f64::tanh);

        let mut h = Array2::zeros((b, hdim));
        for row in 0..b {
            let keep = pad_keep[(row, 0)];
            for c in 0..hdim {
                let raw = (1.0 - z[(row, c)]) * n[(row, c)] + z[(row, c)] * vh[(row, c)];
                h[(row, c)] = keep * raw + (1.0 - keep) * vh[(row, c)];
            }
        }
        self.push(
            h,
            Op::GruStep(Box::new(GruStepData {
                x,
                h_prev,
                wx,
                wh,
                bx,
                bh,
                pad_keep,
                r,
                z,
                n,
                gh_n,
            })),
        )
    }

    /// Backward pass from a `1x1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Shape("backward: loss node must be 1x1".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            // Interior gradients are consumed here and not retained; only
            // leaves come out of the pass with a gradient.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let vb = &self.nodes[b.0].value;
                    if vb.dim() == g.dim() {
                        accumulate(&mut grads, *b, g.clone());
                    } else {
                        let summed = g.sum_axis(Axis(0));
                        let n = summed.len();
                        accumulate(&mut grads, *b, summed.into_shape_with_order((1, n)).unwrap());
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let vb = &self.nodes[b.0].value;
                    if vb.dim() == g.dim() {
                        accumulate(&mut grads, *b, -&g);
                    } else {
                        let summed = g.sum_axis(Axis(0));
                        let n = summed.len();
                        accumulate(&mut grads, *b, (-summed).into_shape_with_order((1, n)).unwrap());
                    }
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[b.0].value);
                    accumulate(&mut grads, *b, &g * &self.nodes[a.0].value);
                }
                Op::MulCol(a, col) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[col.0].value);
                    let prod = &g * &self.nodes[a.0].value;
                    let summed = prod.sum_axis(Axis(1));
                    let n = summed.len();
                    accumulate(&mut grads, *col, summed.into_shape_with_order((n, 1)).unwrap());
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.nodes[s.0].value[(0, 0)];
                    accumulate(&mut grads, *a, &g * sv);
                    let ds = (&g * &self.nodes[a.0].value).sum();
                    accumulate(&mut grads, *s, Array2::from_elem((1, 1), ds));
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Sigmoid(a) => {
                    let d = &node.value * &node.value.mapv(|y| 1.0 - y);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::LeakyRelu(a, slope) => {
                    let input = &self.nodes[a.0].value;
                    let d = input.mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let input = &self.nodes[a.0].value;
                    let d = input.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let va = &self.nodes[a.0].value;
                    let mut d = Array2::zeros(va.dim());
                    for r in 0..va.nrows() {
                        d.row_mut(r).fill(g[(r, 0)]);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    let n = (shape.0 * shape.1) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[(0, 0)] / n));
                }
                Op::MaskedSoftmaxRows(a, support) => {
                    let w = &node.value;
                    let mut d = Array2::zeros(w.dim());
                    for r in 0..w.nrows() {
                        let dot: f64 = (0..w.ncols()).map(|c| g[(r, c)] * w[(r, c)]).sum();
                        for c in 0..w.ncols() {
                            if support[(r, c)] > 0.0 {
                                d[(r, c)] = w[(r, c)] * (g[(r, c)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = g.clone();
                    for r in 0..d.nrows() {
                        let gsum: f64 = g.row(r).sum();
                        for c in 0..d.ncols() {
                            d[(r, c)] -= node.value[(r, c)].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                        accumulate(&mut grads, *p, dp);
                        at += w;
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let va = &self.nodes[a.0].value;
                    let mut d = Array2::zeros(va.dim());
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(table, indices) => {
                    let vt = &self.nodes[table.0].value;
                    let mut d = Array2::zeros(vt.dim());
                    for (i, &ix) in indices.iter().enumerate() {
                        let mut row = d.row_mut(ix);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::CausalWindowSum(a, width) => {
                    // dL/dx[r, j] = sum_{t = j}^{min(T-1, j+width-1)} dL/dy[r, t]
                    let va = &self.nodes[a.0].value;
                    let t = va.ncols();
                    let mut d = Array2::zeros(va.dim());
                    for r in 0..va.nrows() {
                        let mut run = 0.0;
                        // iterate j from high to low keeping a window sum of g
                        for j in (0..t).rev() {
                            run += g[(r, j)];
                            if j + *width < t {
                                run -= g[(r, j + *width)];
                            }
                            d[(r, j)] = run;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::StraightThrough(surrogate) => accumulate(&mut grads, *surrogate, g),
                Op::CosineRows(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Array2::zeros(va.dim());
                    let mut db = Array2::zeros(vb.dim());
                    for r in 0..va.nrows() {
                        let (ra, rb) = (va.row(r), vb.row(r));
                        let dot: f64 = ra.dot(&rb);
                        let (na2, nb2) = (ra.dot(&ra), rb.dot(&rb));
                        let (na, nb) = (na2.sqrt(), nb2.sqrt());
                        if na > 0.0 && nb > 0.0 {
                            let c = dot / (na * nb);
                            let gr = g[(r, 0)];
                            for j in 0..va.ncols() {
                                da[(r, j)] = gr * (rb[j] / (na * nb) - c * ra[j] / na2);
                                db[(r, j)] = gr * (ra[j] / (na * nb) - c * rb[j] / nb2);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::NllMean(logp, labels) => {
                    let v = &self.nodes[logp.0].value;
                    let m = labels.len() as f64;
                    let mut d = Array2::zeros(v.dim());
                    for (r, &c) in labels.iter().enumerate() {
                        d[(r, c)] = -g[(0, 0)] / m;
                    }
                    accumulate(&mut grads, *logp, d);
                }
                Op::GruStep(data) => {
                    let vx = &self.nodes[data.x.0].value;
                    let vh = &self.nodes[data.h_prev.0].value;
                    let (b, hdim) = vh.dim();
                    let (r, z, n, gh_n) = (&data.r, &data.z, &data.n, &data.gh_n);

                    let mut dh_prev = Array2::zeros((b, hdim));
                    let mut da_r = Array2::zeros((b, hdim));
                    let mut da_z = Array2::zeros((b, hdim));
                    let mut da_n = Array2::zeros((b, hdim));
                    let mut dgh_n = Array2::zeros((b, hdim));
                    for row in 0..b {
                        let keep = data.pad_keep[(row, 0)];
                        for c in 0..hdim {
                            let gr = g[(row, c)];
                            let draw = gr * keep;
                            dh_prev[(row, c)] = gr * (1.0 - keep);
                            let dn = draw * (1.0 - z[(row, c)]);
                            let dz = draw * (vh[(row, c)] - n[(row, c)]);
                            dh_prev[(row, c)] += draw * z[(row, c)];
                            let dan = dn * (1.0 - n[(row, c)] * n[(row, c)]);
                            da_n[(row, c)] = dan;
                            let dr = dan * gh_n[(row, c)];
                            dgh_n[(row, c)] = dan * r[(row, c)];
                            da_r[(row, c)] = dr * r[(row, c)] * (1.0 - r[(row, c)]);
                            da_z[(row, c)] = dz * z[(row, c)] * (1.0 - z[(row, c)]);
                        }
                    }
                    let mut dgx = Array2::zeros((b, 3 * hdim));
                    let mut dgh = Array2::zeros((b, 3 * hdim));
                    dgx.slice_mut(ndarray::s![.., 0..hdim]).assign(&da_r);
                    dgx.slice_mut(ndarray::s![.., hdim..2 * hdim]).assign(&da_z);
                    dgx.slice_mut(ndarray::s![.., 2 * hdim..]).assign(&da_n);
                    dgh.slice_mut(ndarray::s![.., 0..hdim]).assign(&da_r);
                    dgh.slice_mut(ndarray::s![.., hdim..2 * hdim]).assign(&da_z);
                    dgh.slice_mut(ndarray::s![.., 2 * hdim..]).assign(&dgh_n);

                    let wx = &self.nodes[data.wx.0].value;
                    let wh = &self.nodes[data.wh.0].value;
                    accumulate(&mut grads, data.x, dgx.dot(&wx.t()));
                    accumulate(&mut grads, data.wx, vx.t().dot(&dgx));
                    let bx_sum = dgx.sum_axis(Axis(0));
                    let w3 = bx_sum.len();
                    accumulate(&mut grads, data.bx, bx_sum.into_shape_with_order((1, w3)).unwrap());
                    dh_prev += &dgh.dot(&wh.t());
                    accumulate(&mut grads, data.h_prev, dh_prev);
                    accumulate(&mut grads, data.wh, vh.t().dot(&dgh));
                    let bh_sum = dgh.sum_axis(Axis(0));
                    accumulate(&mut grads, data.bh, bh_sum.into_shape_with_order((1, w3)).unwrap());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shared kernel for the mask surrogate: per-row sliding sum over the last
/// `width` entries.
pub fn causal_window_sum(x: &Array2<f64>, width: usize) -> Array2<f64> {
    let (rows, t) = x.dim();
    let mut y = Array2::zeros((rows, t));
    for r in 0..rows {
        let mut run = 0.0;
        for j in 0..t {
            run += x[(r, j)];
            if j >= width {
                run -= x[(r, j - width)];
            }
            y[(r, j)] = run;
        }
    }
    y
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
/// Test utility; also used by the acceptance gradient checks.
pub fn finite_difference<F>(f: &mut F, x: &Array2<f64>, eps: f64) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + eps;
            let hi = f(&probe);
            probe[(r, c)] = orig - eps;
            let lo = f(&probe);
            probe[(r, c)] = orig;
            grad[(r, c)] = (hi - lo) / (2.0 * eps);
        }
    }
    grad
}

/// max |a - b| / max(1, |a|, |b|) over all entries.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Row softmax over `support > 0`; empty-support rows are all zeros.
pub fn masked_softmax(x: &Array2<f64>, support: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if support[(r, c)] > 0.0 && x[(r, c)] > max {
                max = x[(r, c)];
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..cols {
            if support[(r, c)] > 0.0 {
                let e = (x[(r, c)] - max).exp();
                out[(r, c)] = e;
                total += e;
            }
        }
        for c in 0..cols {
            out[(r, c)] /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Check autodiff against central differences for a graph built from a
    /// single variable leaf plus fixed side inputs.
    fn check_single<F>(x: &Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let loss = build(&mut g, xid);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get_or_zeros(xid, x.dim());

        let mut f = |probe: &Array2<f64>| {
            let mut g = Graph::new();
            let xid = g.leaf(probe.clone());
            let loss = build(&mut g, xid);
            g.scalar(loss)
        };
        let numeric = finite_difference(&mut f, x, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "rel err {err} exceeds {tol}");
    }

    #[test]
    fn elementwise_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 3, 4);
        check_single(
            &x,
            |g, xid| {
                let s = g.sigmoid(xid);
                let t = g.tanh(s);
                let l = g.leaky_relu(t, 0.01);
                let e = g.exp(l);
                g.sum_all(e)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_add_broadcast_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, 3, 5);
        let w = randn(&mut rng, 5, 2);
        let b = randn(&mut rng, 1, 2);
        check_single(
            &x,
            |g, xid| {
                let wid = g.leaf(w.clone());
                let bid = g.leaf(b.clone());
                let y = g.matmul(xid, wid);
                let y = g.add(y, bid);
                let y = g.tanh(y);
                g.sum_all(y)
            },
            1e-6,
        );
        // Same graph, gradient w.r.t. the broadcast bias.
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let wid = g.leaf(w.clone());
        let bid = g.leaf(b.clone());
        let y = g.matmul(xid, wid);
        let y = g.add(y, bid);
        let y = g.tanh(y);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get_or_zeros(bid, b.dim());
        let mut f = |probe: &Array2<f64>| {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone());
            let wid = g.leaf(w.clone());
            let bid = g.leaf(probe.clone());
            let y = g.matmul(xid, wid);
            let y = g.add(y, bid);
            let y = g.tanh(y);
            let loss = g.sum_all(y);
            g.scalar(loss)
        };
        let numeric = finite_difference(&mut f, &b, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn masked_softmax_and_pooling_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, 2, 6);
        let support = array![
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 1.0, 1.0, 0.0]
        ];
        check_single(
            &x,
            move |g, xid| {
                let w = g.masked_softmax_rows(xid, support.clone());
                let sq = g.mul(w, w);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_empty_row_is_zero_with_zero_grad() {
        let x = array![[0.3, -0.5, 2.0]];
        let support = Array2::zeros((1, 3));
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let w = g.masked_softmax_rows(xid, support);
        assert!(g.value(w).iter().all(|&v| v == 0.0));
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get_or_zeros(xid, x.dim());
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_softmax_nll_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, 4, 3);
        let labels = vec![0usize, 2, 1, 1];
        check_single(
            &x,
            move |g, xid| {
                let lp = g.log_softmax_rows(xid);
                g.nll_mean(lp, &labels)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_slice_roundtrip_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, 3, 4);
        check_single(
            &x,
            |g, xid| {
                let a = g.slice_cols(xid, 0, 2);
                let b = g.slice_cols(xid, 2, 4);
                let joined = g.concat_cols(&[b, a, a]);
                let y = g.sigmoid(joined);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let table = randn(&mut rng, 5, 3);
        check_single(
            &table,
            |g, tid| {
                let rows = g.gather_rows(tid, &[1, 3, 1, 1]);
                let y = g.tanh(rows);
                g.sum_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn causal_window_sum_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, 2, 9);
        for width in [1usize, 3, 9, 12] {
            check_single(
                &x,
                move |g, xid| {
                    let y = g.causal_window_sum(xid, width);
                    let y = g.tanh(y);
                    g.sum_all(y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let x = array![[0.2, 0.7, 0.1]];
        let hard = array![[0.0, 1.0, 0.0]];
        let scale = array![[3.0, -2.0, 5.0]];
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let soft = g.sigmoid(xid);
        let st = g.straight_through(soft, hard.clone());
        assert_eq!(g.value(st), &hard);
        let sid = g.leaf(scale.clone());
        let y = g.mul(st, sid);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get_or_zeros(xid, x.dim());
        // d/dx sum(scale * sigmoid(x)) even though forward used `hard`
        let expected = x.mapv(sigmoid).mapv(|s| s * (1.0 - s)) * &scale;
        assert!(max_rel_err(&gx, &expected) < 1e-12);
    }

    #[test]
    fn cosine_rows_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = randn(&mut rng, 3, 5);
        let b = randn(&mut rng, 3, 5);
        check_single(
            &a,
            move |g, aid| {
                let bid = g.leaf(b.clone());
                let c = g.cosine_rows(aid, bid);
                g.sum_all(c)
            },
            1e-5,
        );
    }

    #[test]
    fn cosine_rows_zero_norm_is_zero_with_zero_grad() {
        let a = array![[0.0, 0.0, 0.0]];
        let b = array![[1.0, 2.0, 3.0]];
        let mut g = Graph::new();
        let aid = g.leaf(a.clone());
        let bid = g.leaf(b.clone());
        let c = g.cosine_rows(aid, bid);
        assert_eq!(g.scalar(c), 0.0);
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get_or_zeros(aid, a.dim()).iter().all(|&v| v == 0.0));
        assert!(grads.get_or_zeros(bid, b.dim()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_col_scale_by_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, 4, 3);
        let col = randn(&mut rng, 4, 1);
        let alpha = array![[0.37]];
        check_single(
            &x,
            |g, xid| {
                let cid = g.leaf(col.clone());
                let aid = g.leaf(alpha.clone());
                let y = g.mul_col(xid, cid);
                let y = g.scale_by(y, aid);
                let y = g.tanh(y);
                g.sum_all(y)
            },
            1e-6,
        );
        // grads w.r.t. the column and the scalar
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let cid = g.leaf(col.clone());
        let aid = g.leaf(alpha.clone());
        let y = g.mul_col(xid, cid);
        let y = g.scale_by(y, aid);
        let y = g.tanh(y);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        for (vid, val) in [(cid, &col), (aid, &alpha)] {
            let analytic = grads.get_or_zeros(vid, val.dim());
            let mut f = |probe: &Array2<f64>| {
                let mut g = Graph::new();
                let xid = g.leaf(x.clone());
                let mut vals = [col.clone(), alpha.clone()];
                if vid == cid {
                    vals[0] = probe.clone();
                } else {
                    vals[1] = probe.clone();
                }
                let cid2 = g.leaf(vals[0].clone());
                let aid2 = g.leaf(vals[1].clone());
                let y = g.mul_col(xid, cid2);
                let y = g.scale_by(y, aid2);
                let y = g.tanh(y);
                let loss = g.sum_all(y);
                g.scalar(loss)
            };
            let numeric = finite_difference(&mut f, val, 1e-5);
            assert!(max_rel_err(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn sum_rows_mean_all_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = randn(&mut rng, 3, 4);
        check_single(
            &x,
            |g, xid| {
                let rows = g.sum_rows(xid);
                let sq = g.mul(rows, rows);
                g.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // x used twice: loss = sum(x*x) + sum(sigmoid(x))
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, 2, 3);
        check_single(
            &x,
            |g, xid| {
                let sq = g.mul(xid, xid);
                let a = g.sum_all(sq);
                let s = g.sigmoid(xid);
                let b = g.sum_all(s);
                g.add(a, b)
            },
            1e-6,
        );
    }

    #[test]
    fn gru_step_matches_fd_for_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (b, d, h) = (3, 4, 5);
        let x = randn(&mut rng, b, d);
        let h0 = randn(&mut rng, b, h);
        let wx = randn(&mut rng, d, 3 * h);
        let wh = randn(&mut rng, h, 3 * h);
        let bx = randn(&mut rng, 1, 3 * h);
        let bh = randn(&mut rng, 1, 3 * h);
        // row 1 is a pad row: its output must carry h_prev through
        let pad = array![[1.0], [0.0], [1.0]];
        let target = randn(&mut rng, b, h);

        let inputs = [&x, &h0, &wx, &wh, &bx, &bh];
        let build = |g: &mut Graph, vals: [&Array2<f64>; 6]| -> (Vec<NodeId>, NodeId) {
            let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf((*v).clone())).collect();
            // two chained steps so h_prev gradients compose through time
            let h1 = g.gru_step(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], pad.clone());
            let h2 = g.gru_step(ids[0], h1, ids[2], ids[3], ids[4], ids[5], pad.clone());
            let tid = g.leaf(target.clone());
            let diff = g.sub(h2, tid);
            let sq = g.mul(diff, diff);
            (ids, g.sum_all(sq))
        };

        let mut g = Graph::new();
        let (ids, loss) = build(&mut g, inputs);
        let grads = g.backward(loss).unwrap();

        // pad row of h1 equals h0 row 1 exactly
        let h1_val = g.value(NodeId(ids[5].0 + 1));
        for c in 0..h {
            assert_eq!(h1_val[(1, c)], h0[(1, c)]);
        }

        for which in 0..6 {
            let analytic = grads.get_or_zeros(ids[which], inputs[which].dim());
            let mut f = |probe: &Array2<f64>| {
                let mut g = Graph::new();
                let mut vals: Vec<&Array2<f64>> = inputs.to_vec();
                vals[which] = probe;
                let arr: [&Array2<f64>; 6] = vals.try_into().unwrap();
                let (_, loss) = build(&mut g, arr);
                g.scalar(loss)
            };
            let numeric = finite_difference(&mut f, inputs[which], 1e-5);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Array2::zeros((2, 2)));
        assert!(g.backward(x).is_err());
    }
}
