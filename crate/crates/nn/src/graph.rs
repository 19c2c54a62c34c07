//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the adjoint sweep. Sequences are stored time-major: row
//! `t * batch + b` holds step `t` of sequence `b`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Node handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sentinel row index for [`Graph::gather_rows`] meaning "all zeros".
pub const PAD_ROW: usize = usize::MAX;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    LogEps(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SegmentMean(Var, Vec<(usize, usize)>),
    UnfoldRows {
        x: Var,
        kernel: usize,
        stride: usize,
        offset: isize,
    },
    OverlapAdd {
        x: Var,
        stride: usize,
        offset: isize,
    },
    Lstm(Box<LstmTape>),
}

struct LstmTape {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    steps: usize,
    batch: usize,
    reverse: bool,
    /// Activated gates `[i, f, g, o]`, one row per (step, sequence).
    gates: Array2<f64>,
    cells: Array2<f64>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar objective with respect to every parameter that
/// took part in the forward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    per_param: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            per_param: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.per_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self` (both built against the same store).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (acc, g) in self.per_param.iter_mut().zip(&other.per_param) {
            if let Some(g) = g {
                match acc {
                    Some(a) => *a += g,
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.per_param.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.per_param
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.per_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by graph op"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// `a + row` with `row` (1 × cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * v);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// `ln(a + eps)`; `a` must stay above `-eps`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|v| (v + eps).ln());
        let ng = self.ng(a);
        self.push(value, Op::LogEps(a, eps), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization followed by an affine map (`gamma`, `beta` are 1 × cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / cols;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / cols;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Output row `i` is input row `rows[i]`, or zeros for [`PAD_ROW`].
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            if r != PAD_ROW {
                value.row_mut(i).assign(&src.row(r));
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, rows), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(a).slice(s![.., lo..hi]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, lo, hi), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(a).slice(s![lo..hi, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, lo, hi), ng)
    }

    /// One output row per `(start, len)` segment: the mean of those rows.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<(usize, usize)>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((segments.len(), src.ncols()));
        for (i, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "empty segment");
            let mean = src
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("nonempty");
            value.row_mut(i).assign(&mean);
        }
        let ng = self.ng(a);
        self.push(value, Op::SegmentMean(a, segments), ng)
    }

    /// Temporal im2col: output row `n` concatenates input rows
    /// `n * stride + offset + k` for `k in 0..kernel` (zeros outside).
    pub fn unfold_rows(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        offset: isize,
        out_rows: usize,
    ) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.dim();
        let mut value = Array2::zeros((out_rows, kernel * cols));
        for n in 0..out_rows {
            for k in 0..kernel {
                let r = (n * stride) as isize + offset + k as isize;
                if r >= 0 && (r as usize) < rows {
                    value
                        .slice_mut(s![n, k * cols..(k + 1) * cols])
                        .assign(&src.row(r as usize));
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            value,
            Op::UnfoldRows {
                x,
                kernel,
                stride,
                offset,
            },
            ng,
        )
    }

    /// Transposed framing: row `n` of `x` (length `kernel`) is added into a
    /// single-column signal of `out_len` samples starting at
    /// `n * stride + offset`.
    pub fn overlap_add(&mut self, x: Var, stride: usize, offset: isize, out_len: usize) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((out_len, 1));
        for (n, row) in src.rows().into_iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let t = (n * stride) as isize + offset + k as isize;
                if t >= 0 && (t as usize) < out_len {
                    value[[t as usize, 0]] += v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::OverlapAdd { x, stride, offset }, ng)
    }

    /// Single-direction LSTM over `steps × batch` time-major rows.
    ///
    /// `w_ih` is `in × 4H`, `w_hh` is `H × 4H`, `bias` is `1 × 4H`; gate order
    /// is input, forget, cell, output. Returns the hidden states, same row
    /// layout as `x`.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        batch: usize,
        reverse: bool,
    ) -> Var {
        let rows = self.shape(x).0;
        assert!(batch > 0 && rows.is_multiple_of(batch), "lstm rows not divisible by batch");
        let steps = rows / batch;
        let hidden = self.shape(w_hh).0;
        let mut pre = self.value(x).dot(self.value(w_ih));
        pre += self.value(bias);
        let w_hh_v = self.value(w_hh);

        let mut gates = Array2::zeros((rows, 4 * hidden));
        let mut cells = Array2::zeros((rows, hidden));
        let mut out = Array2::zeros((rows, hidden));
        let mut h_prev = Array2::<f64>::zeros((batch, hidden));
        let mut c_prev = Array2::<f64>::zeros((batch, hidden));

        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let r0 = t * batch;
            let mut z = pre.slice(s![r0..r0 + batch, ..]).to_owned();
            if s > 0 {
                z += &h_prev.dot(w_hh_v);
            }
            let mut c = Array2::zeros((batch, hidden));
            let mut h = Array2::zeros((batch, hidden));
            for b in 0..batch {
                for j in 0..hidden {
                    let i = sigmoid(z[[b, j]]);
                    let f = sigmoid(z[[b, hidden + j]]);
                    let g = z[[b, 2 * hidden + j]].tanh();
                    let o = sigmoid(z[[b, 3 * hidden + j]]);
                    let cv = f * c_prev[[b, j]] + i * g;
                    c[[b, j]] = cv;
                    h[[b, j]] = o * cv.tanh();
                    z[[b, j]] = i;
                    z[[b, hidden + j]] = f;
                    z[[b, 2 * hidden + j]] = g;
                    z[[b, 3 * hidden + j]] = o;
                }
            }
            gates.slice_mut(s![r0..r0 + batch, ..]).assign(&z);
            cells.slice_mut(s![r0..r0 + batch, ..]).assign(&c);
            out.slice_mut(s![r0..r0 + batch, ..]).assign(&h);
            h_prev = h;
            c_prev = c;
        }
        let ng = self.ng(x) || self.ng(w_ih) || self.ng(w_hh) || self.ng(bias);
        self.push(
            out,
            Op::Lstm(Box::new(LstmTape {
                x,
                w_ih,
                w_hh,
                bias,
                steps,
                batch,
                reverse,
                gates,
                cells,
            })),
            ng,
        )
    }

    /// Runs the adjoint sweep from the given output seeds and returns the
    /// parameter gradients.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = Gradients {
            per_param: vec![None; self.store.len()],
        };
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        out: &mut Gradients,
    ) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out.per_param[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if ng(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::AddRow(a, row) => {
                if ng(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ng(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Add(a, b) => {
                if ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if ng(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if ng(*b) {
                    accumulate(grads, *b, -&g);
                }
                if ng(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, &g * self.value(*b));
                }
                if ng(*b) {
                    accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g * *f),
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= 2.0 * x);
                accumulate(grads, *a, d);
            }
            Op::LogEps(a, eps) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d /= x + eps);
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = &g * y;
                let dots = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dots)
                    .for_each(|mut dr, yr, &dot| {
                        Zip::from(&mut dr).and(&yr).for_each(|dv, &yv| *dv -= yv * dot);
                    });
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if ng(*gamma) {
                    accumulate(
                        grads,
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if ng(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ng(*x) {
                    let gx = &g * self.value(*gamma);
                    let cols = gx.ncols() as f64;
                    let mean_g = gx.sum_axis(Axis(1)) / cols;
                    let mean_gx = (&gx * xhat).sum_axis(Axis(1)) / cols;
                    let mut d = gx;
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let xr = xhat.row(r);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = inv_std[r] * (*v - mean_g[r] - xr[c] * mean_gx[r]);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    if r != PAD_ROW {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if ng(p) {
                        accumulate(grads, p, g.slice(s![.., lo..lo + w]).to_owned());
                    }
                    lo += w;
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *lo..*hi]).assign(&g);
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if ng(p) {
                        accumulate(grads, p, g.slice(s![lo..lo + h, ..]).to_owned());
                    }
                    lo += h;
                }
            }
            Op::SliceRows(a, lo, hi) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*lo..*hi, ..]).assign(&g);
                accumulate(grads, *a, d);
            }
            Op::SegmentMean(a, segments) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &(start, len)) in segments.iter().enumerate() {
                    let share = g.row(i).mapv(|v| v / len as f64);
                    for r in start..start + len {
                        let mut dst = d.row_mut(r);
                        dst += &share;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::UnfoldRows {
                x,
                kernel,
                stride,
                offset,
            } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Array2::zeros((rows, cols));
                for n in 0..g.nrows() {
                    for k in 0..*kernel {
                        let r = (n * stride) as isize + offset + k as isize;
                        if r >= 0 && (r as usize) < rows {
                            let mut dst = d.row_mut(r as usize);
                            dst += &g.slice(s![n, k * cols..(k + 1) * cols]);
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::OverlapAdd { x, stride, offset } => {
                let (frames, kernel) = self.shape(*x);
                let out_len = g.nrows();
                let mut d = Array2::zeros((frames, kernel));
                for n in 0..frames {
                    for k in 0..kernel {
                        let t = (n * stride) as isize + offset + k as isize;
                        if t >= 0 && (t as usize) < out_len {
                            d[[n, k]] = g[[t as usize, 0]];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Lstm(tape) => self.backprop_lstm(tape, &node.value, g, grads),
        }
    }

    fn backprop_lstm(
        &self,
        tape: &LstmTape,
        hs: &Array2<f64>,
        g: Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let LstmTape {
            x,
            w_ih,
            w_hh,
            bias,
            steps,
            batch,
            reverse,
            gates,
            cells,
        } = tape;
        let (steps, batch) = (*steps, *batch);
        let hidden = cells.ncols();
        let w_hh_v = self.value(*w_hh);
        let mut dz_all = Array2::zeros((steps * batch, 4 * hidden));
        let mut dw_hh = Array2::<f64>::zeros(w_hh_v.dim());
        let mut dh_next = Array2::<f64>::zeros((batch, hidden));
        let mut dc_next = Array2::<f64>::zeros((batch, hidden));

        for s in (0..steps).rev() {
            let t = if *reverse { steps - 1 - s } else { s };
            let r0 = t * batch;
            // state carried into step `t` comes from the previously processed step
            let prev = if s == 0 {
                None
            } else if *reverse {
                Some((t + 1) * batch)
            } else {
                Some((t - 1) * batch)
            };
            let mut dz = Array2::zeros((batch, 4 * hidden));
            for b in 0..batch {
                for j in 0..hidden {
                    let i = gates[[r0 + b, j]];
                    let f = gates[[r0 + b, hidden + j]];
                    let gg = gates[[r0 + b, 2 * hidden + j]];
                    let o = gates[[r0 + b, 3 * hidden + j]];
                    let c = cells[[r0 + b, j]];
                    let c_prev = prev.map_or(0.0, |p| cells[[p + b, j]]);
                    let tc = c.tanh();
                    let dh = g[[r0 + b, j]] + dh_next[[b, j]];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[[b, j]];
                    let d_f = dc * c_prev;
                    let d_i = dc * gg;
                    let d_g = dc * i;
                    dc_next[[b, j]] = dc * f;
                    dz[[b, j]] = d_i * i * (1.0 - i);
                    dz[[b, hidden + j]] = d_f * f * (1.0 - f);
                    dz[[b, 2 * hidden + j]] = d_g * (1.0 - gg * gg);
                    dz[[b, 3 * hidden + j]] = d_o * o * (1.0 - o);
                }
            }
            if let Some(p) = prev {
                let h_prev = hs.slice(s![p..p + batch, ..]);
                dw_hh += &h_prev.t().dot(&dz);
                dh_next = dz.dot(&w_hh_v.t());
            } else {
                dh_next.fill(0.0);
            }
            dz_all.slice_mut(s![r0..r0 + batch, ..]).assign(&dz);
        }

        let ng = |v: Var| self.nodes[v.0].needs_grad;
        if ng(*w_hh) {
            accumulate(grads, *w_hh, dw_hh);
        }
        if ng(*bias) {
            accumulate(grads, *bias, dz_all.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if ng(*w_ih) {
            accumulate(grads, *w_ih, self.value(*x).t().dot(&dz_all));
        }
        if ng(*x) {
            accumulate(grads, *x, dz_all.dot(&self.value(*w_ih).t()));
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}
