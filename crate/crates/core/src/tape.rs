//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! The model's forward pass is recorded onto a [`Tape`] as a sequence of
//! primitive operations; [`Tape::backward`] then walks the record in reverse
//! and accumulates exact gradients. Insertion order is a valid topological
//! order because operations can only reference earlier nodes.
//!
//! Scalars are 1x1 matrices and row vectors are 1xd. Every primitive has a
//! hand-derived adjoint that is unit-tested against central finite
//! differences.

use ndarray::{s, Array2, Axis};

/// Matrix value type used throughout the model.
pub type Matrix = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// N x d plus a broadcast 1 x d row.
    AddRow(usize, usize),
    /// N x d times a broadcast 1 x d row.
    MulRow(usize, usize),
    MatMul(usize, usize),
    /// Constant matrix (left) times a tape value (right); used for fixed
    /// neighbor-aggregation operators.
    DotConst(Matrix, usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Elementwise power with constant exponent.
    PowConst(usize, f64),
    /// Column means: N x d -> 1 x d.
    ColMean(usize),
    /// Column maxima with saved argmax rows: N x d -> 1 x d.
    ColMax(usize, Vec<usize>),
    /// Row gather; duplicate indices accumulate gradient.
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Transpose(usize),
    /// Rows scaled to unit L2 norm; zero rows stay zero. Saves the norms.
    NormalizeRows(usize, Vec<f64>),
    /// Softmax over groups of rows of an E x 1 score column.
    SegmentSoftmax { scores: usize, segments: Vec<usize> },
    /// out[dst[e]] += w[e] * values[src[e]] over all entries e.
    ScatterWeightedRows {
        weights: usize,
        values: usize,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    /// Sum of all entries -> 1 x 1.
    Sum(usize),
    /// Mean cross-entropy of logit rows against target indices -> 1 x 1.
    CrossEntropyMean(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Matrix {
        &self.grads[v.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let val = self.value(v);
        (val.nrows(), val.ncols())
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Matrix::from_elem((1, 1), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: rhs must be 1 x d");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: rhs must be 1 x d");
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let value = self.value(a) * &self.value(row).row(0);
        self.push(value, Op::MulRow(a.0, row.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a).1,
            self.shape(b).0,
            "matmul: inner dimension mismatch"
        );
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn dot_const(&mut self, left: Matrix, b: Var) -> Var {
        assert_eq!(left.ncols(), self.shape(b).0, "dot_const: inner mismatch");
        let value = left.dot(self.value(b));
        self.push(value, Op::DotConst(left, b.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(value, Op::PowConst(a.0, p))
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        assert!(n > 0, "col_mean of empty matrix");
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(value, Op::ColMean(a.0))
    }

    pub fn col_max(&mut self, a: Var) -> Var {
        let (n, d) = self.shape(a);
        assert!(n > 0, "col_max of empty matrix");
        let val = self.value(a);
        let mut out = Matrix::zeros((1, d));
        let mut argmax = vec![0usize; d];
        for j in 0..d {
            let mut best = f64::NEG_INFINITY;
            for i in 0..n {
                if val[[i, j]] > best {
                    best = val[[i, j]];
                    argmax[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(out, Op::ColMax(a.0, argmax))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (n, d) = self.shape(a);
        let mut out = Matrix::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < n, "select_rows: row {r} out of range {n}");
            out.row_mut(i).assign(&self.value(a).row(r));
        }
        self.push(out, Op::SelectRows(a.0, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Matrix::zeros((total, d));
        let mut at = 0;
        for &p in parts {
            let (rows, pd) = self.shape(p);
            assert_eq!(pd, d, "concat_rows: width mismatch");
            out.slice_mut(s![at..at + rows, ..]).assign(self.value(p));
            at += rows;
        }
        self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let (pn, cols) = self.shape(p);
            assert_eq!(pn, n, "concat_cols: height mismatch");
            out.slice_mut(s![.., at..at + cols]).assign(self.value(p));
            at += cols;
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.shape(a);
        let mut norms = vec![0.0; n];
        let mut out = Matrix::zeros((n, d));
        for i in 0..n {
            let row = self.value(a).row(i);
            let norm = row.dot(&row).sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                out.row_mut(i).assign(&(&row / norm));
            }
        }
        self.push(out, Op::NormalizeRows(a.0, norms))
    }

    /// Softmax within each segment of an E x 1 score column. `segments[e]`
    /// assigns row `e` to a group; groups need not be contiguous.
    pub fn segment_softmax(&mut self, scores: Var, segments: &[usize]) -> Var {
        let (e, one) = self.shape(scores);
        assert_eq!(one, 1, "segment_softmax expects an E x 1 column");
        assert_eq!(segments.len(), e);
        let num_segments = segments.iter().copied().max().map_or(0, |m| m + 1);
        let val = self.value(scores);
        let mut seg_max = vec![f64::NEG_INFINITY; num_segments];
        for i in 0..e {
            seg_max[segments[i]] = seg_max[segments[i]].max(val[[i, 0]]);
        }
        let mut seg_sum = vec![0.0; num_segments];
        let mut out = Matrix::zeros((e, 1));
        for i in 0..e {
            let x = (val[[i, 0]] - seg_max[segments[i]]).exp();
            out[[i, 0]] = x;
            seg_sum[segments[i]] += x;
        }
        for i in 0..e {
            out[[i, 0]] /= seg_sum[segments[i]];
        }
        self.push(
            out,
            Op::SegmentSoftmax {
                scores: scores.0,
                segments: segments.to_vec(),
            },
        )
    }

    /// Weighted scatter-add of value rows: `out[dst[e]] += w[e] * values[src[e]]`.
    pub fn scatter_weighted_rows(
        &mut self,
        weights: Var,
        values: Var,
        src: &[usize],
        dst: &[usize],
        n_out: usize,
    ) -> Var {
        let (e, one) = self.shape(weights);
        assert_eq!(one, 1, "weights must be E x 1");
        assert_eq!(src.len(), e);
        assert_eq!(dst.len(), e);
        let (nv, d) = self.shape(values);
        let mut out = Matrix::zeros((n_out, d));
        for i in 0..e {
            assert!(src[i] < nv && dst[i] < n_out);
            let w = self.value(weights)[[i, 0]];
            let row = self.value(values).row(src[i]).to_owned();
            let mut target = out.row_mut(dst[i]);
            target += &(&row * w);
        }
        self.push(
            out,
            Op::ScatterWeightedRows {
                weights: weights.0,
                values: values.0,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    /// Mean cross-entropy over logit rows with integer targets.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, m) = self.shape(logits);
        assert_eq!(targets.len(), n, "one target per logit row");
        assert!(targets.iter().all(|&t| t < m), "target outside class range");
        let val = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = val.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let value = Matrix::from_elem((1, 1), total / n as f64);
        self.push(value, Op::CrossEntropyMean(logits.0, targets.to_vec()))
    }

    /// Accumulates gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros((n.value.nrows(), n.value.ncols())))
            .collect();
        grads[loss.0][[0, 0]] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let g = grads[idx].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::AddRow(a, row) => {
                    grads[*a] += &g;
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*row] += &col_sum;
                }
                Op::MulRow(a, row) => {
                    let da = &g * &self.nodes[*row].value.row(0);
                    grads[*a] += &da;
                    let dr = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    grads[*row] += &dr;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::DotConst(left, b) => {
                    let db = left.t().dot(&g);
                    grads[*b] += &db;
                }
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    grads[*a] += &(&g * &mask);
                }
                Op::Scale(a, s) => {
                    grads[*a] += &(&g * *s);
                }
                Op::AddScalar(a) => {
                    grads[*a] += &g;
                }
                Op::PowConst(a, p) => {
                    let da = self.nodes[*a].value.mapv(|x| p * x.powf(p - 1.0));
                    grads[*a] += &(&g * &da);
                }
                Op::ColMean(a) => {
                    let n = self.nodes[*a].value.nrows() as f64;
                    let spread = &g.row(0) / n;
                    for mut row in grads[*a].rows_mut() {
                        row += &spread;
                    }
                }
                Op::ColMax(a, argmax) => {
                    for (j, &i) in argmax.iter().enumerate() {
                        grads[*a][[i, j]] += g[[0, j]];
                    }
                }
                Op::SelectRows(a, rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        let gi = g.row(i).to_owned();
                        let mut target = grads[*a].row_mut(r);
                        target += &gi;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        let slice = g.slice(s![at..at + rows, ..]).to_owned();
                        grads[p] += &slice;
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.ncols();
                        let slice = g.slice(s![.., at..at + cols]).to_owned();
                        grads[p] += &slice;
                        at += cols;
                    }
                }
                Op::Transpose(a) => {
                    grads[*a] += &g.t();
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(g.raw_dim());
                    for i in 0..g.nrows() {
                        let r = norms[i];
                        if r == 0.0 {
                            continue;
                        }
                        let gi = g.row(i);
                        let yi = y.row(i);
                        let proj = gi.dot(&yi);
                        let adj = (&gi - &(&yi * proj)) / r;
                        da.row_mut(i).assign(&adj);
                    }
                    grads[*a] += &da;
                }
                Op::SegmentSoftmax { scores, segments } => {
                    let alpha = &self.nodes[idx].value;
                    let num_segments = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut seg_dot = vec![0.0; num_segments];
                    for i in 0..segments.len() {
                        seg_dot[segments[i]] += g[[i, 0]] * alpha[[i, 0]];
                    }
                    let mut da = Matrix::zeros(alpha.raw_dim());
                    for i in 0..segments.len() {
                        da[[i, 0]] = alpha[[i, 0]] * (g[[i, 0]] - seg_dot[segments[i]]);
                    }
                    grads[*scores] += &da;
                }
                Op::ScatterWeightedRows {
                    weights,
                    values,
                    src,
                    dst,
                } => {
                    let w = self.nodes[*weights].value.clone();
                    let v = self.nodes[*values].value.clone();
                    for e in 0..src.len() {
                        let gout = g.row(dst[e]);
                        let dval = &gout * w[[e, 0]];
                        let mut tv = grads[*values].row_mut(src[e]);
                        tv += &dval;
                        grads[*weights][[e, 0]] += gout.dot(&v.row(src[e]));
                    }
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    grads[*a] += s;
                }
                Op::CrossEntropyMean(logits, targets) => {
                    let val = &self.nodes[*logits].value;
                    let n = targets.len();
                    let scale = g[[0, 0]] / n as f64;
                    let mut da = Matrix::zeros(val.raw_dim());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = val.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for j in 0..row.len() {
                            let p = exps[j] / z;
                            da[[i, j]] = (p - if j == t { 1.0 } else { 0.0 }) * scale;
                        }
                    }
                    grads[*logits] += &da;
                }
            }
        }
        Gradients { grads }
    }
}

/// Numerically stable softmax of a plain matrix row (helper for inference
/// paths that do not need the tape).
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / z).collect()
}
