//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] with seed gradients on one or more output nodes returns
//! the gradient of every recorded node. Vectors are `1×n` or `n×1` matrices.
//!
//! ```
//! use meldae::tape::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[1.0, 2.0]]);
//! let w = tape.leaf(array![[3.0], [4.0]]);
//! let y = tape.matmul(x, w);
//! assert_eq!(tape.value(y)[[0, 0]], 11.0);
//!
//! let grads = tape.backward(&[(y, array![[1.0]])]);
//! assert_eq!(grads.get(w).unwrap(), &array![[1.0], [2.0]]);
//! ```

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    PermuteRows(Var, Vec<usize>),
    MeanRows(Var),
    LayerNormRows(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Operation log for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no seeded output depends
    /// on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::Mul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _, _)
            | Op::SliceRows(a, _, _)
            | Op::PermuteRows(a, _)
            | Op::MeanRows(a)
            | Op::LayerNormRows(a, _) => self.rg(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row`, broadcasting the `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a * row`, broadcasting the `1×n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    /// Output row `i` is input row `perm[i]`. `perm` must be a permutation.
    pub fn permute_rows(&mut self, a: Var, perm: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &perm);
        self.push(v, Op::PermuteRows(a, perm))
    }

    /// Column means, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.mean_axis(Axis(0)).expect("mean of empty matrix").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    /// Reverse sweep. Each seed is `(output node, dLoss/d output)`.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::MulRow(a, row) => {
                    if self.rg(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            accumulate(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.rg(*p) {
                            accumulate(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start, len) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::PermuteRows(a, perm) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (i, &src) in perm.iter().enumerate() {
                        d.row_mut(src).assign(&g.row(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).dim();
                    let row = &g / m as f64;
                    let d = row.broadcast((m, n)).expect("mean_rows grad broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Mat::zeros(x.dim());
                    let n = x.ncols() as f64;
                    for i in 0..x.nrows() {
                        let xr = x.row(i);
                        let mean = xr.sum() / n;
                        let var = xr.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let g_mean = gr.sum() / n;
                        let gy_mean = gr.dot(&yr) / n;
                        let mut dr = d.row_mut(i);
                        for j in 0..x.ncols() {
                            dr[j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
            // Keep leaf gradients; interior gradients were consumed above.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
        Mat::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum(out * probe))/d(input) against central differences.
    fn check_op(build: impl Fn(&mut Tape, Var) -> Var, input: Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = build(&mut tape, x);
        let probe = random(&mut rng, tape.value(y).nrows(), tape.value(y).ncols());
        let grads = tape.backward(&[(y, probe.clone())]);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(input.dim()));

        let f = |m: &Mat| {
            let mut t = Tape::new();
            let x = t.leaf(m.clone());
            let y = build(&mut t, x);
            (t.value(y) * &probe).sum()
        };
        let h = 1e-6;
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let mut plus = input.clone();
                plus[[i, j]] += h;
                let mut minus = input.clone();
                minus[[i, j]] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "grad mismatch at ({i},{j}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let x = random(&mut rng, 5, 4);
        check_op(
            |t, x| {
                let w = t.constant(w.clone());
                t.matmul(x, w)
            },
            x.clone(),
        );
        check_op(|t, x| t.sigmoid(x), x.clone());
        check_op(|t, x| t.tanh(x), x.clone());
        check_op(|t, x| t.softmax_rows(x), x.clone());
        check_op(|t, x| t.layer_norm_rows(x, 1e-5), x.clone());
        check_op(|t, x| t.mean_rows(x), x.clone());
        check_op(|t, x| t.transpose(x), x.clone());
        check_op(|t, x| t.permute_rows(x, vec![4, 2, 0, 1, 3]), x.clone());
        check_op(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_rows(x, 0, 5);
                let b = t.slice_cols(b, 0, 2);
                let c = t.concat_cols(&[a, b]);
                let d = t.concat_rows(&[a, b]);
                let ct = t.transpose(c);
                let d5 = t.slice_rows(d, 3, 5);
                let e = t.matmul(ct, d5);
                t.mul(e, e)
            },
            x.clone(),
        );
        check_op(
            |t, x| {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w);
                let r = t.constant(row.clone());
                let a = t.add_row(h, r);
                let b = t.mul_row(a, r);
                let c = t.scale(b, -0.5);
                t.add(c, h)
            },
            x.clone(),
        );
        check_op(|t, x| t.relu(x), x + 0.05);
    }

    #[test]
    fn row_parameters_receive_broadcast_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = tape.leaf(array![[0.5, -1.0]]);
        let y = tape.mul_row(a, r);
        let z = tape.add_row(y, r);
        let g = tape.backward(&[(z, Mat::ones((2, 2)))]);
        // d/dr of sum(a*r + r) = colsum(a) + rows
        assert_eq!(g.get(r).unwrap(), &array![[6.0, 8.0]]);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1000.0, 1001.0, 999.0], [-3.0, 0.0, 2.0]]);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p.is_finite() && p >= 0.0));
        }
    }
}
