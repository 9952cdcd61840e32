//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its value and the indices of its
//! operands, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Scalar, Tensor};

/// Probability floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Scale(Var, T),
    SumCols(Var),
    Mean(Var),
    MaxCols(Var),
    Reindex(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<[usize; 2]>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(prim: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape(format!("{prim}: {}x{} vs {}x{}", a[0], a[1], b[0], b[1]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True if every value recorded so far is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm_into(
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            T::zero(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).values().to_vec();
        for r in 0..sa[0] {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::Shape("concat: no operands".into()))?;
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(shape_err("concat", self.shape(parts[0]), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row_slice(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start + len > sa[1] {
            return Err(Error::Shape(format!(
                "slice: columns {start}..{} out of range for {}x{}",
                start + len,
                sa[0],
                sa[1]
            )));
        }
        let mut out = Tensor::zeros(sa[0], len);
        for r in 0..sa[0] {
            out.row_mut(r)
                .copy_from_slice(&self.value(a).row_slice(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice(a, start), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::from_f64(LOG_FLOOR);
        self.unary(
            a,
            |x| if x > floor { x.ln() } else { floor.ln() },
            Op::Log(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row_slice(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = out.row_mut(r);
            let mut sum = T::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Sum over columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let vals = (0..src.rows())
            .map(|r| src.row_slice(r).iter().copied().sum())
            .collect();
        let out = Tensor::new(src.rows(), 1, vals).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Maximum over columns: `m x n -> m x 1`. Gradient goes to the first maximum.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let vals = (0..src.rows())
            .map(|r| {
                src.row_slice(r)
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max)
            })
            .collect();
        let out = Tensor::new(src.rows(), 1, vals).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::MaxCols(a), rg)
    }

    /// Mean of all entries: `-> 1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = T::from_f64(src.len() as f64);
        let s: T = src.values().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// Per-row column reindexing: `out[r][maps[r][j]] = a[r][j]`.
    ///
    /// Each row of `maps` must be a permutation of `0..cols`.
    pub fn reindex(&mut self, a: Var, maps: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a);
        if maps.len() != sa[0] || maps.iter().any(|m| m.len() != sa[1]) {
            return Err(Error::Shape(format!(
                "reindex: {} maps for a {}x{} operand",
                maps.len(),
                sa[0],
                sa[1]
            )));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(sa[0], sa[1]);
        for (r, map) in maps.iter().enumerate() {
            let dst = out.row_mut(r);
            for (j, &x) in src.row_slice(r).iter().enumerate() {
                dst[map[j]] = x;
            }
        }
        let flat = maps.concat();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reindex(a, flat), rg))
    }

    /// Mean over rows of `-sum_i target_i * ln(pred_i)`; `target` is treated as a constant.
    pub fn cce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let lp = self.log(pred);
        let prod = self.mul(lp, target)?;
        let per_row = self.sum_cols(prod);
        let m = self.mean(per_row);
        Ok(self.scale(m, -T::one()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            let s = self.shape(loss);
            return Err(Error::Usage(format!(
                "backward needs a 1x1 loss, got {}x{}",
                s[0], s[1]
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, self.shape(*a));
                    gemm_into(g, false, self.value(*b), true, ga, T::one());
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, self.shape(*b));
                    gemm_into(self.value(*a), true, g, false, gb, T::one());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.requires_grad(*row) {
                    let gr = slot(grads, *row, self.shape(*row));
                    for r in 0..g.rows() {
                        for (d, &x) in gr.values_mut().iter_mut().zip(g.row_slice(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let gb = g.zip_map(self.value(*b), |x, y| x * y);
                    slot(grads, *a, g.shape()).add_assign(&gb);
                }
                if self.requires_grad(*b) {
                    let ga = g.zip_map(self.value(*a), |x, y| x * y);
                    slot(grads, *b, g.shape()).add_assign(&ga);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    if self.requires_grad(p) {
                        let gp = slot(grads, p, sp);
                        for r in 0..sp[0] {
                            let src = &g.row_slice(r)[off..off + sp[1]];
                            for (d, &x) in gp.row_mut(r).iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    off += sp[1];
                }
            }
            Op::Slice(a, start) => {
                let ga = slot(grads, *a, self.shape(*a));
                for r in 0..g.rows() {
                    let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                    for (d, &x) in dst.iter_mut().zip(g.row_slice(r)) {
                        *d += x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(y, |g, y| g * y * (T::one() - y));
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(y, |g, y| g * (T::one() - y * y));
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(
                    self.value(*a),
                    |g, x| if x > T::zero() { g } else { T::zero() },
                );
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::Softmax(a) => {
                let ga = slot(grads, *a, g.shape());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row_slice(r), y.row_slice(r));
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::Log(a) => {
                let floor = T::from_f64(LOG_FLOOR);
                let d = g.zip_map(
                    self.value(*a),
                    |g, x| if x > floor { g / x } else { T::zero() },
                );
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(y, |g, y| g * y);
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::Scale(a, s) => {
                let s = *s;
                let d = g.map(|g| g * s);
                slot(grads, *a, g.shape()).add_assign(&d);
            }
            Op::SumCols(a) => {
                let sa = self.shape(*a);
                let ga = slot(grads, *a, sa);
                for r in 0..sa[0] {
                    let gr = g.get(r, 0);
                    for d in ga.row_mut(r) {
                        *d += gr;
                    }
                }
            }
            Op::Mean(a) => {
                let sa = self.shape(*a);
                let share = g.values()[0] / T::from_f64((sa[0] * sa[1]) as f64);
                for d in slot(grads, *a, sa).values_mut() {
                    *d += share;
                }
            }
            Op::MaxCols(a) => {
                let src = self.value(*a);
                let ga = slot(grads, *a, src.shape());
                for r in 0..src.rows() {
                    let j = crate::tensor::argmax(src.row_slice(r));
                    ga.row_mut(r)[j] += g.get(r, 0);
                }
            }
            Op::Reindex(a, flat) => {
                let sa = self.shape(*a);
                let ga = slot(grads, *a, sa);
                for r in 0..sa[0] {
                    let map = &flat[r * sa[1]..(r + 1) * sa[1]];
                    let gr = g.row_slice(r);
                    for (j, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d += gr[map[j]];
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: [usize; 2]) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

/// Categorical cross-entropy `-sum_i target_i ln(max(pred_i, 1e-9))` on plain vectors.
pub fn cce(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Usage(format!(
            "cce: predicted has {} entries, target has {}",
            predicted.len(),
            target.len()
        )));
    }
    Ok(-predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if t == 0.0 {
                0.0
            } else {
                t * p.max(LOG_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(row(&[0.0; 5]));
        let y = t.softmax(x);
        for &v in t.value(y).values() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), Some(0.5));
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn cce_gradient_at_uniform_logits() {
        let n = 4;
        let c = 2;
        let mut t = Tape::<f64>::new();
        let logits = t.param(row(&[0.0; 4]));
        let p = t.softmax(logits);
        let target = t.constant(Tensor::one_hot_rows(&[c], n));
        let loss = t.cce(p, target).unwrap();
        let g = t.backward(loss).unwrap();
        for (i, &v) in g.get(logits).unwrap().values().iter().enumerate() {
            let expected = 1.0 / n as f64 - if i == c { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::scalar(5.0));
        let y = t.scale(x, 3.0);
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).values(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.param(row(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 2));
        let msg = t.add(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("add") && msg.contains("2x3") && msg.contains("3x2"),
            "{msg}"
        );
    }

    #[test]
    fn plain_cce_closed_forms() {
        assert_eq!(cce(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let v = cce(&[0.1, 0.8, 0.1], &[0.0, 1.0, 0.0]).unwrap();
        assert!((v - (-(0.8f64).ln())).abs() < 1e-12);
        let u = 1.0 / 3.0;
        let v = cce(&[u, u, u], &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        assert!(cce(&[1.0], &[0.5, 0.5]).is_err());
    }
}
