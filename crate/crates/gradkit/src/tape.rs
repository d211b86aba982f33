//! Eager tape: every primitive is evaluated when it is recorded, and
//! [`Tape::backward`] replays the records in reverse.

use crate::array::{gemm, Array};
use crate::error::{GradError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary primitive lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs is one row repeated over every row of lhs.
    Row,
    /// rhs is one column repeated over every column of lhs.
    Col,
}

impl Bcast {
    fn resolve(op: &'static str, l: &Array, r: &Array) -> Result<Bcast> {
        if l.shape() == r.shape() {
            return Ok(Bcast::Same);
        }
        if r.len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if l.ndim() == 2 {
            let (rows, cols) = (l.shape()[0], l.shape()[1]);
            let rs = r.shape();
            if (rs == [1, cols] || rs == [cols]) && r.len() == cols {
                return Ok(Bcast::Row);
            }
            if rs == [rows, 1] {
                return Ok(Bcast::Col);
            }
        }
        Err(GradError::ShapeMismatch {
            op,
            lhs: l.shape().to_vec(),
            rhs: r.shape().to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    RowSum(Var),
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Records primitive applications in topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Array {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Array::zeros(&self.shapes[v.0]).expect("recorded shapes are valid"),
        }
    }

    pub fn take(&mut self, v: Var) -> Array {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Array::zeros(&self.shapes[v.0]).expect("recorded shapes are valid"),
        }
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

fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(GradError::UnknownNode(v.0))
    }

    /// Records an input. Gradients are available for every leaf; whether it
    /// is treated as a parameter or a constant is up to the caller.
    pub fn var(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Array, Bcast)> {
        let (l, r) = (&self.node(a)?.value, &self.node(b)?.value);
        let bc = Bcast::resolve(op, l, r)?;
        let cols = l.cols();
        let rd = r.data();
        let data = l
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rd[bc.index(i, cols)]))
            .collect();
        Ok((Array::from_parts(l.shape().to_vec(), data), bc))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Array> {
        Ok(self.node(a)?.value.map(f))
    }

    /// Elementwise `a + b`; `b` may be a scalar, a row, or a column of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b, bc), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b, bc), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b, bc), v))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.unary(a, |x| k * x)?;
        Ok(self.push(Op::Scale(a, k), v))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a constant scalar.
    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.unary(a, |x| x + k)?;
        Ok(self.push(Op::AddScalar(a), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l, r) = (&self.node(a)?.value, &self.node(b)?.value);
        if l.ndim() != 2 || r.ndim() != 2 || l.shape()[1] != r.shape()[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: l.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let (m, k, n) = (l.shape()[0], l.shape()[1], r.shape()[1]);
        let data = gemm(l.data(), m, k, false, r.data(), k, n, false);
        Ok(self.push(Op::MatMul(a, b), Array::from_parts(vec![m, n], data)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::tanh)?;
        Ok(self.push(Op::Tanh(a), v))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| x * sigmoid(x))?;
        Ok(self.push(Op::Silu(a), v))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::exp)?;
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::ln)?;
        Ok(self.push(Op::Log(a), v))
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, softplus)?;
        Ok(self.push(Op::Softplus(a), v))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        Ok(self.push(Op::Sum(a), Array::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Op::Mean(a), Array::scalar(m)))
    }

    /// Sum of squares of every entry.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sq_norm();
        Ok(self.push(Op::SqNorm(a), Array::scalar(s)))
    }

    /// Per-row sums of a matrix, as an `[rows, 1]` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let (r, c) = (x.rows(), x.cols());
        let data = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::RowSum(a), Array::from_parts(vec![r, 1], data)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GradError::InvalidArgument("concat of zero arrays".into()))?;
        let rows = self.node(*first)?.value.rows();
        let mut width = 0;
        for &p in parts {
            let x = &self.node(p)?.value;
            if x.ndim() != 2 || x.rows() != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            width += x.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Array::from_parts(vec![rows, width], data)))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Array) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(GradError::EmptyTape);
        }
        let out = self.node(output)?;
        if out.value.shape() != seed.shape() {
            return Err(GradError::ShapeMismatch {
                op: "backward",
                lhs: out.value.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(GradError::NotScalar {
                op: "backward_scalar",
                shape: out.value.shape().to_vec(),
            });
        }
        self.backward(output, &Array::full(out.value.shape(), 1.0)?)
    }

    fn propagate(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, reduce(g, val(*b), *bc, |gi, _| gi));
            }
            Op::Sub(a, b, bc) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, reduce(g, val(*b), *bc, |gi, _| -gi));
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let cols = av.cols();
                let ga = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[bc.index(i, cols)])
                    .collect();
                accumulate(grads, *a, Array::from_parts(av.shape().to_vec(), ga));
                accumulate(grads, *b, reduce(g, bv, *bc, |gi, i| gi * av.data()[i]));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = gemm(g.data(), m, n, false, bv.data(), k, n, true);
                let gb = gemm(av.data(), m, k, true, g.data(), m, n, false);
                accumulate(grads, *a, Array::from_parts(vec![m, k], ga));
                accumulate(grads, *b, Array::from_parts(vec![k, n], gb));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.zip_map(y, "tanh", |gi, yi| gi * (1.0 - yi * yi)).expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g
                    .zip_map(val(*a), "silu", |gi, x| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, "exp", |gi, y| gi * y).expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_map(val(*a), "log", |gi, x| gi / x).expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(val(*a), "softplus", |gi, x| gi * sigmoid(x)).expect("same shape");
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gi = g.data()[0];
                accumulate(grads, *a, val(*a).map(|_| gi));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gi = g.data()[0] / x.len() as f64;
                accumulate(grads, *a, x.map(|_| gi));
            }
            Op::SqNorm(a) => {
                let gi = g.data()[0];
                accumulate(grads, *a, val(*a).map(|x| 2.0 * gi * x));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let c = x.cols();
                let data = (0..x.len()).map(|i| g.data()[i / c]).collect();
                accumulate(grads, *a, Array::from_parts(x.shape().to_vec(), data));
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, Array::from_parts(vec![rows, w], data));
                }
            }
        }
    }
}

/// Sums `f(g_i, i)` into the (possibly broadcast) shape of `target`.
fn reduce(g: &Array, target: &Array, bc: Bcast, f: impl Fn(f64, usize) -> f64) -> Array {
    let cols = g.cols();
    let mut out = vec![0.0; target.len()];
    for (i, &gi) in g.data().iter().enumerate() {
        out[bc.index(i, cols)] += f(gi, i);
    }
    Array::from_parts(target.shape().to_vec(), out)
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_ones() {
        let mut t = Tape::new();
        let x = t.var(Array::ones(&[2, 2]).unwrap());
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 4.0);
        let g = t.backward_scalar(s).unwrap();
        assert_eq!(g.get(x), Array::ones(&[2, 2]).unwrap());
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = Array::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
        let i = t.var(Array::eye(3).unwrap());
        let x = t.var(a.clone());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn sq_norm_3_4() {
        let mut t = Tape::new();
        let x = t.var(Array::vector(vec![3.0, 4.0]).unwrap());
        let y = t.sq_norm(x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 25.0);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.var(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut t = Tape::new();
        let x = t.var(Array::scalar(0.0));
        let y = t.tanh(x).unwrap();
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 1.0);
    }

    #[test]
    fn backward_on_empty_tape_fails() {
        let t = Tape::new();
        assert_eq!(t.backward(Var(0), &Array::scalar(1.0)).unwrap_err(), GradError::EmptyTape);
    }

    #[test]
    fn seed_shape_must_match() {
        let mut t = Tape::new();
        let x = t.var(Array::ones(&[2]).unwrap());
        assert!(matches!(
            t.backward(x, &Array::scalar(1.0)),
            Err(GradError::ShapeMismatch { op: "backward", .. })
        ));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.var(Array::ones(&[2, 3]).unwrap());
        let b = t.var(Array::ones(&[2, 3]).unwrap());
        match t.matmul(a, b) {
            Err(GradError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = t.var(Array::ones(&[3, 2]).unwrap());
        assert!(matches!(t.add(a, c), Err(GradError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut t = Tape::new();
        let x = t.var(Array::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row = t.var(Array::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap());
        let col = t.var(Array::matrix(2, 1, vec![2.0, 3.0]).unwrap());
        let y = t.add(x, row).unwrap();
        let z = t.mul(y, col).unwrap();
        let s = t.sum(z).unwrap();
        let g = t.backward_scalar(s).unwrap();
        assert_eq!(g.get(row).data(), &[5.0, 5.0, 5.0]);
        // d/dcol_i = sum_j (x_ij + 1)
        assert_eq!(g.get(col).data(), &[9.0, 18.0]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut t = Tape::new();
        let x = t.var(Array::vector(vec![0.3, -1.2, 2.0]).unwrap());
        let y = t.silu(x).unwrap();
        let s = t.sq_norm(y).unwrap();
        let g1 = t.backward_scalar(s).unwrap().get(x);
        let g2 = t.backward_scalar(s).unwrap().get(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
