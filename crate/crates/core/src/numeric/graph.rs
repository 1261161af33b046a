//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a `1 x 1` node walks the record in reverse and
//! produces the gradient of that scalar with respect to every node;
//! [`Graph::accumulate_into`] then adds the parameter gradients to a
//! [`ParamStore`].

use crate::error::{Error, Result};
use crate::numeric::{dropout_mask, Matrix, ParamId, ParamStore, Rng};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MulConst(Var, Matrix),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowDot(Var, Var),
    Transpose(Var),
    MeanRows(Var),
    RepeatRows(Var),
    SumMulConst(Var, Matrix),
    SumSquares(Var),
    LayerNormRows(Var, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).log_softmax_rows();
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, training: bool) -> Var {
        let (r, c) = self.shape(a);
        match dropout_mask(r, c, rate, rng, training) {
            Some(mask) => self.mul_const(a, mask).expect("mask has matching shape"),
            None => a,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Per-row dot product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("row_dot", x.shape(), y.shape()));
        }
        let value = Matrix::from_fn(x.rows(), 1, |r, _| crate::numeric::dot(x.row(r), y.row(r)));
        Ok(self.push(value, Op::RowDot(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let value = Matrix::from_fn(1, x.cols(), |_, c| (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n);
        self.push(value, Op::MeanRows(a))
    }

    /// Stacks `n` copies of a `1 x cols` row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::shape("repeat_rows", x.shape(), (1, x.cols())));
        }
        let value = Matrix::from_fn(n, x.cols(), |_, c| x.get(0, c));
        Ok(self.push(value, Op::RepeatRows(a)))
    }

    /// `Σ a ⊙ c` as a `1 x 1` node.
    pub fn sum_mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let total = self.value(a).hadamard(&c)?.sum();
        Ok(self.push(Matrix::filled(1, 1, total), Op::SumMulConst(a, c)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.sum_mul_const(a, Matrix::filled(r, c, 1.0))
            .expect("ones have matching shape")
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Matrix::filled(1, 1, total), Op::SumSquares(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return Err(Error::shape("reshape", x.shape(), (rows, cols)));
        }
        let value = Matrix::new(rows, cols, x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(value, Op::LayerNormRows(a, eps))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::shape("backward", shape, (1, 1)));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, g.scale(-1.0));
                    accum(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, bias) => {
                    let gb = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accum(&mut grads, *bias, gb);
                    accum(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accum(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let inner = crate::numeric::dot(g.row(r), y.row(r));
                        for (gv, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (gv, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => accum(&mut grads, *a, g.hadamard(c)?),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        offset += w;
                        accum(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        let gp = Matrix::from_fn(h, g.cols(), |r, c| g.get(offset + r, c));
                        offset += h;
                        accum(&mut grads, p, gp);
                    }
                }
                Op::RowDot(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, 0) * y.get(r, c));
                    let gb = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, 0) * x.get(r, c));
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accum(&mut grads, *a, Matrix::new(r, c, g.data().to_vec())?);
                }
                Op::MeanRows(a) => {
                    let n = self.shape(*a).0;
                    let ga = Matrix::from_fn(n, g.cols(), |_, c| g.get(0, c) / n as f64);
                    accum(&mut grads, *a, ga);
                }
                Op::RepeatRows(a) => {
                    let ga = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accum(&mut grads, *a, ga);
                }
                Op::SumMulConst(a, c) => accum(&mut grads, *a, c.scale(g.get(0, 0))),
                Op::SumSquares(a) => {
                    let ga = self.value(*a).scale(2.0 * g.get(0, 0));
                    accum(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let n = xr.len() as f64;
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = g.row(r).iter().sum::<f64>() / n;
                        let gy_mean = crate::numeric::dot(g.row(r), y.row(r)) / n;
                        for ((gv, &yv), &gr) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *gv = inv * (gr - g_mean - yv * gy_mean);
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients into `store`. Frozen params are skipped.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, var) in self.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            let Some(g) = grads.get(*var) else { continue };
            let param = store.get_mut(ParamId(i));
            if !param.frozen {
                param.grad.add_assign(g);
            }
        }
    }

    /// Detaches parameter gradients from the graph so the store can be
    /// updated once the graph is dropped.
    pub fn param_gradients(&self, mut grads: Gradients) -> ParamGradients {
        let entries = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, var)| Some((ParamId(i), grads.grads[var.as_ref()?.0].take()?)))
            .collect();
        ParamGradients(entries)
    }
}

/// Parameter gradients detached from their graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(Vec<(ParamId, Matrix)>);

impl ParamGradients {
    /// Adds into `store`; frozen params are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.0 {
            let param = store.get_mut(*id);
            if !param.frozen {
                param.grad.add_assign(g);
            }
        }
    }
}

fn accum(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = store.add("b", Matrix::from_rows(&[[0.5], [-1.0]]).unwrap());
        let mut g = Graph::new(&store);
        let (va, vb) = (g.param(a), g.param(b));
        let c = g.matmul(va, vb).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(va).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
        assert_eq!(grads.get(vb).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let c = g.constant(Matrix::zeros(2, 2));
        assert!(g.backward(c).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 3.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum_squares(s);
        let grads = g.backward(loss).unwrap();
        let mut target = store.clone();
        g.accumulate_into(&grads, &mut target);
        // d/dw (2w)^2 = 8w
        assert_eq!(target.get(w).grad.get(0, 0), 24.0);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 3.0));
        store.get_mut(w).frozen = true;
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let loss = g.sum_squares(a);
        let grads = g.backward(loss).unwrap();
        let mut target = store.clone();
        g.accumulate_into(&grads, &mut target);
        assert_eq!(target.get(w).grad.get(0, 0), 0.0);
    }
}
