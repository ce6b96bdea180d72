//! Wengert-list reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the list in reverse, accumulating adjoints, and finally adds each parameter
//! leaf's adjoint into the gradient buffer of the [`ParamSet`] it was read from.
//! A parameter read twice produces two leaves, so each use is accumulated once.

use super::activation;
use super::params::{ParamPart, ParamSet};
use super::Matrix;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub(crate) struct ParamRef {
    set: String,
    entry: usize,
    part: ParamPart,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamRef),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LeakySoftmax(Var),
    GradReverse { x: Var, mu: f64 },
    Detach,
    LnProb(Var),
    OneMinus(Var),
    RowSum(Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Rows { x: Var, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of forward operations for one pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf reading the weight and bias of `set`'s entry `entry`.
    pub fn dense(&mut self, set: &ParamSet, entry: usize) -> (Var, Var) {
        let p = set.entry(entry);
        let w = self.push(
            p.weight.clone(),
            Op::Param(ParamRef {
                set: set.name().to_owned(),
                entry,
                part: ParamPart::Weight,
            }),
            true,
        );
        let b = self.push(
            p.bias.clone(),
            Op::Param(ParamRef {
                set: set.name().to_owned(),
                entry,
                part: ParamPart::Bias,
            }),
            true,
        );
        (w, b)
    }

    /// `x·W + b`, bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::shape(format!(
                "bias {}x{} does not match weight {}x{}",
                bv.rows(),
                bv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let mut out = xv.matmul(wv)?;
        let bias = bv.values().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    fn unary(&mut self, x: Var, value: Matrix, op: Op) -> Var {
        let rg = self.needs(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = activation::relu(self.value(x))?;
        Ok(self.unary(x, y, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = activation::sigmoid(self.value(x))?;
        Ok(self.unary(x, y, Op::Sigmoid(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = activation::softmax(self.value(x))?;
        Ok(self.unary(x, y, Op::Softmax(x)))
    }

    pub fn leaky_softmax(&mut self, z: Var, num_classes: usize) -> Result<Var> {
        let y = activation::leaky_softmax(self.value(z), num_classes)?;
        Ok(self.unary(z, y, Op::LeakySoftmax(z)))
    }

    /// Identity on the forward pass; scales the adjoint by `-mu` on the way back.
    pub fn grad_reverse(&mut self, x: Var, mu: f64) -> Result<Var> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Usage(format!(
                "gradient reversal coefficient must be finite and >= 0, got {mu}"
            )));
        }
        let y = self.value(x).clone();
        Ok(self.unary(x, y, Op::GradReverse { x, mu }))
    }

    /// Identity on the forward pass; blocks every gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let y = self.value(x).clone();
        self.push(y, Op::Detach, false)
    }

    /// Elementwise `ln(clamp(p, 1e-12, 1 - 1e-12))`. The derivative is zero where
    /// the clamp is active.
    pub fn ln_prob(&mut self, p: Var) -> Result<Var> {
        let pv = self.value(p);
        if pv.values().iter().any(|&v| !(v >= 0.0) || v.is_infinite()) {
            return Err(Error::Numeric(
                "log of a negative or non-finite probability".into(),
            ));
        }
        let y = pv.map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln());
        Ok(self.unary(p, y, Op::LnProb(p)))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 - v);
        self.unary(x, y, Op::OneMinus(x))
    }

    /// `(n, c) -> (n, 1)`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let y = Matrix::column_vector(self.value(x).row_sums());
        self.unary(x, y, Op::RowSum(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "elementwise product of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| x * y)
            .collect();
        let y = Matrix::from_vec(av.rows(), av.cols(), values)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(Error::shape(format!(
                "elementwise product of {:?} and constant {:?}",
                av.shape(),
                c.shape()
            )));
        }
        let values = av
            .values()
            .iter()
            .zip(c.values())
            .map(|(x, y)| x * y)
            .collect();
        let y = Matrix::from_vec(av.rows(), av.cols(), values)?;
        Ok(self.unary(a, y, Op::MulConst(a, c)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "sum of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut y = av.clone();
        y.add_scaled(bv, 1.0);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| k * v);
        self.unary(x, y, Op::Scale(x, k))
    }

    /// Sum of all entries, `(n, c) -> (1, 1)`.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Matrix::filled(1, 1, self.value(x).sum());
        self.unary(x, y, Op::Sum(x))
    }

    /// Rows `start..end` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::shape(format!(
                "row range {start}..{end} out of bounds for {} rows",
                xv.rows()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        let y = xv.select_rows(&idx);
        Ok(self.unary(x, y, Op::Rows { x, start }))
    }

    /// Stacks `a` on top of `b` as a constant leaf; used only for inputs.
    pub fn input_stacked(&mut self, a: &Matrix, b: &Matrix) -> Result<Var> {
        if a.cols() != b.cols() {
            return Err(Error::shape(format!(
                "cannot stack {} and {} columns",
                a.cols(),
                b.cols()
            )));
        }
        let mut values = Vec::with_capacity(a.len() + b.len());
        values.extend_from_slice(a.values());
        values.extend_from_slice(b.values());
        let m = Matrix::from_vec(a.rows() + b.rows(), a.cols(), values)?;
        Ok(self.input(m))
    }

    /// Zeroes the gradient buffers of `params`, then accumulates `∂loss/∂θ`
    /// for every parameter leaf read from one of them.
    ///
    /// Leaves whose set is not in `params` are ignored.
    pub fn backward(&self, loss: Var, params: &mut [&mut ParamSet]) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got a {}x{} node",
                shape.0, shape.1
            )));
        }
        for set in params.iter_mut() {
            set.zero_grad();
        }

        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(r) => {
                    if let Some(set) = params.iter_mut().find(|s| s.name() == r.set) {
                        set.entry_mut(r.entry).grad_mut(r.part).add_scaled(&g, 1.0);
                    }
                }
                Op::Affine { x, w, b } => {
                    if self.needs(*x) {
                        let dx = g.matmul_t(self.value(*w))?;
                        accumulate(&mut adj, *x, dx);
                    }
                    if self.needs(*w) {
                        let dw = self.value(*x).t_matmul(&g)?;
                        accumulate(&mut adj, *w, dw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, Matrix::row_vector(g.column_sums()));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.values_mut().iter_mut().zip(xv.values()) {
                        if v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (dv, &y) in d.values_mut().iter_mut().zip(node.value.values()) {
                        *dv *= y * (1.0 - y);
                    }
                    accumulate(&mut adj, *x, d);
                }
                // Both share the Jacobian diag(y) - y yᵀ; for the leaky variant the
                // extra constant in the denominator does not depend on z.
                Op::Softmax(x) | Op::LeakySoftmax(x) => {
                    let y = &node.value;
                    let mut d = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = d.row_mut(r);
                        let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv, &yv) in dr.iter_mut().zip(yr) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::GradReverse { x, mu } => {
                    accumulate(&mut adj, *x, g.map(|v| -mu * v));
                }
                Op::LnProb(p) => {
                    let pv = self.value(*p);
                    let mut d = g;
                    for (dv, &v) in d.values_mut().iter_mut().zip(pv.values()) {
                        *dv = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v) {
                            *dv / v
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut adj, *p, d);
                }
                Op::OneMinus(x) => accumulate(&mut adj, *x, g.map(|v| -v)),
                Op::RowSum(x) => {
                    let cols = self.value(*x).cols();
                    let mut d = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_mut(r).fill(g.get(r, 0));
                    }
                    accumulate(&mut adj, *x, d);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let mut d = g.clone();
                        for (dv, &bv) in d.values_mut().iter_mut().zip(self.value(*b).values()) {
                            *dv *= bv;
                        }
                        accumulate(&mut adj, *a, d);
                    }
                    if self.needs(*b) {
                        let mut d = g;
                        for (dv, &av) in d.values_mut().iter_mut().zip(self.value(*a).values()) {
                            *dv *= av;
                        }
                        accumulate(&mut adj, *b, d);
                    }
                }
                Op::MulConst(a, c) => {
                    let mut d = g;
                    for (dv, &cv) in d.values_mut().iter_mut().zip(c.values()) {
                        *dv *= cv;
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Scale(x, k) => accumulate(&mut adj, *x, g.map(|v| k * v)),
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut adj, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Rows { x, start } => {
                    let (r, c) = self.value(*x).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *x, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::DenseParams;

    fn single_layer(w: &[&[f64]], b: &[f64]) -> ParamSet {
        let mut set = ParamSet::new("net");
        let mut p = DenseParams::zeros(w.len(), b.len());
        p.weight = Matrix::from_rows(w).unwrap();
        p.bias = Matrix::row_vector(b.to_vec());
        set.push("l0", p).unwrap();
        set
    }

    #[test]
    fn affine_identity() {
        let set = single_layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::identity(2));
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), &Matrix::identity(2));
    }

    #[test]
    fn affine_with_bias() {
        let set = single_layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[3.0, 3.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).values(), &[4.0, 5.0]);
    }

    #[test]
    fn affine_nonconforming() {
        let set = single_layer(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(4, 3));
        let (w, b) = t.dense(&set, 0);
        assert!(matches!(t.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_reverse_forward_is_bitwise_identity() {
        let mut t = Tape::new();
        let m = Matrix::from_rows(&[[0.1, -3.5e-17, f64::MIN_POSITIVE]]).unwrap();
        let x = t.input(m.clone());
        let y = t.grad_reverse(x, 0.7).unwrap();
        let bits = |m: &Matrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t.value(y)), bits(&m));
    }

    fn reversed_grad(mu: f64) -> Matrix {
        // loss = sum(grl(x·W + b)) with W = 1x1; dloss/dW = -mu·x
        let mut set = single_layer(&[&[2.0]], &[0.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[3.0]]).unwrap());
        let (w, b) = t.dense(&set, 0);
        let h = t.affine(x, w, b).unwrap();
        let r = t.grad_reverse(h, mu).unwrap();
        let loss = t.sum(r);
        t.backward(loss, &mut [&mut set]).unwrap();
        set.entry(0).grad_weight.clone()
    }

    #[test]
    fn grad_reverse_scales_by_negative_mu() {
        assert_eq!(reversed_grad(0.5).get(0, 0), -0.5 * 3.0);
        assert_eq!(reversed_grad(0.0).get(0, 0), 0.0);
    }

    #[test]
    fn negative_mu_rejected() {
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(1, 1));
        assert!(t.grad_reverse(x, -1.0).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut set = single_layer(&[&[1.0]], &[0.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(2, 1));
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        assert!(matches!(
            t.backward(y, &mut [&mut set]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn backward_zeroes_before_accumulating() {
        let mut set = single_layer(&[&[2.0]], &[1.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[3.0]]).unwrap());
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        let loss = t.sum(y);
        t.backward(loss, &mut [&mut set]).unwrap();
        let first = set.clone();
        t.backward(loss, &mut [&mut set]).unwrap();
        assert_eq!(first, set);
        assert_eq!(set.entry(0).grad_weight.get(0, 0), 3.0);
        assert_eq!(set.entry(0).grad_bias.get(0, 0), 1.0);
    }

    #[test]
    fn repeated_use_accumulates_each_use() {
        // loss = sum(x·W + b) + sum(x·W + b) -> dW = 2x
        let mut set = single_layer(&[&[2.0]], &[1.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[3.0]]).unwrap());
        let (w1, b1) = t.dense(&set, 0);
        let y1 = t.affine(x, w1, b1).unwrap();
        let (w2, b2) = t.dense(&set, 0);
        let y2 = t.affine(x, w2, b2).unwrap();
        let s = t.add(y1, y2).unwrap();
        let loss = t.sum(s);
        t.backward(loss, &mut [&mut set]).unwrap();
        assert_eq!(set.entry(0).grad_weight.get(0, 0), 6.0);
        assert_eq!(set.entry(0).grad_bias.get(0, 0), 2.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut set = single_layer(&[&[2.0]], &[1.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[3.0]]).unwrap());
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        let d = t.detach(y);
        let loss = t.sum(d);
        t.backward(loss, &mut [&mut set]).unwrap();
        assert!(set.grads_all_zero());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut set = single_layer(&[&[1.0]], &[0.0]);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_rows(&[[0.0]]).unwrap());
        let (w, b) = t.dense(&set, 0);
        let y = t.affine(x, w, b).unwrap();
        let r = t.relu(y).unwrap();
        let loss = t.sum(r);
        t.backward(loss, &mut [&mut set]).unwrap();
        assert_eq!(set.entry(0).grad_bias.get(0, 0), 0.0);
    }
}
