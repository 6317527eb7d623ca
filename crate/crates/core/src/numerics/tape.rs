use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{max_pool_over_rows, norm, softmax_rows, Tensor2D};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor2D], output: &Tensor2D, grad_out: &Tensor2D) -> Vec<Tensor2D>;
}

/// A lookup table that [`Tape::gather`] may read rows from.
#[derive(Clone, Copy)]
pub struct GatherSource<'a> {
    pub name: &'a str,
    pub value: &'a Tensor2D,
    pub trainable: bool,
}

enum Op<'a> {
    Constant,
    Param {
        name: &'a str,
        value: &'a Tensor2D,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Flatten(Var),
    MeanRows(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Gather {
        sources: Vec<GatherSource<'a>>,
        rows: Vec<Vec<(usize, usize)>>,
    },
    Custom {
        op: Box<dyn CustomOp + 'a>,
        inputs: Vec<Var>,
    },
}

struct Node<'a> {
    op: Op<'a>,
    value: Option<Tensor2D>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// index order is already a topological order.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<&'a str, Var>,
    kink: f64,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            kink: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param { value, .. }) => value,
            _ => unreachable!("node without a value"),
        }
    }

    /// Smallest distance to a point where a recorded ReLU or max-pool is
    /// not differentiable: a ReLU input near zero, or a column maximum
    /// near its runner-up. Only nodes that require a gradient count, and
    /// rows with bit-identical values do not count as ties.
    pub fn kink_distance(&self) -> f64 {
        self.kink
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<'a>, value: Tensor2D, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor2D) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// Records a borrowed parameter. Repeated calls with the same name
    /// return the same node.
    pub fn param(&mut self, name: &'a str, value: &'a Tensor2D, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param { name, value },
            value: None,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name, v);
        v
    }

    pub fn param_from(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        Ok(self.param(&p.name, &p.value, !p.frozen))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Adds the `1×n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        let xv = self.value(x);
        if b.rows() != 1 || b.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", b.shape(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), out, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(&[x]);
        if rg {
            self.kink = self.value(x).data().iter().fold(self.kink, |k, v| k.min(v.abs()));
        }
        self.push(Op::Relu(x), out, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::SoftmaxRows(x), out, rg)
    }

    /// L2-normalizes each row; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(Op::NormalizeRows { x, norms }, out, rg)
    }

    /// `l×d → 1×d` column-wise maximum.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (best, argmax) = max_pool_over_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        if rg {
            let t = self.value(x);
            let mut kink = self.kink;
            for (c, &top) in best.iter().enumerate() {
                for r in 0..t.rows() {
                    let v = t.get(r, c);
                    if v.to_bits() != top.to_bits() {
                        kink = kink.min(top - v);
                    }
                }
            }
            self.kink = kink;
        }
        Ok(self.push(Op::MaxPoolRows { x, argmax }, Tensor2D::row_vector(best), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2D::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} rows, expected {rows}", t.rows()),
                ));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor2D> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2D::stack(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::StackRows(parts.to_vec()), out, rg))
    }

    /// Row-major flatten to a single row.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let n = t.len();
        let rg = self.rg(&[x]);
        self.push(Op::Flatten(x), t.reshaped(1, n), rg)
    }

    /// `l×d → 1×d` column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::EmptySequence("mean_rows"));
        }
        let mut out = vec![0.0; t.cols()];
        for r in t.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MeanRows(x), Tensor2D::row_vector(out), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        out.ensure_finite("exp")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Exp(x), out, rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.ln());
        out.ensure_finite("log")?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Log(x), out, rg))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor2D::row_vector(vec![s]), rg)
    }

    /// Builds one output row per entry of `rows`, each the mean of the
    /// listed `(source, row)` members.
    pub fn gather(&mut self, sources: Vec<GatherSource<'a>>, rows: Vec<Vec<(usize, usize)>>) -> Result<Var> {
        let cols = sources.first().map_or(0, |s| s.value.cols());
        if sources.iter().any(|s| s.value.cols() != cols) {
            return Err(Error::shape("gather", "sources differ in width"));
        }
        let mut out = Tensor2D::zeros(rows.len(), cols);
        for (r, members) in rows.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::shape("gather", format!("row {r} has no members")));
            }
            let w = 1.0 / members.len() as f64;
            let o = out.row_mut(r);
            for &(s, i) in members {
                let src = sources.get(s).ok_or_else(|| Error::shape("gather", "bad source index"))?;
                if i >= src.value.rows() {
                    return Err(Error::shape("gather", format!("row {i} out of range for {}", src.name)));
                }
                for (a, b) in o.iter_mut().zip(src.value.row(i)) {
                    *a += w * b;
                }
            }
        }
        let rg = sources.iter().any(|s| s.trainable);
        Ok(self.push(Op::Gather { sources, rows }, out, rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp + 'a>, inputs: &[Var], value: Tensor2D) -> Var {
        let rg = self.rg(inputs);
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Backpropagates from the scalar `out` and returns the gradient of
    /// every trainable parameter it depends on.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.shape() != (1, 1) {
            return Err(Error::shape("backward", format!("output is {:?}, not scalar", ov.shape())));
        }
        ov.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor2D>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor2D::filled(1, 1, 1.0));
        let mut result = Gradients::default();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor2D, grads: &mut Vec<Option<Tensor2D>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param { name, .. } => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of {name}")));
                    }
                    result.add_dense(name, &g);
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        send(*a, g.matmul_nt(self.value(*b))?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        send(*b, self.value(*a).matmul_tn(&g)?, &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.requires_grad(*a) {
                        send(*a, g.matmul(self.value(*b))?, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        send(*b, g.matmul_tn(self.value(*a))?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (o, v) in gb.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    send(*bias, Tensor2D::row_vector(gb), &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::Scale(x, c) => send(*x, g.scaled(*c), &mut grads),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &xval) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if xval <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut gx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - s);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("normalize value");
                    let mut gx = g;
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        if n > 0.0 {
                            let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for (gv, &yv) in gr.iter_mut().zip(yr) {
                                *gv = (*gv - yv * s) / n;
                            }
                        } else {
                            gr.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2D::zeros(rows, cols);
                    for (j, &i) in argmax.iter().enumerate() {
                        gx.set(i, j, g.get(0, j));
                    }
                    send(*x, gx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = Tensor2D::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        send(p, gp, &mut grads);
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        send(p, Tensor2D::from_vec(rows, cols, data)?, &mut grads);
                    }
                }
                Op::Flatten(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    send(*x, g.reshaped(rows, cols), &mut grads);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2D::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp value");
                    let mut gx = g;
                    for (gv, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv;
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gv /= v;
                    }
                    send(*x, gx, &mut grads);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    send(*x, Tensor2D::filled(rows, cols, g.get(0, 0)), &mut grads);
                }
                Op::Gather { sources, rows } => {
                    for (r, members) in rows.iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        let gr = g.row(r);
                        for &(s, i) in members {
                            let src = &sources[s];
                            if src.trainable {
                                result.add_row(src.name, src.value.shape(), i, gr, w);
                            }
                        }
                    }
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&Tensor2D> = inputs.iter().map(|&v| self.value(v)).collect();
                    let y = node.value.as_ref().expect("custom value");
                    let gs = op.backward(&ins, y, &g);
                    for (&v, gv) in inputs.iter().zip(gs) {
                        send(v, gv, &mut grads);
                    }
                }
            }
        }
        Ok(result)
    }
}
