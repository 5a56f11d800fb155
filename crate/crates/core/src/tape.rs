//! Reverse-mode automatic differentiation over a per-sentence tape.
//!
//! Every forward op appends a node holding its value and input references,
//! so node order is a topological order by construction. `backward` walks
//! the nodes once in reverse. Parameters are read in place from the borrowed
//! [`ParamStore`]; each parameter gets a single leaf per tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// tensor × scalar node
    Scale(Var, Var),
    ScaleConst(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MatMul(Var, Var),
    VecMat(Var, Var),
    MatVec(Var, Var),
    AddRowBroadcast(Var, Var),
    MeanRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    ScatterAdd(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug, Clone)]
enum Node {
    Param(ParamId),
    Op { op: Op, value: Tensor },
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node::Param(id) => self.store.value(*id),
            Node::Op { value, .. } => value,
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node::Op { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node::Param(id));
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.push(op, value)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x * s` where `s` is a one-element node.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale", self.shape(s), &[1]));
        }
        let k = self.scalar(s);
        Ok(self.map(x, Op::Scale(x, s), |v| v * k))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::ScaleConst(x, c), |v| v * c)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.map(x, Op::OneMinus(x), |v| 1.0 - v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), tensor::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), libm::tanh)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), libm::log)
    }

    /// Concatenates rank-1 nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).rank() != 1 {
                return Err(Error::shape("concat", self.shape(p), &[0]));
            }
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || start + len > t.numel() {
            return Err(Error::shape("slice", t.shape(), &[start, len]));
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice(x, start), value))
    }

    /// Row `i` of a matrix as a vector. Doubles as an embedding lookup.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let value = Tensor::vector(self.value(m).row(i)?.to_vec());
        Ok(self.push(Op::Row(m, i), value))
    }

    /// Stacks equal-length vectors into a `[rows × len]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::contract("stack_rows of nothing"));
        };
        let width = self.value(first).numel();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != width {
                return Err(Error::shape("stack_rows", t.shape(), &[width]));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), width, data)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), value))
    }

    /// Embedding lookup of several rows into a `[ids × cols]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::contract("gather index out of range"));
            }
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(Op::Gather(table, ids.to_vec()), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Row vector times matrix: `x[k] · w[k×n] -> [n]`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (k, n) = tw.dims2()?;
        if tx.rank() != 1 || tx.numel() != k {
            return Err(Error::shape("vecmat", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; n];
        tensor::vecmat_into(tx.data(), tw.data(), n, &mut out);
        Ok(self.push(Op::VecMat(x, w), Tensor::vector(out)))
    }

    /// Matrix times column vector: `a[m×k] · x[k] -> [m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        let (m, k) = ta.dims2()?;
        if tx.rank() != 1 || tx.numel() != k {
            return Err(Error::shape("matvec", ta.shape(), tx.shape()));
        }
        let out = (0..m)
            .map(|i| tensor::dot(&ta.data()[i * k..(i + 1) * k], tx.data()))
            .collect();
        Ok(self.push(Op::MatVec(a, x), Tensor::vector(out)))
    }

    /// Adds vector `v[n]` to every row of `m[r×n]`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, n) = tm.dims2()?;
        if tv.numel() != n {
            return Err(Error::shape("add_row_broadcast", tm.shape(), tv.shape()));
        }
        let mut data = tm.data().to_vec();
        for row in data.chunks_mut(n) {
            for (a, b) in row.iter_mut().zip(tv.data()) {
                *a += b;
            }
        }
        let value = Tensor::matrix(r, n, data)?;
        Ok(self.push(Op::AddRowBroadcast(m, v), value))
    }

    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        let (r, n) = tm.dims2()?;
        if r == 0 {
            return Err(Error::contract("mean_rows of empty matrix"));
        }
        let mut out = vec![0.0; n];
        for row in tm.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(Op::MeanRows(m), Tensor::vector(out)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(Error::shape("softmax", t.shape(), &[1]));
        }
        let value = Tensor::vector(tensor::softmax(t.data()));
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(Error::shape("log_softmax", t.shape(), &[1]));
        }
        let value = Tensor::vector(tensor::log_softmax(t.data()));
        Ok(self.push(Op::LogSoftmax(x), value))
    }

    /// Element `i` of a vector as a one-element node.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.numel() {
            return Err(Error::contract("pick index out of range"));
        }
        let value = Tensor::scalar(t.data()[i]);
        Ok(self.push(Op::Pick(x, i), value))
    }

    /// `out[size]` with `out[idx[k]] += x[k]`.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], size: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.numel() != idx.len() {
            return Err(Error::shape("scatter_add", t.shape(), &[idx.len()]));
        }
        let mut out = vec![0.0; size];
        for (&i, &v) in idx.iter().zip(t.data()) {
            if i >= size {
                return Err(Error::contract("scatter_add index out of range"));
            }
            out[i] += v;
        }
        Ok(self.push(Op::ScatterAdd(x, idx.to_vec()), Tensor::vector(out)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Reverse pass from a one-element `loss`. Returns the gradient of every
    /// parameter leaf on this tape; parameters not on the tape, or not
    /// reachable from `loss`, are reported as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (op, y) = match &self.nodes[i] {
                Node::Param(id) => {
                    let shape = self.store.value(*id).shape().to_vec();
                    out.grads[id.0] = Some(Tensor::new(shape, g)?);
                    continue;
                }
                Node::Op { op, value } => (op, value.data()),
            };
            match op {
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        for (d, g) in d.iter_mut().zip(&g) {
                            *d -= g;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.data(*a), self.data(*b));
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * v;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * v;
                        }
                    });
                }
                Op::Scale(x, s) => {
                    let k = self.scalar(*s);
                    let gs = tensor::dot(&g, self.data(*x));
                    self.acc(&mut grads, *x, |d| {
                        for (d, g) in d.iter_mut().zip(&g) {
                            *d += k * g;
                        }
                    });
                    self.acc(&mut grads, *s, |d| d[0] += gs);
                }
                Op::ScaleConst(x, c) => self.acc(&mut grads, *x, |d| {
                    for (d, g) in d.iter_mut().zip(&g) {
                        *d += c * g;
                    }
                }),
                Op::OneMinus(x) => self.acc(&mut grads, *x, |d| {
                    for (d, g) in d.iter_mut().zip(&g) {
                        *d -= g;
                    }
                }),
                Op::Sigmoid(x) => self.acc(&mut grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }),
                Op::Tanh(x) => self.acc(&mut grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }),
                Op::Log(x) => {
                    let vx = self.data(*x);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(vx) {
                            *d += g / v;
                        }
                    })
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc(&mut grads, p, |d| add_into(d, &g[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::Slice(x, start) => {
                    let start = *start;
                    self.acc(&mut grads, *x, |d| add_into(&mut d[start..start + g.len()], &g));
                }
                Op::Row(m, i) => {
                    let cols = g.len();
                    let i = *i;
                    self.acc(&mut grads, *m, |d| add_into(&mut d[i * cols..(i + 1) * cols], &g));
                }
                Op::StackRows(rows) => {
                    let cols = g.len() / rows.len();
                    for (k, &r) in rows.iter().enumerate() {
                        self.acc(&mut grads, r, |d| add_into(d, &g[k * cols..(k + 1) * cols]));
                    }
                }
                Op::Gather(table, ids) => {
                    let cols = g.len() / ids.len().max(1);
                    self.acc(&mut grads, *table, |d| {
                        for (k, &i) in ids.iter().enumerate() {
                            add_into(&mut d[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    let (va, vb) = (self.data(*a), self.data(*b));
                    // dA = G · Bᵀ
                    self.acc(&mut grads, *a, |d| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                d[i * k + p] += tensor::dot(g_row, &vb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    // dB = Aᵀ · G
                    self.acc(&mut grads, *b, |d| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = va[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (dv, gv) in d[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *dv += a_ip * gv;
                                }
                            }
                        }
                    });
                }
                Op::VecMat(x, w) => {
                    let n = g.len();
                    let (vx, vw) = (self.data(*x), self.data(*w));
                    self.acc(&mut grads, *x, |d| {
                        for (i, d) in d.iter_mut().enumerate() {
                            *d += tensor::dot(&vw[i * n..(i + 1) * n], &g);
                        }
                    });
                    self.acc(&mut grads, *w, |d| {
                        for (i, &xi) in vx.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (dv, gv) in d[i * n..(i + 1) * n].iter_mut().zip(&g) {
                                *dv += xi * gv;
                            }
                        }
                    });
                }
                Op::MatVec(a, x) => {
                    let k = self.value(*x).numel();
                    let (va, vx) = (self.data(*a), self.data(*x));
                    self.acc(&mut grads, *a, |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            for (dv, xv) in d[i * k..(i + 1) * k].iter_mut().zip(vx) {
                                *dv += gi * xv;
                            }
                        }
                    });
                    self.acc(&mut grads, *x, |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            for (dv, av) in d.iter_mut().zip(&va[i * k..(i + 1) * k]) {
                                *dv += gi * av;
                            }
                        }
                    });
                }
                Op::AddRowBroadcast(m, v) => {
                    let n = self.value(*v).numel();
                    self.acc(&mut grads, *m, |d| add_into(d, &g));
                    self.acc(&mut grads, *v, |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
                Op::MeanRows(m) => {
                    let n = g.len();
                    let (r, _) = self.value(*m).dims2()?;
                    let inv = 1.0 / r as f64;
                    self.acc(&mut grads, *m, |d| {
                        for row in d.chunks_mut(n) {
                            for (dv, gv) in row.iter_mut().zip(&g) {
                                *dv += gv * inv;
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let gy = tensor::dot(&g, y);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += y * (g - gy);
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let gsum: f64 = g.iter().sum();
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g - libm::exp(*y) * gsum;
                        }
                    });
                }
                Op::Pick(x, i) => {
                    let i = *i;
                    self.acc(&mut grads, *x, |d| d[i] += g[0]);
                }
                Op::ScatterAdd(x, idx) => self.acc(&mut grads, *x, |d| {
                    for (d, &i) in d.iter_mut().zip(idx) {
                        *d += g[i];
                    }
                }),
                Op::Sum(x) => self.acc(&mut grads, *x, |d| {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }),
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).numel()]);
        }
        f(slot.as_mut().expect("allocated"));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
