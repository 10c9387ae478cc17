//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! node vector is already in topological order and `backward` is a single
//! reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// rhs is a `[n]` row added to every row of an `[m, n]` lhs.
    RowRhs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Broadcast, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some `requires_grad` leaf is reachable through the inputs.
    needs_grad: bool,
}

/// Records executed ops and propagates gradients back through them.
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

    /// Registers a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, needs_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(op.name().to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, _, a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a, _) => self.nodes[a.0].needs_grad,
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op, needs_grad))
    }

    fn check_finite_input(&self, op: &'static str, a: Var) -> Result<()> {
        if self.value(a).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} input")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{sa:?} x {sb:?}"),
                ))
            }
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.is_scalar() {
            Ok(Broadcast::ScalarRhs)
        } else if ta.is_scalar() {
            Ok(Broadcast::ScalarLhs)
        } else if ta.shape().len() == 2 && tb.shape() == [ta.shape()[1]] {
            Ok(Broadcast::RowRhs)
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ))
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let bc = self.broadcast(name, a, b)?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let (shape, out): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::Same => (
                ta.shape().to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::ScalarRhs => (ta.shape().to_vec(), da.iter().map(|&x| f(x, db[0])).collect()),
            Broadcast::ScalarLhs => (tb.shape().to_vec(), db.iter().map(|&y| f(da[0], y)).collect()),
            Broadcast::RowRhs => {
                let n = db.len();
                (
                    ta.shape().to_vec(),
                    da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect(),
                )
            }
        };
        self.push(shape, out, Op::Binary(kind, bc, a, b))
    }

    /// Elementwise sum; also accepts a scalar operand or a row-vector bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Parameter(format!("scale factor {c}")));
        }
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        self.push(t.shape().to_vec(), out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.max(0.0)).collect();
        self.push(t.shape().to_vec(), out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x.exp()).collect();
        self.push(t.shape().to_vec(), out, Op::Exp(a))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let out = t.data().iter().map(|x| x.ln()).collect();
        self.push(t.shape().to_vec(), out, Op::Log(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Parameter(format!("clamp bounds [{lo}, {hi}]")));
        }
        let t = self.value(a);
        let out = t.data().iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(t.shape().to_vec(), out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Temperature softmax over the last axis of a `[K]` or `[B, K]` tensor.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        self.check_finite_input("softmax", a)?;
        let t = self.value(a);
        let (rows, cols) = t.as_rows();
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            softmax_row(t.row(r), tau, &mut out[r * cols..(r + 1) * cols]);
        }
        self.push(t.shape().to_vec(), out, Op::Softmax(a, tau))
    }

    /// Propagates `d loss / d node` to every `requires_grad` leaf, adding to
    /// any gradient left by earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op.clone() {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                op => self.propagate(idx, &op, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match *op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(g, false, tb.data(), true, &mut da, m, n, k);
                    send(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(ta.data(), true, g, false, &mut db, k, m, n);
                    send(b, db);
                }
            }
            Op::Binary(kind, bc, a, b) => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                // Elementwise partials w.r.t. lhs and rhs at output position i.
                let lhs_at = |i: usize| match bc {
                    Broadcast::ScalarLhs => da[0],
                    _ => da[i],
                };
                let rhs_at = |i: usize| match bc {
                    Broadcast::Same => db[i],
                    Broadcast::ScalarRhs => db[0],
                    Broadcast::ScalarLhs => db[i],
                    Broadcast::RowRhs => db[i % db.len()],
                };
                let (pa, pb): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) = match kind {
                    BinaryKind::Add => (Box::new(|_| 1.0), Box::new(|_| 1.0)),
                    BinaryKind::Sub => (Box::new(|_| 1.0), Box::new(|_| -1.0)),
                    BinaryKind::Mul => (Box::new(rhs_at), Box::new(lhs_at)),
                };
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; da.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let slot = if bc == Broadcast::ScalarLhs { 0 } else { i };
                        ga[slot] += gi * pa(i);
                    }
                    send(a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; db.len()];
                    for (i, gi) in g.iter().enumerate() {
                        let slot = match bc {
                            Broadcast::Same | Broadcast::ScalarLhs => i,
                            Broadcast::ScalarRhs => 0,
                            Broadcast::RowRhs => i % db.len(),
                        };
                        gb[slot] += gi * pb(i);
                    }
                    send(b, gb);
                }
            }
            Op::Scale(a, c) => send(a, g.iter().map(|x| x * c).collect()),
            Op::Relu(a) => {
                let x = self.value(a).data();
                send(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => send(a, g.iter().zip(out.data()).map(|(gi, yi)| gi * yi).collect()),
            Op::Log(a) => {
                let x = self.value(a).data();
                send(a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                send(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi >= lo && xi <= hi { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => send(a, vec![g[0]; self.value(a).numel()]),
            Op::Mean(a) => {
                let n = self.value(a).numel();
                send(a, vec![g[0] / n as f64; n]);
            }
            Op::Softmax(a, tau) => {
                let (rows, cols) = out.as_rows();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, dst) in ga[span].iter_mut().enumerate() {
                        *dst = yr[j] * (gr[j] - dot) / tau;
                    }
                }
                send(a, ga);
            }
        }
    }
}

/// `C += A·B` over row-major buffers, where `A` is `m×k` (or `k×m` when
/// `ta`) and `B` is `k×n` (or `n×k` when `tb`).
fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], m: usize, k: usize, n: usize) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the callers size every buffer to the extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!((a.len(), b.len()), (m * k, k * n));
    let mut out = vec![0.0; m * n];
    gemm(a, false, b, false, &mut out, m, k, n);
    out
}

/// Stable temperature softmax of one row into `out`.
pub(crate) fn softmax_row(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &d) in out.iter_mut().zip(logits) {
        *o = ((d - max) / tau).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
