//! Reverse-mode gradient tape.
//!
//! Every op computes its value eagerly and records how to map an output
//! gradient back to its inputs. Those vector-Jacobian products are themselves
//! built out of tape ops, so a gradient can be materialised as part of the
//! graph ([`Graph::differentiate`]) and differentiated again. The WGAN-GP
//! penalty relies on this: the critic's input gradient is a tape expression
//! and the parameter update backpropagates through it.
//!
//! [`Graph::backward`] runs the same machinery with recording switched off,
//! accumulates the numeric gradients onto the tracked nodes and discards the
//! temporary nodes.

use std::rc::Rc;

use rand::Rng;

use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to the argument of [`Graph::log`] and to log-posteriors.
pub const LOG_FLOOR: f64 = 9.357_622_968_840_175e-14; // exp(-30)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise product with a constant; relu, leaky relu, dropout and
    /// clamping all differentiate to this.
    Masked { a: usize, mask: Rc<[f64]> },
    Affine { a: usize, scale: f64 },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log { a: usize, mask: Rc<[f64]> },
    Recip(usize),
    Sqrt(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SumAll(usize),
    Expand(usize),
    SumAxis { a: usize, axis: usize },
    Broadcast { a: usize, axis: usize },
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Pad { a: usize, axis: usize, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// A single-threaded tape. Build one per optimisation step and drop it
/// afterwards; nodes are never freed individually.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1).max(1)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let tracked = self.recording && inputs.iter().any(|&i| self.nodes[i].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients flow into (parameters, differentiable inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of the last [`Graph::backward`] calls, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = gemm(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            &[a.0, b.0],
        ))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        if self.value(a).shape() != mask.shape() {
            return Err(shape_err("mul_const", self.value(a), mask));
        }
        Ok(self.masked(a, mask.data().into()))
    }

    fn masked(&mut self, a: Var, mask: Rc<[f64]>) -> Var {
        let va = self.value(a);
        let data = va.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("mask shape");
        self.push(value, Op::Masked { a: a.0, mask }, &[a.0])
    }

    /// Row-broadcast bias add: `x` is `n x m`, `bias` has shape `[m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.shape() != [vx.cols()] {
            return Err(shape_err("add_bias", vx, vb));
        }
        let n = vx.rows();
        let b = self.broadcast(bias, 0, n)?;
        self.add(x, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine { a: a.0, scale }, &[a.0])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask: Rc<[f64]> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        // NaN passes through so a poisoned activation is not silently zeroed
        let value = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        self.push(value, Op::Masked { a: a.0, mask }, &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mask: Rc<[f64]> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { slope })
            .collect();
        self.masked(a, mask)
    }

    /// Inverted dropout. `rng = None` is evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::DropoutRate(rate));
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Rc<[f64]> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(self.masked(a, mask))
    }

    /// `max(a, lo)`; no gradient flows where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let mask: Rc<[f64]> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > lo { 1.0 } else { 0.0 })
            .collect();
        let value = self.value(a).map(|x| x.max(lo));
        self.push(value, Op::Masked { a: a.0, mask }, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a.0), &[a.0])
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0), &[a.0])
    }

    /// Natural log with the argument clamped at `exp(-30)`.
    pub fn log(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mask: Rc<[f64]> = va
            .data()
            .iter()
            .map(|&x| if x > LOG_FLOOR { 1.0 } else { 0.0 })
            .collect();
        let value = va.map(|x| x.max(LOG_FLOOR).ln());
        self.push(value, Op::Log { a: a.0, mask }, &[a.0])
    }

    /// `1 / a`, with `1 / 0` defined as 0.
    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(safe_recip);
        self.push(value, Op::Recip(a.0), &[a.0])
    }

    /// Square root; the derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a.0), &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = last_dim(va);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("softmax shape");
        self.push(value, Op::Softmax(a.0), &[a.0])
    }

    /// Log-softmax over the last axis (fused, no intermediate `exp` overflow).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = last_dim(va);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("log_softmax shape");
        self.push(value, Op::LogSoftmax(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let s = self.value(a).data()[0];
        self.push(Tensor::full(shape, s), Op::Expand(a.0), &[a.0])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, len, inner) = split_axis(va.shape(), axis)?;
        let src = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { a: a.0, axis }, &[a.0]))
    }

    /// Inserts a new axis at `axis` of length `len`, repeating the input.
    pub fn broadcast(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let mut shape = va.shape().to_vec();
        if axis > shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: va.shape().to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = va.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        shape.insert(axis, len);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Broadcast { a: a.0, axis }, &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base_shape = self.value(*first).shape().to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::Concat { parts: idx.clone(), axis }, &idx))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, alen, inner) = split_axis(va.shape(), axis)?;
        if start + len > alen {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { a: a.0, axis, start }, &[a.0]))
    }

    /// Embeds `a` into zeros of length `total` along `axis`, at offset `start`.
    fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let va = self.value(a);
        let (outer, len, inner) = split_axis(va.shape(), axis)?;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&va.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Pad { a: a.0, axis, start }, &[a.0]))
    }

    // ----- reverse pass --------------------------------------------------

    /// Backpropagates from a scalar `loss`, accumulating into the `grad` slot
    /// of every tracked ancestor. Calling it twice without [`Graph::zero_grad`]
    /// adds the gradients together. A loss with no tracked ancestors is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }
        let mark = self.nodes.len();
        let prev = std::mem::replace(&mut self.recording, false);
        let result = self.backprop(loss.0);
        self.recording = prev;
        let grads = match result {
            Ok(g) => g,
            Err(e) => {
                self.nodes.truncate(mark);
                return Err(e);
            }
        };
        let mut uses = vec![0usize; self.nodes.len()];
        for g in grads.iter().flatten() {
            uses[*g] += 1;
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = *g else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            uses[g] -= 1;
            let data = if uses[g] == 0 {
                std::mem::take(&mut self.nodes[g].value.data)
            } else {
                self.nodes[g].value.data().to_vec()
            };
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&data).for_each(|(a, d)| *a += d),
                slot => *slot = Some(data),
            }
        }
        self.nodes.truncate(mark);
        Ok(())
    }

    /// Gradients of scalar `output` with respect to `wrt`, recorded as graph
    /// nodes so they can be differentiated again. Inputs `output` does not
    /// depend on get a constant zero gradient.
    pub fn differentiate(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let ov = self.value(output);
        if !ov.is_scalar() {
            return Err(Error::NonScalarLoss(ov.shape().to_vec()));
        }
        let grads = if self.is_tracked(output) {
            self.backprop(output.0)?
        } else {
            Vec::new()
        };
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Var(g),
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    fn backprop(&mut self, root: usize) -> Result<Vec<Option<usize>>> {
        let mut grads: Vec<Option<usize>> = vec![None; root + 1];
        let seed = Tensor::full(self.nodes[root].value.shape(), 1.0);
        grads[root] = Some(self.constant(seed).0);
        for i in (0..=root).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(i, &op, Var(g))? {
                grads[input] = Some(match grads[input] {
                    None => contrib.0,
                    Some(prev) => self.add(Var(prev), contrib)?.0,
                });
            }
        }
        Ok(grads)
    }

    fn vjp(&mut self, node: usize, op: &Op, g: Var) -> Result<Vec<(usize, Var)>> {
        let tracked = |s: &Self, i: usize| s.nodes[i].tracked;
        let mut out = Vec::with_capacity(2);
        let y = Var(node);
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if tracked(self, a) {
                    let ga = if ta {
                        self.matmul_t(Var(b), g, tb, true)?
                    } else {
                        self.matmul_t(g, Var(b), false, !tb)?
                    };
                    out.push((a, ga));
                }
                if tracked(self, b) {
                    let gb = if tb {
                        self.matmul_t(g, Var(a), true, ta)?
                    } else {
                        self.matmul_t(Var(a), g, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                if tracked(self, a) {
                    out.push((a, g));
                }
                if tracked(self, b) {
                    out.push((b, g));
                }
            }
            &Op::Sub(a, b) => {
                if tracked(self, a) {
                    out.push((a, g));
                }
                if tracked(self, b) {
                    let gb = self.neg(g);
                    out.push((b, gb));
                }
            }
            &Op::Mul(a, b) => {
                if tracked(self, a) {
                    let ga = self.mul(g, Var(b))?;
                    out.push((a, ga));
                }
                if tracked(self, b) {
                    let gb = self.mul(g, Var(a))?;
                    out.push((b, gb));
                }
            }
            Op::Masked { a, mask } => {
                let ga = self.masked(g, mask.clone());
                out.push((*a, ga));
            }
            &Op::Affine { a, scale } => {
                let ga = self.scale(g, scale);
                out.push((a, ga));
            }
            &Op::Tanh(a) => {
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0);
                out.push((a, self.mul(g, d)?));
            }
            &Op::Sigmoid(a) => {
                let one_minus = self.affine(y, -1.0, 1.0);
                let d = self.mul(y, one_minus)?;
                out.push((a, self.mul(g, d)?));
            }
            &Op::Softplus(a) => {
                let d = self.sigmoid(Var(a));
                out.push((a, self.mul(g, d)?));
            }
            &Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::Log { a, mask } => {
                let gm = self.masked(g, mask.clone());
                let r = self.recip(Var(*a));
                out.push((*a, self.mul(gm, r)?));
            }
            &Op::Recip(a) => {
                let y2 = self.mul(y, y)?;
                let d = self.neg(y2);
                out.push((a, self.mul(g, d)?));
            }
            &Op::Sqrt(a) => {
                let r = self.recip(y);
                let d = self.scale(r, 0.5);
                out.push((a, self.mul(g, d)?));
            }
            &Op::Softmax(a) => {
                let axis = self.shape(y).len() - 1;
                let n = last_dim(self.value(y));
                let gy = self.mul(g, y)?;
                let s = self.sum_axis(gy, axis)?;
                let sb = self.broadcast(s, axis, n)?;
                let diff = self.sub(g, sb)?;
                out.push((a, self.mul(y, diff)?));
            }
            &Op::LogSoftmax(a) => {
                let axis = self.shape(y).len() - 1;
                let n = last_dim(self.value(y));
                let s = self.sum_axis(g, axis)?;
                let sb = self.broadcast(s, axis, n)?;
                let p = self.exp(y);
                let ps = self.mul(p, sb)?;
                out.push((a, self.sub(g, ps)?));
            }
            &Op::SumAll(a) => {
                let shape = self.shape(Var(a)).to_vec();
                out.push((a, self.expand(g, &shape)));
            }
            &Op::Expand(a) => out.push((a, self.sum(g))),
            &Op::SumAxis { a, axis } => {
                let len = self.shape(Var(a))[axis];
                let shape = self.shape(Var(a)).to_vec();
                // a rank-1 input sums to shape [1], which broadcasts to [1, len]
                let g = if self.shape(g).len() + 1 == shape.len() {
                    g
                } else {
                    self.reshape(g, &shape[..shape.len() - 1])?
                };
                let gb = self.broadcast(g, axis, len)?;
                out.push((a, gb));
            }
            &Op::Broadcast { a, axis } => {
                let ga = self.sum_axis(g, axis)?;
                let shape = self.shape(Var(a)).to_vec();
                let ga = if self.shape(ga) == shape.as_slice() {
                    ga
                } else {
                    self.reshape(ga, &shape)?
                };
                out.push((a, ga));
            }
            &Op::Reshape(a) => {
                let shape = self.shape(Var(a)).to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(Var(p))[*axis];
                    if tracked(self, p) {
                        let gp = self.slice(g, *axis, offset, len)?;
                        out.push((p, gp));
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let total = self.shape(Var(a))[axis];
                out.push((a, self.pad(g, axis, start, total)?));
            }
            &Op::Pad { a, axis, start } => {
                let len = self.shape(Var(a))[axis];
                out.push((a, self.slice(g, axis, start, len)?));
            }
        }
        Ok(out)
    }
}

fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `c`,
        // whose lengths were validated against their shapes.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![m, n], c)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn safe_recip(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        1.0 / x
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}
