//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every primitive appends a node holding its output value and enough saved
//! data for its backward rule. Nodes are created in topological order, so
//! the backward pass is a single reverse sweep.

use super::params::{ParamId, ParamSet};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left `[r, c]` one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[1, c]`, repeated over rows.
    Row,
    /// `[r, 1]`, repeated over columns.
    Col,
    /// `[1, 1]`.
    Scalar,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    HardSigmoid(Var, T),
    StraightThrough(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation record for one forward pass. Confined to a single thread.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients from one backward sweep. `None` means unreachable
/// from the loss (an implicit zero).
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn clamp_unit<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Forward rule of the straight-through rounding: clamp to [0, 1], then
/// round with ties at exactly 0.5 going to 1.
pub fn round_boundary<T: Real>(v: T) -> T {
    let half = T::from_f64_lossy(0.5);
    if clamp_unit(v) >= half {
        T::one()
    } else {
        T::zero()
    }
}

/// `max(0, min(1, slope·x + 0.5))` on a single value.
pub fn hard_sigmoid_scalar<T: Real>(x: T, slope: T) -> T {
    clamp_unit(slope * x + T::from_f64_lossy(0.5))
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. Its gradient is still available from
    /// [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// Records a snapshot of a parameter; [`Tape::backward`] routes its
    /// gradient back into the set.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sa.len() == 2 && sb.len() == 2 {
            let (r, c) = (sa[0], sa[1]);
            match (sb[0], sb[1]) {
                (1, 1) => return Ok(Broadcast::Scalar),
                (1, bc) if bc == c => return Ok(Broadcast::Row),
                (br, 1) if br == r => return Ok(Broadcast::Col),
                _ => {}
            }
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let cols = va.cols();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => vb.data()[i],
                    Broadcast::Row => vb.data()[i % cols],
                    Broadcast::Col => vb.data()[i / cols],
                    Broadcast::Scalar => vb.data()[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Binary(kind, a, b, bc)))
    }

    /// Elementwise sum; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    /// Elementwise product (⊙); `b` may broadcast as a row, column or scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    /// `1 − a`, used to turn boundary bits into complementary masks.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    /// `max(0, min(1, slope·x + 0.5))`.
    pub fn hard_sigmoid(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero()) {
            return Err(Error::Config(format!("hard-sigmoid slope must be > 0, got {slope}")));
        }
        let out = self.value(a).map(|x| hard_sigmoid_scalar(x, slope));
        Ok(self.push(out, Op::HardSigmoid(a, slope)))
    }

    /// Rounds to {0, 1} on the forward pass and passes gradients through
    /// unchanged on the backward pass.
    pub fn straight_through_round(&mut self, a: Var) -> Var {
        let src = self.value(a);
        if log::log_enabled!(log::Level::Debug) {
            let outside = src
                .data()
                .iter()
                .filter(|&&v| v < T::zero() || v > T::one())
                .count();
            if outside > 0 {
                log::debug!("straight_through_round: clamped {outside} values outside [0, 1]");
            }
        }
        let out = src.map(round_boundary);
        self.push(out, Op::StraightThrough(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no operands"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} out of bounds for shape {s:?}"),
            ));
        }
        let v = self.value(a);
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no operands"))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::invalid("embedding", format!("table must be a matrix, got {:?}", t.shape())));
        }
        let (n, dim) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= n {
                return Err(Error::invalid("embedding", format!("id {id} out of range for {n} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(out, Op::Embedding(table, ids.to_vec())))
    }

    /// Per-row `(x − mean)/sqrt(var + eps) ⊙ gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::invalid("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 || !xv.is_matrix() {
            return Err(Error::invalid("layer_norm", format!("empty normalization axis in {:?}", xv.shape())));
        }
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(Error::shape("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(rows * n);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over rows of `−ln softmax(logits)[target]`, stabilized by the
    /// row maximum. Produces a `[1, 1]` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.is_matrix() || lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        let v = lv.cols();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("target {t} out of range for {v} classes"),
                ));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_denom = denom.ln();
            total += log_denom - (row[t] - max);
            probs.extend(row.iter().map(|&x| (x - max).exp() / denom));
        }
        let n = T::from_usize(targets.len()).unwrap();
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_squares());
        self.push(out, Op::SumSquares(a))
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates (`+=`) parameter gradients of `loss` into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, g) {
                params.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = dC · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                // dB = Aᵀ · dC
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Binary(kind, a, b, bc) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let cols = va.cols();
                let b_at = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Row => i % cols,
                    Broadcast::Col => i / cols,
                    Broadcast::Scalar => 0,
                };
                let (ga, gb_full): (Tensor<T>, Vec<T>) = match kind {
                    Binary::Add => (g.clone(), g.data().to_vec()),
                    Binary::Sub => (g.clone(), g.data().iter().map(|&x| -x).collect()),
                    Binary::Mul => {
                        let ga = Tensor::from_fn(va.shape(), |i| g.data()[i] * vb.data()[b_at(i)]);
                        let gb = g.data().iter().zip(va.data()).map(|(&gi, &ai)| gi * ai).collect();
                        (ga, gb)
                    }
                };
                accumulate(grads, *a, ga);
                let mut gb = vec![T::zero(); vb.len()];
                for (i, v) in gb_full.into_iter().enumerate() {
                    gb[b_at(i)] += v;
                }
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb).unwrap());
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g.map(|x| x * *scale)),
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gi, y| gi * y * (T::one() - y)).unwrap();
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gi, y| gi * (T::one() - y * y)).unwrap();
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(out, |gi, y| if y > T::zero() { gi } else { T::zero() })
                    .unwrap();
                accumulate(grads, *a, ga);
            }
            Op::HardSigmoid(a, slope) => {
                let half = T::from_f64_lossy(0.5);
                let x = self.value(*a);
                let ga = g
                    .zip_map(x, |gi, xi| {
                        let y = *slope * xi + half;
                        if y > T::zero() && y < T::one() {
                            gi * *slope
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                accumulate(grads, *a, ga);
            }
            Op::StraightThrough(a) => accumulate(grads, *a, g.clone()),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![rows, w], data).unwrap());
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (rows, cols) = (src.rows(), src.cols());
                let w = g.cols();
                let mut ga = Tensor::zeros(src.shape());
                for r in 0..rows {
                    ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let part = Tensor::new(self.shape(p).to_vec(), g.data()[offset..offset + n].to_vec()).unwrap();
                    accumulate(grads, p, part);
                    offset += n;
                }
            }
            Op::Embedding(table, ids) => {
                let t = self.value(*table);
                let dim = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * dim..(id + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let rows = g.rows();
                let nf = T::from_usize(n).unwrap();
                let gv = self.value(*gain).data();
                let mut gx = Vec::with_capacity(rows * n);
                let mut ggain = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        ggain[j] += gr[j] * xh[j];
                        gbias[j] += gr[j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        gx.push(inv_std[r] * (d - mean_d - xh[j] * mean_dx));
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![rows, n], gx).unwrap());
                let gshape = self.shape(*gain).to_vec();
                accumulate(grads, *gain, Tensor::new(gshape, ggain).unwrap());
                let bshape = self.shape(*bias).to_vec();
                accumulate(grads, *bias, Tensor::new(bshape, gbias).unwrap());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let scale = g.item() / T::from_usize(targets.len()).unwrap();
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= T::one();
                }
                gl.iter_mut().for_each(|x| *x *= scale);
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl).unwrap());
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::SumSquares(a) => {
                let two_g = g.item() + g.item();
                accumulate(grads, *a, self.value(*a).map(|x| two_g * x));
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
