use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Ids increase in creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-token rotation angles for rotary encoding, laid out `[tokens, pairs]`
/// where `pairs = head_dim / 2`. The same angles are used for every head.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Transpose { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    Rope { a: Var, table: RopeTable<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Sum { a: Var },
    WeightedL1 { a: Var, b: Var, w: Vec<T> },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<T: Real> Tape<T> {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        let data = va
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor {
            shape: va.shape().to_vec(),
            data,
        })
    }

    /// `a + b`, where `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Element-wise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, s }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = (T::c(GELU_K), T::c(GELU_C));
        let half = T::c(0.5);
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v
                .data()
                .iter()
                .map(|&x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()))
                .collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: v.rank(),
            });
        }
        let (outer, n, inner) = outer_inner(v.shape(), axis);
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mut mx = T::neg_infinity();
                for i in 0..n {
                    mx = mx.max(x[idx(i)]);
                }
                let mut s = T::zero();
                for i in 0..n {
                    let e = (x[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    out[idx(i)] /= s;
                }
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[d]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = vx.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let dt = T::c(d as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: v.rank(),
            });
        }
        let extent = v.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let (outer, n, inner) = outer_inner(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: v.rank(),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose { a },
            rg,
        ))
    }

    /// Rows `idx` of the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let n = v.shape()[0];
        let row = v.len() / n;
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        if idx.is_empty() {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: 0,
                extent: 0,
            });
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Rotates adjacent channel pairs of every head of `a` (`[tokens, heads·2·pairs]`).
    pub fn rope(&mut self, a: Var, table: &RopeTable<T>) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        let hd = 2 * table.pairs;
        if s.len() != 2 || s[0] != table.tokens || hd == 0 || !s[1].is_multiple_of(hd) {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: s.to_vec(),
                rhs: vec![table.tokens, hd],
            });
        }
        let out = rotate(v.data(), s[1], table, false);
        let value = Tensor {
            shape: s.to_vec(),
            data: out,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::Rope {
                a,
                table: table.clone(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `[nq, d]`, `k` and `v`
    /// are `[nk, d]`; `d` is split evenly into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut mx = T::neg_infinity();
                for j in 0..nk {
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut sum = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    sum += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= sum;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    let pj = p[j];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor {
                shape: vec![nq, d],
                data: out,
            },
            Op::Attention { q, k, v, heads, probs },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// `(1 / (rows·d)) Σ_r w_r Σ_c |a − b|` for `[rows, d]` operands.
    pub fn weighted_mean_l1(&mut self, a: Var, b: Var, w: &[T]) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_mean_l1",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.last_dim();
        let rows = va.rows();
        if w.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_mean_l1",
                lhs: vec![rows],
                rhs: vec![w.len()],
            });
        }
        let mut total = T::zero();
        for r in 0..rows {
            let s: T = va.row(r).iter().zip(vb.row(r)).map(|(&x, &y)| (x - y).abs()).sum();
            total += w[r] * s;
        }
        let value = total / T::c((rows * d) as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::WeightedL1 { a, b, w: w.to_vec() }, rg))
    }

    /// Mean absolute difference over all elements.
    pub fn mean_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let w = vec![T::one(); rows];
        self.weighted_mean_l1(a, b, &w)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let n = T::c(va.len() as f64);
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            if targets[r] >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[r],
                    extent: c,
                });
            }
            let row = v.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                s += e;
            }
            for j in 0..c {
                probs[r * c + j] /= s;
            }
            loss += -(row[targets[r]] - mx - s.ln());
        }
        let value = loss / T::c(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// decreasing id order. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if rg(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| gemm_nt(m, n, k, g, vb.data(), ga));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], k * n, |gb| gemm_tn(k, m, n, va.data(), g, gb));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if rg(*b) {
                    let nb = len(*b);
                    accumulate(&mut grads[b.0], nb, |gb| {
                        for chunk in g.chunks(nb) {
                            for (x, &y) in gb.iter_mut().zip(chunk) {
                                if neg {
                                    *x -= y;
                                } else {
                                    *x += y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * vb[i % nb];
                        }
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], nb, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % nb] += gi * va[i];
                        }
                    });
                }
            }
            Op::Scale { a, s } => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y * *s;
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                if rg(*a) {
                    let (k, c) = (T::c(GELU_K), T::c(GELU_C));
                    let half = T::c(0.5);
                    let three = T::c(3.0);
                    let x = self.value(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for i in 0..g.len() {
                            let xi = x[i];
                            let t = (k * (xi + c * xi * xi * xi)).tanh();
                            let d = half * (T::one() + t)
                                + half * xi * (T::one() - t * t) * k * (T::one() + three * c * xi * xi);
                            ga[i] += g[i] * d;
                        }
                    });
                }
            }
            Op::Softmax { a, axis } => {
                if rg(*a) {
                    let y = node.value.data();
                    let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * n + i) * inner + j;
                                let mut s = T::zero();
                                for i in 0..n {
                                    s += g[idx(i)] * y[idx(i)];
                                }
                                for i in 0..n {
                                    ga[idx(i)] += y[idx(i)] * (g[idx(i)] - s);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if rg(*gain) {
                    accumulate(&mut grads[gain.0], d, |gg| {
                        for r in 0..rows {
                            for i in 0..d {
                                gg[i] += g[r * d + i] * xhat[r * d + i];
                            }
                        }
                    });
                }
                if rg(*bias) {
                    accumulate(&mut grads[bias.0], d, |gb| {
                        for r in 0..rows {
                            for i in 0..d {
                                gb[i] += g[r * d + i];
                            }
                        }
                    });
                }
                if rg(*x) {
                    let dt = T::c(d as f64);
                    accumulate(&mut grads[x.0], rows * d, |gx| {
                        for r in 0..rows {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for i in 0..d {
                                let dh = g[r * d + i] * gv[i];
                                m1 += dh;
                                m2 += dh * xhat[r * d + i];
                            }
                            m1 /= dt;
                            m2 /= dt;
                            for i in 0..d {
                                let dh = g[r * d + i] * gv[i];
                                gx[r * d + i] += rstd[r] * (dh - m1 - xhat[r * d + i] * m2);
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = outer_inner(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.shape(p)[*axis];
                    if rg(p) {
                        let block = extent * inner;
                        accumulate(&mut grads[p.0], outer * block, |gp| {
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                for (x, &y) in gp[o * block..(o + 1) * block].iter_mut().zip(&g[src..src + block]) {
                                    *x += y;
                                }
                            }
                        });
                    }
                    offset += extent;
                }
            }
            Op::Slice { a, axis, start } => {
                if rg(*a) {
                    let full = self.shape(*a);
                    let (outer, n, inner) = outer_inner(full, *axis);
                    let l = node.value.shape()[*axis];
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        for o in 0..outer {
                            let base = o * n * inner + start * inner;
                            let src = o * l * inner;
                            for (x, &y) in ga[base..base + l * inner].iter_mut().zip(&g[src..src + l * inner]) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Reshape { a } => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if rg(*a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    accumulate(&mut grads[a.0], r * c, |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { a, idx } => {
                if rg(*a) {
                    let row = node.value.len() / idx.len();
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        for (k, &i) in idx.iter().enumerate() {
                            for (x, &y) in ga[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Rope { a, table } => {
                if rg(*a) {
                    let d = node.value.shape()[1];
                    let back = rotate(g, d, table, true);
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for (x, &y) in ga.iter_mut().zip(&back) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Sum { a } => {
                if rg(*a) {
                    let g0 = g[0];
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        for x in ga.iter_mut() {
                            *x += g0;
                        }
                    });
                }
            }
            Op::WeightedL1 { a, b, w } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.last_dim();
                let scale = g[0] / T::c(va.len() as f64);
                let sign = |r: usize, i: usize| {
                    let diff = va.data()[r * d + i] - vb.data()[r * d + i];
                    if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                for (target, s) in [(*a, T::one()), (*b, -T::one())] {
                    if rg(target) {
                        accumulate(&mut grads[target.0], va.len(), |gt| {
                            for r in 0..w.len() {
                                let f = s * scale * w[r];
                                for i in 0..d {
                                    gt[r * d + i] += f * sign(r, i);
                                }
                            }
                        });
                    }
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let f = T::c(2.0) * g[0] / T::c(va.len() as f64);
                for (target, s) in [(*a, T::one()), (*b, -T::one())] {
                    if rg(target) {
                        accumulate(&mut grads[target.0], va.len(), |gt| {
                            for i in 0..va.len() {
                                gt[i] += s * f * (va[i] - vb[i]);
                            }
                        });
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if rg(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let f = g[0] / T::c(n as f64);
                    accumulate(&mut grads[logits.0], n * c, |gl| {
                        for r in 0..n {
                            for j in 0..c {
                                let y = if j == targets[r] { T::one() } else { T::zero() };
                                gl[r * c + j] += f * (probs[r * c + j] - y);
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.shape(q)[1];
        let nq = self.shape(q)[0];
        let nk = self.shape(k)[0];
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let mut ds = vec![T::zero(); nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut s = T::zero();
                for j in 0..nk {
                    let dp = dot(gi, &vd[j * d + off..j * d + off + dh]);
                    ds[j] = dp;
                    s += dp * p[j];
                    // dV_j += p_ij · dO_i
                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                    for (x, &y) in gvj.iter_mut().zip(gi) {
                        *x += p[j] * y;
                    }
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    let dsj = p[j] * (ds[j] - s) * scale;
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let gqi = &mut gq[i * d + off..i * d + off + dh];
                    for (x, &y) in gqi.iter_mut().zip(kj) {
                        *x += dsj * y;
                    }
                    let gkj = &mut gk[j * d + off..j * d + off + dh];
                    for (x, &y) in gkj.iter_mut().zip(qi) {
                        *x += dsj * y;
                    }
                }
            }
        }
        for (target, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[target.0].requires_grad {
                let n = local.len();
                accumulate(&mut grads[target.0], n, |gt| {
                    for (x, y) in gt.iter_mut().zip(local) {
                        *x += y;
                    }
                });
            }
        }
    }
}

fn rotate<T: Real>(x: &[T], d: usize, table: &RopeTable<T>, inverse: bool) -> Vec<T> {
    let hd = 2 * table.pairs;
    let heads = d / hd;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..table.tokens {
        for h in 0..heads {
            for j in 0..table.pairs {
                let c = table.cos[n * table.pairs + j];
                let mut s = table.sin[n * table.pairs + j];
                if inverse {
                    s = -s;
                }
                let i0 = n * d + h * hd + 2 * j;
                let (x0, x1) = (x[i0], x[i0 + 1]);
                out[i0] = x0 * c - x1 * s;
                out[i0 + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
