//! Tensor-level reverse-mode tape.
//!
//! Values are appended in evaluation order, so a node's parents always have
//! smaller ids and a single reverse sweep is a valid topological traversal.

use super::kernels::{
    axpy, dot, log_sum_exp, matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc,
    softmax_in_place,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    SoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    AddSparse {
        base: Var,
        values: Var,
        indices: Vec<u32>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            (&[n, k], &[k2, m]) if k == k2 => (n, k, m),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let out = matmul(self.data(a), self.data(b), n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x[.., k] · w[m,k]ᵀ` with the weight stored output-major.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (m, k) = match sw.as_slice() {
            &[m, k] if last_dim(&sx) == k && !sx.is_empty() => (m, k),
            _ => return Err(Error::shape("linear", &sx, &sw)),
        };
        let n = self.value(x).numel() / k;
        let out = matmul_nt(self.data(x), self.data(w), n, k, m);
        let mut shape = sx.clone();
        *shape.last_mut().expect("non-empty") = m;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w }, &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a bias vector to every row. This is the only broadcast allowed.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let d = last_dim(self.shape(x));
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).expect("dim");
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) * inv_d;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_K);
        let half = T::from_f64_lossy(0.5);
        let data = self
            .data(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Gathers rows of `table[V,d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", &[bad], &[v, d]));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood over rows of `logits[.., V]`; rows whose
    /// target is `None` are ignored. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vocab = last_dim(self.shape(logits));
        let rows = self.value(logits).numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::shape("cross_entropy", &[*bad], &[vocab]));
        }
        let xs = self.data(logits);
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, tgt) in targets.iter().enumerate() {
            let row = &xs[r * vocab..(r + 1) * vocab];
            let Some(t) = *tgt else { continue };
            let lse = log_sum_exp(row);
            total += lse - row[t];
            count += 1;
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            softmax_in_place(p);
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count")
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().fold(T::zero(), |a, v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Multi-head causal self-attention over `[batch*seq, dim]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("causal_attention", &shape, self.shape(k)));
        }
        let dim = match shape.as_slice() {
            &[n, d] if n == batch * seq && heads > 0 && d % heads == 0 => d,
            _ => return Err(Error::shape("causal_attention", &shape, &[batch * seq, heads])),
        };
        let hd = dim / heads;
        let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * dim];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * dim + h * hd..][..hd];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for j in 0..=i {
                        let kj = &ks[(b * seq + j) * dim + h * hd..][..hd];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * dim + h * hd..][..hd];
                    for j in 0..=i {
                        let vj = &vs[(b * seq + j) * dim + h * hd..][..hd];
                        axpy(prow[j], vj, orow);
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// `base` with `values[i]` added at flat coordinate `indices[i]`.
    pub fn add_sparse(&mut self, base: Var, values: Var, indices: &[u32]) -> Result<Var> {
        let numel = self.value(base).numel();
        if self.value(values).numel() != indices.len() {
            return Err(Error::shape(
                "add_sparse",
                self.shape(values),
                &[indices.len()],
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= numel) {
            return Err(Error::shape("add_sparse", &[bad as usize], self.shape(base)));
        }
        let mut data = self.data(base).to_vec();
        for (&i, &v) in indices.iter().zip(self.data(values)) {
            data[i as usize] += v;
        }
        let t = Tensor::new(self.shape(base).to_vec(), data)?;
        Ok(self.push(
            t,
            Op::AddSparse {
                base,
                values,
                indices: indices.to_vec(),
            },
            &[base, values],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // A Var used as both operands gets two sequential calls, so fan-out
        // stays additive.
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.needs(v) {
                return;
            }
            let len = self.value(v).numel();
            f(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]));
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &mut |da| matmul_nt_acc(g, bv, n, m, k, da));
                acc(grads, *b, &mut |db| matmul_tn_acc(av, g, n, k, m, db));
            }
            Op::Linear { x, w } => {
                let sw = self.shape(*w);
                let (m, k) = (sw[0], sw[1]);
                let n = self.value(*x).numel() / k;
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(grads, *x, &mut |dx| matmul_acc(g, wv, n, m, k, dx));
                acc(grads, *w, &mut |dw| matmul_tn_acc(g, xv, n, m, k, dw));
            }
            Op::Add { a, b } => {
                acc(grads, *a, &mut |da| axpy(T::one(), g, da));
                acc(grads, *b, &mut |db| axpy(T::one(), g, db));
            }
            Op::AddBias { x, bias } => {
                let d = self.value(*bias).numel();
                acc(grads, *x, &mut |dx| axpy(T::one(), g, dx));
                acc(grads, *bias, &mut |db| {
                    for row in g.chunks(d) {
                        axpy(T::one(), row, db);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, &mut |dx| axpy(*factor, g, dx));
            }
            Op::SoftmaxRows { x } => {
                let y = node.value.data();
                let d = last_dim(node.value.shape());
                acc(grads, *x, &mut |dx| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let s = dot(yr, gr);
                        for j in 0..d {
                            dx[r * d + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.data(*gain);
                let d = gv.len();
                let inv_d = T::one() / T::from_usize(d).expect("dim");
                acc(grads, *x, &mut |dx| {
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let mean_dxh = dxh.iter().copied().fold(T::zero(), |a, v| a + v) * inv_d;
                        let mean_dxh_h = dot(&dxh, hr) * inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxh[j] - mean_dxh - hr[j] * mean_dxh_h);
                        }
                    }
                });
                acc(grads, *gain, &mut |dg| {
                    for r in 0..rstd.len() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(grads, *bias, &mut |db| {
                    for row in g.chunks(d) {
                        axpy(T::one(), row, db);
                    }
                });
            }
            Op::Gelu { x } => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_K);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let xv = self.data(*x);
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        let v = xv[i];
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        dx[i] += g[i] * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > T::zero() {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = last_dim(self.shape(*table));
                acc(grads, *table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = last_dim(self.shape(*logits));
                let s = g[0] / T::from_usize(*count).expect("count");
                acc(grads, *logits, &mut |dl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(t) = *tgt else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        axpy(s, p, row);
                        row[t] -= s;
                    }
                });
            }
            Op::Sum { x } => {
                acc(grads, *x, &mut |dx| {
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Reshape { x } => {
                acc(grads, *x, &mut |dx| axpy(T::one(), g, dx));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let dim = self.shape(*q)[1];
                let hd = dim / heads;
                let scale = T::one() / T::from_usize(hd).expect("head dim").sqrt();
                let (qs, ks, vs) = (self.data(*q), self.data(*k), self.data(*v));
                let n = batch * seq * dim;
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                let mut ds = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            let gi = &g[(b * seq + i) * dim + h * hd..][..hd];
                            for j in 0..=i {
                                let off = (b * seq + j) * dim + h * hd;
                                axpy(prow[j], gi, &mut dv[off..off + hd]);
                                ds[j] = dot(gi, &vs[off..off + hd]);
                            }
                            let s = dot(prow, &ds[..=i]);
                            let qoff = (b * seq + i) * dim + h * hd;
                            for j in 0..=i {
                                let dscore = prow[j] * (ds[j] - s) * scale;
                                let off = (b * seq + j) * dim + h * hd;
                                axpy(dscore, &ks[off..off + hd], &mut dq[qoff..qoff + hd]);
                                axpy(dscore, &qs[qoff..qoff + hd], &mut dk[off..off + hd]);
                            }
                        }
                    }
                }
                acc(grads, *q, &mut |d| axpy(T::one(), &dq, d));
                acc(grads, *k, &mut |d| axpy(T::one(), &dk, d));
                acc(grads, *v, &mut |d| axpy(T::one(), &dv, d));
            }
            Op::AddSparse {
                base,
                values,
                indices,
            } => {
                acc(grads, *base, &mut |db| axpy(T::one(), g, db));
                acc(grads, *values, &mut |dv| {
                    for (slot, &i) in dv.iter_mut().zip(indices) {
                        *slot += g[i as usize];
                    }
                });
            }
        }
    }
}
