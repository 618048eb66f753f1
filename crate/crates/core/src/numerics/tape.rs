//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order, which is by construction a topological order of the
//! computation graph. [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints into [`Gradients`].
//!
//! Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied, so building an inference tape per decoding step costs only the
//! activations it produces. A tape created with [`Tape::inference`] keeps no
//! backward bookkeeping at all.

use rand::Rng;

use super::kernels::{self, AttnShape};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Node identity within one [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Slot<T: Real> {
    Param(ParamId),
    Owned(Tensor<T>),
}

enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_idx: Vec<usize>,
        b_idx: Vec<usize>,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        pad: usize,
        count: usize,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
    StraightThrough(Var),
    Index {
        x: Var,
        index: usize,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<T: Real> {
    slot: Slot<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Execution record of tensor operations supporting reverse-mode gradients.
pub struct Tape<'a, T: Real = f32> {
    params: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'a, T: Real> Tape<'a, T> {
    /// Recording tape over `params`.
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// Forward-only tape: parameters do not require gradients and no
    /// backward state is saved.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    /// Recording tape with no parameter store, for free-standing computations.
    pub fn detached() -> Self {
        Self::build(None, true)
    }

    fn build(params: Option<&'a ParamStore<T>>, grad_enabled: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.map_or(0, |p| p.len())],
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].slot {
            Slot::Param(id) => self.params.expect("param node without store").get(*id),
            Slot::Owned(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(id)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            slot: Slot::Param(id),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let extent = |s: &[usize], i: usize| {
            let off = rank - s.len();
            if i < off {
                1
            } else {
                s[i - off]
            }
        };
        let mut batch = Vec::with_capacity(rank);
        for i in 0..rank {
            let (ea, eb) = (extent(ba, i), extent(bb, i));
            if ea != eb && ea != 1 && eb != 1 {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            batch.push(ea.max(eb));
        }
        let count: usize = batch.iter().product();
        let (mut a_idx, mut b_idx) = (Vec::with_capacity(count), Vec::with_capacity(count));
        let mut digits = vec![0usize; rank];
        for _ in 0..count {
            let (mut ia, mut ib) = (0, 0);
            for i in 0..rank {
                let (ea, eb) = (extent(ba, i), extent(bb, i));
                ia = ia * ea + if ea == 1 { 0 } else { digits[i] };
                ib = ib * eb + if eb == 1 { 0 } else { digits[i] };
            }
            a_idx.push(ia);
            b_idx.push(ib);
            for i in (0..rank).rev() {
                digits[i] += 1;
                if digits[i] < batch[i] {
                    break;
                }
                digits[i] = 0;
            }
        }
        let mut out = vec![T::zero(); count * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for t in 0..count {
                kernels::gemm_nn(
                    &av[a_idx[t] * m * k..],
                    &bv[b_idx[t] * k * n..],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        let op = if self.grad_enabled {
            Op::MatMul {
                a,
                b,
                a_idx,
                b_idx,
                m,
                k,
                n,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    /// `a[.., k] × b[n, k]ᵀ`, e.g. hidden states against a tied embedding table.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::dim("matmul_t", &sa, &sb));
        }
        let (k, n) = (sb[1], sb[0]);
        let rows = self.value(a).rows();
        let mut out = vec![T::zero(); rows * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulT { a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    /// Adds a rank-1 `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(bv.len().max(1)) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, needs))
    }

    /// `x · w + b` for `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::of(self.value(x).sum_f64());
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Scalar view of one element (flat index).
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::dim("index", &[len], &[index]));
        }
        let v = self.value(x).data()[index];
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Index { x, index }, needs))
    }

    /// Row `row` of a rank-2 table.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::dim("select_row", s, &[row]));
        }
        let d = s[1];
        let data = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        let needs = self.needs(table);
        Ok(self.push(Tensor::vector(data), Op::SelectRow { table, row }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax"));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)].f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (xv[at(j)].f64() - max).exp();
                    total += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[at(j)] = T::of(b / total);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xv.len()];
        let keep = self.grad_enabled;
        let mut xhat = if keep { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut rstd = if keep { vec![T::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let h = T::of((row[j].f64() - mean) * inv);
                out[r * d + j] = h * gv[j] + bv[j];
                if keep {
                    xhat[r * d + j] = h;
                }
            }
            if keep {
                rstd[r] = T::of(inv);
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of `table` for `ids`, multiplied by `scale`; output is
    /// `prefix ++ [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize], scale: T) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", &s, prefix));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend(tv[id * d..(id + 1) * d].iter().map(|&v| v * scale));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        let op = Op::Embedding {
            table,
            ids: if needs { ids.to_vec() } else { Vec::new() },
            scale,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [b, tq, d]`, `k, v: [b, tk, d]`; `key_valid` is a `[b, tk]` mask of
    /// admissible keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dim("attention", &sq, &sk));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::Parameter(format!(
                "model dim {} not divisible by {heads} heads",
                sq[2]
            )));
        }
        let shape = AttnShape {
            batch: sq[0],
            tq: sq[1],
            tk: sk[1],
            dim: sq[2],
            heads,
            causal,
        };
        if let Some(m) = key_valid {
            if m.len() != shape.batch * shape.tk {
                return Err(Error::dim("attention mask", &[shape.batch, shape.tk], &[m.len()]));
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let keep = needs;
        let mut probs = if keep {
            vec![T::zero(); shape.batch * heads * shape.tq * shape.tk]
        } else {
            Vec::new()
        };
        let mut out = vec![T::zero(); shape.batch * shape.tq * shape.dim];
        {
            let stride = shape.tk * shape.dim;
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let keys: Vec<&[T]> = (0..shape.batch).map(|b| &kd[b * stride..(b + 1) * stride]).collect();
            let vals: Vec<&[T]> = (0..shape.batch).map(|b| &vd[b * stride..(b + 1) * stride]).collect();
            let valid: Vec<Option<&[bool]>> = (0..shape.batch)
                .map(|b| key_valid.map(|m| &m[b * shape.tk..(b + 1) * shape.tk]))
                .collect();
            kernels::attention_forward(
                self.value(q).data(),
                &keys,
                &vals,
                &valid,
                shape,
                &mut out,
                keep.then_some(probs.as_mut_slice()),
            );
        }
        let op = Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        };
        Ok(self.push(Tensor::new(sq, out)?, op, needs))
    }

    /// Forward-only attention against externally owned key/value rows, one
    /// `[tk, d]` slice per query batch row. Only valid on inference tapes.
    pub fn attention_external(
        &mut self,
        q: Var,
        keys: &[&[T]],
        values: &[&[T]],
        key_valid: &[Option<&[bool]>],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        if self.grad_enabled {
            return Err(Error::Parameter(
                "attention_external requires an inference tape".into(),
            ));
        }
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || keys.len() != sq[0] || values.len() != sq[0] || key_valid.len() != sq[0] {
            return Err(Error::dim("attention_external", &sq, &[keys.len()]));
        }
        let tk = if sq[2] == 0 { 0 } else { keys.first().map_or(0, |k| k.len() / sq[2]) };
        if keys.iter().chain(values).any(|k| k.len() != tk * sq[2]) {
            return Err(Error::dim("attention_external", &sq, &[tk, sq[2]]));
        }
        let shape = AttnShape {
            batch: sq[0],
            tq: sq[1],
            tk,
            dim: sq[2],
            heads,
            causal,
        };
        let mut out = vec![T::zero(); shape.batch * shape.tq * shape.dim];
        kernels::attention_forward(self.value(q).data(), keys, values, key_valid, shape, &mut out, None);
        Ok(self.push(Tensor::new(sq, out)?, Op::Leaf, false))
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out_data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.shape(x).to_vec(), out_data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Mean over non-pad rows of `KL(q ‖ softmax(logits))`, where `q` puts
    /// `1 − smoothing` on the gold class and spreads `smoothing` uniformly over
    /// the remaining classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64, pad: usize) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Parameter(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let lv = self.value(logits);
        let v = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if smoothing > 0.0 && v < 2 {
            return Err(Error::Parameter("label smoothing needs at least two classes".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != pad && t >= v) {
            return Err(Error::Vocabulary(format!("target id {bad} outside vocabulary of {v}")));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        if !lv.is_finite() {
            return Err(Error::Numeric("cross_entropy"));
        }
        let (q_gold, q_other) = smoothed_targets(smoothing, v);
        let entropy_term = xlogx(q_gold) + (v as f64 - 1.0) * xlogx(q_other);
        let data = lv.data();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &data[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let mut cross = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t { q_gold } else { q_other };
                if q > 0.0 {
                    cross -= q * (x.f64() - lse);
                }
            }
            total += entropy_term + cross;
        }
        let loss = T::of(total / count as f64);
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
            pad,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Hard one-hot at the argmax of `soft` (lowest index on ties) whose
    /// adjoint passes through to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let sv = self.value(soft);
        let best = argmax(sv.data());
        let mut hard = Tensor::zeros(sv.shape());
        hard.data_mut()[best] = T::one();
        let needs = self.needs(soft);
        self.push(hard, Op::StraightThrough(soft), needs)
    }

    /// Back-propagates from scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                a_idx,
                b_idx,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for (t, &ia) in a_idx.iter().enumerate() {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[b_idx[t] * k * n..(b_idx[t] + 1) * k * n];
                        kernels::gemm_nt(gt, bt, &mut da[ia * m * k..(ia + 1) * m * k], m, n, k);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (t, &ib) in b_idx.iter().enumerate() {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[a_idx[t] * m * k..(a_idx[t] + 1) * m * k];
                        kernels::gemm_tn(at, gt, &mut db[ib * k * n..(ib + 1) * k * n], m, k, n);
                    }
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, k, n) = (av.rows(), bv.shape()[1], bv.shape()[0]);
                let (ad, bd) = (av.data(), bv.data());
                if let Some(da) = self.acc(grads, *a) {
                    kernels::gemm_nn(g, bd, da, rows, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::gemm_tn(g, ad, db, rows, n, k);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(db) = self.acc(grads, *bias) {
                    let d = db.len();
                    for row in g.chunks_exact(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dotp: f64 = (0..*len).map(|j| (g[at(j)] * y[at(j)]).f64()).sum();
                            let dotp = T::of(dotp);
                            for j in 0..*len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
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
                let gv = self.value(*gain).data();
                if let Some(dg) = self.acc(grads, *gain) {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for row_g in g.chunks_exact(d) {
                        db.iter_mut().zip(row_g).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, (row_g, row_h)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (row_g[j] * gv[j]).f64();
                            mean_dh += dh;
                            mean_dh_h += dh * row_h[j].f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let inv = rstd[r].f64();
                        for j in 0..d {
                            let dh = (row_g[j] * gv[j]).f64();
                            dx[r * d + j] += T::of(inv * (dh - mean_dh - row_h[j].f64() * mean_dh_h));
                        }
                    }
                }
            }
            Op::Embedding { table, ids, scale } => {
                let d = self.value(*table).last_dim();
                if let Some(dt) = self.acc(grads, *table) {
                    for (row_g, &id) in g.chunks_exact(d).zip(ids) {
                        kernels::axpy(*scale, row_g, &mut dt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = self.nodes[q.0].needs_grad.then(|| vec![T::zero(); qv.len()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![T::zero(); kv.len()]);
                let mut dv = self.nodes[v.0].needs_grad.then(|| vec![T::zero(); vv.len()]);
                kernels::attention_backward(
                    qv,
                    kv,
                    vv,
                    probs,
                    g,
                    *shape,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (p, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(local), Some(d)) = (local, self.acc(grads, p)) {
                        d.iter_mut().zip(&local).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad,
                count,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let (q_gold, q_other) = smoothed_targets(*smoothing, v);
                let upstream = g[0].f64() / *count as f64;
                let data = lv.data();
                if let Some(dl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &data[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row);
                        for (j, &x) in row.iter().enumerate() {
                            let q = if j == t { q_gold } else { q_other };
                            let p = (x.f64() - lse).exp();
                            dl[r * v + j] += T::of(upstream * (p - q));
                        }
                    }
                }
            }
            Op::SelectRow { table, row } => {
                let d = g.len();
                if let Some(dt) = self.acc(grads, *table) {
                    dt[row * d..(row + 1) * d]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::StraightThrough(x) | Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Index { x, index } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx[*index] += g[0];
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter; `None` when the parameter did not take part.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_nodes.get(id.0).copied().flatten().and_then(|v| self.get(v))
    }

    /// Moves parameter gradients out, indexed by `ParamId`.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<T>>> {
        self.param_nodes
            .iter()
            .map(|v| v.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}

fn smoothed_targets(smoothing: f64, classes: usize) -> (f64, f64) {
    let other = if classes > 1 { smoothing / (classes as f64 - 1.0) } else { 0.0 };
    (1.0 - smoothing, other)
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
