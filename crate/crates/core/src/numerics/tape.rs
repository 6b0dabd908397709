use std::sync::Arc;

use rand::Rng;

use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each softmax row may attend to.
///
/// Row `r` of the scores belongs to batch element `r / rows_per_batch`;
/// key `k` of batch element `b` is visible iff `valid[b * keys + k]`.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub valid: Arc<Vec<bool>>,
    pub keys: usize,
    pub rows_per_batch: usize,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, trans_b: bool, g: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, tanh: Vec<T> },
    Softmax { x: Var },
    Embedding { table: Var, ids: Vec<u32> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape { x: Var },
    SwapAxes12 { x: Var },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}
const LN_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
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
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
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

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a @ b` (or `a @ b^T` when `trans_b`), with all leading dims of `a`
    /// flattened into rows. `b` must be rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        T::gemm(m, k, n, T::one(), self.data(a), (k, 1), self.data(b), bs, T::zero(), &mut out, (n, 1));
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b, m, k, n }, &[a, b]))
    }

    /// Batched matmul over all leading dims (rank 3 or 4).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let g: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); g * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        let bs = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bd[i * k * n..(i + 1) * k * n],
                bs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b, g, m, k, n }, &[a, b]))
    }

    /// Elementwise sum; `b` broadcasts when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bd = self.data(b);
        let period = bd.len().max(1);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(period) {
            add_into(chunk, bd);
        }
        let value = Tensor::new(&self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(&self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.data(a).iter().map(|&x| x * f).collect();
        let value = Tensor::new(&self.shape(a).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { a, factor: f }, &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    /// Constant rows map to zeros before the affine step.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", &sx, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gain)));
        }
        let n = self.value(x).len();
        let mut xhat = vec![T::zero(); n];
        let mut rstd = Vec::with_capacity(n / d.max(1));
        let mut out = vec![T::zero(); n];
        let (g, b) = (self.data(gain), self.data(bias));
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(LN_EPS);
        for ((row, xh), o) in self
            .data(x)
            .chunks(d)
            .zip(xhat.chunks_mut(d))
            .zip(out.chunks_mut(d))
        {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let mut var = T::zero();
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = v - mean;
                var += *h * *h;
            }
            let r = T::one() / (var * inv_d + eps).sqrt();
            rstd.push(r);
            for ((h, o), (&gi, &bi)) in xh.iter_mut().zip(o.iter_mut()).zip(g.iter().zip(b)) {
                *h *= r;
                *o = *h * gi + bi;
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let xv = self.data(x);
        let tanh: Vec<T> = xv.iter().map(|&v| fast_tanh(c * (v + k * v * v * v))).collect();
        let out = xv.iter().zip(&tanh).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let value = Tensor::new(&self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x, tanh }, &[x])
    }

    /// Softmax over the last axis. Masked keys receive exactly zero mass;
    /// a row with no visible key is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("softmax", &sx, &[]))?;
        if let Some(m) = mask {
            let rows = self.value(x).len() / d.max(1);
            if m.keys != d || m.rows_per_batch == 0 || m.valid.len() * m.rows_per_batch != rows * d {
                return Err(shape_err("softmax", &sx, &[m.valid.len(), m.keys, m.rows_per_batch]));
            }
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        for (r, (row, o)) in self.data(x).chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let valid = mask.map(|m| {
                let b = r / m.rows_per_batch;
                &m.valid[b * d..(b + 1) * d]
            });
            let visible = |k: usize| valid.is_none_or(|v| v[k]);
            let mut max = T::neg_infinity();
            for (k, &v) in row.iter().enumerate() {
                if visible(k) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (k, (&v, o)) in row.iter().zip(o.iter_mut()).enumerate() {
                if visible(k) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            let inv = T::one() / total;
            for o in o.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Rows of `table` ([V, H]) selected by `ids`, shaped [ids.len(), H].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[]));
        }
        let (v, h) = (st[0], st[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(shape_err("embedding", &st, &[id]));
            }
            out.extend_from_slice(&td[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(&[ids.len(), h], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout. A rate of zero returns `x` itself.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        // 32 random bits per element against a fixed threshold
        let cut = (rate.min(1.0) * 4_294_967_296.0) as u64;
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if u64::from(rng.next_u32()) < cut { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(&self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean cross-entropy of `logits` ([N, V]) over rows whose label is
    /// `Some`; zero (and gradient-free) when no row is labeled.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<u32>]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err("cross_entropy", &sl, &[labels.len()]));
        }
        let v = sl[1];
        let mut rows = Vec::new();
        for (r, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l as usize >= v {
                    return Err(shape_err("cross_entropy", &sl, &[l as usize]));
                }
                rows.push((r, l as usize));
            }
        }
        let ld = self.data(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0f64;
        for &(r, l) in &rows {
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = probs.len();
            let mut sum = T::zero();
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                probs.push(e);
            }
            let inv = T::one() / sum;
            for p in &mut probs[start..] {
                *p *= inv;
            }
            total += (sum.ln() + max - row[l]).as_f64();
        }
        let loss = if rows.is_empty() { 0.0 } else { total / rows.len() as f64 };
        let value = Tensor::scalar(T::of(loss));
        Ok(self.push(value, Op::CrossEntropy { logits, rows, probs }, &[logits]))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if self.value(logits).len() != targets.len() {
            return Err(shape_err("bce_with_logits", &sl, &[targets.len()]));
        }
        let n = targets.len();
        let mut total = 0.0;
        for (&x, &t) in self.data(logits).iter().zip(targets) {
            let (x, t) = (x.as_f64(), t.as_f64());
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let value = Tensor::scalar(T::of(loss));
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * d..(o + 1) * d]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(shape_err("slice", &sx, &[axis, start, len]));
        }
        let (outer, d, inner) = split_at_axis(&sx, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows of `x` viewed as [rows, last_dim]; result is [n, last_dim].
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| shape_err("gather_rows", &sx, &[]))?;
        let total = self.value(x).len() / c.max(1);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= total {
                return Err(shape_err("gather_rows", &sx, &[r]));
            }
            out.extend_from_slice(&xd[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", sx, shape));
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// [a, b, c, d] -> [a, c, b, d].
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("swap_axes12", &sx, &[4]));
        }
        let out = swap12(self.data(x), &sx);
        let value = Tensor::new(&[sx[0], sx[2], sx[1], sx[3]], out)?;
        Ok(self.push(value, Op::SwapAxes12 { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added to
    /// whatever `store` already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        match op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                if let Some(da) = self.slot(grads, a) {
                    // dA[m,k] += dC[m,n] . B^T
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, T::one(), g, (n, 1), self.data(b), bs, T::one(), da, (k, 1));
                }
                if let Some(db) = self.slot(grads, b) {
                    if trans_b {
                        // dB[n,k] += dC^T . A
                        T::gemm(n, m, k, T::one(), g, (1, n), self.data(a), (k, 1), T::one(), db, (k, 1));
                    } else {
                        // dB[k,n] += A^T . dC
                        T::gemm(k, m, n, T::one(), self.data(a), (1, k), g, (n, 1), T::one(), db, (n, 1));
                    }
                }
            }
            &Op::BatchMatMul { a, b, trans_b, g: groups, m, k, n } => {
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(da) = self.slot(grads, a) {
                    let bd = self.data(b);
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    for i in 0..groups {
                        T::gemm(
                            m, n, k, T::one(),
                            &g[i * sc..(i + 1) * sc], (n, 1),
                            &bd[i * sb..(i + 1) * sb], bs,
                            T::one(), &mut da[i * sa..(i + 1) * sa], (k, 1),
                        );
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let ad = self.data(a);
                    for i in 0..groups {
                        let (gi, ai, dbi) = (
                            &g[i * sc..(i + 1) * sc],
                            &ad[i * sa..(i + 1) * sa],
                            &mut db[i * sb..(i + 1) * sb],
                        );
                        if trans_b {
                            T::gemm(n, m, k, T::one(), gi, (1, n), ai, (k, 1), T::one(), dbi, (k, 1));
                        } else {
                            T::gemm(k, m, n, T::one(), ai, (1, k), gi, (n, 1), T::one(), dbi, (n, 1));
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    let period = db.len().max(1);
                    for chunk in g.chunks(period) {
                        add_into(db, chunk);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &bv) in da.iter_mut().zip(g).zip(self.data(b)) {
                        *d += gi * bv;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &gi), &av) in db.iter_mut().zip(g).zip(self.data(a)) {
                        *d += gi * av;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(da) = self.slot(grads, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gi), &h) in dg.iter_mut().zip(gr).zip(xh) {
                            *acc += gi * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                let gain_v = self.data(*gain);
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (((gr, xh), dxr), &r) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .zip(rstd)
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for ((dh, (&gi, &gn)), &h) in dxhat.iter_mut().zip(gr.iter().zip(gain_v)).zip(xh) {
                            *dh = gi * gn;
                            mean_d += *dh;
                            mean_dx += *dh * h;
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        for ((o, &dh), &h) in dxr.iter_mut().zip(&dxhat).zip(xh) {
                            *o += r * (dh - mean_d - h * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                let three = T::of(3.0);
                let xv = self.data(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for (((d, &gi), &v), &t) in dx.iter_mut().zip(g).zip(xv).zip(tanh) {
                        let du = c * (T::one() + three * k * v * v);
                        let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *d += gi * deriv;
                    }
                }
            }
            &Op::Softmax { x } => {
                let d = *out.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, x) {
                    for ((gr, y), o) in g.chunks(d).zip(out.data().chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in o.iter_mut().zip(gr).zip(y) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (&id, gr) in ids.iter().zip(g.chunks(h)) {
                        let id = id as usize;
                        add_into(&mut dt[id * h..(id + 1) * h], gr);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                if rows.is_empty() {
                    return Ok(());
                }
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::of(rows.len() as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (&(r, l), p) in rows.iter().zip(probs.chunks(v)) {
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (o, &pi) in row.iter_mut().zip(p) {
                            *o += scale * pi;
                        }
                        row[l] -= scale;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if targets.is_empty() {
                    return Ok(());
                }
                let scale = g[0] / T::of(targets.len() as f64);
                let xv = self.data(*logits);
                if let Some(dl) = self.slot(grads, *logits) {
                    for ((o, &x), &t) in dl.iter_mut().zip(xv).zip(targets) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *o += scale * (s - t);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let dp_len = self.shape(p)[*axis];
                    if let Some(dp) = self.slot(grads, p) {
                        let d = dp_len * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..d];
                            add_into(&mut dp[o * d..(o + 1) * d], src);
                        }
                    }
                    offset += dp_len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let sx = self.shape(x).to_vec();
                let (outer, d, inner) = split_at_axis(&sx, axis);
                let len = out.shape()[axis];
                if let Some(dx) = self.slot(grads, x) {
                    for o in 0..outer {
                        let base = o * d * inner + start * inner;
                        add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = *out.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for (&r, gr) in rows.iter().zip(g.chunks(c)) {
                        add_into(&mut dx[r * c..(r + 1) * c], gr);
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
            }
            &Op::SwapAxes12 { x } => {
                let so = out.shape().to_vec();
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, &swap12(g, &so));
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap12<T: Element>(data: &[T], s: &[usize]) -> Vec<T> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(data.len());
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let base = ((i * b + j) * c + k) * d;
                out.extend_from_slice(&data[base..base + d]);
            }
        }
    }
    out
}
