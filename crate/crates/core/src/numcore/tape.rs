//! Reverse-mode differentiation tape.
//!
//! Operations are appended in execution order, so the node list is already
//! topologically sorted; `backward` walks it once in reverse. A tape built
//! with [`Tape::inference`] records values only and keeps no backward state.

use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of a row participate in a softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    None,
    /// Rows are grouped into `[t, t]` matrices; entry `(i, j)` is kept iff `j <= i`.
    Causal,
    /// Per-entry flags, `true` = kept. Same length as the input.
    Keep(Vec<bool>),
}

impl Mask {
    #[inline]
    pub(crate) fn keeps(&self, row: usize, col: usize, n: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => col <= row % n,
            Mask::Keep(flags) => flags[row * n + col],
        }
    }
}

/// Elementwise map applied by [`Tape::pair_bias`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairOut {
    /// `b`
    Diff,
    /// `−b`
    NegDiff,
    /// `−ln(1 + b²)`
    NegLog1pSq,
}

impl PairOut {
    #[inline]
    fn apply<T: Scalar>(self, b: T) -> T {
        match self {
            Self::Diff => b,
            Self::NegDiff => -b,
            Self::NegLog1pSq => k::neg_log1p_sq(b),
        }
    }

    #[inline]
    fn slope<T: Scalar>(self, b: T) -> T {
        match self {
            Self::Diff => T::one(),
            Self::NegDiff => -T::one(),
            Self::NegLog1pSq => k::neg_log1p_sq_grad(b),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize, alpha: T },
    Add { a: Var, b: Var },
    AddTiled { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Gelu { a: Var },
    Softplus { a: Var },
    NegLog1pSq { a: Var },
    Softmax { out_of: Var },
    PrefixSum { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SplitHeads { a: Var, batch: usize, t: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, t: usize, heads: usize },
    HeadDot { x: Var, w: Var, heads: usize },
    PairBias { base: Option<Var>, s: Var, g: Option<Var>, out: PairOut },
    Rope { a: Var, theta_base: f64, offset: usize },
    KerpleBias { r1: Var, r2: Var, t: usize },
    T5Bias { table: Var, t: usize },
    FireInputs { l: Var, t: usize, c: f64 },
    FireMlp { u: Var, w1: Var, b1: Var, w2: Var, b2: Var },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations with their saved activations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    record: bool,
    live_bytes: usize,
    peak_bytes: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape: parameters registered with [`Tape::param`] receive gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), record: true, live_bytes: 0, peak_bytes: 0 }
    }

    /// A tape that evaluates values only.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by values and gradients, at the high-water mark.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn track(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.track(value.byte_size());
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.track(value.byte_size());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.track(value.byte_size());
        let requires_grad = self.record;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Backpropagates from a scalar output, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must be a single value"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                backprop(&self.nodes, &mut grads, node, &g);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        let grad_bytes: usize = self
            .grads
            .iter()
            .filter_map(|g| g.as_ref())
            .map(|g| g.len() * std::mem::size_of::<T>())
            .sum();
        self.track(grad_bytes);
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ -> [..., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let m = av.len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, T::one(), av.data(), k as isize, 1, bv.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { a, b, trans_b, m, k, n }, &[a, b], "matmul")
    }

    /// Batched `alpha · a[B, m, k] · b[B, k, n]` (or `b[B, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        if bk != k {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                alpha,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(value, Op::Bmm { a, b, trans_b, batch, m, k, n, alpha }, &[a, b], "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    /// Adds `b` to every consecutive block of `a` of `b`'s size; all but the leading
    /// extent of `b` must match `a`'s trailing extents.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, rb) = (av.rank(), bv.rank());
        let tail = rb.saturating_sub(1);
        if rb > ra || bv.is_empty() || av.len() % bv.len() != 0 || av.shape()[ra - tail..] != bv.shape()[rb - tail..] {
            return Err(Error::shape("add_tiled", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let blk = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(blk) {
            for (o, &y) in chunk.iter_mut().zip(bv.data()) {
                *o += y;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::AddTiled { a, b }, &[a, b], "add_tiled")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a, c }, &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(k::relu);
        self.push(value, Op::Relu { a }, &[a], "relu")
    }

    /// Tanh-approximated GELU (GPT-2 form).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(k::gelu);
        self.push(value, Op::Gelu { a }, &[a], "gelu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(k::softplus);
        self.push(value, Op::Softplus { a }, &[a], "softplus")
    }

    /// Elementwise `-ln(x² + 1)`.
    pub fn neg_log1p_sq(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(k::neg_log1p_sq);
        self.push(value, Op::NegLog1pSq { a }, &[a], "neg_log1p_sq")
    }

    /// Row-wise softmax over the last axis with max subtraction. Masked entries are exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Mask) -> Result<Var> {
        let av = self.value(a);
        let n = av.last_dim();
        if let Mask::Keep(flags) = &mask {
            if flags.len() != av.len() {
                return Err(Error::shape("softmax_rows", "mask length differs from input"));
            }
        }
        if mask == Mask::Causal && (av.rank() < 2 || av.shape()[av.rank() - 2] != n) {
            return Err(Error::shape("softmax_rows", format!("causal mask needs square rows, got {:?}", av.shape())));
        }
        let mut out = vec![T::zero(); av.len()];
        k::softmax_rows(av.data(), &mut out, n, &mask)?;
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { out_of: a }, &[a], "softmax_rows")
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn prefix_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(av.last_dim().max(1)) {
            k::prefix_sum_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::PrefixSum { a }, &[a], "prefix_sum")
    }

    /// Layer normalization over the last axis with eps = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::shape("layer_norm", format!("gain/bias must be [{n}]")));
        }
        let rows = xv.len() / n;
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let (mu, rs) = k::moments(row);
            mean[r] = mu;
            rstd[r] = rs;
            for (j, o) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                *o = (row[j] - mu) * rs * g[j] + bb[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias], "layer_norm")
    }

    /// Gathers rows of `table[V, d]`; output shape is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", "table must be 2-D"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding table", index: id, bound: vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table], "embedding")
    }

    /// Mean negative log-likelihood (nats) of `targets` under `logits[n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.len() / v;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index { what: "vocabulary", index: bad, bound: v });
        }
        let mut probs = vec![T::zero(); lv.len()];
        k::softmax_rows(lv.data(), &mut probs, v, &Mask::None)?;
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            total += k::nll_row(&lv.data()[r * v..(r + 1) * v], t);
        }
        let loss = total / T::lit(n as f64);
        let keep = if self.record { probs } else { Vec::new() };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs: keep },
            &[logits],
            "cross_entropy",
        )
    }

    /// `[B·T, H·dh] -> [B·H, T, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let av = self.value(a);
        let width = av.last_dim();
        if av.len() % (batch * width) != 0 || width % heads != 0 {
            return Err(Error::shape("split_heads", format!("{:?} into {batch}x{heads}", av.shape())));
        }
        let t = av.len() / (batch * width);
        let dh = width / heads;
        let mut out = vec![T::zero(); av.len()];
        k::split_heads(av.data(), &mut out, batch, t, heads, dh);
        let value = Tensor::new(vec![batch * heads, t, dh], out)?;
        self.push(value, Op::SplitHeads { a, batch, t, heads }, &[a], "split_heads")
    }

    /// `[B·H, T, dh] -> [B·T, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || av.shape()[0] % batch != 0 {
            return Err(Error::shape("merge_heads", format!("{:?} with batch {batch}", av.shape())));
        }
        let (heads, t, dh) = (av.shape()[0] / batch, av.shape()[1], av.shape()[2]);
        let mut out = vec![T::zero(); av.len()];
        k::merge_heads(av.data(), &mut out, batch, t, heads, dh);
        let value = Tensor::new(vec![batch * t, heads * dh], out)?;
        self.push(value, Op::MergeHeads { a, batch, t, heads }, &[a], "merge_heads")
    }

    /// Per-head projection to a scalar: `x[B·H, T, dh] · w[H, dh] -> [B·H, T]`.
    pub fn head_dot(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 2 || xv.shape()[2] != wv.shape()[1] || xv.shape()[0] % wv.shape()[0] != 0 {
            return Err(Error::shape("head_dot", format!("{:?} . {:?}", xv.shape(), wv.shape())));
        }
        let (rows, t, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let heads = wv.shape()[0];
        let mut out = vec![T::zero(); rows * t];
        for r in 0..rows {
            let w = wv.row(r % heads);
            for (ti, o) in out[r * t..(r + 1) * t].iter_mut().enumerate() {
                let xs = &xv.data()[(r * t + ti) * dh..(r * t + ti + 1) * dh];
                *o = k::dot(xs, w);
            }
        }
        let value = Tensor::new(vec![rows, t], out)?;
        self.push(value, Op::HeadDot { x, w, heads }, &[x, w], "head_dot")
    }

    /// `s[R, T]`, optional `g[R, T]` → `[R, T, T]` with entry `(i, j) = g_i · (s_i − s_j)`.
    pub fn pair_diff(&mut self, s: Var, g: Option<Var>) -> Result<Var> {
        self.pair_bias(None, s, g, PairOut::Diff)
    }

    /// `base + out(b)` where `b(i, j) = g_i · (s_i − s_j)`; `base` is `[R, T, T]`
    /// and defaults to zero. One pass in each direction.
    pub fn pair_bias(&mut self, base: Option<Var>, s: Var, g: Option<Var>, out: PairOut) -> Result<Var> {
        let sv = self.value(s);
        if sv.rank() != 2 {
            return Err(Error::shape("pair_bias", format!("expected [R, T], got {:?}", sv.shape())));
        }
        if let Some(g) = g {
            self.same_shape("pair_bias", s, g)?;
        }
        let (rows, t) = (sv.shape()[0], sv.shape()[1]);
        let mut data = match base {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [rows, t, t] {
                    return Err(Error::shape("pair_bias", format!("base {:?} vs [{rows}, {t}, {t}]", bv.shape())));
                }
                bv.data().to_vec()
            }
            None => vec![T::zero(); rows * t * t],
        };
        let sv = self.value(s);
        let gd = g.map(|g| self.value(g).data());
        for r in 0..rows {
            let srow = &sv.data()[r * t..(r + 1) * t];
            for i in 0..t {
                let w = gd.map_or(T::one(), |gd| gd[r * t + i]);
                let dst = &mut data[(r * t + i) * t..(r * t + i + 1) * t];
                for (o, &sj) in dst.iter_mut().zip(srow) {
                    *o += out.apply(w * (srow[i] - sj));
                }
            }
        }
        let value = Tensor::new(vec![rows, t, t], data)?;
        let inputs: Vec<Var> = base.into_iter().chain(std::iter::once(s)).chain(g).collect();
        self.push(value, Op::PairBias { base, s, g, out }, &inputs, "pair_bias")
    }

    /// Rotary encoding of `a[R, T, dh]`; row `t` sits at absolute position `offset + t`.
    pub fn rope(&mut self, a: Var, theta_base: f64, offset: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || av.shape()[2] % 2 != 0 {
            return Err(Error::Config(format!("rope needs [R, T, even dh], got {:?}", av.shape())));
        }
        let (t, dh) = (av.shape()[1], av.shape()[2]);
        let mut out = av.data().to_vec();
        k::rope_in_place(&mut out, t, dh, theta_base, offset, false);
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Rope { a, theta_base, offset }, &[a], "rope")
    }

    /// Kerple log-form bias `[H, t, t]` from unconstrained per-head pre-parameters.
    pub fn kerple_bias(&mut self, r1: Var, r2: Var, t: usize) -> Result<Var> {
        self.same_shape("kerple_bias", r1, r2)?;
        let (p1, p2) = (self.value(r1).data(), self.value(r2).data());
        let heads = p1.len();
        let mut out = vec![T::zero(); heads * t * t];
        for h in 0..heads {
            let (a, b) = (k::softplus(p1[h]), k::softplus(p2[h]));
            k::fill_square(&mut out[h * t * t..(h + 1) * t * t], t, |i, j| {
                let d = T::lit(i.abs_diff(j) as f64);
                -a * (T::one() + b * d).ln()
            });
        }
        let value = Tensor::new(vec![heads, t, t], out)?;
        self.push(value, Op::KerpleBias { r1, r2, t }, &[r1, r2], "kerple_bias")
    }

    /// T5-style clipped bucket bias `[H, t, t]` from `table[H, K + 1]`.
    pub fn t5_bias(&mut self, table: Var, t: usize) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || tv.shape()[1] == 0 {
            return Err(Error::shape("t5_bias", format!("table must be [H, K+1], got {:?}", tv.shape())));
        }
        let (heads, buckets) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![T::zero(); heads * t * t];
        for h in 0..heads {
            let row = tv.row(h);
            k::fill_square(&mut out[h * t * t..(h + 1) * t * t], t, |i, j| row[i.abs_diff(j).min(buckets - 1)]);
        }
        let value = Tensor::new(vec![heads, t, t], out)?;
        self.push(value, Op::T5Bias { table, t }, &[table], "t5_bias")
    }

    /// Fire's normalized distance `ψ(|i−j|) / ψ(max(L, i))` as `[H, t·t]`,
    /// with `ψ(x) = ln(1 + c·x)` and `L = softplus(l)` per head.
    pub fn fire_inputs(&mut self, l: Var, t: usize, c: f64) -> Result<Var> {
        let lv = self.value(l);
        if lv.rank() != 1 {
            return Err(Error::shape("fire_inputs", "threshold pre-parameters must be [H]"));
        }
        let heads = lv.len();
        let mut out = vec![T::zero(); heads * t * t];
        for h in 0..heads {
            let big_l = k::softplus(lv.data()[h]);
            k::fill_square(&mut out[h * t * t..(h + 1) * t * t], t, |i, j| {
                k::fire_arg(i.abs_diff(j), i, big_l, T::lit(c))
            });
        }
        let value = Tensor::new(vec![heads, t * t], out)?;
        self.push(value, Op::FireInputs { l, t, c }, &[l], "fire_inputs")
    }

    /// Per-head scalar MLP `1 → hidden → 1` with GELU, applied to every entry of `u[H, N]`.
    pub fn fire_mlp(&mut self, u: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let uv = self.value(u);
        if uv.rank() != 2 {
            return Err(Error::shape("fire_mlp", "inputs must be [H, N]"));
        }
        let (heads, n) = (uv.shape()[0], uv.shape()[1]);
        let hid = self.value(w1).last_dim();
        for (v, name) in [(w1, "w1"), (b1, "b1"), (w2, "w2")] {
            if self.shape(v) != [heads, hid] {
                return Err(Error::shape("fire_mlp", format!("{name} must be [{heads}, {hid}]")));
            }
        }
        if self.shape(b2) != [heads] {
            return Err(Error::shape("fire_mlp", format!("b2 must be [{heads}]")));
        }
        let mut out = vec![T::zero(); heads * n];
        for h in 0..heads {
            let (a1, c1, a2) = (self.value(w1).row(h), self.value(b1).row(h), self.value(w2).row(h));
            let c2 = self.value(b2).data()[h];
            for (o, &x) in out[h * n..(h + 1) * n].iter_mut().zip(&uv.data()[h * n..(h + 1) * n]) {
                *o = k::scalar_mlp(x, a1, c1, a2, c2);
            }
        }
        let value = Tensor::new(vec![heads, n], out)?;
        self.push(value, Op::FireMlp { u, w1, b1, w2, b2 }, &[u, w1, b1, w2, b2], "fire_mlp")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a }, &[a], "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / T::lit(av.len().max(1) as f64));
        self.push(value, Op::Mean { a }, &[a], "mean")
    }
}

/// Accumulates `g` into the gradient slot of `v` (allocating on first touch).
fn acc<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b, m, k, n } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = acc(nodes, grads, a) {
                // ga[m,k] += g[m,n] · op(b)ᵀ
                let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                T::gemm(m, n, k, T::one(), g, n as isize, 1, &bv, rsb, csb, T::one(), ga, k as isize, 1);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                if trans_b {
                    // gb[n,k] += gᵀ[n,m] · a[m,k]
                    T::gemm(n, m, k, T::one(), g, 1, n as isize, &av, k as isize, 1, T::one(), gb, k as isize, 1);
                } else {
                    // gb[k,n] += aᵀ[k,m] · g[m,n]
                    T::gemm(k, m, n, T::one(), &av, 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
        }
        &Op::Bmm { a, b, trans_b, batch, m, k, n, alpha } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = acc(nodes, grads, a) {
                let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                for bi in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        alpha,
                        &g[bi * m * n..(bi + 1) * m * n],
                        n as isize,
                        1,
                        &bv[bi * k * n..(bi + 1) * k * n],
                        rsb,
                        csb,
                        T::one(),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        k as isize,
                        1,
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &av[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if trans_b {
                        T::gemm(n, m, k, alpha, gs, 1, n as isize, asl, k as isize, 1, T::one(), dst, k as isize, 1);
                    } else {
                        T::gemm(k, m, n, alpha, asl, 1, k as isize, gs, n as isize, 1, T::one(), dst, n as isize, 1);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(gv) = acc(nodes, grads, v) {
                    k::axpy(gv, g, T::one());
                }
            }
        }
        &Op::AddTiled { a, b } => {
            if let Some(ga) = acc(nodes, grads, a) {
                k::axpy(ga, g, T::one());
            }
            if let Some(gb) = acc(nodes, grads, b) {
                let blk = gb.len();
                for chunk in g.chunks(blk) {
                    k::axpy(gb, chunk, T::one());
                }
            }
        }
        &Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = acc(nodes, grads, a) {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                    *x += gi * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av.iter()) {
                    *x += gi * y;
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(ga) = acc(nodes, grads, a) {
                k::axpy(ga, g, c);
            }
        }
        &Op::Relu { a } => unary_backward(nodes, grads, a, g, k::relu_grad),
        &Op::Gelu { a } => unary_backward(nodes, grads, a, g, k::gelu_grad),
        &Op::Softplus { a } => unary_backward(nodes, grads, a, g, k::sigmoid),
        &Op::NegLog1pSq { a } => unary_backward(nodes, grads, a, g, k::neg_log1p_sq_grad),
        Op::Softmax { out_of } => {
            let n = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *out_of) {
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dotp);
                    }
                }
            }
        }
        &Op::PrefixSum { a } => {
            let n = node.value.last_dim().max(1);
            if let Some(ga) = acc(nodes, grads, a) {
                for (gr, dst) in g.chunks(n).zip(ga.chunks_mut(n)) {
                    let mut run = T::zero();
                    for j in (0..n).rev() {
                        run += gr[j];
                        dst[j] += run;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let n = node.value.last_dim();
            let xv = nodes[x.0].value.data();
            let gv = nodes[gain.0].value.data();
            let rows = xv.len() / n;
            let xhat: Vec<T> = (0..rows * n).map(|idx| (xv[idx] - mean[idx / n]) * rstd[idx / n]).collect();
            if let Some(gb) = acc(nodes, grads, bias) {
                for gr in g.chunks(n) {
                    k::axpy(gb, gr, T::one());
                }
            }
            if let Some(gg) = acc(nodes, grads, gain) {
                for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((d, &gi), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                        *d += gi * xh;
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, x) {
                let inv_n = T::one() / T::lit(n as f64);
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        m1 += gh;
                        m2 += gh * xr[j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        gx[r * n + j] += rstd[r] * (gh - m1 - xr[j] * m2);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.last_dim();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    k::axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::one());
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = nodes[logits.0].value.last_dim();
            let scale = g[0] / T::lit(targets.len() as f64);
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (d, &p) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d += p * scale;
                    }
                    dst[t] -= scale;
                }
            }
        }
        &Op::SplitHeads { a, batch, t, heads } => {
            let dh = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, a) {
                let mut tmp = vec![T::zero(); g.len()];
                k::merge_heads(g, &mut tmp, batch, t, heads, dh);
                k::axpy(ga, &tmp, T::one());
            }
        }
        &Op::MergeHeads { a, batch, t, heads } => {
            let dh = node.value.last_dim() / heads;
            if let Some(ga) = acc(nodes, grads, a) {
                let mut tmp = vec![T::zero(); g.len()];
                k::split_heads(g, &mut tmp, batch, t, heads, dh);
                k::axpy(ga, &tmp, T::one());
            }
        }
        &Op::HeadDot { x, w, heads } => {
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (rows, t, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            if let Some(gx) = acc(nodes, grads, x) {
                for r in 0..rows {
                    let wr = wv.row(r % heads);
                    for ti in 0..t {
                        let gi = g[r * t + ti];
                        k::axpy(&mut gx[(r * t + ti) * dh..(r * t + ti + 1) * dh], wr, gi);
                    }
                }
            }
            if let Some(gw) = acc(nodes, grads, w) {
                for r in 0..rows {
                    let h = r % heads;
                    for ti in 0..t {
                        let gi = g[r * t + ti];
                        k::axpy(&mut gw[h * dh..(h + 1) * dh], &xv.data()[(r * t + ti) * dh..(r * t + ti + 1) * dh], gi);
                    }
                }
            }
        }
        &Op::PairBias { base, s, g: gw, out } => {
            let sv = &nodes[s.0].value;
            let wv = gw.map(|v| &nodes[v.0].value);
            let (rows, t) = (sv.shape()[0], sv.shape()[1]);
            let mut gs_local = vec![T::zero(); rows * t];
            let mut gw_local = vec![T::zero(); rows * t];
            for r in 0..rows {
                let srow = &sv.data()[r * t..(r + 1) * t];
                for i in 0..t {
                    let w = wv.as_ref().map_or(T::one(), |wv| wv.data()[r * t + i]);
                    let grow = &g[(r * t + i) * t..(r * t + i + 1) * t];
                    let mut row_sum = T::zero();
                    let mut weighted = T::zero();
                    for j in 0..t {
                        let diff = srow[i] - srow[j];
                        let db = grow[j] * out.slope(w * diff);
                        row_sum += db;
                        weighted += db * diff;
                        gs_local[r * t + j] -= w * db;
                    }
                    gs_local[r * t + i] += w * row_sum;
                    gw_local[r * t + i] = weighted;
                }
            }
            if let Some(gb) = base.and_then(|b| acc(nodes, grads, b)) {
                k::axpy(gb, g, T::one());
            }
            if let Some(gs) = acc(nodes, grads, s) {
                k::axpy(gs, &gs_local, T::one());
            }
            if let Some(gwv) = gw.and_then(|v| acc(nodes, grads, v)) {
                k::axpy(gwv, &gw_local, T::one());
            }
        }
        &Op::Rope { a, theta_base, offset } => {
            let (t, dh) = (node.value.shape()[1], node.value.shape()[2]);
            if let Some(ga) = acc(nodes, grads, a) {
                let mut tmp = g.to_vec();
                k::rope_in_place(&mut tmp, t, dh, theta_base, offset, true);
                k::axpy(ga, &tmp, T::one());
            }
        }
        &Op::KerpleBias { r1, r2, t } => {
            let p1 = nodes[r1.0].value.data();
            let p2 = nodes[r2.0].value.data();
            let heads = p1.len();
            let mut g1 = vec![T::zero(); heads];
            let mut g2 = vec![T::zero(); heads];
            for h in 0..heads {
                let (a, b) = (k::softplus(p1[h]), k::softplus(p2[h]));
                let gh = &g[h * t * t..(h + 1) * t * t];
                let (mut da, mut db) = (T::zero(), T::zero());
                for i in 0..t {
                    for j in 0..t {
                        let d = T::lit(i.abs_diff(j) as f64);
                        let gij = gh[i * t + j];
                        let inner = T::one() + b * d;
                        da -= gij * inner.ln();
                        db -= gij * a * d / inner;
                    }
                }
                g1[h] = da * k::sigmoid(p1[h]);
                g2[h] = db * k::sigmoid(p2[h]);
            }
            if let Some(d) = acc(nodes, grads, r1) {
                k::axpy(d, &g1, T::one());
            }
            if let Some(d) = acc(nodes, grads, r2) {
                k::axpy(d, &g2, T::one());
            }
        }
        &Op::T5Bias { table, t } => {
            let buckets = nodes[table.0].value.last_dim();
            if let Some(gt) = acc(nodes, grads, table) {
                let heads = gt.len() / buckets;
                for h in 0..heads {
                    for i in 0..t {
                        for j in 0..t {
                            gt[h * buckets + i.abs_diff(j).min(buckets - 1)] += g[(h * t + i) * t + j];
                        }
                    }
                }
            }
        }
        &Op::FireInputs { l, t, c } => {
            let lv = nodes[l.0].value.data();
            if let Some(gl) = acc(nodes, grads, l) {
                let c = T::lit(c);
                for (h, dst) in gl.iter_mut().enumerate() {
                    let big_l = k::softplus(lv[h]);
                    let psi_l = (T::one() + c * big_l).ln();
                    let dpsi_l = c / (T::one() + c * big_l);
                    let mut acc_l = T::zero();
                    for i in 0..t {
                        // the denominator depends on L only where L > i
                        if big_l <= T::lit(i as f64) {
                            continue;
                        }
                        for j in 0..t {
                            let num = (T::one() + c * T::lit(i.abs_diff(j) as f64)).ln();
                            acc_l -= g[h * t * t + i * t + j] * num * dpsi_l / (psi_l * psi_l);
                        }
                    }
                    *dst += acc_l * k::sigmoid(lv[h]);
                }
            }
        }
        &Op::FireMlp { u, w1, b1, w2, b2 } => {
            let uv = &nodes[u.0].value;
            let (a1, c1, a2) = (&nodes[w1.0].value, &nodes[b1.0].value, &nodes[w2.0].value);
            let (heads, n) = (uv.shape()[0], uv.shape()[1]);
            let hid = a1.last_dim();
            let mut gu = vec![T::zero(); heads * n];
            let mut gw1 = vec![T::zero(); heads * hid];
            let mut gb1 = vec![T::zero(); heads * hid];
            let mut gw2 = vec![T::zero(); heads * hid];
            let mut gb2 = vec![T::zero(); heads];
            for h in 0..heads {
                let (r1, rb1, r2) = (a1.row(h), c1.row(h), a2.row(h));
                for idx in 0..n {
                    let gi = g[h * n + idx];
                    if gi == T::zero() {
                        continue;
                    }
                    let x = uv.data()[h * n + idx];
                    gb2[h] += gi;
                    let mut gx = T::zero();
                    for q in 0..hid {
                        let z = r1[q] * x + rb1[q];
                        gw2[h * hid + q] += gi * k::gelu(z);
                        let dz = gi * r2[q] * k::gelu_grad(z);
                        gb1[h * hid + q] += dz;
                        gw1[h * hid + q] += dz * x;
                        gx += dz * r1[q];
                    }
                    gu[h * n + idx] = gx;
                }
            }
            for (v, buf) in [(u, &gu), (w1, &gw1), (b1, &gb1), (w2, &gw2), (b2, &gb2)] {
                if let Some(d) = acc(nodes, grads, v) {
                    k::axpy(d, buf, T::one());
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = acc(nodes, grads, a) {
                k::axpy(ga, g, T::one());
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = acc(nodes, grads, a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        &Op::Mean { a } => {
            if let Some(ga) = acc(nodes, grads, a) {
                let s = g[0] / T::lit(ga.len().max(1) as f64);
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
        }
    }
}

fn unary_backward<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], a: Var, g: &[T], deriv: fn(T) -> T) {
    let xs = nodes[a.0].value.data();
    if let Some(ga) = acc(nodes, grads, a) {
        for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(xs.iter()) {
            *d += gi * deriv(x);
        }
    }
}
