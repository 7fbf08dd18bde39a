//! Causal multi-head attention with a pluggable positional encoding, plus the
//! streaming decode path that caches keys, values and CABLE's running sums.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numcore::{kernels, Bound, Mask, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::posenc::{self, AlibiParams, CableVariant, FireParams, PosEncKind, RopeParams};

/// Shape and encoding settings for one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    pub d_model: usize,
    pub heads: usize,
    pub kind: PosEncKind,
    pub cable_variant: CableVariant,
    /// Training length; Fire's threshold starts here.
    pub train_len: usize,
    pub t5_max_bucket: usize,
    pub fire_hidden: usize,
    pub fire_c: f64,
    pub rope_base: f64,
    pub init_std: f64,
    /// Standard deviation for the output projection.
    pub out_std: f64,
    pub causal: bool,
}

impl AttnConfig {
    pub fn new(d_model: usize, heads: usize, kind: PosEncKind) -> Self {
        Self {
            d_model,
            heads,
            kind,
            cable_variant: CableVariant::Full,
            train_len: 128,
            t5_max_bucket: 32,
            fire_hidden: 32,
            fire_c: 1.0,
            rope_base: 10_000.0,
            init_std: 0.02,
            out_std: 0.02,
            causal: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.kind == PosEncKind::Rope && self.d_head() % 2 != 0 {
            return Err(Error::Config(format!("RoPE needs an even head dimension, got {}", self.d_head())));
        }
        if self.kind == PosEncKind::Fire && (self.fire_hidden < 2 || !(self.fire_c > 0.0)) {
            return Err(Error::Config("Fire needs hidden >= 2 and c > 0".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the layer's positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPosEnc {
    /// NoPE, or an absolute encoding applied at the embedding layer.
    None,
    Cable { w_c: ParamId, w_s: Option<ParamId>, variant: CableVariant },
    Alibi(AlibiParams),
    Kerple { r1: ParamId, r2: ParamId },
    T5 { table: ParamId },
    Fire { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId, l: ParamId, c: f64 },
    Rope(RopeParams),
}

/// One attention layer. Weights are `[d_in, d_out]` and live in the layer's own store.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T> {
    pub params: ParamStore<T>,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_model: usize,
    pub kind: PosEncKind,
    pub posenc: LayerPosEnc,
    pub causal: bool,
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &AttnConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, dh) = (cfg.d_model, cfg.heads, cfg.d_head());
        let mut params = ParamStore::new();
        let name = |n: &str| format!("{prefix}{n}");
        let w_q = params.add(name("w_q"), Tensor::randn(vec![d, d], cfg.init_std, rng), true);
        let w_k = params.add(name("w_k"), Tensor::randn(vec![d, d], cfg.init_std, rng), true);
        let w_v = params.add(name("w_v"), Tensor::randn(vec![d, d], cfg.init_std, rng), true);
        let w_o = params.add(name("w_o"), Tensor::randn(vec![d, d], cfg.out_std, rng), true);
        let posenc = match cfg.kind {
            PosEncKind::Nope | PosEncKind::Sinusoidal | PosEncKind::Learnable => LayerPosEnc::None,
            PosEncKind::Cable => {
                let w_c = params.add(name("cable.w_c"), Tensor::randn(vec![h, dh], cfg.init_std, rng), true);
                let w_s = cfg
                    .cable_variant
                    .has_weights()
                    .then(|| params.add(name("cable.w_s"), Tensor::randn(vec![h, dh], cfg.init_std, rng), true));
                LayerPosEnc::Cable { w_c, w_s, variant: cfg.cable_variant }
            }
            PosEncKind::Alibi => LayerPosEnc::Alibi(AlibiParams::standard(h)),
            PosEncKind::Kerple => {
                let init = posenc::KerpleParams::<T>::init(h);
                let r1 = params.add(name("kerple.r1"), Tensor::new(vec![h], init.r1_pre)?, false);
                let r2 = params.add(name("kerple.r2"), Tensor::new(vec![h], init.r2_pre)?, false);
                LayerPosEnc::Kerple { r1, r2 }
            }
            PosEncKind::T5 => {
                let table = params.add(name("t5.table"), Tensor::zeros(vec![h, cfg.t5_max_bucket + 1]), false);
                LayerPosEnc::T5 { table }
            }
            PosEncKind::Fire => {
                let q = cfg.fire_hidden;
                let bound2 = 1.0 / (q as f64).sqrt();
                let mut unif = |shape: Vec<usize>, b: f64| {
                    let dist = Uniform::new_inclusive(-b, b).expect("valid range");
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape")
                };
                let w1 = unif(vec![h, q], 1.0);
                let b1 = unif(vec![h, q], 1.0);
                let w2 = unif(vec![h, q], bound2);
                let b2 = unif(vec![h], bound2);
                let l_pre = Tensor::full(vec![h], T::lit(kernels::softplus_inv(cfg.train_len as f64)));
                LayerPosEnc::Fire {
                    w1: params.add(name("fire.w1"), w1, false),
                    b1: params.add(name("fire.b1"), b1, false),
                    w2: params.add(name("fire.w2"), w2, false),
                    b2: params.add(name("fire.b2"), b2, false),
                    l: params.add(name("fire.l"), l_pre, false),
                    c: cfg.fire_c,
                }
            }
            PosEncKind::Rope => LayerPosEnc::Rope(RopeParams { theta_base: cfg.rope_base, d_head: dh }),
        };
        Ok(Self { params, w_q, w_k, w_v, w_o, heads: h, d_model: d, kind: cfg.kind, posenc, causal: cfg.causal })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    fn scale(&self) -> T {
        T::one() / T::lit(self.d_head() as f64).sqrt()
    }

    /// Projects and splits `x[B·t, d]` into per-head `[B·H, t, dh]` queries, keys, values.
    fn qkv(&self, tape: &mut Tape<T>, vars: &Bound, x: Var, batch: usize) -> Result<(Var, Var, Var)> {
        let q = tape.matmul(x, vars.get(self.w_q))?;
        let k = tape.matmul(x, vars.get(self.w_k))?;
        let v = tape.matmul(x, vars.get(self.w_v))?;
        let q = tape.split_heads(q, batch, self.heads)?;
        let k = tape.split_heads(k, batch, self.heads)?;
        let v = tape.split_heads(v, batch, self.heads)?;
        Ok((q, k, v))
    }

    /// The additive logit delta: `[B·H, t, t]` for CABLE, `[H, t, t]` for the
    /// content-independent kinds, `None` otherwise.
    pub fn logit_delta(&self, tape: &mut Tape<T>, vars: &Bound, k: Var, t: usize) -> Result<Option<Var>> {
        Ok(match &self.posenc {
            LayerPosEnc::None | LayerPosEnc::Rope(_) => None,
            LayerPosEnc::Cable { w_c, w_s, variant } => {
                let terms = posenc::cable_terms(tape, k, vars.get(*w_c), w_s.map(|w| vars.get(w)), *variant)?;
                Some(terms.delta)
            }
            LayerPosEnc::Alibi(p) => Some(tape.constant(posenc::alibi_stack(t, p)?)),
            LayerPosEnc::Kerple { r1, r2 } => Some(tape.kerple_bias(vars.get(*r1), vars.get(*r2), t)?),
            LayerPosEnc::T5 { table } => Some(tape.t5_bias(vars.get(*table), t)?),
            LayerPosEnc::Fire { w1, b1, w2, b2, l, c } => {
                let u = tape.fire_inputs(vars.get(*l), t, *c)?;
                let m = tape.fire_mlp(u, vars.get(*w1), vars.get(*b1), vars.get(*w2), vars.get(*b2))?;
                Some(tape.reshape(m, vec![self.heads, t, t])?)
            }
        })
    }

    /// Attention over `x[B·t, d]`, returning `[B·t, d]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &Bound, x: Var, batch: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if batch == 0 || rows % batch != 0 || rows == 0 {
            return Err(Error::shape("attend", format!("{rows} rows do not split into {batch} sequences")));
        }
        let t = rows / batch;
        let (mut q, mut k, v) = self.qkv(tape, vars, x, batch)?;
        let logits = match &self.posenc {
            // fused: the [B·H, t, t] delta is never materialized on its own
            LayerPosEnc::Cable { w_c, w_s, variant } => {
                let (_, s, g) = posenc::cable_sums(tape, k, vars.get(*w_c), w_s.map(|w| vars.get(w)), *variant)?;
                let logits = tape.bmm(q, k, true, self.scale())?;
                tape.pair_bias(Some(logits), s, g, variant.pair_out())?
            }
            _ => {
                let delta = self.logit_delta(tape, vars, k, t)?;
                if let LayerPosEnc::Rope(p) = &self.posenc {
                    q = tape.rope(q, p.theta_base, 0)?;
                    k = tape.rope(k, p.theta_base, 0)?;
                }
                let logits = tape.bmm(q, k, true, self.scale())?;
                match delta {
                    Some(delta) => tape.add_tiled(logits, delta)?,
                    None => logits,
                }
            }
        };
        let mask = if self.causal { Mask::Causal } else { Mask::None };
        let probs = tape.softmax_rows(logits, mask)?;
        let ctx = tape.bmm(probs, v, false, T::one())?;
        let merged = tape.merge_heads(ctx, batch)?;
        tape.matmul(merged, vars.get(self.w_o))
    }

    /// Per-head matrices for visualization of one sequence `x[t, d]`: the
    /// additive logit delta, or for RoPE the post-rotation scaled logits.
    pub fn head_matrices(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let t = x.shape()[0];
        let mut tape = Tape::inference();
        let vars = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (q, k, _) = self.qkv(&mut tape, &vars, xv, 1)?;
        let out = match &self.posenc {
            LayerPosEnc::Rope(p) => {
                let q = tape.rope(q, p.theta_base, 0)?;
                let k = tape.rope(k, p.theta_base, 0)?;
                Some(tape.bmm(q, k, true, self.scale())?)
            }
            _ => self.logit_delta(&mut tape, &vars, k, t)?,
        };
        let data = match out {
            Some(v) => tape.value(v).data().to_vec(),
            None => vec![T::zero(); self.heads * t * t],
        };
        Ok(data.chunks(t * t).map(|c| Tensor::new(vec![t, t], c.to_vec()).expect("square")).collect())
    }

    fn fire_params(&self) -> Option<FireParams<T>> {
        match &self.posenc {
            LayerPosEnc::Fire { w1, b1, w2, b2, l, c } => Some(FireParams {
                w1: self.params.get(*w1).clone(),
                b1: self.params.get(*b1).clone(),
                w2: self.params.get(*w2).clone(),
                b2: self.params.get(*b2).clone(),
                l_pre: self.params.get(*l).clone(),
                c: *c,
            }),
            _ => None,
        }
    }

    /// A fresh decoding cache for this layer.
    pub fn stream_state(&self, capacity: usize) -> StreamState<T> {
        StreamState::new(self.heads, self.d_head(), capacity)
    }
}

/// Per-layer decoding cache.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<T> {
    /// Keys per head, `[pos, d_head]` row-major (post-rotation for RoPE).
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    /// CABLE running sums per head.
    pub s: Vec<Vec<T>>,
    /// CABLE per-token weights per head.
    pub g: Vec<Vec<T>>,
    pub pos: usize,
    pub capacity: usize,
    d_head: usize,
}

impl<T: Scalar> StreamState<T> {
    pub fn new(heads: usize, d_head: usize, capacity: usize) -> Self {
        Self {
            keys: vec![Vec::new(); heads],
            values: vec![Vec::new(); heads],
            s: vec![Vec::new(); heads],
            g: vec![Vec::new(); heads],
            pos: 0,
            capacity,
            d_head,
        }
    }

    pub fn byte_size(&self) -> usize {
        let n: usize = [&self.keys, &self.values, &self.s, &self.g].iter().flat_map(|v| v.iter()).map(Vec::len).sum();
        n * std::mem::size_of::<T>()
    }
}

/// `x[d] · w[d, n]`.
pub(crate) fn vecmat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); n];
    T::gemm(1, k, n, T::one(), x, k as isize, 1, w.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
    out
}

/// Full causal attention for one sequence `x[t, d]`.
pub fn attend_full<T: Scalar>(x: &Tensor<T>, layer: &AttentionLayer<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] == 0 || x.shape()[1] != layer.d_model {
        return Err(Error::shape("attend_full", format!("expected [t >= 1, {}], got {:?}", layer.d_model, x.shape())));
    }
    let mut tape = Tape::inference();
    let vars = layer.params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, &vars, xv, 1)?;
    Ok(tape.value(out).clone())
}

/// One decoding step: appends the token to the cache and returns its output row.
pub fn attend_step<T: Scalar>(state: &mut StreamState<T>, x_new: &[T], layer: &AttentionLayer<T>) -> Result<Vec<T>> {
    if state.pos >= state.capacity {
        return Err(Error::Capacity { capacity: state.capacity });
    }
    if x_new.len() != layer.d_model || state.keys.len() != layer.heads || state.d_head != layer.d_head() {
        return Err(Error::shape("attend_step", "token width or cache layout does not match the layer"));
    }
    let (dh, pos, scale) = (layer.d_head(), state.pos, layer.scale());
    let p = &layer.params;
    let mut q = vecmat(x_new, p.get(layer.w_q));
    let mut k = vecmat(x_new, p.get(layer.w_k));
    let v = vecmat(x_new, p.get(layer.w_v));
    let fire = layer.fire_params();
    let mut ctx = vec![T::zero(); layer.d_model];
    for h in 0..layer.heads {
        let (qh, kh) = (&mut q[h * dh..(h + 1) * dh], &mut k[h * dh..(h + 1) * dh]);
        let row: Option<Vec<T>> = match &layer.posenc {
            LayerPosEnc::None => None,
            LayerPosEnc::Rope(rp) => {
                posenc::rope_vector(qh, pos, rp.theta_base);
                posenc::rope_vector(kh, pos, rp.theta_base);
                None
            }
            LayerPosEnc::Cable { w_c, w_s, variant } => {
                let w_s_row = w_s.map(|w| p.get(w).row(h));
                let (f, g) = posenc::cable_token_terms(kh, p.get(*w_c).row(h), w_s_row);
                let prev = state.s[h].last().copied().unwrap_or_else(T::zero);
                state.s[h].push(prev + f);
                state.g[h].push(g);
                Some(posenc::cable_row(&state.s[h], g, *variant))
            }
            LayerPosEnc::Alibi(ap) => Some(posenc::alibi_row(pos, ap.slopes[h])),
            LayerPosEnc::Kerple { r1, r2 } => {
                let (a, b) = (kernels::softplus(p.get(*r1).data()[h]), kernels::softplus(p.get(*r2).data()[h]));
                Some(posenc::kerple_row(pos, a, b))
            }
            LayerPosEnc::T5 { table } => Some(posenc::t5_row(pos, p.get(*table).row(h))),
            LayerPosEnc::Fire { .. } => Some(posenc::fire_row(pos, fire.as_ref().expect("fire params"), h)),
        };
        state.keys[h].extend_from_slice(kh);
        state.values[h].extend_from_slice(&v[h * dh..(h + 1) * dh]);

        let mut logits: Vec<T> = state.keys[h].chunks(dh).map(|kj| kernels::dot(qh, kj) * scale).collect();
        if let Some(row) = row {
            for (l, b) in logits.iter_mut().zip(row) {
                *l += b;
            }
        }
        let mut probs = vec![T::zero(); logits.len()];
        kernels::softmax_rows(&logits, &mut probs, logits.len(), &Mask::None)?;
        let out = &mut ctx[h * dh..(h + 1) * dh];
        for (pj, vj) in probs.iter().zip(state.values[h].chunks(dh)) {
            kernels::axpy(out, vj, *pj);
        }
    }
    state.pos += 1;
    Ok(vecmat(&ctx, p.get(layer.w_o)))
}
