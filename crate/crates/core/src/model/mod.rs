//! GPT-2-shaped decoder: pre-norm blocks, bias-free projections, GELU MLP.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, OptimizerBlob, ParamMeta, RngState, CHECKPOINT_MAGIC};

use crate::attn::{self, AttentionLayer, AttnConfig, StreamState};
use crate::error::{Error, Result};
use crate::numcore::{kernels, Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::posenc::{sinusoid_row, sinusoid_table, CableVariant, PosEncKind, Selector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_train_len: usize,
    pub posenc_kind: PosEncKind,
    pub cable_variant: CableVariant,
    pub dropout: f64,
    pub tie_embeddings: bool,
    /// Longest sequence `forward` accepts; evaluation may exceed `max_train_len`.
    pub max_context: usize,
    pub t5_max_bucket: usize,
    pub fire_hidden: usize,
    pub fire_c: f64,
    pub rope_base: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size: 256,
            max_train_len: 128,
            posenc_kind: PosEncKind::Cable,
            cable_variant: CableVariant::Full,
            dropout: 0.0,
            tie_embeddings: false,
            max_context: 4096,
            t5_max_bucket: 32,
            fire_hidden: 32,
            fire_c: 1.0,
            rope_base: 10_000.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn with_selector(mut self, sel: Selector) -> Self {
        self.posenc_kind = sel.kind;
        self.cable_variant = sel.variant;
        self
    }

    pub fn selector(&self) -> Selector {
        Selector { kind: self.posenc_kind, variant: self.cable_variant }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be at least 2, got {}", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.max_train_len == 0 || self.max_context < self.max_train_len {
            return Err(Error::Config("max_context must be at least max_train_len > 0".into()));
        }
        self.attn_config().validate()
    }

    pub fn attn_config(&self) -> AttnConfig {
        let mut a = AttnConfig::new(self.d_model, self.n_heads, self.posenc_kind);
        a.cable_variant = self.cable_variant;
        a.train_len = self.max_train_len;
        a.t5_max_bucket = self.t5_max_bucket;
        a.fire_hidden = self.fire_hidden;
        a.fire_c = self.fire_c;
        a.rope_base = self.rope_base;
        a.init_std = self.init_std;
        a.out_std = self.init_std / (2.0 * self.n_layers as f64).sqrt();
        a
    }

    /// Closed-form parameter count.
    ///
    /// `V·d` token table, `d·V` output head unless tied, `T·d` for learnable
    /// positions, `12·d²` per layer (four attention projections plus the 4×
    /// MLP), `4·d` per layer and `2·d` at the end for layer-norm gains and
    /// biases, plus the encoding's own parameters.
    pub fn param_count(&self) -> usize {
        let (d, v, l, h) = (self.d_model, self.vocab_size, self.n_layers, self.n_heads);
        let mut n = v * d + 2 * d + l * (12 * d * d + 4 * d);
        if !self.tie_embeddings {
            n += d * v;
        }
        if self.posenc_kind == PosEncKind::Learnable {
            n += self.max_train_len * d;
        }
        n + l * self.posenc_params_per_layer(h)
    }

    fn posenc_params_per_layer(&self, h: usize) -> usize {
        match self.posenc_kind {
            PosEncKind::Cable if self.cable_variant.has_weights() => 2 * self.d_model,
            PosEncKind::Cable => self.d_model,
            PosEncKind::Kerple => 2 * h,
            PosEncKind::T5 => h * (self.t5_max_bucket + 1),
            PosEncKind::Fire => h * (3 * self.fire_hidden + 2),
            _ => 0,
        }
    }
}

/// Everything outside the attention layer in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub params: ParamStore<T>,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_in: ParamId,
    pub mlp_out: ParamId,
    pub attn: AttentionLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Token table and, for the learnable kind, the position table.
    pub embed: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub blocks: Vec<Block<T>>,
    /// Final layer norm and the untied output head.
    pub head: ParamStore<T>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub w_out: Option<ParamId>,
}

/// Tape handles for every store of a model, in canonical order.
pub struct ModelVars {
    embed: Bound,
    blocks: Vec<(Bound, Bound)>,
    head: Bound,
}

impl ModelVars {
    /// All handles flattened in canonical order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.embed.vars().to_vec();
        for (b, a) in &self.blocks {
            out.extend_from_slice(b.vars());
            out.extend_from_slice(a.vars());
        }
        out.extend_from_slice(self.head.vars());
        out
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, std) = (config.d_model, config.vocab_size, config.init_std);
        let mut embed = ParamStore::new();
        let tok_emb = embed.add("tok_emb", Tensor::randn(vec![v, d], std, &mut rng), true);
        let pos_emb = (config.posenc_kind == PosEncKind::Learnable)
            .then(|| embed.add("pos_emb", Tensor::randn(vec![config.max_train_len, d], std, &mut rng), true));
        let acfg = config.attn_config();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut p = ParamStore::new();
            let ln1_g = p.add(format!("layers.{l}.ln1.g"), Tensor::full(vec![d], T::one()), false);
            let ln1_b = p.add(format!("layers.{l}.ln1.b"), Tensor::zeros(vec![d]), false);
            let ln2_g = p.add(format!("layers.{l}.ln2.g"), Tensor::full(vec![d], T::one()), false);
            let ln2_b = p.add(format!("layers.{l}.ln2.b"), Tensor::zeros(vec![d]), false);
            let mlp_in = p.add(format!("layers.{l}.mlp.w_in"), Tensor::randn(vec![d, 4 * d], std, &mut rng), true);
            let mlp_out =
                p.add(format!("layers.{l}.mlp.w_out"), Tensor::randn(vec![4 * d, d], acfg.out_std, &mut rng), true);
            let attn = AttentionLayer::new(&acfg, &format!("layers.{l}.attn."), &mut rng)?;
            blocks.push(Block { params: p, ln1_g, ln1_b, ln2_g, ln2_b, mlp_in, mlp_out, attn });
        }
        let mut head = ParamStore::new();
        let lnf_g = head.add("ln_f.g", Tensor::full(vec![d], T::one()), false);
        let lnf_b = head.add("ln_f.b", Tensor::zeros(vec![d]), false);
        let w_out = (!config.tie_embeddings).then(|| head.add("w_out", Tensor::randn(vec![d, v], std, &mut rng), true));
        Ok(Self { config, embed, tok_emb, pos_emb, blocks, head, lnf_g, lnf_b, w_out })
    }

    /// Parameter stores in canonical order.
    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.push(&b.params);
            out.push(&b.attn.params);
        }
        out.push(&self.head);
        out
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.params);
            out.push(&mut b.attn.params);
        }
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.stores().iter().map(|s| s.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.stores().iter().flat_map(|s| s.flatten()).collect()
    }

    /// Overwrites every parameter from a flat canonical-order slice.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("load_flat", format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut off = 0;
        for store in self.stores_mut() {
            for p in store.iter_mut() {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embed: self.embed.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    params: b.params.cast(),
                    ln1_g: b.ln1_g,
                    ln1_b: b.ln1_b,
                    ln2_g: b.ln2_g,
                    ln2_b: b.ln2_b,
                    mlp_in: b.mlp_in,
                    mlp_out: b.mlp_out,
                    attn: AttentionLayer {
                        params: b.attn.params.cast(),
                        w_q: b.attn.w_q,
                        w_k: b.attn.w_k,
                        w_v: b.attn.w_v,
                        w_o: b.attn.w_o,
                        heads: b.attn.heads,
                        d_model: b.attn.d_model,
                        kind: b.attn.kind,
                        posenc: b.attn.posenc.clone(),
                        causal: b.attn.causal,
                    },
                })
                .collect(),
            head: self.head.cast(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            w_out: self.w_out,
        }
    }

    /// Registers all parameters on the tape; `trainable` decides whether they get gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let b = |s: &ParamStore<T>, tape: &mut Tape<T>| if trainable { s.bind(tape) } else { s.bind_frozen(tape) };
        ModelVars {
            embed: b(&self.embed, tape),
            blocks: self.blocks.iter().map(|blk| (b(&blk.params, tape), b(&blk.attn.params, tape))).collect(),
            head: b(&self.head, tape),
        }
    }

    /// Regroups handles created in canonical order (e.g. by a gradient check).
    pub fn vars_from(&self, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let mut take = |s: &ParamStore<T>| Bound::from_vars(it.by_ref().take(s.len()).collect());
        let embed = take(&self.embed);
        let blocks = self.blocks.iter().map(|b| (take(&b.params), take(&b.attn.params))).collect();
        let head = take(&self.head);
        ModelVars { embed, blocks, head }
    }

    fn check_ids(&self, ids: &[usize], t: usize) -> Result<()> {
        if t > self.config.max_context {
            return Err(Error::Argument(format!("sequence length {t} exceeds the context cap {}", self.config.max_context)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Index { what: "token id", index: bad, bound: self.config.vocab_size });
        }
        Ok(())
    }

    /// Logits `[B·t, V]` for `ids` holding `batch` sequences of equal length.
    ///
    /// `dropout_rng` enables dropout when the configured rate is positive.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        ids: &[usize],
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let x = self.trunk(tape, vars, ids, batch, dropout_rng, None)?;
        let x = tape.layer_norm(x, vars.head.get(self.lnf_g), vars.head.get(self.lnf_b))?;
        match self.w_out {
            Some(w) => tape.matmul(x, vars.head.get(w)),
            None => tape.matmul_nt(x, vars.embed.get(self.tok_emb)),
        }
    }

    /// The normalized input seen by `layer`'s attention for one sequence, `[t, d]`.
    pub fn attention_input(&self, ids: &[usize], layer: usize) -> Result<Tensor<T>> {
        if layer >= self.blocks.len() {
            return Err(Error::Index { what: "layer", index: layer, bound: self.blocks.len() });
        }
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let h = self.trunk(&mut tape, &vars, ids, 1, None, Some(layer))?;
        Ok(tape.value(h).clone())
    }

    /// Embedding plus blocks; with `stop_at`, returns that block's first layer-norm output.
    fn trunk(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        ids: &[usize],
        batch: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        stop_at: Option<usize>,
    ) -> Result<Var> {
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::Argument(format!("{} ids do not form {batch} non-empty sequences", ids.len())));
        }
        let t = ids.len() / batch;
        self.check_ids(ids, t)?;
        let d = self.config.d_model;
        let mut x = tape.embedding(vars.embed.get(self.tok_emb), ids)?;
        match self.config.posenc_kind {
            PosEncKind::Sinusoidal => {
                let table = tape.constant(sinusoid_table(t, d));
                x = tape.add_tiled(x, table)?;
            }
            PosEncKind::Learnable => {
                let pos: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
                let p = tape.embedding(vars.embed.get(self.pos_emb.expect("learnable table")), &pos)?;
                x = tape.add(x, p)?;
            }
            _ => {}
        }
        x = self.dropout(tape, x, dropout_rng.as_deref_mut())?;
        for (l, (blk, (bv, av))) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let h = tape.layer_norm(x, bv.get(blk.ln1_g), bv.get(blk.ln1_b))?;
            if stop_at == Some(l) {
                return Ok(h);
            }
            let a = blk.attn.forward(tape, av, h, batch)?;
            let a = self.dropout(tape, a, dropout_rng.as_deref_mut())?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bv.get(blk.ln2_g), bv.get(blk.ln2_b))?;
            let m = tape.matmul(h, bv.get(blk.mlp_in))?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, bv.get(blk.mlp_out))?;
            let m = self.dropout(tape, m, dropout_rng.as_deref_mut())?;
            x = tape.add(x, m)?;
        }
        Ok(x)
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.filter(|_| p > 0.0) else { return Ok(x) };
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Mean next-token cross-entropy of `inputs → targets` on the tape.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.forward_tape(tape, vars, inputs, batch, dropout_rng)?;
        tape.cross_entropy(logits, targets)
    }

    /// Next-token logits `[t, V]` for one sequence.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &vars, ids, 1, None)?;
        Ok(tape.value(out).clone())
    }

    /// Mean next-token NLL (nats) of a sequence: positions `0..t−1` predict `1..t`.
    pub fn loss(&self, ids: &[usize]) -> Result<f64> {
        if ids.len() < 2 {
            return Err(Error::Argument("loss needs at least two tokens".into()));
        }
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let l = self.loss_tape(&mut tape, &vars, &ids[..ids.len() - 1], &ids[1..], 1, None)?;
        Ok(tape.value(l).data()[0].as_f64())
    }

    /// Fresh per-layer decoding caches.
    pub fn stream_states(&self, capacity: usize) -> Vec<StreamState<T>> {
        self.blocks.iter().map(|b| b.attn.stream_state(capacity)).collect()
    }

    /// Feeds one token through the streaming path and returns its next-token logits.
    pub fn step(&self, states: &mut [StreamState<T>], token: usize) -> Result<Vec<T>> {
        if token >= self.config.vocab_size {
            return Err(Error::Index { what: "token id", index: token, bound: self.config.vocab_size });
        }
        let pos = states.first().map_or(0, |s| s.pos);
        let d = self.config.d_model;
        let mut x = self.embed.get(self.tok_emb).row(token).to_vec();
        match self.config.posenc_kind {
            PosEncKind::Sinusoidal => kernels::axpy(&mut x, &sinusoid_row::<T>(pos, d), T::one()),
            PosEncKind::Learnable => {
                let table = self.embed.get(self.pos_emb.expect("learnable table"));
                if pos >= table.shape()[0] {
                    return Err(Error::Index { what: "learnable position table", index: pos, bound: table.shape()[0] });
                }
                kernels::axpy(&mut x, table.row(pos), T::one());
            }
            _ => {}
        }
        for (blk, state) in self.blocks.iter().zip(states.iter_mut()) {
            let p = &blk.params;
            let h = layer_norm_vec(&x, p.get(blk.ln1_g).data(), p.get(blk.ln1_b).data());
            let a = attn::attend_step(state, &h, &blk.attn)?;
            kernels::axpy(&mut x, &a, T::one());
            let h = layer_norm_vec(&x, p.get(blk.ln2_g).data(), p.get(blk.ln2_b).data());
            let m: Vec<T> = attn::vecmat(&h, p.get(blk.mlp_in)).into_iter().map(kernels::gelu).collect();
            kernels::axpy(&mut x, &attn::vecmat(&m, p.get(blk.mlp_out)), T::one());
        }
        let x = layer_norm_vec(&x, self.head.get(self.lnf_g).data(), self.head.get(self.lnf_b).data());
        Ok(match self.w_out {
            Some(w) => attn::vecmat(&x, self.head.get(w)),
            None => {
                let emb = self.embed.get(self.tok_emb);
                (0..self.config.vocab_size).map(|v| kernels::dot(&x, emb.row(v))).collect()
            }
        })
    }

    /// Extends `prompt` by `n` tokens through the streaming path.
    ///
    /// `temperature <= 0` is greedy argmax; otherwise tokens are sampled from
    /// the tempered softmax with `rng`.
    pub fn generate(&self, prompt: &[usize], n: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        let mut states = self.stream_states(prompt.len() + n);
        let mut logits = Vec::new();
        for &tok in prompt {
            logits = self.step(&mut states, tok)?;
        }
        let mut out = prompt.to_vec();
        for i in 0..n {
            let next = pick(&logits, temperature, rng);
            out.push(next);
            if i + 1 < n {
                logits = self.step(&mut states, next)?;
            }
        }
        Ok(out)
    }
}

fn layer_norm_vec<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let (mean, rstd) = kernels::moments(x);
    x.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mean) * rstd * g + b).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn pick<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests;
