//! AdamW, the warmup-cosine schedule, and the accumulating training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, OptimizerBlob, RngState};
use crate::numcore::{Scalar, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub tokens_per_update: usize,
    pub batch_size: usize,
    pub t_train: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            tokens_per_update: 16_384,
            batch_size: 16,
            t_train: 128,
            lr_max: 6e-4,
            lr_min: 6e-5,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 1337,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.t_train == 0 {
            return Err(Error::Config("steps, batch_size and t_train must be positive".into()));
        }
        if !(self.lr_min <= self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.tokens_per_update < self.batch_size * self.t_train {
            return Err(Error::Config(format!(
                "tokens_per_update {} is smaller than one micro-batch ({} tokens)",
                self.tokens_per_update,
                self.batch_size * self.t_train
            )));
        }
        Ok(())
    }

    /// Micro-batches per optimizer step.
    pub fn accumulation(&self) -> usize {
        self.tokens_per_update.div_ceil(self.batch_size * self.t_train)
    }

    pub fn tokens_per_step(&self) -> usize {
        self.accumulation() * self.batch_size * self.t_train
    }
}

/// Linear warmup from 0, cosine decay to `lr_min` at `cfg.steps`, then flat.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.steps {
        return cfg.lr_min;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments, flattened in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { t: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn to_blob(&self) -> OptimizerBlob {
        let f = |xs: &[T]| xs.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect();
        OptimizerBlob { t: self.t, m: f(&self.m), v: f(&self.v) }
    }

    pub fn from_blob(b: &OptimizerBlob) -> Self {
        let f = |xs: &[f32]| xs.iter().map(|&x| T::lit(x as f64)).collect();
        Self { t: b.t, m: f(&b.m), v: f(&b.v) }
    }
}

/// One AdamW update of a single tensor with bias-corrected moments at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let shrink = T::lit(1.0 - lr * weight_decay);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] = p[i] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW over every parameter of the model; `grads` is flat in canonical order.
///
/// Weight decay applies only to parameters flagged for it (matrices).
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = model.param_count();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("adamw_step", format!("{} grads / {} moments for {n} parameters", grads.len(), state.m.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged { step: state.t as usize, reason: format!("non-finite gradient at flat index {i}") });
    }
    state.t += 1;
    let mut off = 0;
    for store in model.stores_mut() {
        for p in store.iter_mut() {
            let len = p.value.len();
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            let r = off..off + len;
            adamw_update(p.value.data_mut(), &grads[r.clone()], &mut state.m[r.clone()], &mut state.v[r], state.t, lr, wd, cfg);
            off += len;
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Mean loss and flat gradient of one batch.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = model.loss_tape(&mut tape, &vars, inputs, targets, batch, dropout_rng)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.param_count());
    for (v, p) in vars.flat().into_iter().zip(model.stores().iter().flat_map(|s| s.iter())) {
        match tape.grad_data(v) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat_n(T::zero(), p.value.len())),
        }
    }
    Ok((value, flat))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,lr,tokens_seen\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6e},{}", r.step, r.loss, r.lr, r.tokens_seen);
    }
    s
}

/// Where and how the loop reports.
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Directory for `loss.csv` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Copied into every checkpoint header.
    pub extra: serde_json::Value,
    /// Log progress every this many steps (0 = never).
    pub log_every: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<LossRow>,
    pub checkpoint: Checkpoint,
}

/// Trains `model` in place for `cfg.steps` optimizer steps.
///
/// Each step accumulates `cfg.accumulation()` micro-batches before one AdamW
/// update. Training is deterministic for a given seed. `resume` continues
/// from a checkpoint written by this loop.
pub fn train_loop(
    model: &mut Model<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    opts: &LoopOptions,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train().is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    if model.config.posenc_kind == crate::posenc::PosEncKind::Learnable && cfg.t_train > model.config.max_train_len {
        return Err(Error::Config("t_train exceeds the learnable position table".into()));
    }
    let mut data = batches(corpus, Split::Train, cfg.t_train, cfg.batch_size, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = AdamState::<f32>::new(model.param_count());
    let mut start = 0;
    if let Some(ck) = resume {
        *model = ck.to_model()?;
        if let Some(blob) = &ck.optimizer {
            state = AdamState::from_blob(blob);
        }
        if let Some(rng) = &ck.rng {
            data.set_rng(rng.restore()?);
        }
        start = ck.step as usize;
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let accum = cfg.accumulation();
    let per_step = cfg.tokens_per_step() as u64;
    let mut trace = Vec::with_capacity(cfg.steps.saturating_sub(start));
    let mut grads = vec![0f32; model.param_count()];
    for step in start..cfg.steps {
        let lr = lr_at(step, cfg);
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..accum {
            let batch = data.next().expect("endless iterator");
            let drop = (model.config.dropout > 0.0).then_some(&mut dropout_rng);
            let (l, g) = loss_and_grad(model, &batch.inputs, &batch.targets, cfg.batch_size, drop)
                .map_err(|e| diverged(step, e))?;
            loss += l / accum as f64;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: format!("loss is {loss}") });
        }
        if accum > 1 {
            let inv = 1.0 / accum as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adamw_step(model, &grads, &mut state, lr, cfg).map_err(|e| diverged(step, e))?;
        trace.push(LossRow { step, loss, lr, tokens_seen: (step as u64 + 1) * per_step });
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("step {step} loss {loss:.4} lr {lr:.3e}");
        }
        let done = step + 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                snapshot(model, &state, data.rng(), done, opts).save(dir.join(format!("step{done:06}.ckpt")))?;
                write_trace(dir, &trace, resume.is_some())?;
            }
        }
    }
    let checkpoint = snapshot(model, &state, data.rng(), cfg.steps.max(start), opts);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(dir.join("final.ckpt"))?;
        write_trace(dir, &trace, resume.is_some())?;
    }
    Ok(TrainOutcome { trace, checkpoint })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { step, reason: format!("non-finite value in {op}") },
        Error::Diverged { reason, .. } => Error::Diverged { step, reason },
        other => other,
    }
}

fn snapshot(model: &Model<f32>, state: &AdamState<f32>, rng: &ChaCha8Rng, step: usize, opts: &LoopOptions) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model, step as u64);
    ck.optimizer = Some(state.to_blob());
    ck.rng = Some(RngState::capture(rng));
    ck.extra = opts.extra.clone();
    ck
}

fn write_trace(dir: &Path, trace: &[LossRow], append: bool) -> Result<()> {
    let path = dir.join("loss.csv");
    if append && path.exists() {
        let mut body = fs::read_to_string(&path)?;
        let csv = loss_csv(trace);
        body.push_str(csv.split_once('\n').map_or("", |(_, rows)| rows));
        fs::write(path, body)?;
    } else {
        fs::write(path, loss_csv(trace))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(steps: usize, warmup: usize) -> TrainConfig {
        TrainConfig { steps, warmup_steps: warmup, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { lr_max: 6e-4, lr_min: 6e-5, warmup_steps: 750, steps: 5000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(750, &c), 6e-4);
        assert!((lr_at((750 + 5000) / 2, &c) - 3.3e-4).abs() < 1e-12);
        assert!((lr_at(5000, &c) - 6e-5).abs() < 1e-15);
        assert_eq!(lr_at(9000, &c), 6e-5);
        let mut last = f64::INFINITY;
        for s in 750..=5000 {
            let lr = lr_at(s, &c);
            assert!(lr <= last + 1e-18);
            last = lr;
        }
        for s in 1..750 {
            assert!(lr_at(s, &c) > lr_at(s - 1, &c));
        }
    }

    #[test]
    fn adamw_hand_iterations() {
        let c = TrainConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, ..TrainConfig::default() };
        let (mut p, mut m, mut v) = (vec![1.0f64], vec![0.0], vec![0.0]);
        for t in 1..=3 {
            adamw_update(&mut p, &[1.0], &mut m, &mut v, t, 0.1, 0.0, &c);
        }
        // each step moves by lr · g / (|g| + eps)
        assert!((p[0] - (1.0 - 3.0 * 0.1 / (1.0 + 1e-8))).abs() < 1e-12);

        let (mut p, mut m, mut v) = (vec![0.3f64, -2.0], vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.01, 0.0, &TrainConfig::default());
        assert_eq!(p, vec![0.3, -2.0]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, 0.01, 0.1, &TrainConfig::default());
        assert!((p[0] - 0.3 * (1.0 - 0.001)).abs() < 1e-15 && (p[1] + 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_decays_matrices_only() {
        let mc = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, vocab_size: 5, max_train_len: 8, ..ModelConfig::default() };
        let mut model = Model::<f64>::new(mc, 0).unwrap();
        for s in model.stores_mut() {
            for p in s.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|x| *x = 1.0);
            }
        }
        let n = model.param_count();
        let mut st = AdamState::new(n);
        adamw_step(&mut model, &vec![0.0; n], &mut st, 0.5, &TrainConfig::default()).unwrap();
        for s in model.stores() {
            for p in s.iter() {
                let want = if p.decay { 1.0 - 0.5 * 0.1 } else { 1.0 };
                assert!(p.value.data().iter().all(|&x| (x - want).abs() < 1e-15), "{}", p.name);
            }
        }
        let mut bad = vec![0.0; n];
        bad[3] = f64::NAN;
        assert!(matches!(adamw_step(&mut model, &bad, &mut st, 0.5, &TrainConfig::default()), Err(Error::Diverged { .. })));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let mut small = vec![0.1f64];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 10).validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, lr_max: 0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { tokens_per_update: 100, ..TrainConfig::default() }.validate().is_err());
        let c = TrainConfig { tokens_per_update: 5000, batch_size: 4, t_train: 128, ..TrainConfig::default() };
        assert_eq!(c.accumulation(), 10);
        assert_eq!(c.tokens_per_step(), 5120);
    }
}
