//! Positional encodings: additive bias generators, rotary embeddings and
//! absolute embedding tables.
//!
//! Every additive method returns the *logit delta*, the quantity added to the
//! scaled `QKᵀ` logits before the causal softmax. For CABLE this is the
//! negation of the weighted relative bias `g_i · (S_i − S_j)`, so farther keys
//! receive larger penalties.
//!
//! Each method comes in three forms: a differentiable builder on a [`Tape`]
//! (used by the model), a pure single-head matrix function, and a single-row
//! function used by the streaming decoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::{self, softplus};
use crate::numcore::{PairOut, Scalar, Tape, Tensor, Var};

/// Which positional encoding a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncKind {
    Cable,
    Alibi,
    Kerple,
    Fire,
    T5,
    Rope,
    Sinusoidal,
    Learnable,
    Nope,
}

impl PosEncKind {
    pub const ALL: [PosEncKind; 9] = [
        PosEncKind::Cable,
        PosEncKind::Alibi,
        PosEncKind::Kerple,
        PosEncKind::Fire,
        PosEncKind::T5,
        PosEncKind::Rope,
        PosEncKind::Sinusoidal,
        PosEncKind::Learnable,
        PosEncKind::Nope,
    ];

    /// Methods that add a bias matrix to the attention logits.
    pub fn is_additive(self) -> bool {
        matches!(self, Self::Cable | Self::Alibi | Self::Kerple | Self::Fire | Self::T5)
    }

    /// Methods whose bias does not depend on token content.
    pub fn is_content_independent(self) -> bool {
        self.is_additive() && self != Self::Cable
    }

    pub fn is_absolute(self) -> bool {
        matches!(self, Self::Sinusoidal | Self::Learnable)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cable => "cable",
            Self::Alibi => "alibi",
            Self::Kerple => "kerple",
            Self::Fire => "fire",
            Self::T5 => "t5",
            Self::Rope => "rope",
            Self::Sinusoidal => "sinusoidal",
            Self::Learnable => "learnable",
            Self::Nope => "nope",
        }
    }
}

impl fmt::Display for PosEncKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// CABLE flavour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CableVariant {
    /// Weighted relative bias `g_i (S_i − S_j)`.
    #[default]
    Full,
    /// `g ≡ 1`; no weight projection.
    #[serde(rename = "nw")]
    NoWeights,
    /// `−ln(b² + 1)` applied to the weighted bias.
    #[serde(rename = "kernel")]
    Kernelized,
}

impl CableVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoWeights => "nw",
            Self::Kernelized => "kernel",
        }
    }

    pub fn has_weights(self) -> bool {
        self != Self::NoWeights
    }

    /// How the weighted difference becomes a logit delta.
    pub fn pair_out(self) -> PairOut {
        match self {
            Self::Kernelized => PairOut::NegLog1pSq,
            _ => PairOut::NegDiff,
        }
    }
}

impl FromStr for CableVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "nw" | "no-weights" => Ok(Self::NoWeights),
            "kernel" | "kernelized" | "k" => Ok(Self::Kernelized),
            other => Err(Error::Config(format!("unknown cable variant `{other}` (full | nw | kernel)"))),
        }
    }
}

/// Encoding selector as used on the command line: one token picks kind and variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selector {
    pub kind: PosEncKind,
    pub variant: CableVariant,
}

impl Selector {
    pub const NAMES: [&'static str; 11] =
        ["cable", "cable-nw", "kcable", "alibi", "kerple", "fire", "t5", "rope", "sinusoidal", "learnable", "nope"];

    /// Tag used in reports and comparison tables.
    pub fn tag(self) -> String {
        match (self.kind, self.variant) {
            (PosEncKind::Cable, CableVariant::Full) => "cable".into(),
            (PosEncKind::Cable, CableVariant::NoWeights) => "cable-nw".into(),
            (PosEncKind::Cable, CableVariant::Kernelized) => "kcable".into(),
            (kind, _) => kind.name().into(),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, variant) = match s {
            "cable" => (PosEncKind::Cable, CableVariant::Full),
            "cable-nw" => (PosEncKind::Cable, CableVariant::NoWeights),
            "kcable" => (PosEncKind::Cable, CableVariant::Kernelized),
            "alibi" => (PosEncKind::Alibi, CableVariant::Full),
            "kerple" => (PosEncKind::Kerple, CableVariant::Full),
            "fire" => (PosEncKind::Fire, CableVariant::Full),
            "t5" => (PosEncKind::T5, CableVariant::Full),
            "rope" => (PosEncKind::Rope, CableVariant::Full),
            "sinusoidal" => (PosEncKind::Sinusoidal, CableVariant::Full),
            "learnable" => (PosEncKind::Learnable, CableVariant::Full),
            "nope" => (PosEncKind::Nope, CableVariant::Full),
            other => {
                return Err(Error::Config(format!(
                    "unknown positional encoding `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(Self { kind, variant })
    }
}

// ====================================================================== CABLE

/// One head's CABLE projections.
#[derive(Clone, Debug, PartialEq)]
pub struct CableHeadParams<T> {
    /// Bias projection (`f = relu(X w_c)`).
    pub w_c: Vec<T>,
    /// Weight projection (`g = softplus(X w_s)`); ignored by [`CableVariant::NoWeights`].
    pub w_s: Vec<T>,
    pub variant: CableVariant,
}

/// Intermediate CABLE quantities for a batch of head slices.
#[derive(Clone, Copy, Debug)]
pub struct CableTerms {
    /// Per-token bias `f`, `[R, t]`.
    pub f: Var,
    /// Running sum `S`, `[R, t]`.
    pub s: Var,
    /// Per-token weight `g`, `[R, t]`; `None` when `g ≡ 1`.
    pub g: Option<Var>,
    /// Logit delta, `[R, t, t]`.
    pub delta: Var,
}

/// Builds CABLE's logit delta on a tape.
///
/// `x` is `[R, t, dh]` where row `r` belongs to head `r % H`; `w_c`, `w_s` are
/// `[H, dh]`.
pub fn cable_terms<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_c: Var,
    w_s: Option<Var>,
    variant: CableVariant,
) -> Result<CableTerms> {
    let (f, s, g) = cable_sums(tape, x, w_c, w_s, variant)?;
    let delta = tape.pair_bias(None, s, g, variant.pair_out())?;
    Ok(CableTerms { f, s, g, delta })
}

/// The per-token pieces `(f, S, g)` of [`cable_terms`] without the `[R, t, t]` delta.
pub fn cable_sums<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_c: Var,
    w_s: Option<Var>,
    variant: CableVariant,
) -> Result<(Var, Var, Option<Var>)> {
    let proj = tape.head_dot(x, w_c)?;
    let f = tape.relu(proj)?;
    let s = tape.prefix_sum(f)?;
    let g = match (variant.has_weights(), w_s) {
        (true, Some(w_s)) => {
            let z = tape.head_dot(x, w_s)?;
            Some(tape.softplus(z)?)
        }
        (true, None) => return Err(Error::Config(format!("cable variant `{}` needs w_s", variant.name()))),
        (false, _) => None,
    };
    Ok((f, s, g))
}

/// Single-head CABLE logit delta `[t, t]` for `x_head[t, d_head]`.
pub fn cable_bias<T: Scalar>(x_head: &Tensor<T>, p: &CableHeadParams<T>) -> Result<Tensor<T>> {
    if x_head.rank() != 2 || x_head.shape()[0] == 0 {
        return Err(Error::shape("cable_bias", format!("expected [t >= 1, d_head], got {:?}", x_head.shape())));
    }
    let (t, dh) = (x_head.shape()[0], x_head.shape()[1]);
    if p.w_c.len() != dh || (p.variant.has_weights() && p.w_s.len() != dh) {
        return Err(Error::shape("cable_bias", format!("projections must have length {dh}")));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(x_head.clone().reshape(vec![1, t, dh])?);
    let w_c = tape.constant(Tensor::new(vec![1, dh], p.w_c.clone())?);
    let w_s = if p.variant.has_weights() { Some(tape.constant(Tensor::new(vec![1, dh], p.w_s.clone())?)) } else { None };
    let terms = cable_terms(&mut tape, x, w_c, w_s, p.variant)?;
    tape.value(terms.delta).clone().reshape(vec![t, t])
}

/// Logit delta row for query `i` given the cached running sums `s[0..=i]`.
///
/// `g_i` is the query's own weight (1 for `NoWeights`).
pub fn cable_row<T: Scalar>(s: &[T], g_i: T, variant: CableVariant) -> Vec<T> {
    let s_i = *s.last().expect("at least the query's own sum");
    s.iter()
        .map(|&s_j| {
            let b = g_i * (s_i - s_j);
            match variant {
                CableVariant::Kernelized => kernels::neg_log1p_sq(b),
                _ => -b,
            }
        })
        .collect()
}

/// `f` and `g` for a single token's head slice.
pub fn cable_token_terms<T: Scalar>(x: &[T], w_c: &[T], w_s: Option<&[T]>) -> (T, T) {
    let f = kernels::relu(kernels::dot(x, w_c));
    let g = w_s.map_or(T::one(), |w| softplus(kernels::dot(x, w)));
    (f, g)
}

// ====================================================================== ALiBi

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlibiParams {
    pub slopes: Vec<f64>,
}

impl AlibiParams {
    /// Head slopes: `1/2^(h+1)` for power-of-two head counts, otherwise `2^(−8(h+1)/H)`.
    pub fn standard(heads: usize) -> Self {
        let slopes = if heads.is_power_of_two() {
            (0..heads).map(|h| 0.5f64.powi(h as i32 + 1)).collect()
        } else {
            (0..heads).map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / heads as f64)).collect()
        };
        Self { slopes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slopes.iter().any(|&r| r.is_nan() || r < 0.0) {
            return Err(Error::Config("ALiBi slopes must be non-negative".into()));
        }
        if self.slopes.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("ALiBi slopes must be non-increasing across heads".into()));
        }
        Ok(())
    }
}

/// `[t, t]` matrix with entry `−r_head · |i − j|`.
pub fn alibi_bias<T: Scalar>(t: usize, p: &AlibiParams, head: usize) -> Result<Tensor<T>> {
    let r = *p.slopes.get(head).ok_or(Error::Index { what: "ALiBi head", index: head, bound: p.slopes.len() })?;
    let mut out = vec![T::zero(); t * t];
    kernels::fill_square(&mut out, t, |i, j| T::lit(-r * i.abs_diff(j) as f64));
    Tensor::new(vec![t, t], out)
}

/// All heads stacked, `[H, t, t]`.
pub fn alibi_stack<T: Scalar>(t: usize, p: &AlibiParams) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(p.slopes.len() * t * t);
    for h in 0..p.slopes.len() {
        out.extend(alibi_bias::<T>(t, p, h)?.into_data());
    }
    Tensor::new(vec![p.slopes.len(), t, t], out)
}

pub fn alibi_row<T: Scalar>(i: usize, slope: f64) -> Vec<T> {
    (0..=i).map(|j| T::lit(-slope * (i - j) as f64)).collect()
}

// ====================================================================== Kerple

/// Kerple log-form parameters, stored unconstrained and mapped through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct KerpleParams<T> {
    pub r1_pre: Vec<T>,
    pub r2_pre: Vec<T>,
}

impl<T: Scalar> KerpleParams<T> {
    /// `r1 = r2 = 1` for every head.
    pub fn init(heads: usize) -> Self {
        let one = T::lit(kernels::softplus_inv(1.0));
        Self { r1_pre: vec![one; heads], r2_pre: vec![one; heads] }
    }

    pub fn r1(&self, head: usize) -> T {
        softplus(self.r1_pre[head])
    }

    pub fn r2(&self, head: usize) -> T {
        softplus(self.r2_pre[head])
    }
}

/// `−r1 · ln(1 + r2 · d)`.
#[inline]
pub fn kerple_log<T: Scalar>(distance: T, r1: T, r2: T) -> T {
    -r1 * (T::one() + r2 * distance).ln()
}

pub fn kerple_log_bias<T: Scalar>(t: usize, p: &KerpleParams<T>, head: usize) -> Result<Tensor<T>> {
    if head >= p.r1_pre.len() {
        return Err(Error::Index { what: "Kerple head", index: head, bound: p.r1_pre.len() });
    }
    let (r1, r2) = (p.r1(head), p.r2(head));
    let mut out = vec![T::zero(); t * t];
    kernels::fill_square(&mut out, t, |i, j| kerple_log(T::lit(i.abs_diff(j) as f64), r1, r2));
    Tensor::new(vec![t, t], out)
}

pub fn kerple_row<T: Scalar>(i: usize, r1: T, r2: T) -> Vec<T> {
    (0..=i).map(|j| kerple_log(T::lit((i - j) as f64), r1, r2)).collect()
}

// ====================================================================== T5

#[derive(Clone, Debug, PartialEq)]
pub struct T5BiasParams<T> {
    /// `[H, K + 1]`; bucket `K` is shared by every distance `>= K`.
    pub table: Tensor<T>,
}

impl<T: Scalar> T5BiasParams<T> {
    pub fn max_bucket(&self) -> usize {
        self.table.last_dim() - 1
    }
}

#[inline]
pub fn t5_bucket(distance: usize, max_bucket: usize) -> usize {
    distance.min(max_bucket)
}

pub fn t5_bucket_bias<T: Scalar>(t: usize, p: &T5BiasParams<T>, head: usize) -> Result<Tensor<T>> {
    let heads = p.table.shape()[0];
    if head >= heads {
        return Err(Error::Index { what: "T5 head", index: head, bound: heads });
    }
    let row = p.table.row(head);
    let mut out = vec![T::zero(); t * t];
    kernels::fill_square(&mut out, t, |i, j| row[t5_bucket(i.abs_diff(j), row.len() - 1)]);
    Tensor::new(vec![t, t], out)
}

pub fn t5_row<T: Scalar>(i: usize, table_row: &[T]) -> Vec<T> {
    (0..=i).map(|j| table_row[t5_bucket(i - j, table_row.len() - 1)]).collect()
}

// ====================================================================== Fire

/// Fire parameters for all heads of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FireParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Unconstrained threshold; `L = softplus(l_pre)`.
    pub l_pre: Tensor<T>,
    /// Slope inside `ψ(x) = ln(1 + c·x)`.
    pub c: f64,
}

impl<T: Scalar> FireParams<T> {
    /// An MLP that returns its input exactly: `gelu(z) − gelu(−z) = z`.
    pub fn pass_through(heads: usize, hidden: usize, threshold: f64) -> Self {
        assert!(hidden >= 2);
        let mut w1 = Tensor::zeros(vec![heads, hidden]);
        let mut w2 = Tensor::zeros(vec![heads, hidden]);
        for h in 0..heads {
            w1.data_mut()[h * hidden] = T::one();
            w1.data_mut()[h * hidden + 1] = -T::one();
            w2.data_mut()[h * hidden] = T::one();
            w2.data_mut()[h * hidden + 1] = -T::one();
        }
        Self {
            w1,
            b1: Tensor::zeros(vec![heads, hidden]),
            w2,
            b2: Tensor::zeros(vec![heads]),
            l_pre: Tensor::full(vec![heads], T::lit(kernels::softplus_inv(threshold))),
            c: 1.0,
        }
    }

    pub fn heads(&self) -> usize {
        self.b2.len()
    }

    pub fn threshold(&self, head: usize) -> T {
        softplus(self.l_pre.data()[head])
    }

    pub fn eval(&self, head: usize, x: T) -> T {
        kernels::scalar_mlp(x, self.w1.row(head), self.b1.row(head), self.w2.row(head), self.b2.data()[head])
    }
}

pub fn fire_bias<T: Scalar>(t: usize, p: &FireParams<T>, head: usize) -> Result<Tensor<T>> {
    if head >= p.heads() {
        return Err(Error::Index { what: "Fire head", index: head, bound: p.heads() });
    }
    if !(p.c > 0.0) {
        return Err(Error::Config("Fire c must be positive".into()));
    }
    let (big_l, c) = (p.threshold(head), T::lit(p.c));
    let mut out = vec![T::zero(); t * t];
    kernels::fill_square(&mut out, t, |i, j| p.eval(head, kernels::fire_arg(i.abs_diff(j), i, big_l, c)));
    Tensor::new(vec![t, t], out)
}

pub fn fire_row<T: Scalar>(i: usize, p: &FireParams<T>, head: usize) -> Vec<T> {
    let (big_l, c) = (p.threshold(head), T::lit(p.c));
    (0..=i).map(|j| p.eval(head, kernels::fire_arg(i - j, i, big_l, c))).collect()
}

// ====================================================================== RoPE

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub theta_base: f64,
    pub d_head: usize,
}

impl RopeParams {
    pub fn new(d_head: usize) -> Result<Self> {
        let p = Self { theta_base: 10_000.0, d_head };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("RoPE needs an even head dimension, got {}", self.d_head)));
        }
        Ok(())
    }
}

/// Rotates `qk[t, d_head]`, row `m` at absolute position `offset + m`.
pub fn rope_rotate<T: Scalar>(qk: &Tensor<T>, p: &RopeParams, offset: usize) -> Result<Tensor<T>> {
    p.validate()?;
    if qk.rank() != 2 || qk.shape()[1] != p.d_head {
        return Err(Error::shape("rope_rotate", format!("expected [t, {}], got {:?}", p.d_head, qk.shape())));
    }
    let mut data = qk.data().to_vec();
    kernels::rope_in_place(&mut data, qk.shape()[0], p.d_head, p.theta_base, offset, false);
    Tensor::new(qk.shape().to_vec(), data)
}

/// Rotates one vector in place at `pos`.
pub fn rope_vector<T: Scalar>(v: &mut [T], pos: usize, theta_base: f64) {
    let dh = v.len();
    kernels::rope_in_place(v, 1, dh, theta_base, pos, false);
}

// ====================================================================== APE

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApeKind {
    Sinusoidal,
    Learnable,
}

/// Absolute position table; the learnable kind covers positions `< T_max` only.
#[derive(Clone, Debug, PartialEq)]
pub struct ApeTable<T> {
    pub kind: ApeKind,
    pub d_model: usize,
    /// `[T_max, d_model]` for the learnable kind; empty for sinusoidal.
    pub table: Tensor<T>,
}

impl<T: Scalar> ApeTable<T> {
    pub fn sinusoidal(d_model: usize) -> Self {
        Self { kind: ApeKind::Sinusoidal, d_model, table: Tensor::zeros(vec![0, d_model]) }
    }

    pub fn learnable(table: Tensor<T>) -> Self {
        let d_model = table.last_dim();
        Self { kind: ApeKind::Learnable, d_model, table }
    }

    pub fn max_positions(&self) -> Option<usize> {
        match self.kind {
            ApeKind::Learnable => Some(self.table.shape()[0]),
            ApeKind::Sinusoidal => None,
        }
    }
}

/// Standard interleaved sinusoid `[sin, cos, sin, cos, …]` for one position.
pub fn sinusoid_row<T: Scalar>(pos: usize, d_model: usize) -> Vec<T> {
    let mut row = vec![T::zero(); d_model];
    for i in 0..d_model / 2 {
        let freq = 10_000f64.powf(-2.0 * i as f64 / d_model as f64);
        let ang = pos as f64 * freq;
        row[2 * i] = T::lit(ang.sin());
        row[2 * i + 1] = T::lit(ang.cos());
    }
    if d_model % 2 == 1 {
        let freq = 10_000f64.powf(-((d_model - 1) as f64) / d_model as f64);
        row[d_model - 1] = T::lit((pos as f64 * freq).sin());
    }
    row
}

pub fn sinusoid_table<T: Scalar>(t: usize, d_model: usize) -> Tensor<T> {
    let data = (0..t).flat_map(|p| sinusoid_row::<T>(p, d_model)).collect();
    Tensor::new(vec![t, d_model], data).expect("table shape")
}

pub fn ape_lookup<T: Scalar>(positions: &[usize], p: &ApeTable<T>) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(positions.len() * p.d_model);
    for &pos in positions {
        match p.kind {
            ApeKind::Sinusoidal => data.extend(sinusoid_row::<T>(pos, p.d_model)),
            ApeKind::Learnable => {
                let bound = p.table.shape()[0];
                if pos >= bound {
                    return Err(Error::Index { what: "learnable position table", index: pos, bound });
                }
                data.extend_from_slice(p.table.row(pos));
            }
        }
    }
    Tensor::new(vec![positions.len(), p.d_model], data)
}
