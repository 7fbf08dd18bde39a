//! Scalar kernels shared by the tape and the tape-free decode path.

use super::tape::Mask;
use super::Scalar;
use crate::error::{Error, Result};

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Subgradient 0 at the kink.
#[inline]
pub fn relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// `ln(1 + e^x)` as `max(x, 0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let th = inner.tanh();
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

/// `-ln(x² + 1)`.
#[inline]
pub fn neg_log1p_sq<T: Scalar>(x: T) -> T {
    -(x * x).ln_1p()
}

#[inline]
pub fn neg_log1p_sq_grad<T: Scalar>(x: T) -> T {
    -(x + x) / (T::one() + x * x)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// `dst += alpha * src`.
#[inline]
pub fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn prefix_sum_in_place<T: Scalar>(row: &mut [T]) {
    let mut run = T::zero();
    for x in row.iter_mut() {
        run += *x;
        *x = run;
    }
}

/// Mean and reciprocal standard deviation (eps = 1e-5) of a row.
pub fn moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::lit(1e-5)).sqrt())
}

/// Row-wise masked softmax; masked entries are written as exactly 0.
pub fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], n: usize, mask: &Mask) -> Result<()> {
    for (r, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let mut max = T::neg_infinity();
        for (j, &v) in xr.iter().enumerate() {
            if mask.keeps(r, j, n) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = T::zero();
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            *o = if mask.keeps(r, j, n) { (v - max).exp() } else { T::zero() };
            total += *o;
        }
        let inv = T::one() / total;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    Ok(())
}

/// Negative log-softmax of `target` within one row of logits.
pub fn nll_row<T: Scalar>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - logits[target]
}

/// `[B·T, H·dh] -> [B·H, T, dh]`.
pub fn split_heads<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, t: usize, heads: usize, dh: usize) {
    for b in 0..batch {
        for ti in 0..t {
            let srow = &src[(b * t + ti) * heads * dh..(b * t + ti + 1) * heads * dh];
            for h in 0..heads {
                let off = ((b * heads + h) * t + ti) * dh;
                dst[off..off + dh].copy_from_slice(&srow[h * dh..(h + 1) * dh]);
            }
        }
    }
}

/// `[B·H, T, dh] -> [B·T, H·dh]`.
pub fn merge_heads<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, t: usize, heads: usize, dh: usize) {
    for b in 0..batch {
        for ti in 0..t {
            let drow = &mut dst[(b * t + ti) * heads * dh..(b * t + ti + 1) * heads * dh];
            for h in 0..heads {
                let off = ((b * heads + h) * t + ti) * dh;
                drow[h * dh..(h + 1) * dh].copy_from_slice(&src[off..off + dh]);
            }
        }
    }
}

/// Rotation angle for channel pair `pair` at `pos`.
#[inline]
pub fn rope_angle(pos: usize, pair: usize, dh: usize, theta_base: f64) -> f64 {
    pos as f64 * theta_base.powf(-2.0 * pair as f64 / dh as f64)
}

/// Rotates pairs `(2k, 2k+1)` of a `[R, t, dh]` buffer; `inverse` rotates by the negated angle.
pub fn rope_in_place<T: Scalar>(buf: &mut [T], t: usize, dh: usize, theta_base: f64, offset: usize, inverse: bool) {
    let half = dh / 2;
    let mut table = Vec::with_capacity(t * half);
    for ti in 0..t {
        for p in 0..half {
            let ang = rope_angle(offset + ti, p, dh, theta_base);
            let s = if inverse { -ang.sin() } else { ang.sin() };
            table.push((T::lit(ang.cos()), T::lit(s)));
        }
    }
    for (idx, row) in buf.chunks_mut(dh).enumerate() {
        let ti = idx % t;
        for p in 0..half {
            let (c, s) = table[ti * half + p];
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = x0 * c - x1 * s;
            row[2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

pub fn fill_square<T: Scalar>(dst: &mut [T], t: usize, f: impl Fn(usize, usize) -> T) {
    for i in 0..t {
        for j in 0..t {
            dst[i * t + j] = f(i, j);
        }
    }
}

/// `ψ(dist) / ψ(max(L, i))` with `ψ(x) = ln(1 + c·x)`.
#[inline]
pub fn fire_arg<T: Scalar>(dist: usize, i: usize, big_l: T, c: T) -> T {
    let psi = |x: T| (T::one() + c * x).ln();
    psi(T::lit(dist as f64)) / psi(big_l.max(T::lit(i as f64)))
}

/// `b2 + Σ_q w2_q · gelu(w1_q · x + b1_q)`.
#[inline]
pub fn scalar_mlp<T: Scalar>(x: T, w1: &[T], b1: &[T], w2: &[T], b2: T) -> T {
    let mut acc = b2;
    for q in 0..w1.len() {
        acc += w2[q] * gelu(w1[q] * x + b1[q]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0f64) - 100.0).abs() < 1e-6);
        let tiny = softplus(-100.0f64);
        assert!(tiny > 0.0);
        assert!((tiny / (-100.0f64).exp() - 1.0).abs() < 1e-12);
        assert!(softplus(200.0f32).is_finite());
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-3, 0.5, 1.0, 7.0, 128.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn relu_kink_subgradient_is_zero() {
        assert_eq!(relu_grad(0.0f64), 0.0);
        assert_eq!(relu(-1.0f64), 0.0);
    }

    #[test]
    fn heads_round_trip() {
        let src: Vec<f64> = (0..2 * 3 * 4).map(|x| x as f64).collect();
        let mut mid = vec![0.0; src.len()];
        let mut back = vec![0.0; src.len()];
        split_heads(&src, &mut mid, 2, 3, 2, 2);
        merge_heads(&mid, &mut back, 2, 3, 2, 2);
        assert_eq!(src, back);
        // batch 0, head 1, position 0 is channels 2..4 of row 0
        assert_eq!(&mid[3 * 2..3 * 2 + 2], &[2.0, 3.0]);
    }
}
