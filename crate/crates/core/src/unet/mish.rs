//! Mish activation, `x * tanh(softplus(x))`, and its analytic derivative.
//!
//! Both functions are generic over the float type so the network can run in
//! `f32` while numerical checks run in `f64`.

use num_traits::Float;

/// Above this input `ln(1 + e^x)` equals `x` to working precision.
const SOFTPLUS_LINEAR_THRESHOLD: f64 = 20.0;

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus<F: Float>(x: F) -> F {
    if x > F::from(SOFTPLUS_LINEAR_THRESHOLD).unwrap() {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn mish<F: Float>(x: F) -> F {
    x * softplus(x).tanh()
}

/// d/dx mish(x) = tanh(sp(x)) + x * sech^2(sp(x)) * sigmoid(x)
pub fn mish_grad<F: Float>(x: F) -> F {
    let t = softplus(x).tanh();
    t + x * (F::one() - t * t) * sigmoid(x)
}

/// Single-exponential form used by the network kernels. With `n = e^x`,
/// `tanh(ln(1 + n)) = n(n + 2) / (n(n + 2) + 2)`.
#[inline]
pub fn mish_fast(x: f32) -> f32 {
    if x > SOFTPLUS_LINEAR_THRESHOLD as f32 {
        return x;
    }
    let n = x.exp();
    let w = n * (n + 2.0);
    x * w / (w + 2.0)
}

/// Derivative in the same single-exponential form:
/// `w / d + 4 x n (n + 1) / d^2` with `w = n(n + 2)`, `d = w + 2`.
#[inline]
pub fn mish_grad_fast(x: f32) -> f32 {
    if x > SOFTPLUS_LINEAR_THRESHOLD as f32 {
        return 1.0;
    }
    let n = x.exp();
    let w = n * (n + 2.0);
    let d = w + 2.0;
    w / d + 4.0 * x * n * (n + 1.0) / (d * d)
}

pub fn mish_slice(xs: &[f32]) -> Vec<f32> {
    xs.iter().map(|&x| mish_fast(x)).collect()
}

pub fn mish_grad_slice(xs: &[f32]) -> Vec<f32> {
    xs.iter().map(|&x| mish_grad_fast(x)).collect()
}
