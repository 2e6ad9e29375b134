//! Scalar special functions: standard normal CDF in linear and log space,
//! logistic helpers, binary entropy.

use std::f64::consts::{LN_2, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        if x > 5.0 {
            // Φ(x) = 1 - Φ(-x); ln1p keeps precision near zero.
            (-norm_cdf(-x)).ln_1p()
        } else {
            norm_cdf(x).ln()
        }
    } else {
        // Asymptotic Mills-ratio expansion; at |x| >= 30 the truncation error is < 1e-12.
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `φ(x) / Φ(x)`, the derivative of `ln Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x > -30.0 {
        (-0.5 * x * x - LN_SQRT_2PI - log_norm_cdf(x)).exp()
    } else {
        // -x + 1/(-x) - 2/(-x)^3 + ...
        let y = -x;
        y + 1.0 / y - 2.0 / (y * y * y)
    }
}

/// `ln σ(f) = -softplus(-f)`.
#[inline]
pub fn log_sigmoid(f: f64) -> f64 {
    -softplus(-f)
}

#[inline]
pub fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Binary entropy in nats; `H(0) = H(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    let h = term(p) + term(1.0 - p);
    h.clamp(0.0, LN_2)
}
