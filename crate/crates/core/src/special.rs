//! Special functions: signed log-Gamma, incomplete Gamma of arbitrary real
//! order, the exponential integral and a complex log-Gamma.
//!
//! Gamma ratios are always formed in log space with the sign carried
//! separately, because the series in this crate routinely combine arguments
//! where Γ itself overflows.

use num_complex::Complex64;
use std::f64::consts::PI;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const LN_PI: f64 = 1.144_729_885_849_400_2;

/// `ln|Γ(x)|` together with the sign of `Γ(x)`.
///
/// At the poles (non-positive integers) returns `(+inf, NaN)`; callers that
/// only need `1/Γ` should use [`rgamma`], which is entire.
pub fn ln_gamma_signed(x: f64) -> (f64, f64) {
    if x.is_nan() {
        return (f64::NAN, f64::NAN);
    }
    if x > 0.0 {
        return (statrs::function::gamma::ln_gamma(x), 1.0);
    }
    if x == x.floor() {
        return (f64::INFINITY, f64::NAN);
    }
    // Γ(x)Γ(1−x) = π / sin(πx), and Γ(1−x) > 0 for x < 1.
    let s = sin_pi(x);
    let lg = LN_PI - s.abs().ln() - statrs::function::gamma::ln_gamma(1.0 - x);
    (lg, s.signum())
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma called with x = {x}");
    statrs::function::gamma::ln_gamma(x)
}

/// `Γ(x)` for real `x` (infinite at the poles).
pub fn gamma(x: f64) -> f64 {
    let (lg, s) = ln_gamma_signed(x);
    if lg.is_infinite() {
        return f64::INFINITY;
    }
    s * lg.exp()
}

/// Reciprocal Gamma `1/Γ(x)`, zero at the non-positive integers.
pub fn rgamma(x: f64) -> f64 {
    let (lg, s) = ln_gamma_signed(x);
    if lg.is_infinite() {
        return 0.0;
    }
    s * (-lg).exp()
}

/// `sin(πx)` with exact zeros at the integers.
fn sin_pi(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).floor();
    if r == 0.0 || r == 1.0 {
        return 0.0;
    }
    (PI * r).sin()
}

/// Signed log of a Gamma ratio `∏Γ(num_i) / ∏Γ(den_j)`.
///
/// Returns `(ln|ratio|, sign)`. A pole in a denominator yields `(-inf, 0)`.
pub fn ln_gamma_ratio(num: &[f64], den: &[f64]) -> (f64, f64) {
    let mut acc = 0.0;
    let mut sign = 1.0;
    for &a in num {
        let (l, s) = ln_gamma_signed(a);
        acc += l;
        sign *= s;
    }
    for &b in den {
        let (l, s) = ln_gamma_signed(b);
        if l.is_infinite() {
            return (f64::NEG_INFINITY, 0.0);
        }
        acc -= l;
        sign *= s;
    }
    (acc, sign)
}

/// Upper incomplete Gamma `Γ(a, x) = ∫_x^∞ t^{a−1} e^{−t} dt` for real `a`
/// and `x > 0`. Negative orders are allowed.
pub fn upper_gamma(a: f64, x: f64) -> f64 {
    assert!(x > 0.0, "upper_gamma needs x > 0, got {x}");
    if x >= 1.0 && x >= a + 1.0 {
        return upper_gamma_cf(a, x);
    }
    if a > 0.0 {
        return statrs::function::gamma::gamma_ur(a, x) * gamma(a);
    }
    if a == 0.0 {
        return exp_int_e1(x);
    }
    // Downward recurrence Γ(a, x) = (Γ(a+1, x) − x^a e^{−x}) / a from a
    // non-negative order; for x < 1 the power term dominates, so no
    // cancellation.
    let k = (-a).ceil() as i32;
    let mut b = a + k as f64;
    let mut val = if b == 0.0 { exp_int_e1(x) } else { upper_gamma(b, x) };
    for _ in 0..k {
        b -= 1.0;
        val = (val - (b * x.ln() - x).exp()) / b;
    }
    val
}

/// Lower incomplete Gamma `γ(a, x)` for `a > 0`.
pub fn lower_gamma(a: f64, x: f64) -> f64 {
    assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_lr(a, x) * gamma(a)
}

/// Continued fraction for Γ(a, x) (modified Lentz), valid for x ≥ a + 1.
fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (a * x.ln() - x).exp() * h
}

/// Exponential integral `E₁(x) = ∫_x^∞ e^{−t}/t dt`, `x > 0`.
pub fn exp_int_e1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x >= 1.0 {
        return upper_gamma_cf(0.0, x);
    }
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..200 {
        term *= -x / k as f64;
        let add = term / k as f64;
        sum += add;
        if add.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    -EULER_GAMMA - x.ln() - sum
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// `∫_0^v t^{p−1}(1−t)^{b−1} dt` for `p > 0`, `0 ≤ v < 1` and any real `b`
/// (including `b ≤ 0`, where the complete integral diverges).
pub fn inc_beta_unnormalized(p: f64, b: f64, v: f64) -> f64 {
    assert!(p > 0.0 && (0.0..1.0).contains(&v));
    if v == 0.0 {
        return 0.0;
    }
    // (1−t)^{b−1} = Σ (1−b)_k t^k / k!
    let mut coef = 1.0;
    let mut pow = v.powf(p);
    let mut sum = 0.0;
    for k in 0..100_000 {
        let kf = k as f64;
        let term = coef * pow / (kf + p);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() && k > 2 {
            break;
        }
        coef *= (kf + 1.0 - b) / (kf + 1.0);
        pow *= v;
    }
    sum
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(z)` for complex `z` with `Re z > 0`, continued analytically from
/// the positive real axis (not the principal log of Γ).
pub fn ln_gamma_complex(z: Complex64) -> Complex64 {
    assert!(z.re > 0.0, "ln_gamma_complex needs Re z > 0");
    let z = z - 1.0;
    let mut a = Complex64::new(LANCZOS_COEF[0], 0.0);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}
