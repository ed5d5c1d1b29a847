//! Scalar root finding: bracket search, safeguarded Newton, bisection.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("no sign change found in [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },
    #[error("function not finite at {at}")]
    NonFinite { at: f64 },
}

/// Expand `hi` by doubling (at most `max_doublings` times, capped at `cap`)
/// until `f(lo)` and `f(hi)` have opposite signs.
pub fn bracket_by_doubling<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    mut hi: f64,
    cap: f64,
    max_doublings: usize,
) -> Result<(f64, f64), RootError> {
    let flo = f(lo);
    if !flo.is_finite() {
        return Err(RootError::NonFinite { at: lo });
    }
    for _ in 0..=max_doublings {
        let h = hi.min(cap);
        let fh = f(h);
        if fh.is_finite() && fh.signum() != flo.signum() {
            return Ok((lo, h));
        }
        if h >= cap {
            break;
        }
        hi = lo + 2.0 * (hi - lo);
    }
    Err(RootError::NoBracket { lo, hi: hi.min(cap) })
}

/// Root of `f` in a sign-changing bracket `[lo, hi]`: Newton steps with a
/// central-difference derivative, falling back to bisection whenever the
/// step leaves the bracket or fails to halve it.
pub fn solve_bracketed<F: Fn(f64) -> f64>(
    f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64, RootError> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return Err(RootError::NoBracket { lo, hi });
    }
    let mut x = 0.5 * (lo + hi);
    let mut last_width = hi - lo;
    for _ in 0..300 {
        let fx = f(x);
        if !fx.is_finite() {
            return Err(RootError::NonFinite { at: x });
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
        }
        if hi - lo <= tol {
            return Ok(0.5 * (lo + hi));
        }
        let h = 1e-7 * (1.0 + x.abs()).min(hi - lo);
        let d = (f(x + h) - f(x - h)) / (2.0 * h);
        let newton = x - fx / d;
        let width = hi - lo;
        x = if d.is_finite() && d != 0.0 && newton > lo && newton < hi && width < 0.5 * last_width {
            newton
        } else {
            0.5 * (lo + hi)
        };
        // Newton can stall against one side; nudge it inside by tol.
        if (x - lo).abs() < 0.5 * tol || (hi - x).abs() < 0.5 * tol {
            x = 0.5 * (lo + hi);
        }
        last_width = width;
    }
    Ok(0.5 * (lo + hi))
}

/// Plain bisection for the boundary of `{x : pred(x)}` where `pred(lo)`
/// holds and `pred(hi)` does not. Returns the final lower bracket and
/// whether the tolerance was reached within `max_iter` halvings.
pub fn bisect_boundary<P: Fn(f64) -> bool>(
    pred: P,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, bool) {
    for _ in 0..max_iter {
        if hi - lo <= tol {
            return (lo, true);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return (lo, true);
        }
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi - lo <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_two() {
        let r = solve_bracketed(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn doubling_then_solve() {
        let f = |x: f64| x.ln() - 5.0;
        let (a, b) = bracket_by_doubling(f, 1.0, 2.0, 1e6, 60).unwrap();
        let r = solve_bracketed(f, a, b, 1e-12).unwrap();
        assert!((r - 5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn bisect_boundary_finds_edge() {
        let (x, ok) = bisect_boundary(|x| x < 0.3, 0.0, 1.0, 1e-12, 200);
        assert!(ok && (x - 0.3).abs() < 1e-12);
    }

    #[test]
    fn missing_bracket() {
        assert!(bracket_by_doubling(|x| x * x + 1.0, 0.0, 1.0, 100.0, 60).is_err());
    }
}
