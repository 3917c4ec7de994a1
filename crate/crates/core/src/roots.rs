//! Inversion of strictly increasing scalar functions.

use crate::error::{Error, Result};

/// Largest |x| the bracket search may reach before giving up.
pub(crate) const BRACKET_LIMIT: f64 = 1e9;

/// Residual target relative to `max(1, |y|)`. Slightly tighter than the
/// public contract so round trips have headroom.
const RESIDUAL_TOL: f64 = 2e-13;

const MAX_NEWTON: usize = 60;

/// Find `x` with `f(x) = y` for a strictly increasing `f`.
///
/// `eval` returns `(f(x), f'(x))`. The bracket is grown geometrically from
/// 0 (step 1, doubling) in the direction of `y`, narrowed by bisection to a
/// coarse width, then finished by Newton steps that fall back to bisection
/// whenever they leave the bracket.
pub(crate) fn invert_increasing<F>(eval: F, y: f64) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let tol = RESIDUAL_TOL * y.abs().max(1.0);
    let (f0, _) = eval(0.0);
    if (f0 - y).abs() <= tol {
        return Ok(0.0);
    }

    let (mut lo, mut hi) = if f0 < y {
        let mut lo = 0.0;
        let mut step = 1.0;
        loop {
            let hi = lo + step;
            if hi > BRACKET_LIMIT {
                return Err(Error::NoConvergence { limit: BRACKET_LIMIT });
            }
            if eval(hi).0 >= y {
                break (lo, hi);
            }
            lo = hi;
            step *= 2.0;
        }
    } else {
        let mut hi = 0.0;
        let mut step = 1.0;
        loop {
            let lo = hi - step;
            if lo < -BRACKET_LIMIT {
                return Err(Error::NoConvergence { limit: BRACKET_LIMIT });
            }
            if eval(lo).0 <= y {
                break (lo, hi);
            }
            hi = lo;
            step *= 2.0;
        }
    };

    // coarse bisection
    while hi - lo > 1e-2 * (1.0 + lo.abs().min(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        let (fm, _) = eval(mid);
        if (fm - y).abs() <= tol {
            return Ok(mid);
        }
        if fm < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let mut x = 0.5 * (lo + hi);
    let mut best = x;
    let mut best_res = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let (fx, dfx) = eval(x);
        let r = fx - y;
        if r.abs() < best_res {
            best_res = r.abs();
            best = x;
        }
        if r.abs() <= tol {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - r / dfx;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if next == x || hi - lo <= f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        x = next;
    }
    // Precision-limited: the bracket has collapsed onto adjacent floats.
    Ok(best)
}
