//! Lower real branch of the Lambert-W function.
//!
//! `W_{-1}(x)` is the solution `w <= -1` of `w e^w = x` for `x` in `[-1/e, 0)`.
//! Two evaluation paths are used: Halley iteration on `w e^w - x` near the
//! branch point, and Newton iteration on the log form `w + ln(-w) = ln(-x)`
//! elsewhere. The log form also accepts arguments given as `ln(-x)`, which
//! keeps arguments far below `f64::MIN_POSITIVE` representable.

use std::f64::consts::E;

use crate::error::{Error, Result};

const INV_E: f64 = 1.0 / E;
const MAX_ITER: usize = 64;
/// Below this `ln(-x)` the log-form iteration is well conditioned.
const LOG_FORM_CUTOFF: f64 = -1.4;

/// `W_{-1}(x)` for `-1/e <= x < 0`.
pub fn lambert_w_m1(x: f64) -> Result<f64> {
    // One ulp of slack below -1/e so the rounded constant itself is accepted.
    if !(-INV_E - f64::EPSILON * INV_E..0.0).contains(&x) {
        return Err(Error::Domain(format!(
            "W_-1 is defined on [-1/e, 0), got {x}"
        )));
    }
    if x <= -INV_E {
        return Ok(-1.0);
    }
    let ln_neg_x = (-x).ln();
    if ln_neg_x < LOG_FORM_CUTOFF {
        Ok(log_form(ln_neg_x))
    } else {
        Ok(near_branch(x))
    }
}

/// `W_{-1}(x)` where the argument is supplied as `ln(-x)`; valid for `ln(-x) <= -1`.
pub fn lambert_w_m1_log(ln_neg_x: f64) -> Result<f64> {
    if !(ln_neg_x <= -1.0 + 4.0 * f64::EPSILON) {
        return Err(Error::Domain(format!(
            "W_-1 needs ln(-x) <= -1, got {ln_neg_x}"
        )));
    }
    if ln_neg_x == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if ln_neg_x < LOG_FORM_CUTOFF {
        Ok(log_form(ln_neg_x))
    } else {
        let x = -ln_neg_x.exp();
        if x <= -INV_E {
            Ok(-1.0)
        } else {
            Ok(near_branch(x))
        }
    }
}

/// Newton on `h(w) = w + ln(-w) - l` from the two-term asymptotic guess.
fn log_form(l: f64) -> f64 {
    let l2 = (-l).ln();
    let mut w = l - l2 + l2 / l;
    for _ in 0..MAX_ITER {
        let h = w + (-w).ln() - l;
        let step = h / (1.0 + 1.0 / w);
        let next = (w - step).min(-1.0);
        if (next - w).abs() <= 4.0 * f64::EPSILON * w.abs() {
            return next;
        }
        w = next;
    }
    w
}

/// Halley on `w e^w - x`, started from the branch-point series in
/// `q = sqrt(2 (1 + e x))`.
fn near_branch(x: f64) -> f64 {
    let q = (2.0 * (1.0 + E * x)).max(0.0).sqrt();
    let mut w = -1.0
        - q * (1.0
            + q * (1.0 / 3.0 + q * (11.0 / 72.0 + q * (43.0 / 540.0 + q * 769.0 / 17280.0))));
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let next = (w - f / denom).min(-1.0);
        if (next - w).abs() <= 2.0 * f64::EPSILON * w.abs() {
            return next;
        }
        w = next;
    }
    w
}
