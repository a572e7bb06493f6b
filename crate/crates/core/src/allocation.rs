//! Per-round bandwidth allocation under a common delay target.
//!
//! For a device with gain `g`, the bandwidth `B` that makes `mu / r(B) = D`
//! solves `B log2(1 + g / (B sigma^2)) = mu / D`. Writing `z = g / (B sigma^2)`
//! (the SNR on the allocated band) and `p = mu sigma^2 ln 2 / (D g)` turns this
//! into `ln(1 + z) = p z`, whose positive root is
//!
//! ```text
//! z = -W_{-1}(-p e^{-p}) / p - 1,
//! ```
//!
//! the Lambert-W closed form. A positive root exists iff `p < 1`, i.e. the
//! requested rate is below the infinite-bandwidth capacity `g / (sigma^2 ln 2)`.
//! The closed form is polished by Newton on `ln(1 + z) - p z` and checked
//! against the rate equation; a bracketed bisection takes over whenever the
//! check fails.

use std::f64::consts::LN_2;

use crate::channel::achievable_rate;
use crate::error::{Error, Result};
use crate::lambert::lambert_w_m1_log;

/// Relative residual accepted on `r(B) D = mu`.
pub const RATE_RESIDUAL_TOL: f64 = 1e-9;
/// Default relative bracket width of the delay bisection.
pub const DELAY_BISECTION_TOL: f64 = 1e-9;
/// The delay bisection keeps going until the budget is used to this fraction.
const SATURATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    /// Gains of the candidate set, all `> 0`.
    pub gains: Vec<f64>,
    pub total_bandwidth: f64,
    pub payload_bits: f64,
    pub noise_psd: f64,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(Error::Domain("allocation over an empty set".into()));
        }
        if let Some(g) = self.gains.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::Domain(format!(
                "candidate gains must be > 0, got {g}"
            )));
        }
        if !(self.total_bandwidth > 0.0 && self.total_bandwidth.is_finite()) {
            return Err(Error::Domain("total bandwidth must be > 0".into()));
        }
        if !(self.payload_bits > 0.0 && self.payload_bits.is_finite()) {
            return Err(Error::Domain("payload must be > 0".into()));
        }
        if !(self.noise_psd > 0.0 && self.noise_psd.is_finite()) {
            return Err(Error::Domain("noise psd must be > 0".into()));
        }
        Ok(())
    }
}

/// Bandwidth shares and the common delay they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub bandwidths: Vec<f64>,
    /// Delay of the slowest scheduled device, seconds.
    pub delay: f64,
    pub feasible: bool,
}

impl Allocation {
    /// The allocation of an empty schedule: nothing transmitted, zero delay.
    pub fn empty() -> Self {
        Self {
            bandwidths: Vec::new(),
            delay: 0.0,
            feasible: true,
        }
    }

    pub fn total(&self) -> f64 {
        self.bandwidths.iter().sum()
    }
}

/// `p = mu sigma^2 ln2 / (D g)`: the requested rate over the device's
/// infinite-bandwidth capacity.
fn capacity_ratio(delay: f64, gain: f64, payload_bits: f64, noise_psd: f64) -> f64 {
    payload_bits * noise_psd * LN_2 / (delay * gain)
}

/// Smallest delay a device can reach with unlimited bandwidth.
pub fn infinite_bandwidth_delay(gain: f64, payload_bits: f64, noise_psd: f64) -> f64 {
    payload_bits * noise_psd * LN_2 / gain
}

fn rate_residual(bandwidth: f64, delay: f64, gain: f64, payload_bits: f64, noise_psd: f64) -> f64 {
    match achievable_rate(bandwidth, gain, noise_psd) {
        Ok(r) => (r * delay - payload_bits).abs() / payload_bits,
        Err(_) => f64::INFINITY,
    }
}

/// Bandwidth needed by one device to deliver `payload_bits` in exactly `delay` seconds.
pub fn required_bandwidth(delay: f64, gain: f64, payload_bits: f64, noise_psd: f64) -> Result<f64> {
    if !(delay > 0.0) || !(gain > 0.0) || !(payload_bits > 0.0) || !(noise_psd > 0.0) {
        return Err(Error::Domain(format!(
            "required bandwidth needs positive inputs (delay {delay}, gain {gain}, payload {payload_bits}, psd {noise_psd})"
        )));
    }
    let p = capacity_ratio(delay, gain, payload_bits, noise_psd);
    if !(p < 1.0) {
        return Err(Error::Infeasible(format!(
            "delay {delay} s is below the infinite-bandwidth limit {} s",
            infinite_bandwidth_delay(gain, payload_bits, noise_psd)
        )));
    }
    let snr_scale = gain / noise_psd;

    if let Some(z) = closed_form_snr(p) {
        let b = snr_scale / z;
        if b.is_finite()
            && rate_residual(b, delay, gain, payload_bits, noise_psd) <= RATE_RESIDUAL_TOL
        {
            return Ok(b);
        }
    }

    let z = bisect_snr(p);
    let b = snr_scale / z;
    if rate_residual(b, delay, gain, payload_bits, noise_psd) <= RATE_RESIDUAL_TOL {
        Ok(b)
    } else {
        Err(Error::Infeasible(format!(
            "no bandwidth meets delay {delay} s to tolerance (p = {p})"
        )))
    }
}

/// Lambert-W root of `ln(1 + z) = p z`, Newton-polished. `None` if the closed
/// form gives a non-positive `1/B`.
fn closed_form_snr(p: f64) -> Option<f64> {
    // W_{-1}(-p e^{-p}), argument passed as ln(p e^{-p}).
    let w = lambert_w_m1_log(p.ln() - p).ok()?;
    let mut z = -w / p - 1.0;
    if !(z > 0.0 && z.is_finite()) {
        return None;
    }
    for _ in 0..8 {
        let f = z.ln_1p() - p * z;
        let df = 1.0 / (1.0 + z) - p;
        if df >= 0.0 {
            // Left of the maximum of ln(1+z) - p z: Newton would head for z = 0.
            return None;
        }
        let next = z - f / df;
        if !(next > 0.0) {
            return None;
        }
        let done = (next - z).abs() <= 4.0 * f64::EPSILON * z;
        z = next;
        if done {
            break;
        }
    }
    Some(z)
}

/// Bisection on `ln(1 + z) - p z`, positive on `(0, z*)` and negative beyond.
fn bisect_snr(p: f64) -> f64 {
    let phi = |z: f64| z.ln_1p() - p * z;
    let mut hi = 1.0;
    while phi(hi) > 0.0 {
        hi *= 2.0;
    }
    let mut lo = hi;
    while !(phi(lo) > 0.0) && lo > f64::MIN_POSITIVE {
        lo *= 0.5;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sum of required bandwidths at `delay`, or `None` once the sum passes
/// `budget` or a device cannot reach `delay` at all.
fn bandwidth_if_feasible(problem: &AllocationProblem, delay: f64, budget: f64) -> Option<Vec<f64>> {
    let mut total = 0.0;
    let mut out = Vec::with_capacity(problem.gains.len());
    for &g in &problem.gains {
        let b = required_bandwidth(delay, g, problem.payload_bits, problem.noise_psd).ok()?;
        total += b;
        if total > budget {
            return None;
        }
        out.push(b);
    }
    Some(out)
}

/// Minimum common delay of the candidate set, with the bandwidth split that
/// achieves it. Bisection on the delay with relative width `tol`.
pub fn min_delay_with_tol(problem: &AllocationProblem, tol: f64) -> Result<Allocation> {
    min_delay_from(problem, 0.0, tol)
}

/// As [`min_delay_with_tol`], with a known lower bound on the answer (for
/// instance the delay of a subset) used to tighten the initial bracket.
pub fn min_delay_from(
    problem: &AllocationProblem,
    lower_bound: f64,
    tol: f64,
) -> Result<Allocation> {
    problem.validate()?;
    let budget = problem.total_bandwidth;
    let mu = problem.payload_bits;
    let psd = problem.noise_psd;

    let best = problem.gains.iter().copied().fold(f64::MIN, f64::max);
    let full_band_delay = mu / achievable_rate(budget, best, psd)?;
    if problem.gains.len() == 1 {
        return Ok(Allocation {
            bandwidths: vec![budget],
            delay: full_band_delay,
            feasible: true,
        });
    }

    // The best device alone on the full band is a certified lower bound.
    let mut lo = full_band_delay.max(lower_bound);
    let worst = problem.gains.iter().copied().fold(f64::MAX, f64::min);
    let mut hi = (2.0 * lo).max(2.0 * infinite_bandwidth_delay(worst, mu, psd));
    let mut hi_bw = loop {
        if let Some(bw) = bandwidth_if_feasible(problem, hi, budget) {
            break bw;
        }
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible("delay search diverged".into()));
        }
    };

    loop {
        let saturated = hi_bw.iter().sum::<f64>() >= budget * (1.0 - SATURATION_TOL);
        if hi - lo <= tol * hi && saturated {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match bandwidth_if_feasible(problem, mid, budget) {
            Some(bw) => {
                hi = mid;
                hi_bw = bw;
            }
            None => lo = mid,
        }
    }

    Ok(Allocation {
        bandwidths: hi_bw,
        delay: hi,
        feasible: true,
    })
}

pub fn min_delay(problem: &AllocationProblem) -> Result<Allocation> {
    min_delay_with_tol(problem, DELAY_BISECTION_TOL)
}
