//! Constant-delay design surrogate: the mean channel delay θ and a diagonal
//! Padé approximant of `e^{-sθ}` validated over the design band.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::DelayDistribution;
use crate::error::{Error, Result};
use crate::lti::{logspace, TransferFunction};

pub const MAX_ORDER: usize = 8;
pub const PHASE_ERR_LIMIT_DEG: f64 = 10.0;
pub const VALIDATION_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySurrogate {
    pub theta_s: f64,
    pub pade: TransferFunction,
    pub order: usize,
    pub band_hz: (f64, f64),
    pub max_phase_err_deg: f64,
    pub max_mag_dev: f64,
}

/// Expected value of the delay law.
pub fn expected_delay(dist: &DelayDistribution) -> Result<f64> {
    dist.validate()?;
    Ok(dist.mean())
}

/// Diagonal Padé approximant of order `order` for a pure delay `theta_s`.
pub fn pade_approx(theta_s: f64, order: usize) -> Result<TransferFunction> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Delay(format!("Padé order must be in 1..={MAX_ORDER}, got {order}")));
    }
    if !(theta_s >= 0.0 && theta_s.is_finite()) {
        return Err(Error::Delay(format!("delay must be non-negative, got {theta_s}")));
    }
    if theta_s == 0.0 {
        return Ok(TransferFunction::unity());
    }
    // c_k = (2n-k)! n! / ((2n)! k! (n-k)!), built by the ratio recurrence.
    let n = order;
    let mut c = vec![1.0f64; n + 1];
    for k in 1..=n {
        c[k] = c[k - 1] * (n - k + 1) as f64 / ((2 * n - k + 1) as f64 * k as f64);
    }
    let num: Vec<f64> = (0..=n).map(|k| c[k] * (-theta_s).powi(k as i32)).collect();
    let den: Vec<f64> = (0..=n).map(|k| c[k] * theta_s.powi(k as i32)).collect();
    TransferFunction::new(num, den)
}

fn band_grid(band_hz: (f64, f64)) -> Result<Vec<f64>> {
    let (lo, hi) = band_hz;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Delay(format!("band must satisfy 0 < low < high, got ({lo}, {hi})")));
    }
    Ok(logspace(lo, hi, VALIDATION_POINTS))
}

/// Largest phase deviation (degrees) of `pade` from the exact delay phase
/// `-ωθ` on a 200-point log grid over the band.
pub fn validate_surrogate(pade: &TransferFunction, theta_s: f64, band_hz: (f64, f64)) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for f in band_grid(band_hz)? {
        let w = 2.0 * PI * f;
        let exact = -(w * theta_s).to_degrees();
        worst = worst.max((pade.phase_at(w)? - exact).abs());
    }
    Ok(worst)
}

/// Largest deviation of `|pade(jω)|` from 1 over the validation grid.
pub fn magnitude_deviation(pade: &TransferFunction, band_hz: (f64, f64)) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in pade.freq_response(&band_grid(band_hz)?)? {
        worst = worst.max((p.value.norm() - 1.0).abs());
    }
    Ok(worst)
}

/// Escalate the Padé order from 1 until the phase error over the band drops
/// below 10°, up to order 8.
pub fn build_surrogate(theta_s: f64, band_hz: (f64, f64)) -> Result<DelaySurrogate> {
    let mut last_err = f64::INFINITY;
    for order in 1..=MAX_ORDER {
        let pade = pade_approx(theta_s, order)?;
        let err = validate_surrogate(&pade, theta_s, band_hz)?;
        last_err = err;
        if err < PHASE_ERR_LIMIT_DEG {
            let max_mag_dev = magnitude_deviation(&pade, band_hz)?;
            return Ok(DelaySurrogate { theta_s, pade, order, band_hz, max_phase_err_deg: err, max_mag_dev });
        }
    }
    Err(Error::Delay(format!(
        "no Padé order up to {MAX_ORDER} meets the {PHASE_ERR_LIMIT_DEG}° phase limit for θ = {theta_s} s (best {last_err:.2}°)"
    )))
}

/// Surrogate with a fixed order (no escalation); the phase error is still
/// measured and reported.
pub fn surrogate_with_order(theta_s: f64, order: usize, band_hz: (f64, f64)) -> Result<DelaySurrogate> {
    let pade = pade_approx(theta_s, order)?;
    let max_phase_err_deg = validate_surrogate(&pade, theta_s, band_hz)?;
    let max_mag_dev = magnitude_deviation(&pade, band_hz)?;
    Ok(DelaySurrogate { theta_s, pade, order, band_hz, max_phase_err_deg, max_mag_dev })
}
