//! WebAssembly bindings for the static demo page in `www/`. Every function
//! returns a JSON string so the page needs no generated type glue.

use std::f64::consts::PI;

use podlab_core::analysis::{closed_loop_eigs, open_loop, LoopParts};
use podlab_core::delaymodel::{pade_approx, surrogate_with_order};
use podlab_core::lti::logspace;
use podlab_core::poddesign::{leadlag_tf, washout};
use podlab_core::refplant::{build_reference_plant, P_INPUT, Q_INPUT};
use podlab_core::Result;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<serde_json::Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Exact delay phase and Padé phase on a log grid, plus the worst error.
#[wasm_bindgen]
pub fn pade_phase(theta_s: f64, order: usize, f_lo: f64, f_hi: f64, n: usize) -> std::result::Result<String, JsError> {
    to_js(pade_phase_json(theta_s, order, f_lo, f_hi, n))
}

fn pade_phase_json(theta_s: f64, order: usize, f_lo: f64, f_hi: f64, n: usize) -> Result<serde_json::Value> {
    let pade = pade_approx(theta_s, order)?;
    let sur = surrogate_with_order(theta_s, order, (f_lo, f_hi))?;
    let freqs = logspace(f_lo, f_hi, n);
    let mut exact = Vec::with_capacity(n);
    let mut approx = Vec::with_capacity(n);
    for f in &freqs {
        let w = 2.0 * PI * f;
        exact.push(-w * theta_s * 180.0 / PI);
        approx.push(pade.phase_at(w)?);
    }
    Ok(json!({ "freq_hz": freqs, "exact_deg": exact, "pade_deg": approx, "max_err_deg": sur.max_phase_err_deg }))
}

fn loop_parts(t: &[f64], gain: f64, theta_s: f64, path: &str) -> Result<(LoopParts, (f64, f64))> {
    let plant = build_reference_plant(&Default::default())?;
    let input = if path == "q" { Q_INPUT } else { P_INPUT };
    let t = |i: usize| t.get(i).copied().unwrap_or(1.0);
    let parts = LoopParts {
        washout: washout(5.0)?,
        compensator: leadlag_tf(t(0), t(1), t(2), t(3))?,
        gain,
        surrogate: pade_approx(theta_s, 4)?,
        plant: plant.path_tf(input)?,
    };
    Ok((parts, plant.mode_frequencies_rad()))
}

/// Bode table of `gain · washout · lead-lag · delay · plant` for the
/// reference plant's `"p"` or `"q"` path.
#[wasm_bindgen]
pub fn loop_bode(t: &[f64], gain: f64, theta_s: f64, path: &str, n: usize) -> std::result::Result<String, JsError> {
    to_js(loop_bode_json(t, gain, theta_s, path, n))
}

fn loop_bode_json(t: &[f64], gain: f64, theta_s: f64, path: &str, n: usize) -> Result<serde_json::Value> {
    let (parts, modes) = loop_parts(t, gain, theta_s, path)?;
    let l = open_loop(&parts)?;
    let freqs = logspace(0.1, 2.0, n);
    let pts = l.freq_response(&freqs)?;
    // Phase continuous along the grid, anchored at the first point.
    let mut phase: Vec<f64> = Vec::with_capacity(n);
    for p in &pts {
        let raw = p.phase_deg();
        let v = match phase.last() {
            Some(prev) => raw + 360.0 * ((prev - raw) / 360.0).round(),
            None => raw,
        };
        phase.push(v);
    }
    let at_modes: Vec<f64> =
        [modes.0, modes.1].iter().map(|w| l.eval_jw(*w).map(|z| z.arg().to_degrees())).collect::<Result<_>>()?;
    Ok(json!({
        "freq_hz": freqs,
        "mag_db": pts.iter().map(|p| p.mag_db()).collect::<Vec<_>>(),
        "phase_deg": phase,
        "mode_freq_hz": [modes.0 / (2.0 * PI), modes.1 / (2.0 * PI)],
        "mode_phase_deg": at_modes,
    }))
}

/// Closed-loop target-mode eigenvalues for gains `0..=k_max` in `n` steps.
#[wasm_bindgen]
pub fn eig_vs_gain(t: &[f64], k_max: f64, theta_s: f64, path: &str, n: usize) -> std::result::Result<String, JsError> {
    to_js(eig_vs_gain_json(t, k_max, theta_s, path, n))
}

fn eig_vs_gain_json(t: &[f64], k_max: f64, theta_s: f64, path: &str, n: usize) -> Result<serde_json::Value> {
    let (parts, modes) = loop_parts(t, 0.0, theta_s, path)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n.max(2) {
        let k = k_max * i as f64 / (n.max(2) - 1) as f64;
        // Past the stability boundary modes may be lost or ambiguous; skip.
        let Ok(case) = closed_loop_eigs(&LoopParts { gain: k, ..parts.clone() }, modes) else { continue };
        let m = &case.modes[..2];
        rows.push(json!({
            "gain": k,
            "re": [m[0].eigenvalue.re, m[1].eigenvalue.re],
            "im": [m[0].eigenvalue.im, m[1].eigenvalue.im],
            "zeta": [m[0].damping_ratio, m[1].damping_ratio],
        }));
    }
    Ok(json!({ "cases": rows }))
}
