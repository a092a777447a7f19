//! Reduced linear surrogate of a multimode power system seen from a PV
//! plant: two lightly damped electromechanical modes observed in the grid
//! frequency, driven by the plant's active and reactive power commands
//! through a first-order residual lag.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{eigen, ModeReport, StateSpace, TransferFunction, C64};

/// Index of the active-power input of the combined plant.
pub const P_INPUT: usize = 0;
/// Index of the reactive-power input of the combined plant.
pub const Q_INPUT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    /// Damped oscillation frequency, Hz.
    pub freq_hz: f64,
    pub damping_ratio: f64,
    /// Residue phase of the active-power path at this mode, degrees.
    pub p_residue_phase_deg: f64,
    /// Residue phase of the reactive-power path at this mode, degrees.
    pub q_residue_phase_deg: f64,
    /// Residue magnitude of the active-power path.
    pub p_residue_mag: f64,
    /// Residue magnitude of the reactive-power path.
    pub q_residue_mag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub modes: Vec<ModeSpec>,
    /// Corner of the first-order lag between each power command and the
    /// electromechanical dynamics, Hz.
    pub residual_corner_hz: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                ModeSpec {
                    freq_hz: 0.45,
                    damping_ratio: 0.02,
                    p_residue_phase_deg: -10.0,
                    q_residue_phase_deg: 50.0,
                    p_residue_mag: 0.02,
                    q_residue_mag: 0.015,
                },
                ModeSpec {
                    freq_hz: 0.90,
                    damping_ratio: 0.03,
                    p_residue_phase_deg: 75.0,
                    q_residue_phase_deg: 125.0,
                    p_residue_mag: 0.03,
                    q_residue_mag: 0.02,
                },
            ],
            residual_corner_hz: 2.0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != 2 {
            return Err(Error::Plant(format!("expected exactly two modes, got {}", self.modes.len())));
        }
        for m in &self.modes {
            if !(m.freq_hz > 0.1 && m.freq_hz < 2.0) {
                return Err(Error::Plant(format!("mode at {} Hz outside (0.1, 2) Hz", m.freq_hz)));
            }
            if !(m.damping_ratio > 0.0 && m.damping_ratio < 0.08) {
                return Err(Error::Plant(format!("damping ratio {} outside (0, 0.08)", m.damping_ratio)));
            }
            if !(m.p_residue_mag > 0.0 && m.q_residue_mag > 0.0) {
                return Err(Error::Plant("residue magnitudes must be positive".into()));
            }
        }
        let (f1, f2) = (self.modes[0].freq_hz, self.modes[1].freq_hz);
        if (f1 - f2).abs() <= 0.05 * f1.min(f2) {
            return Err(Error::Plant(format!("mode frequencies {f1} Hz and {f2} Hz overlap (within 5%)")));
        }
        // Residual dynamics must stay well damped: pole below -1 rad/s.
        if !(2.0 * PI * self.residual_corner_hz > 1.0) {
            return Err(Error::Plant(format!(
                "residual corner {} Hz gives a pole slower than -1 rad/s",
                self.residual_corner_hz
            )));
        }
        Ok(())
    }
}

/// Second-order modal block `(b1 s + b0) / (s² + a1 s + a0)` whose upper
/// eigenvalue is `lambda` and whose residue there is `residue`.
fn modal_numerator(lambda: C64, residue: C64) -> (f64, f64) {
    // residue = (b1 λ + b0) / (λ - λ̄) = (b1 λ + b0) / (2jω_d)
    let z = residue * C64::new(0.0, 2.0 * lambda.im);
    let b1 = z.im / lambda.im;
    let b0 = z.re - b1 * lambda.re;
    (b1, b0)
}

#[derive(Debug, Clone)]
pub struct PlantPair {
    /// Two-input (p, q) single-output (ω_g) model with shared modal states.
    pub combined: StateSpace,
    pub p_path: StateSpace,
    pub q_path: StateSpace,
    pub true_modes: Vec<ModeReport>,
    pub config: PlantConfig,
    mode_state_offsets: Vec<usize>,
}

/// Build the plant: states are `[mode1 (2), mode2 (2), p-lag, q-lag]`, each
/// mode block in observable canonical form so both inputs can set their own
/// residue while sharing the modal eigenvalues.
pub fn build_reference_plant(cfg: &PlantConfig) -> Result<PlantPair> {
    cfg.validate()?;
    let n_modes = cfg.modes.len();
    let n = 2 * n_modes + 2;
    let (lag_p, lag_q) = (2 * n_modes, 2 * n_modes + 1);
    let wc = 2.0 * PI * cfg.residual_corner_hz;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, 2);
    let mut c = DMatrix::<f64>::zeros(1, n);
    let mut true_modes = Vec::with_capacity(n_modes);
    let mut offsets = Vec::with_capacity(n_modes);
    for (i, m) in cfg.modes.iter().enumerate() {
        let wd = 2.0 * PI * m.freq_hz;
        let wn = wd / (1.0 - m.damping_ratio * m.damping_ratio).sqrt();
        let lambda = C64::new(-m.damping_ratio * wn, wd);
        let (a1, a0) = (2.0 * m.damping_ratio * wn, wn * wn);
        let k = 2 * i;
        offsets.push(k);
        a[(k, k + 1)] = -a0;
        a[(k + 1, k)] = 1.0;
        a[(k + 1, k + 1)] = -a1;
        c[(0, k + 1)] = 1.0;
        let rp = C64::from_polar(m.p_residue_mag, m.p_residue_phase_deg.to_radians());
        let rq = C64::from_polar(m.q_residue_mag, m.q_residue_phase_deg.to_radians());
        let (pb1, pb0) = modal_numerator(lambda, rp);
        let (qb1, qb0) = modal_numerator(lambda, rq);
        a[(k, lag_p)] = pb0;
        a[(k + 1, lag_p)] = pb1;
        a[(k, lag_q)] = qb0;
        a[(k + 1, lag_q)] = qb1;
        true_modes.push(ModeReport::from_eigenvalue(lambda));
    }
    a[(lag_p, lag_p)] = -wc;
    a[(lag_q, lag_q)] = -wc;
    b[(lag_p, P_INPUT)] = wc;
    b[(lag_q, Q_INPUT)] = wc;
    let combined = StateSpace::new(a, b, c, DMatrix::zeros(1, 2))?;
    Ok(PlantPair {
        p_path: combined.select_input(P_INPUT)?,
        q_path: combined.select_input(Q_INPUT)?,
        combined,
        true_modes,
        config: cfg.clone(),
        mode_state_offsets: offsets,
    })
}

impl PlantPair {
    /// Rational form of one path, assembled from the modal parameters.
    pub fn path_tf(&self, input: usize) -> Result<TransferFunction> {
        let wc = 2.0 * PI * self.config.residual_corner_hz;
        let lag = TransferFunction::new(vec![1.0], vec![1.0, 1.0 / wc])?;
        let mut num = vec![0.0];
        let mut den = vec![1.0];
        for (i, m) in self.config.modes.iter().enumerate() {
            let lambda = self.true_modes[i].eigenvalue;
            let wn = lambda.norm();
            let (mag, ph) = match input {
                P_INPUT => (m.p_residue_mag, m.p_residue_phase_deg),
                Q_INPUT => (m.q_residue_mag, m.q_residue_phase_deg),
                _ => return Err(Error::Plant(format!("no input {input}"))),
            };
            let (b1, b0) = modal_numerator(lambda, C64::from_polar(mag, ph.to_radians()));
            let mden = vec![wn * wn, 2.0 * m.damping_ratio * wn, 1.0];
            let mnum = vec![b0, b1];
            // num/den + mnum/mden
            num = crate::lti::poly::add(&crate::lti::poly::mul(&num, &mden), &crate::lti::poly::mul(&mnum, &den));
            den = crate::lti::poly::mul(&den, &mden);
        }
        Ok(lag.series(&TransferFunction::new(num, den)?))
    }

    pub fn mode_frequencies_rad(&self) -> (f64, f64) {
        (self.true_modes[0].eigenvalue.im, self.true_modes[1].eigenvalue.im)
    }

    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        eigen(self.combined.a())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKind {
    StateImpulse,
    InputStepPulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceTarget {
    PInput,
    QInput,
    ModeStates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceScenario {
    pub kind: DisturbanceKind,
    pub magnitude: f64,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default)]
    pub duration_s: f64,
    pub target: DisturbanceTarget,
}

impl Default for DisturbanceScenario {
    fn default() -> Self {
        Self {
            kind: DisturbanceKind::StateImpulse,
            magnitude: 0.002,
            start_s: 0.0,
            duration_s: 0.0,
            target: DisturbanceTarget::ModeStates,
        }
    }
}

impl DisturbanceScenario {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude == 0.0 || !self.magnitude.is_finite() {
            return Err(Error::Plant("disturbance magnitude must be nonzero".into()));
        }
        if !(self.start_s >= 0.0) {
            return Err(Error::Plant("disturbance start must be >= 0".into()));
        }
        match (self.kind, self.target) {
            (DisturbanceKind::StateImpulse, DisturbanceTarget::ModeStates) => {
                if self.start_s != 0.0 {
                    return Err(Error::Plant("state impulses act at t = 0 (initial state)".into()));
                }
            }
            (DisturbanceKind::InputStepPulse, DisturbanceTarget::PInput | DisturbanceTarget::QInput) => {
                if !(self.duration_s > 0.0) {
                    return Err(Error::Plant("pulse duration must be positive".into()));
                }
            }
            (k, t) => return Err(Error::Plant(format!("disturbance {k:?} cannot target {t:?}"))),
        }
        Ok(())
    }
}

/// Exogenous input added to one plant input over `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputPulse {
    pub input: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSetup {
    pub x0: DVector<f64>,
    pub pulses: Vec<InputPulse>,
}

impl DisturbanceSetup {
    /// Exogenous (p, q) inputs at time `t`.
    pub fn inputs_at(&self, t: f64) -> [f64; 2] {
        let mut u = [0.0; 2];
        for p in &self.pulses {
            if t >= p.start_s && t < p.end_s {
                u[p.input] += p.magnitude;
            }
        }
        u
    }
}

/// Map a scenario to the initial state and exogenous inputs of `plant`.
pub fn apply_disturbance(plant: &PlantPair, scenario: &DisturbanceScenario) -> Result<DisturbanceSetup> {
    scenario.validate()?;
    let n = plant.combined.order();
    let mut x0 = DVector::zeros(n);
    let mut pulses = Vec::new();
    match scenario.target {
        DisturbanceTarget::ModeStates => {
            if plant.mode_state_offsets.is_empty() {
                return Err(Error::Plant("plant has no modal states".into()));
            }
            // Kick the velocity-like state of every mode; the output of each
            // block starts at `magnitude`.
            for &k in &plant.mode_state_offsets {
                x0[k + 1] = scenario.magnitude;
            }
        }
        DisturbanceTarget::PInput | DisturbanceTarget::QInput => {
            let input = if scenario.target == DisturbanceTarget::PInput { P_INPUT } else { Q_INPUT };
            if input >= plant.combined.n_inputs() {
                return Err(Error::Plant(format!("plant has no input {input}")));
            }
            pulses.push(InputPulse {
                input,
                start_s: scenario.start_s,
                end_s: scenario.start_s + scenario.duration_s,
                magnitude: scenario.magnitude,
            });
        }
    }
    Ok(DisturbanceSetup { x0, pulses })
}

/// Open-loop response of ω_g to a scenario, sampled every `dt` for
/// `duration_s`.
pub fn free_response(plant: &PlantPair, scenario: &DisturbanceScenario, dt: f64, duration_s: f64) -> Result<Vec<f64>> {
    let setup = apply_disturbance(plant, scenario)?;
    let mut rk = crate::lti::Rk4::new(plant.combined.clone(), dt, Some(setup.x0.clone()))?;
    let steps = (duration_s / dt).round() as usize;
    let mut out = Vec::with_capacity(steps);
    let mut u = DVector::zeros(2);
    for k in 0..steps {
        let ext = setup.inputs_at(k as f64 * dt);
        u[0] = ext[0];
        u[1] = ext[1];
        out.push(rk.output(&u)[0]);
        rk.step(&u);
    }
    Ok(out)
}
