//! Multimode POD compensator design: phase budgets at the two oscillation
//! frequencies, a normalized residual system in the lead-lag time constants,
//! a trust-region dogleg solve, washout, power limits and gain selection.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{closed_loop_eigs, LoopParts};
use crate::channel::nyquist_limit;
use crate::delaymodel::DelaySurrogate;
use crate::error::{Error, Result};
use crate::lti::{logspace, wrap_deg, ModeReport, TransferFunction};

pub const T_MIN_S: f64 = 0.01;
pub const T_MAX_S: f64 = 10.0;
pub const DEFAULT_WASHOUT_S: f64 = 5.0;
/// Smallest cross-mode phase (degrees) accepted as a normalizing
/// denominator.
pub const DENOM_GUARD_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopKind {
    Active,
    Reactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensatorDesign {
    pub t1_s: f64,
    pub t2_s: f64,
    pub t3_s: f64,
    pub t4_s: f64,
    pub gain: f64,
    pub washout_tw_s: f64,
    pub limit_pu: f64,
    #[serde(rename = "loop")]
    pub loop_kind: LoopKind,
}

impl CompensatorDesign {
    pub fn time_constants(&self) -> [f64; 4] {
        [self.t1_s, self.t2_s, self.t3_s, self.t4_s]
    }

    pub fn leadlag(&self) -> Result<TransferFunction> {
        let [t1, t2, t3, t4] = self.time_constants();
        leadlag_tf(t1, t2, t3, t4)
    }

    pub fn washout(&self) -> Result<TransferFunction> {
        washout(self.washout_tw_s)
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.time_constants() {
            if !(T_MIN_S..=T_MAX_S).contains(&t) {
                return Err(Error::Design(format!("time constant {t} s outside [{T_MIN_S}, {T_MAX_S}]")));
            }
        }
        if !(self.gain >= 0.0 && self.limit_pu >= 0.0 && self.washout_tw_s > 0.0) {
            return Err(Error::Design("gain and limit must be non-negative, washout positive".into()));
        }
        Ok(())
    }
}

/// `(1+sT1)(1+sT3) / ((1+sT2)(1+sT4))`
pub fn leadlag_tf(t1: f64, t2: f64, t3: f64, t4: f64) -> Result<TransferFunction> {
    for (i, t) in [t1, t2, t3, t4].iter().enumerate() {
        if !(*t > 0.0 && t.is_finite()) {
            return Err(Error::Design(format!("T{} must be positive, got {t}", i + 1)));
        }
    }
    let num = crate::lti::poly::mul(&[1.0, t1], &[1.0, t3]);
    let den = crate::lti::poly::mul(&[1.0, t2], &[1.0, t4]);
    TransferFunction::new(num, den)
}

/// Lead-lag phase in degrees straight from the time constants.
pub fn leadlag_phase_deg(t: &[f64; 4], omega: f64) -> f64 {
    ((omega * t[0]).atan() - (omega * t[1]).atan() + (omega * t[2]).atan() - (omega * t[3]).atan()).to_degrees()
}

/// Continuous phase of `tf(jω)` in degrees, unwrapped from DC.
pub fn phase_at(tf: &TransferFunction, omega: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::Design(format!("phase_at needs ω > 0, got {omega}")));
    }
    tf.phase_at(omega)
}

/// `sTw / (1 + sTw)`
pub fn washout(tw_s: f64) -> Result<TransferFunction> {
    if !(tw_s > 0.0) {
        return Err(Error::Design(format!("washout time constant must be positive, got {tw_s}")));
    }
    TransferFunction::new(vec![0.0, tw_s], vec![1.0, tw_s])
}

/// Phases (degrees) of everything in the loop except the lead-lag pair, at
/// each oscillation frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseContext {
    pub omega: [f64; 2],
    pub other_phase_deg: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub f: [f64; 2],
    /// Cross-mode guard tripped; `f` holds plain phase errors in degrees.
    pub unnormalized: bool,
}

/// Map log time constants to clamped time constants.
pub fn time_constants_from_log(x: &[f64]) -> [f64; 4] {
    let mut t = [0.0; 4];
    for (ti, xi) in t.iter_mut().zip(x) {
        *ti = xi.exp().clamp(T_MIN_S, T_MAX_S);
    }
    t
}

/// Normalized residuals: each mode's open-loop phase divided by the
/// negated non-compensator phase of the other mode.
pub fn residual_f(x: &[f64], ctx: &PhaseContext) -> Residual {
    let t = time_constants_from_log(x);
    let s = [wrap_deg(ctx.other_phase_deg[0]), wrap_deg(ctx.other_phase_deg[1])];
    let num = [
        wrap_deg(leadlag_phase_deg(&t, ctx.omega[0]) + s[0]),
        wrap_deg(leadlag_phase_deg(&t, ctx.omega[1]) + s[1]),
    ];
    if s[0].abs() <= DENOM_GUARD_DEG || s[1].abs() <= DENOM_GUARD_DEG {
        return Residual { f: num, unnormalized: true };
    }
    Residual { f: [num[0] / -s[1], num[1] / -s[0]], unnormalized: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoglegOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub radius_floor: f64,
    pub initial_radius: f64,
}

impl Default for DoglegOptions {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-10, radius_floor: 1e-12, initial_radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoglegResult {
    pub x: Vec<f64>,
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ‖F‖₂ after each accepted step, starting with the initial point.
    pub accepted_norms: Vec<f64>,
}

fn norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

fn jacobian<F>(f: &F, x: &DVector<f64>, m: usize) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut j = DMatrix::<f64>::zeros(m, n);
    for k in 0..n {
        let h = 1e-6 * x[k].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let fp = f(xp.as_slice())?;
        let fm = f(xm.as_slice())?;
        if fp.len() != m || fm.len() != m {
            return Err(Error::Design("residual length changed during Jacobian evaluation".into()));
        }
        for i in 0..m {
            let d = (fp[i] - fm[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::Design(format!("non-finite Jacobian entry ({i}, {k})")));
            }
            j[(i, k)] = d;
        }
    }
    Ok(j)
}

/// Powell dogleg trust-region method on `min ½‖F(x)‖²` with a
/// central-difference Jacobian. Works for non-square systems: the
/// Gauss–Newton leg is the minimum-norm least-squares step.
pub fn dogleg_solve<F>(f: F, x0: &[f64], opts: &DoglegOptions) -> Result<DoglegResult>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = DVector::from_column_slice(x0);
    let mut fx = DVector::from_vec(f(x.as_slice())?);
    if fx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Design("residual not finite at the starting point".into()));
    }
    let m = fx.len();
    let mut radius = opts.initial_radius;
    let mut accepted = vec![norm(&fx)];
    let mut iterations = 0;
    let mut converged = norm(&fx) <= opts.tolerance;
    let mut jac = jacobian(&f, &x, m)?;
    while !converged && iterations < opts.max_iterations && radius >= opts.radius_floor {
        iterations += 1;
        let g = jac.transpose() * &fx;
        let gnorm = norm(&g);
        if gnorm == 0.0 {
            break;
        }
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let p_gn = -svd.solve(&fx, 1e-12 * smax).map_err(|e| Error::Design(format!("dogleg: {e}")))?;
        let jg = &jac * &g;
        let jg2 = jg.norm_squared();
        let p_sd = if jg2 > 0.0 { -&g * (gnorm * gnorm / jg2) } else { -&g * (radius / gnorm) };
        let step = if norm(&p_gn) <= radius {
            p_gn.clone()
        } else if norm(&p_sd) >= radius {
            -&g * (radius / gnorm)
        } else {
            // Point on the segment p_sd → p_gn at distance `radius`.
            let d = &p_gn - &p_sd;
            let a = d.norm_squared();
            let b = 2.0 * p_sd.dot(&d);
            let c = p_sd.norm_squared() - radius * radius;
            let tau = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
            &p_sd + d * tau
        };
        let step_norm = norm(&step);
        let x_new = &x + &step;
        let f_new = DVector::from_vec(f(x_new.as_slice())?);
        let predicted = fx.norm_squared() - (&fx + &jac * &step).norm_squared();
        let actual = fx.norm_squared() - f_new.norm_squared();
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };
        if rho < 0.25 {
            radius = 0.25 * step_norm;
        } else if rho > 0.75 && step_norm >= 0.99 * radius {
            radius = (2.0 * radius).min(1e3);
        }
        if rho > 1e-4 && actual > 0.0 && f_new.iter().all(|v| v.is_finite()) {
            x = x_new;
            fx = f_new;
            accepted.push(norm(&fx));
            converged = norm(&fx) <= opts.tolerance;
            if !converged {
                jac = jacobian(&f, &x, m)?;
            }
        }
    }
    if converged {
        // The finite-difference Jacobian limits a single Newton step to
        // about 1e-10; a few more full steps recover round-off accuracy.
        for _ in 0..3 {
            let jac = jacobian(&f, &x, m)?;
            let svd = jac.svd(true, true);
            let smax = svd.singular_values.max();
            let Ok(p) = svd.solve(&fx, 1e-12 * smax) else { break };
            let x_new = &x - p;
            let f_new = DVector::from_vec(f(x_new.as_slice())?);
            if !(norm(&f_new) < norm(&fx)) {
                break;
            }
            x = x_new;
            fx = f_new;
            accepted.push(norm(&fx));
        }
    }
    Ok(DoglegResult {
        residual_norm: norm(&fx),
        residual: fx.iter().copied().collect(),
        x: x.iter().copied().collect(),
        iterations,
        converged,
        accepted_norms: accepted,
    })
}

/// Phase terms at one oscillation frequency. `phi_g_deg` is the plain sum;
/// the loop phase modulo 360° is [`PhaseBudget::open_loop_wrapped_deg`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBudget {
    pub omega_rad_s: f64,
    pub phi_p_deg: f64,
    pub phi_d_deg: f64,
    pub phi_w_deg: f64,
    pub phi_c_deg: f64,
    pub phi_g_deg: f64,
}

impl PhaseBudget {
    pub fn new(omega_rad_s: f64, phi_p_deg: f64, phi_d_deg: f64, phi_w_deg: f64, phi_c_deg: f64) -> Self {
        Self { omega_rad_s, phi_p_deg, phi_d_deg, phi_w_deg, phi_c_deg, phi_g_deg: phi_c_deg + phi_d_deg + phi_p_deg + phi_w_deg }
    }

    pub fn open_loop_wrapped_deg(&self) -> f64 {
        wrap_deg(self.phi_g_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub start_index: usize,
    pub t0_s: [f64; 4],
    pub t_s: [f64; 4],
    pub residual_norm: f64,
    pub residual_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Spread of the lead-lag gain across the band, dB.
    pub gain_spread_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub washout_tw_s: f64,
    /// Message rate of the downlink; `None` skips the Nyquist guard.
    pub channel_rate_hz: Option<f64>,
    pub band_hz: (f64, f64),
    pub n_starts: usize,
    pub dogleg: DoglegOptions,
    /// Return the smallest-residual start instead of failing when no start
    /// converges. The report is then marked `converged = false`.
    pub best_effort: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            washout_tw_s: DEFAULT_WASHOUT_S,
            channel_rate_hz: Some(3.5),
            band_hz: (0.1, 2.0),
            n_starts: 8,
            dogleg: DoglegOptions::default(),
            best_effort: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub design: CompensatorDesign,
    pub budgets: [PhaseBudget; 2],
    pub residual_norm: f64,
    pub residual_inf: f64,
    pub converged: bool,
    pub unnormalized_residuals: bool,
    pub selected_start: usize,
    pub starts: Vec<StartDiagnostics>,
    pub gain_selection: Option<GainSelection>,
}

/// Deterministic starting points: time constants drawn from a log grid over
/// [0.05, 5] s with the four indices staggered so no start is symmetric.
pub fn start_points(n: usize) -> Vec<[f64; 4]> {
    let grid = logspace(0.05, 5.0, n.max(2));
    let n = grid.len();
    (0..n)
        .map(|i| [grid[i], grid[n - 1 - i], grid[(i + 3) % n], grid[(i + 5) % n]])
        .collect()
}

fn gain_spread_db(t: &[f64; 4], band_hz: (f64, f64)) -> Result<f64> {
    let tf = leadlag_tf(t[0], t[1], t[2], t[3])?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in tf.freq_response(&logspace(band_hz.0, band_hz.1, 50))? {
        lo = lo.min(p.mag_db());
        hi = hi.max(p.mag_db());
    }
    Ok(hi - lo)
}

/// Result of the multi-start phase solve, before a gain is chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSolution {
    pub t_s: [f64; 4],
    pub residual_norm: f64,
    pub residual_inf: f64,
    pub converged: bool,
    pub unnormalized: bool,
    pub selected_start: usize,
    pub starts: Vec<StartDiagnostics>,
}

/// Solve for lead-lag time constants that cancel the given non-compensator
/// phases. Among converged starts the flattest compensator gain wins (lowest
/// start index on ties); with none converged the smallest residual is
/// reported as a design failure.
pub fn solve_phase(ctx: &PhaseContext, opts: &DesignOptions) -> Result<PhaseSolution> {
    let mut starts = Vec::new();
    let mut unnormalized = false;
    for (i, t0) in start_points(opts.n_starts).into_iter().enumerate() {
        let x0: Vec<f64> = t0.iter().map(|t| t.ln()).collect();
        let res = dogleg_solve(
            |x| {
                let r = residual_f(x, ctx);
                Ok(r.f.to_vec())
            },
            &x0,
            &opts.dogleg,
        )?;
        let r = residual_f(&res.x, ctx);
        unnormalized |= r.unnormalized;
        let t = time_constants_from_log(&res.x);
        starts.push(StartDiagnostics {
            start_index: i,
            t0_s: t0,
            t_s: t,
            residual_norm: res.residual_norm,
            residual_inf: r.f.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            iterations: res.iterations,
            converged: res.converged,
            gain_spread_db: gain_spread_db(&t, opts.band_hz)?,
        });
    }
    if unnormalized {
        log::warn!("poddesign: cross-mode phase within {DENOM_GUARD_DEG}° of zero; using unnormalized residuals");
    }
    let best = starts
        .iter()
        .filter(|s| s.converged)
        .min_by(|a, b| a.gain_spread_db.total_cmp(&b.gain_spread_db).then(a.start_index.cmp(&b.start_index)));
    match best {
        Some(s) => Ok(PhaseSolution {
            t_s: s.t_s,
            residual_norm: s.residual_norm,
            residual_inf: s.residual_inf,
            converged: true,
            unnormalized,
            selected_start: s.start_index,
            starts: starts.clone(),
        }),
        None => {
            let best = starts.iter().min_by(|a, b| a.residual_norm.total_cmp(&b.residual_norm)).unwrap();
            if opts.best_effort {
                log::warn!("poddesign: no start converged, keeping start {} with residual {:.3e}", best.start_index, best.residual_norm);
                return Ok(PhaseSolution {
                    t_s: best.t_s,
                    residual_norm: best.residual_norm,
                    residual_inf: best.residual_inf,
                    converged: false,
                    unnormalized,
                    selected_start: best.start_index,
                    starts: starts.clone(),
                });
            }
            Err(Error::Infeasible(format!(
                "phase design did not converge from any of {} starts; best residual {:.3e} at start {} (T = {:?})",
                starts.len(),
                best.residual_norm,
                best.start_index,
                best.t_s
            )))
        }
    }
}

fn check_nyquist(modes: (f64, f64), opts: &DesignOptions) -> Result<()> {
    if let Some(rate) = opts.channel_rate_hz {
        let limit = nyquist_limit(rate)?;
        for w in [modes.0, modes.1] {
            let f = w / (2.0 * PI);
            if f > limit {
                return Err(Error::NyquistLimit { mode_hz: f, limit_hz: limit });
            }
        }
    }
    Ok(())
}

/// Design one loop's lead-lag pair so the loop
/// `washout · C · D′ · P` has zero phase at both oscillation frequencies.
/// The gain is left at zero for [`select_gain`].
pub fn design_compensator(
    plant: &TransferFunction,
    surrogate: &DelaySurrogate,
    modes: (f64, f64),
    loop_kind: LoopKind,
    opts: &DesignOptions,
) -> Result<DesignReport> {
    check_nyquist(modes, opts)?;
    let w = washout(opts.washout_tw_s)?;
    let omega = [modes.0, modes.1];
    let mut parts = [(0.0, 0.0, 0.0); 2];
    for (i, om) in omega.iter().enumerate() {
        parts[i] = (phase_at(plant, *om)?, phase_at(&surrogate.pade, *om)?, phase_at(&w, *om)?);
    }
    let ctx = PhaseContext {
        omega,
        other_phase_deg: [parts[0].0 + parts[0].1 + parts[0].2, parts[1].0 + parts[1].1 + parts[1].2],
    };
    let sol = solve_phase(&ctx, opts)?;
    let budgets = [0, 1].map(|i| {
        PhaseBudget::new(omega[i], parts[i].0, parts[i].1, parts[i].2, leadlag_phase_deg(&sol.t_s, omega[i]))
    });
    Ok(DesignReport {
        design: CompensatorDesign {
            t1_s: sol.t_s[0],
            t2_s: sol.t_s[1],
            t3_s: sol.t_s[2],
            t4_s: sol.t_s[3],
            gain: 0.0,
            washout_tw_s: opts.washout_tw_s,
            limit_pu: 0.0,
            loop_kind,
        },
        budgets,
        residual_norm: sol.residual_norm,
        residual_inf: sol.residual_inf,
        converged: sol.converged,
        unnormalized_residuals: sol.unnormalized,
        selected_start: sol.selected_start,
        starts: sol.starts,
        gain_selection: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsInput {
    pub k: f64,
    pub p_r: f64,
    pub q_r: f64,
    pub s_n: f64,
}

/// Fixed modulation limits around the dispatch point:
/// `p_l = k·p_R`, `q_l = √(S_n² − (p_l + p_R)²) − q_R`.
pub fn power_limits(input: &LimitsInput) -> Result<(f64, f64)> {
    let LimitsInput { k, p_r, q_r, s_n } = *input;
    if !(0.0..=1.0).contains(&k) || !(s_n > 0.0) || !(p_r >= 0.0) {
        return Err(Error::Infeasible(format!(
            "limits need 0 <= k <= 1, S_n > 0 and p_R >= 0 (k = {k}, S_n = {s_n}, p_R = {p_r})"
        )));
    }
    let p_l = k * p_r;
    let p_peak = p_l + p_r;
    if p_peak > s_n {
        return Err(Error::Infeasible(format!("(1+k)·p_R = {p_peak} exceeds S_n = {s_n}")));
    }
    let q_room = (s_n * s_n - p_peak * p_peak).sqrt();
    if q_r > q_room {
        return Err(Error::Infeasible(format!("q_R = {q_r} exceeds the available {q_room}")));
    }
    Ok((p_l, q_room - q_r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCandidate {
    pub gain: f64,
    pub min_zeta: f64,
    pub stable: bool,
    pub margin_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSelection {
    pub gain: f64,
    pub min_zeta: f64,
    pub baseline_min_zeta: f64,
    pub candidates: Vec<GainCandidate>,
}

/// Gain-margin factor: a candidate must also be stable at this multiple
/// (6 dB).
pub const GAIN_MARGIN_FACTOR: f64 = 2.0;

/// 40 log-spaced gains over four decades centred on the gain that makes the
/// unit-gain loop magnitude one at the larger of the two modes.
pub fn default_gain_grid(parts: &LoopParts, modes: (f64, f64)) -> Result<Vec<f64>> {
    let unit = LoopParts { gain: 1.0, ..parts.clone() };
    let l = crate::analysis::open_loop(&unit)?;
    let peak = [modes.0, modes.1]
        .iter()
        .map(|w| l.eval_jw(*w).map(|v| v.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Design("loop has zero gain at both modes".into()));
    }
    let k_ref = 1.0 / peak;
    Ok(logspace(k_ref * 1e-2, k_ref * 1e2, 40))
}

/// Pick the gain maximizing the smaller target-mode damping ratio, among
/// gains whose closed loop is stable at both K and 2K. K = 0 is always
/// feasible and wins when nothing beats the open-loop damping.
pub fn select_gain(parts: &LoopParts, modes: (f64, f64), grid: &[f64]) -> Result<GainSelection> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|k| *k < 0.0) {
        return Err(Error::Design("gain grid must be ascending and non-negative".into()));
    }
    let eval = |k: f64| -> Result<(f64, bool)> {
        let case = closed_loop_eigs(&LoopParts { gain: k, ..parts.clone() }, modes)?;
        let min_zeta = case.modes[..2].iter().map(|m| m.damping_ratio).fold(f64::INFINITY, f64::min);
        Ok((min_zeta, case.all_eigenvalues.iter().all(|l| l.re < 0.0)))
    };
    let (baseline, _) = eval(0.0)?;
    let mut best = (0.0, baseline);
    let mut candidates = Vec::with_capacity(grid.len());
    for &k in grid {
        let (zeta, stable) = match eval(k) {
            Ok(v) => v,
            // A mode that cannot be tracked at this gain is treated as
            // infeasible rather than aborting the sweep.
            Err(Error::AmbiguousMode { .. }) => (f64::NAN, false),
            Err(e) => return Err(e),
        };
        let margin_ok = stable
            && match eval(GAIN_MARGIN_FACTOR * k) {
                Ok((_, s)) => s,
                Err(Error::AmbiguousMode { .. }) => false,
                Err(e) => return Err(e),
            };
        candidates.push(GainCandidate { gain: k, min_zeta: zeta, stable, margin_ok });
        if stable && margin_ok && zeta > best.1 {
            best = (k, zeta);
        }
    }
    Ok(GainSelection { gain: best.0, min_zeta: best.1, baseline_min_zeta: baseline, candidates })
}

/// Target-mode eigenvalues at zero gain, for reference in reports.
pub fn baseline_modes(parts: &LoopParts, modes: (f64, f64)) -> Result<Vec<ModeReport>> {
    Ok(closed_loop_eigs(&LoopParts { gain: 0.0, ..parts.clone() }, modes)?.modes[..2].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cancelled_leadlag_is_unity() {
        let tf = leadlag_tf(0.3, 0.3, 2.0, 2.0).unwrap();
        for w in [0.1, 1.0, 10.0] {
            assert!((tf.eval_jw(w).unwrap() - 1.0).norm() < 1e-14);
            assert!(phase_at(&tf, w).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn leadlag_phase_matches_complex_evaluation() {
        let tf = leadlag_tf(1.0, 0.1, 0.5, 0.5).unwrap();
        let expect = (1.0f64.atan() - 0.1f64.atan()).to_degrees();
        assert_relative_eq!(expect, 39.29, epsilon = 0.01);
        assert_relative_eq!(phase_at(&tf, 1.0).unwrap(), expect, epsilon = 1e-9);
        assert_relative_eq!(tf.eval_jw(1.0).unwrap().arg().to_degrees(), expect, epsilon = 1e-9);
    }

    #[test]
    fn single_lead_maximum() {
        let (alpha, t2) = (10.0f64, 0.05);
        let t = [alpha * t2, t2, 1.0, 1.0];
        let w_max = 1.0 / (t2 * alpha.sqrt());
        let phi = leadlag_phase_deg(&t, w_max);
        assert_relative_eq!(phi.to_radians().sin(), (alpha - 1.0) / (alpha + 1.0), epsilon = 1e-12);
        assert!(leadlag_phase_deg(&t, w_max * 1.1) < phi && leadlag_phase_deg(&t, w_max / 1.1) < phi);
    }

    #[test]
    fn nonpositive_time_constant_rejected() {
        assert!(leadlag_tf(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(leadlag_tf(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn phase_at_basics() {
        assert_eq!(phase_at(&TransferFunction::unity(), 2.0).unwrap(), 0.0);
        let integ = TransferFunction::new(vec![1.0], vec![0.0, 1.0]).unwrap();
        for w in [0.1, 1.0, 30.0] {
            assert_relative_eq!(phase_at(&integ, w).unwrap(), -90.0, epsilon = 1e-12);
        }
        let pade = crate::delaymodel::pade_approx(0.3, 4).unwrap();
        let w = 2.0 * PI * 0.45;
        assert!((phase_at(&pade, w).unwrap() - (-(w * 0.3).to_degrees())).abs() < 0.2);
        assert!(phase_at(&integ, 0.0).is_err());
    }

    fn ctx(a: f64, b: f64) -> PhaseContext {
        PhaseContext { omega: [2.0, 5.0], other_phase_deg: [a, b] }
    }

    #[test]
    fn residual_arithmetic() {
        let x = [0.0; 4];
        let r = residual_f(&x, &ctx(-30.0, -60.0));
        assert!(!r.unnormalized);
        assert_relative_eq!(r.f[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(r.f[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_vanishes_at_exact_cancellation() {
        let t = [0.8, 0.1, 0.3, 0.2];
        let x: Vec<f64> = t.iter().map(|v: &f64| v.ln()).collect();
        let c = ctx(-leadlag_phase_deg(&t, 2.0), -leadlag_phase_deg(&t, 5.0));
        let r = residual_f(&x, &c);
        assert!(r.f[0].abs() < 1e-12 && r.f[1].abs() < 1e-12);
    }

    #[test]
    fn residual_mode_relabeling() {
        let x = [0.2f64.ln(), 0.05f64.ln(), 1.0f64.ln(), 0.7f64.ln()];
        let a = residual_f(&x, &PhaseContext { omega: [2.0, 5.0], other_phase_deg: [-40.0, -70.0] });
        let b = residual_f(&x, &PhaseContext { omega: [5.0, 2.0], other_phase_deg: [-70.0, -40.0] });
        assert_relative_eq!(a.f[0], b.f[1], epsilon = 1e-12);
        assert_relative_eq!(a.f[1], b.f[0], epsilon = 1e-12);
    }

    #[test]
    fn residual_guard_falls_back() {
        let r = residual_f(&[0.0; 4], &ctx(-30.0, 0.5));
        assert!(r.unnormalized);
        assert_relative_eq!(r.f[0], -30.0);
        assert_relative_eq!(r.f[1], 0.5);
    }

    #[test]
    fn dogleg_linear() {
        let res = dogleg_solve(|x| Ok(vec![x[0] + x[1] - 3.0, x[0] - x[1] - 1.0]), &[0.0, 0.0], &DoglegOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.residual_norm < 1e-12, "{res:?}");
        assert_relative_eq!(res.x[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(res.x[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn dogleg_rosenbrock() {
        let res = dogleg_solve(
            |x| Ok(vec![1.0 - x[0], 10.0 * (x[1] - x[0] * x[0])]),
            &[-1.2, 1.0],
            &DoglegOptions::default(),
        )
        .unwrap();
        assert!(res.converged && res.iterations <= 200);
        assert!(res.residual_norm < 1e-8);
        assert!((res.x[0] - 1.0).abs() < 1e-8 && (res.x[1] - 1.0).abs() < 1e-8);
        assert!(res.accepted_norms.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dogleg_reports_non_convergence() {
        // x² + 1 has no real root.
        let res = dogleg_solve(|x| Ok(vec![x[0] * x[0] + 1.0]), &[3.0], &DoglegOptions::default()).unwrap();
        assert!(!res.converged);
        assert!((res.residual_norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dogleg_propagates_residual_errors() {
        let r = dogleg_solve(|x| if x[0] > 0.5 { Err(Error::Design("boom".into())) } else { Ok(vec![x[0] - 1.0]) }, &[0.0], &DoglegOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn synthetic_phase_targets_recovered() {
        let t_true = [0.9, 0.15, 0.4, 0.25];
        let c = ctx(-leadlag_phase_deg(&t_true, 2.0), -leadlag_phase_deg(&t_true, 5.0));
        let sol = solve_phase(&c, &DesignOptions::default()).unwrap();
        for (i, w) in [2.0, 5.0].iter().enumerate() {
            let got = leadlag_phase_deg(&sol.t_s, *w);
            assert!((got + c.other_phase_deg[i]).abs() < 0.1);
        }
    }

    #[test]
    fn zero_delay_design_zeroes_loop_phase() {
        // First-order lag with -30° at 1 rad/s and -60° at 3 rad/s.
        let t = 30f64.to_radians().tan();
        let plant = TransferFunction::new(vec![1.0], vec![1.0, t]).unwrap();
        assert_relative_eq!(phase_at(&plant, 3.0).unwrap(), -60.0, epsilon = 1e-9);
        let surrogate = crate::delaymodel::DelaySurrogate {
            theta_s: 0.0,
            pade: TransferFunction::unity(),
            order: 0,
            band_hz: (0.1, 2.0),
            max_phase_err_deg: 0.0,
            max_mag_dev: 0.0,
        };
        let rep = design_compensator(&plant, &surrogate, (1.0, 3.0), LoopKind::Active, &DesignOptions::default()).unwrap();
        let l = rep.design.leadlag().unwrap().series(&rep.design.washout().unwrap()).series(&plant);
        for w in [1.0, 3.0] {
            assert!(wrap_deg(phase_at(&l, w).unwrap()).abs() < 1.0);
        }
        for b in &rep.budgets {
            assert_relative_eq!(b.phi_g_deg, b.phi_c_deg + b.phi_d_deg + b.phi_p_deg + b.phi_w_deg, epsilon = 1e-9);
        }
    }

    #[test]
    fn nyquist_guard() {
        let plant = TransferFunction::new(vec![1.0], vec![1.0, 0.1]).unwrap();
        let s = crate::delaymodel::build_surrogate(0.3, (0.1, 2.0)).unwrap();
        let opts = DesignOptions { channel_rate_hz: Some(3.2), ..Default::default() };
        let err = design_compensator(&plant, &s, (2.0 * PI * 0.45, 2.0 * PI * 1.9), LoopKind::Active, &opts).unwrap_err();
        match &err {
            Error::NyquistLimit { mode_hz, limit_hz } => {
                assert_relative_eq!(*mode_hz, 1.9, epsilon = 1e-12);
                assert_eq!(*limit_hz, 1.6);
            }
            e => panic!("{e:?}"),
        }
        assert!(err.to_string().contains("NY-LIMIT"));
    }

    #[test]
    fn washout_properties() {
        let w = washout(5.0).unwrap();
        assert_eq!(w.dc_gain(), 0.0);
        assert_relative_eq!(w.eval_jw(1.0 / 5.0).unwrap().norm(), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        let om = 2.0 * PI * 0.45;
        let lead = phase_at(&w, om).unwrap();
        assert_relative_eq!(lead, (1.0 / (om * 5.0)).atan().to_degrees(), epsilon = 1e-9);
        assert!(lead < 5.0);
        assert!(washout(0.0).is_err());
    }

    #[test]
    fn limits_fixtures() {
        let (p, q) = power_limits(&LimitsInput { k: 0.1, p_r: 0.5, q_r: 0.0, s_n: 1.0 }).unwrap();
        assert_relative_eq!(p, 0.05, epsilon = 1e-15);
        assert_relative_eq!(q, (1.0f64 - 0.3025).sqrt(), epsilon = 1e-15);
        assert!((q - 0.8352).abs() < 1e-4);
        let (p, q) = power_limits(&LimitsInput { k: 0.3, p_r: 0.0, q_r: 0.2, s_n: 1.0 }).unwrap();
        assert_eq!(p, 0.0);
        assert_relative_eq!(q, 0.8);
        assert!(matches!(
            power_limits(&LimitsInput { k: 0.5, p_r: 0.8, q_r: 0.0, s_n: 1.0 }),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn start_points_are_deterministic_and_in_range() {
        let s = start_points(8);
        assert_eq!(s.len(), 8);
        assert_eq!(s, start_points(8));
        assert!(s.iter().flatten().all(|t| (0.05 - 1e-12..=5.0 + 1e-12).contains(t)));
    }
}
