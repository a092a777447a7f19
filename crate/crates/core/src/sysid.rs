//! Plant identification from PRBS experiments: excitation, nonparametric
//! frequency-response estimation and rational fitting.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex as FftComplex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{poly, simulate, wrap_deg, FrequencyResponsePoint, ModeReport, StateSpace, TransferFunction, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrbsConfig {
    pub register_bits: u32,
    pub chip_period_s: f64,
    pub amplitude_pu: f64,
    pub duration_s: f64,
}

impl Default for PrbsConfig {
    fn default() -> Self {
        Self { register_bits: 10, chip_period_s: 0.1, amplitude_pu: 0.05, duration_s: 818.4 }
    }
}

impl PrbsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=16).contains(&self.register_bits) {
            return Err(Error::Sysid(format!(
                "no primitive polynomial for a {}-bit register (supported 3..=16)",
                self.register_bits
            )));
        }
        if !(self.chip_period_s > 0.0 && self.amplitude_pu > 0.0 && self.duration_s > 0.0) {
            return Err(Error::Sysid("chip period, amplitude and duration must be positive".into()));
        }
        Ok(())
    }

    pub fn period_chips(&self) -> usize {
        (1usize << self.register_bits) - 1
    }

    pub fn period_s(&self) -> f64 {
        self.period_chips() as f64 * self.chip_period_s
    }
}

/// Feedback taps (1-based) of a maximal-length Fibonacci LFSR per register
/// length.
fn lfsr_taps(bits: u32) -> Option<&'static [u32]> {
    Some(match bits {
        3 => &[3, 2],
        4 => &[4, 3],
        5 => &[5, 3],
        6 => &[6, 5],
        7 => &[7, 6],
        8 => &[8, 6, 5, 4],
        9 => &[9, 5],
        10 => &[10, 7],
        11 => &[11, 9],
        12 => &[12, 11, 10, 4],
        13 => &[13, 12, 11, 8],
        14 => &[14, 13, 12, 2],
        15 => &[15, 14],
        16 => &[16, 15, 13, 4],
        _ => return None,
    })
}

/// One period of the m-sequence as ±1 chips.
pub fn prbs_chips(bits: u32) -> Result<Vec<i8>> {
    let taps = lfsr_taps(bits)
        .ok_or_else(|| Error::Sysid(format!("no primitive polynomial for a {bits}-bit register")))?;
    let len = (1usize << bits) - 1;
    let mut state: u32 = (1 << bits) - 1;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(if state & 1 == 1 { 1 } else { -1 });
        let fb = taps.iter().fold(0u32, |acc, t| acc ^ ((state >> (bits - t)) & 1));
        state = (state >> 1) | (fb << (bits - 1));
    }
    Ok(out)
}

/// PRBS sampled at `sample_rate_hz`: ±amplitude chips held for the chip
/// period, repeated to the configured duration.
pub fn gen_prbs(cfg: &PrbsConfig, sample_rate_hz: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(sample_rate_hz > 0.0) {
        return Err(Error::Sysid("sample rate must be positive".into()));
    }
    let chips = prbs_chips(cfg.register_bits)?;
    let n = (cfg.duration_s * sample_rate_hz).round() as usize;
    Ok((0..n)
        .map(|k| {
            let t = k as f64 / sample_rate_hz;
            // Small bias keeps sample instants that coincide with chip edges
            // on the new chip despite rounding.
            let chip = ((t + 1e-9) / cfg.chip_period_s).floor() as usize;
            cfg.amplitude_pu * chips[chip % chips.len()] as f64
        })
        .collect())
}

/// FRF estimate with per-point magnitude-squared coherence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrfEstimate {
    pub points: Vec<FrequencyResponsePoint>,
    pub coherence: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
    /// No taper. Leakage-free when each segment spans whole periods of a
    /// periodic excitation.
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WelchOptions {
    /// Segment length in samples; `None` picks a quarter of the record.
    pub segment_len: Option<usize>,
    pub window: Window,
}

pub const MIN_COHERENCE: f64 = 0.6;
pub const MAX_LOW_COHERENCE_FRACTION: f64 = 0.2;

/// Welch H1 estimate `S_uy / S_uu` with Hann-windowed, mean-removed,
/// 50%-overlap segments, restricted to the band.
pub fn estimate_frf(
    u: &[f64],
    y: &[f64],
    sample_rate_hz: f64,
    band_hz: (f64, f64),
    opts: WelchOptions,
) -> Result<FrfEstimate> {
    if u.len() != y.len() {
        return Err(Error::Sysid(format!("input has {} samples, output {}", u.len(), y.len())));
    }
    let (lo, hi) = band_hz;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Sysid(format!("band ({lo}, {hi}) invalid")));
    }
    let duration = u.len() as f64 / sample_rate_hz;
    if duration < 20.0 / lo {
        return Err(Error::Sysid(format!(
            "record of {duration:.1} s too short, need {:.1} s for the {lo} Hz band edge",
            20.0 / lo
        )));
    }
    let seg = opts.segment_len.unwrap_or(u.len() / 4).min(u.len());
    if seg < 16 {
        return Err(Error::Sysid("segment too short".into()));
    }
    let hop = seg / 2;
    let window: Vec<f64> = match opts.window {
        Window::Hann => (0..seg).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos()).collect(),
        Window::Rectangular => vec![1.0; seg],
    };
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(seg);
    let df = sample_rate_hz / seg as f64;
    let bins: Vec<usize> = (1..seg / 2).filter(|k| {
        let f = *k as f64 * df;
        f >= lo && f <= hi
    }).collect();
    if bins.is_empty() {
        return Err(Error::Sysid("no frequency bins inside the band; use longer segments".into()));
    }
    let mut suu = vec![0.0; bins.len()];
    let mut syy = vec![0.0; bins.len()];
    let mut suy = vec![C64::new(0.0, 0.0); bins.len()];
    let spectrum = |x: &[f64]| -> Vec<FftComplex<f64>> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let mut buf: Vec<FftComplex<f64>> =
            x.iter().zip(&window).map(|(v, w)| FftComplex::new((v - mean) * w, 0.0)).collect();
        fft.process(&mut buf);
        buf
    };
    let mut start = 0;
    let mut n_seg = 0;
    while start + seg <= u.len() {
        let us = spectrum(&u[start..start + seg]);
        let ys = spectrum(&y[start..start + seg]);
        for (i, &k) in bins.iter().enumerate() {
            let (a, b) = (C64::new(us[k].re, us[k].im), C64::new(ys[k].re, ys[k].im));
            suu[i] += a.norm_sqr();
            syy[i] += b.norm_sqr();
            suy[i] += a.conj() * b;
        }
        n_seg += 1;
        start += hop;
    }
    if n_seg == 0 {
        return Err(Error::Sysid("record shorter than one segment".into()));
    }
    let mut points = Vec::with_capacity(bins.len());
    let mut coherence = Vec::with_capacity(bins.len());
    for (i, &k) in bins.iter().enumerate() {
        if suu[i] <= 0.0 {
            points.push(FrequencyResponsePoint { freq_hz: k as f64 * df, value: C64::new(0.0, 0.0) });
            coherence.push(0.0);
            continue;
        }
        points.push(FrequencyResponsePoint { freq_hz: k as f64 * df, value: suy[i] / suu[i] });
        let denom = suu[i] * syy[i];
        coherence.push(if denom > 0.0 { suy[i].norm_sqr() / denom } else { 0.0 });
    }
    let bad = coherence.iter().filter(|c| **c < MIN_COHERENCE).count();
    if bad as f64 > MAX_LOW_COHERENCE_FRACTION * coherence.len() as f64 {
        return Err(Error::LowCoherence { bad, total: coherence.len() });
    }
    Ok(FrfEstimate { points, coherence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedPlant {
    pub tf: TransferFunction,
    pub fit_band_hz: (f64, f64),
    pub frf_fit_mag_err_db: f64,
    pub frf_fit_phase_err_deg: f64,
    pub modes: Vec<ModeReport>,
    /// Number of fitted poles reflected from the right half plane.
    pub reflected_poles: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Numerator degree; defaults to `order - 1` (strictly proper).
    pub num_degree: Option<usize>,
    pub max_iterations: usize,
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { num_degree: None, max_iterations: 20, rel_tol: 1e-8 }
    }
}

/// Sanathanan–Koerner iterated weighted least squares fit of a rational
/// function of denominator degree `order` to FRF samples.
pub fn fit_rational(frf: &[FrequencyResponsePoint], order: usize, opts: FitOptions) -> Result<IdentifiedPlant> {
    if order < 4 {
        return Err(Error::Sysid(format!("fit order must be >= 4 to hold two mode pairs, got {order}")));
    }
    fit_rational_any(frf, order, opts)
}

/// As [`fit_rational`] without the two-mode order floor; used to show
/// under-modelling.
pub fn fit_rational_any(frf: &[FrequencyResponsePoint], order: usize, opts: FitOptions) -> Result<IdentifiedPlant> {
    if order == 0 {
        return Err(Error::Sysid("fit order must be positive".into()));
    }
    if frf.len() < 4 * order {
        return Err(Error::Sysid(format!("need at least {} FRF points for order {order}, got {}", 4 * order, frf.len())));
    }
    let m = opts.num_degree.unwrap_or(order - 1);
    if m > order {
        return Err(Error::Sysid("numerator degree exceeds denominator degree".into()));
    }
    let f_lo = frf.iter().map(|p| p.freq_hz).fold(f64::INFINITY, f64::min);
    let f_hi = frf.iter().map(|p| p.freq_hz).fold(0.0, f64::max);
    // Normalized frequency keeps the Vandermonde columns comparable.
    let w0 = 2.0 * PI * (f_lo * f_hi).sqrt();
    let s: Vec<C64> = frf.iter().map(|p| C64::new(0.0, 2.0 * PI * p.freq_hz / w0)).collect();
    let h: Vec<C64> = frf.iter().map(|p| p.value).collect();
    let n_unknown = (m + 1) + order;
    let rows = 2 * frf.len();
    // den monic in normalized s: d_order = 1.
    let mut den_prev: Vec<f64> = {
        let mut d = vec![0.0; order + 1];
        d[order] = 1.0;
        d
    };
    let mut num = vec![0.0; m + 1];
    let mut iterations = 0;
    let mut weights: Vec<f64> = vec![1.0; frf.len()];
    for it in 0..opts.max_iterations.max(1) {
        iterations = it + 1;
        let mut a = DMatrix::<f64>::zeros(rows, n_unknown);
        let mut b = DVector::<f64>::zeros(rows);
        for (i, (si, hi)) in s.iter().zip(&h).enumerate() {
            let w = weights[i];
            let mut sp = C64::new(1.0, 0.0);
            let mut powers = Vec::with_capacity(order + 1);
            for _ in 0..=order {
                powers.push(sp);
                sp *= si;
            }
            for k in 0..=m {
                let v = powers[k] * w;
                a[(2 * i, k)] = v.re;
                a[(2 * i + 1, k)] = v.im;
            }
            for k in 0..order {
                let v = -hi * powers[k] * w;
                a[(2 * i, m + 1 + k)] = v.re;
                a[(2 * i + 1, m + 1 + k)] = v.im;
            }
            let rhs = hi * powers[order] * w;
            b[2 * i] = rhs.re;
            b[2 * i + 1] = rhs.im;
        }
        // Column equilibration.
        let scales: Vec<f64> = (0..n_unknown)
            .map(|j| {
                let nrm = a.column(j).norm();
                if nrm > 0.0 {
                    nrm
                } else {
                    1.0
                }
            })
            .collect();
        for (j, sc) in scales.iter().enumerate() {
            a.column_mut(j).scale_mut(1.0 / sc);
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        // Minimum-norm solution; an over-sized order leaves a common-factor
        // direction in the null space, which is harmless. Fewer independent
        // columns than the denominator needs means the data carry no
        // dynamics to fit.
        let eps = 1e-12 * smax;
        let rank = svd.singular_values.iter().filter(|v| **v > eps).count();
        if !(smax > 0.0) || rank < order + 1 {
            return Err(Error::Sysid(format!(
                "degenerate data: singular normal equations (rank {rank} of {n_unknown})"
            )));
        }
        let x = svd
            .solve(&b, eps)
            .map_err(|e| Error::Sysid(format!("degenerate data: {e}")))?;
        let x: Vec<f64> = x.iter().zip(&scales).map(|(v, sc)| v / sc).collect();
        let new_num = x[..=m].to_vec();
        let mut new_den = x[m + 1..].to_vec();
        new_den.push(1.0);
        let change = {
            let diff: f64 = new_num
                .iter()
                .zip(&num)
                .chain(new_den.iter().zip(&den_prev))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let size: f64 = new_num.iter().chain(&new_den).map(|v| v * v).sum::<f64>().sqrt();
            diff / size.max(1e-300)
        };
        num = new_num;
        den_prev = new_den;
        weights = s.iter().map(|si| 1.0 / poly::eval(&den_prev, *si).norm()).collect();
        if change < opts.rel_tol {
            break;
        }
    }
    // Reflect unstable poles.
    let roots = poly::roots(&den_prev)?;
    let reflected = roots.iter().filter(|r| r.re > 0.0).count();
    if reflected > 0 {
        log::info!("sysid: reflecting {reflected} unstable fitted pole(s) into the left half plane");
        let stable: Vec<C64> = roots.iter().map(|r| if r.re > 0.0 { C64::new(-r.re, r.im) } else { *r }).collect();
        den_prev = poly::from_roots(&stable);
        num = refit_numerator(&s, &h, &den_prev, m)?;
    }
    // Undo the frequency normalization: coefficient k scales by w0^-k.
    let num_s: Vec<f64> = num.iter().enumerate().map(|(k, c)| c / w0.powi(k as i32)).collect();
    let den_s: Vec<f64> = den_prev.iter().enumerate().map(|(k, c)| c / w0.powi(k as i32)).collect();
    let tf = TransferFunction::new(num_s, den_s)?;
    let (mag_err, phase_err) = fit_errors(&tf, frf)?;
    let mut modes: Vec<ModeReport> = tf
        .poles()?
        .into_iter()
        .filter(|p| p.im > 0.0)
        .map(ModeReport::from_eigenvalue)
        .collect();
    modes.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    Ok(IdentifiedPlant {
        tf,
        fit_band_hz: (f_lo, f_hi),
        frf_fit_mag_err_db: mag_err,
        frf_fit_phase_err_deg: phase_err,
        modes,
        reflected_poles: reflected,
        iterations,
    })
}

/// Least-squares numerator for a fixed denominator, weighted by `1/|D|` so
/// the residual is the model error itself.
fn refit_numerator(s: &[C64], h: &[C64], den: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::zeros(2 * s.len(), m + 1);
    let mut b = DVector::<f64>::zeros(2 * s.len());
    for (i, (si, hi)) in s.iter().zip(h).enumerate() {
        let w = 1.0 / poly::eval(den, *si).norm();
        let mut sp = C64::new(w, 0.0);
        for k in 0..=m {
            a[(2 * i, k)] = sp.re;
            a[(2 * i + 1, k)] = sp.im;
            sp *= si;
        }
        let rhs = hi * poly::eval(den, *si) * w;
        b[2 * i] = rhs.re;
        b[2 * i + 1] = rhs.im;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(&b, 1e-15 * smax)
        .map(|x| x.iter().copied().collect())
        .map_err(|e| Error::Sysid(format!("degenerate data: {e}")))
}

/// Worst magnitude (dB) and phase (degrees) mismatch between a model and FRF
/// samples.
pub fn fit_errors(tf: &TransferFunction, frf: &[FrequencyResponsePoint]) -> Result<(f64, f64)> {
    let mut mag: f64 = 0.0;
    let mut phase: f64 = 0.0;
    for p in frf {
        let v = tf.eval_jw(2.0 * PI * p.freq_hz)?;
        mag = mag.max((20.0 * (v.norm() / p.value.norm()).log10()).abs());
        phase = phase.max(wrap_deg((v / p.value).arg().to_degrees()).abs());
    }
    Ok((mag, phase))
}

/// The two most lightly damped underdamped pole pairs inside the fit band,
/// as (ω₁, ω₂) in rad/s with ω₁ < ω₂. Equal damping ranks the lower
/// frequency first.
pub fn find_modes(plant: &IdentifiedPlant) -> Result<(f64, f64)> {
    let (lo, hi) = plant.fit_band_hz;
    let mut cands: Vec<ModeReport> = plant
        .tf
        .poles()?
        .into_iter()
        .filter(|p| p.im > 0.0)
        .map(ModeReport::from_eigenvalue)
        .filter(|m| m.damping_ratio < 1.0 && m.freq_hz >= lo && m.freq_hz <= hi)
        .collect();
    select_two_modes(&mut cands)
}

pub(crate) fn select_two_modes(cands: &mut [ModeReport]) -> Result<(f64, f64)> {
    if cands.len() < 2 {
        return Err(Error::Sysid(format!(
            "need two underdamped pole pairs in band, found {}",
            cands.len()
        )));
    }
    cands.sort_by(|a, b| a.damping_ratio.total_cmp(&b.damping_ratio).then(a.freq_hz.total_cmp(&b.freq_hz)));
    let mut w = [cands[0].eigenvalue.im, cands[1].eigenvalue.im];
    w.sort_by(f64::total_cmp);
    Ok((w[0], w[1]))
}

/// One identification experiment: input and output records.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub sample_rate_hz: f64,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl ExperimentRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,u_pu,y_pu\n");
        for (k, (u, y)) in self.u.iter().zip(&self.y).enumerate() {
            let t = k as f64 / self.sample_rate_hz;
            s.push_str(&format!(
                "{},{},{}\n",
                crate::lti::fmt_sig(t),
                crate::lti::fmt_sig(*u),
                crate::lti::fmt_sig(*y)
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = Vec::new();
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut header = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header {
                if line != "t_s,u_pu,y_pu" {
                    return Err(Error::Sysid(format!("experiment header must be t_s,u_pu,y_pu, got {line}")));
                }
                header = true;
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Sysid(format!("experiment line {}: malformed", ln + 1)))?;
            if v.len() != 3 {
                return Err(Error::Sysid(format!("experiment line {}: expected 3 columns", ln + 1)));
            }
            t.push(v[0]);
            u.push(v[1]);
            y.push(v[2]);
        }
        if t.len() < 2 {
            return Err(Error::Sysid("experiment record needs at least two samples".into()));
        }
        let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        Ok(Self { sample_rate_hz: 1.0 / dt, u, y })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationConfig {
    pub prbs: PrbsConfig,
    pub sample_rate_hz: f64,
    pub band_hz: (f64, f64),
    pub fit_order: usize,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self { prbs: PrbsConfig::default(), sample_rate_hz: 100.0, band_hz: (0.1, 2.0), fit_order: 6 }
    }
}

/// Drive one plant path with the PRBS. One extra PRBS period is simulated
/// first and discarded so the record starts in periodic steady state.
pub fn run_experiment(path: &StateSpace, cfg: &IdentificationConfig) -> Result<ExperimentRecord> {
    let mut warm = cfg.prbs.clone();
    warm.duration_s = cfg.prbs.duration_s + cfg.prbs.period_s();
    let u_full = gen_prbs(&warm, cfg.sample_rate_hz)?;
    let y_full = simulate(path, &u_full, 1.0 / cfg.sample_rate_hz, None)?;
    let skip = (cfg.prbs.period_s() * cfg.sample_rate_hz).round() as usize;
    Ok(ExperimentRecord {
        sample_rate_hz: cfg.sample_rate_hz,
        u: u_full[skip..].to_vec(),
        y: y_full[skip..].to_vec(),
    })
}

/// Nonparametric FRF of an experiment. Each Welch segment spans one PRBS
/// period so the excitation lines fall exactly on analysis bins and no taper
/// is needed. The estimate is referred to the continuous held input: the
/// sampled record sees the plant through a zero-order hold, which adds a
/// half-sample lag and a sinc droop that are divided out here.
pub fn experiment_frf(rec: &ExperimentRecord, cfg: &IdentificationConfig) -> Result<FrfEstimate> {
    let seg = (cfg.prbs.period_s() * rec.sample_rate_hz).round() as usize;
    let mut est = estimate_frf(
        &rec.u,
        &rec.y,
        rec.sample_rate_hz,
        cfg.band_hz,
        WelchOptions { segment_len: Some(seg), window: Window::Rectangular },
    )?;
    let dt = 1.0 / rec.sample_rate_hz;
    for p in &mut est.points {
        let x = PI * p.freq_hz * dt;
        p.value *= C64::from_polar(x / x.sin(), x);
    }
    Ok(est)
}

/// Experiment, FRF and rational fit for one path.
pub fn identify_path(path: &StateSpace, cfg: &IdentificationConfig) -> Result<(ExperimentRecord, FrfEstimate, IdentifiedPlant)> {
    let rec = run_experiment(path, cfg)?;
    let frf = experiment_frf(&rec, cfg)?;
    let fit = fit_rational(&frf.points, cfg.fit_order, FitOptions::default())?;
    Ok((rec, frf, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn m_sequence_period_and_balance() {
        for bits in 3..=16u32 {
            let chips = prbs_chips(bits).unwrap();
            let len = (1usize << bits) - 1;
            assert_eq!(chips.len(), len);
            let sum: i64 = chips.iter().map(|c| *c as i64).sum();
            assert_eq!(sum.abs(), 1, "bits {bits}");
            // Maximal length: the register state sequence has no shorter
            // period; equivalently the chip sequence is not periodic with
            // any proper divisor of its length.
            for d in (1..len).filter(|d| len % d == 0) {
                assert!(chips.iter().enumerate().any(|(i, c)| *c != chips[(i + d) % len]), "bits {bits} period {d}");
            }
        }
    }

    #[test]
    fn four_bit_period_fifteen() {
        let cfg = PrbsConfig { register_bits: 4, chip_period_s: 1.0, amplitude_pu: 1.0, duration_s: 30.0 };
        let u = gen_prbs(&cfg, 1.0).unwrap();
        assert_eq!(u.len(), 30);
        assert_eq!(u[..15], u[15..]);
        assert!(u[..15].windows(15).all(|w| w.iter().any(|v| *v != w[0])));
    }

    #[test]
    fn unsupported_register_length() {
        assert!(prbs_chips(2).is_err());
        let cfg = PrbsConfig { register_bits: 17, ..PrbsConfig::default() };
        assert!(gen_prbs(&cfg, 10.0).is_err());
    }

    #[test]
    fn static_gain_frf() {
        let cfg = PrbsConfig { register_bits: 10, chip_period_s: 0.1, amplitude_pu: 0.05, duration_s: 409.2 };
        let u = gen_prbs(&cfg, 20.0).unwrap();
        let y: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let est = estimate_frf(&u, &y, 20.0, (0.1, 2.0), WelchOptions { segment_len: Some(2046), ..Default::default() }).unwrap();
        for p in &est.points {
            assert!((p.value.norm() - 2.0).abs() < 0.01);
            assert!(p.phase_deg().abs() < 1.0);
        }
    }

    #[test]
    fn one_sample_delay_phase_slope() {
        let cfg = PrbsConfig { register_bits: 10, chip_period_s: 0.05, amplitude_pu: 1.0, duration_s: 409.2 };
        let fs = 20.0;
        let u = gen_prbs(&cfg, fs).unwrap();
        let mut y = vec![0.0; u.len()];
        y[1..].copy_from_slice(&u[..u.len() - 1]);
        let est = estimate_frf(&u, &y, fs, (0.1, 2.0), WelchOptions { segment_len: Some(1023), ..Default::default() }).unwrap();
        for p in &est.points {
            let expect = -360.0 * p.freq_hz / fs;
            assert!((p.phase_deg() - expect).abs() < 1.0, "{} {}", p.phase_deg(), expect);
        }
    }

    #[test]
    fn mismatched_or_short_records() {
        assert!(estimate_frf(&[0.0; 10], &[0.0; 11], 1.0, (0.1, 1.0), WelchOptions::default()).is_err());
        assert!(estimate_frf(&[0.0; 100], &[0.0; 100], 10.0, (0.1, 1.0), WelchOptions::default()).is_err());
    }

    #[test]
    fn noise_output_flags_low_coherence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = PrbsConfig { register_bits: 10, chip_period_s: 0.1, amplitude_pu: 1.0, duration_s: 409.2 };
        let u = gen_prbs(&cfg, 20.0).unwrap();
        let y: Vec<f64> = u.iter().map(|_| rng.random::<f64>() - 0.5).collect();
        assert!(matches!(
            estimate_frf(&u, &y, 20.0, (0.1, 2.0), WelchOptions { segment_len: Some(2046), ..Default::default() }),
            Err(Error::LowCoherence { .. })
        ));
    }

    #[test]
    fn exact_recovery_fourth_order() {
        let src = TransferFunction::new(
            vec![8.0, 0.4],
            poly::mul(&[7.99, 0.113, 1.0], &[31.6, 0.34, 1.0]),
        )
        .unwrap();
        let freqs = crate::lti::logspace(0.1, 2.0, 120);
        let frf = src.freq_response(&freqs).unwrap();
        let fit = fit_rational(&frf, 4, FitOptions::default()).unwrap();
        for f in crate::lti::logspace(0.1, 2.0, 57) {
            let s = C64::new(0.0, 2.0 * PI * f);
            let (a, b) = (fit.tf.eval(s), src.eval(s));
            assert!((a - b).norm() / b.norm() < 1e-6, "f {f}: {a} vs {b}");
        }
        assert_eq!(fit.reflected_poles, 0);
    }

    #[test]
    fn fit_order_and_point_guards() {
        let frf: Vec<FrequencyResponsePoint> = (1..=10)
            .map(|k| FrequencyResponsePoint { freq_hz: k as f64 * 0.1, value: C64::new(1.0, 0.0) })
            .collect();
        assert!(fit_rational(&frf, 3, FitOptions::default()).is_err());
        assert!(fit_rational(&frf, 4, FitOptions::default()).is_err());
    }

    #[test]
    fn find_modes_orders_by_damping_then_frequency() {
        let poles = [
            C64::new(-0.057, 2.827),
            C64::new(-0.057, -2.827),
            C64::new(-0.170, 5.655),
            C64::new(-0.170, -5.655),
            C64::new(-3.0, 0.0),
        ];
        let den = poly::from_roots(&poles);
        let tf = TransferFunction::new(vec![1.0], den).unwrap();
        let plant = IdentifiedPlant {
            tf,
            fit_band_hz: (0.1, 2.0),
            frf_fit_mag_err_db: 0.0,
            frf_fit_phase_err_deg: 0.0,
            modes: vec![],
            reflected_poles: 0,
            iterations: 0,
        };
        let (w1, w2) = find_modes(&plant).unwrap();
        assert_relative_eq!(w1, 2.827, epsilon = 1e-6);
        assert_relative_eq!(w2, 5.655, epsilon = 1e-6);
    }

    #[test]
    fn find_modes_needs_two_pairs() {
        let tf = TransferFunction::new(vec![1.0], poly::from_roots(&[C64::new(-0.1, 3.0), C64::new(-0.1, -3.0), C64::new(-2.0, 0.0)])).unwrap();
        let plant = IdentifiedPlant {
            tf,
            fit_band_hz: (0.1, 2.0),
            frf_fit_mag_err_db: 0.0,
            frf_fit_phase_err_deg: 0.0,
            modes: vec![],
            reflected_poles: 0,
            iterations: 0,
        };
        assert!(find_modes(&plant).is_err());
    }

    #[test]
    fn tie_in_damping_lists_lower_frequency_first() {
        let mut cands = vec![
            ModeReport::from_eigenvalue(ModeReport::eigenvalue_for(1.5, 0.05)),
            ModeReport::from_eigenvalue(ModeReport::eigenvalue_for(0.7, 0.05)),
            ModeReport::from_eigenvalue(ModeReport::eigenvalue_for(0.3, 0.05)),
        ];
        let (w1, w2) = select_two_modes(&mut cands).unwrap();
        // Three-way tie: the two lowest frequencies win, ascending.
        assert_relative_eq!(w1, ModeReport::eigenvalue_for(0.3, 0.05).im);
        assert_relative_eq!(w2, ModeReport::eigenvalue_for(0.7, 0.05).im);
    }

    #[test]
    fn experiment_csv_round_trip() {
        let rec = ExperimentRecord { sample_rate_hz: 10.0, u: vec![0.05, -0.05, 0.05], y: vec![0.0, 0.001, 0.002] };
        let back = ExperimentRecord::from_csv(&rec.to_csv()).unwrap();
        assert_relative_eq!(back.sample_rate_hz, 10.0, epsilon = 1e-9);
        assert_eq!(back.u, rec.u);
        assert!(ExperimentRecord::from_csv("x,y\n").is_err());
    }

    #[test]
    fn reference_plant_modes_recovered() {
        let plant = crate::refplant::build_reference_plant(&Default::default()).unwrap();
        let cfg = IdentificationConfig::default();
        let (t1, t2) = plant.mode_frequencies_rad();
        for input in [crate::refplant::P_INPUT, crate::refplant::Q_INPUT] {
            let path = plant.combined.select_input(input).unwrap();
            let (_, frf, fit) = identify_path(&path, &cfg).unwrap();
            let (w1, w2) = find_modes(&fit).unwrap();
            assert!((w1 / t1 - 1.0).abs() < 0.02, "{w1} vs {t1}");
            assert!((w2 / t2 - 1.0).abs() < 0.02, "{w2} vs {t2}");
            assert!(fit.frf_fit_mag_err_db < 3.0 && fit.frf_fit_phase_err_deg < 15.0);
            // Nonparametric estimate against the construction.
            let (me, pe) = fit_errors(&plant.path_tf(input).unwrap(), &frf.points).unwrap();
            assert!(me < 0.1 && pe < 1.0, "{me} dB {pe} deg");
        }
    }

    #[test]
    fn first_order_frf_from_prbs() {
        let ss = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap().to_state_space().unwrap();
        let cfg = IdentificationConfig { prbs: PrbsConfig { duration_s: 409.2, ..PrbsConfig::default() }, ..Default::default() };
        let rec = run_experiment(&ss, &cfg).unwrap();
        let seg = (cfg.prbs.period_s() * rec.sample_rate_hz).round() as usize;
        let est = estimate_frf(&rec.u, &rec.y, rec.sample_rate_hz, (0.1, 2.0), WelchOptions { segment_len: Some(seg), window: Window::Hann }).unwrap();
        for p in &est.points {
            let w = 2.0 * PI * p.freq_hz;
            let mag_db = -10.0 * (1.0 + w * w).log10();
            let phase = -w.atan().to_degrees();
            assert!((p.mag_db() - mag_db).abs() < 1.0, "{} Hz", p.freq_hz);
            assert!((p.phase_deg() - phase).abs() < 5.0, "{} Hz", p.freq_hz);
        }
    }

    #[test]
    fn prbs_spectrum_flat_in_band() {
        let cfg = PrbsConfig { register_bits: 10, chip_period_s: 0.1, amplitude_pu: 1.0, duration_s: 102.3 };
        let fs = 10.0;
        let u = gen_prbs(&cfg, fs).unwrap();
        let n = u.len();
        let mut buf: Vec<FftComplex<f64>> = u.iter().map(|v| FftComplex::new(*v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mags: Vec<f64> = (1..n / 2)
            .filter(|k| {
                let f = *k as f64 * fs / n as f64;
                (0.1..=2.0).contains(&f)
            })
            .map(|k| buf[k].norm())
            .collect();
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(20.0 * (hi / lo).log10() < 3.0);
    }

    #[test]
    fn second_order_fit_shows_under_modelling() {
        let plant = crate::refplant::build_reference_plant(&Default::default()).unwrap();
        let frf = plant.path_tf(crate::refplant::P_INPUT).unwrap().freq_response(&crate::lti::logspace(0.1, 2.0, 150)).unwrap();
        let fit = fit_rational_any(&frf, 2, FitOptions::default()).unwrap();
        assert!(fit.frf_fit_mag_err_db > 3.0 || fit.frf_fit_phase_err_deg > 15.0);
        let full = fit_rational(&frf, 6, FitOptions::default()).unwrap();
        assert!(full.frf_fit_mag_err_db < 0.01);
    }

    #[test]
    fn zero_response_is_degenerate() {
        let frf: Vec<FrequencyResponsePoint> = crate::lti::logspace(0.1, 2.0, 40)
            .into_iter()
            .map(|f| FrequencyResponsePoint { freq_hz: f, value: C64::new(0.0, 0.0) })
            .collect();
        let err = fit_rational(&frf, 4, FitOptions::default()).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }
}
