//! Open-loop assembly, closed-loop eigenvalue studies and Bode tables.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::delaymodel::build_surrogate;
use crate::error::{Error, Result};
use crate::lti::{bode_csv, bode_rows, eigen, logspace, ModeReport, StateSpace, TransferFunction, C64};

/// Blocks of one POD loop, in signal order from the frequency measurement to
/// the plant output.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopParts {
    pub washout: TransferFunction,
    pub compensator: TransferFunction,
    pub gain: f64,
    pub surrogate: TransferFunction,
    pub plant: TransferFunction,
}

/// `gain · washout · C · D′ · P`
pub fn open_loop(parts: &LoopParts) -> Result<TransferFunction> {
    Ok(parts
        .washout
        .series(&parts.compensator)
        .series(&TransferFunction::gain(parts.gain))
        .series(&parts.surrogate)
        .series(&parts.plant))
}

/// Series chain in state-space form, unity negative feedback from the plant
/// output back to the washout input.
pub fn closed_loop_state_space(parts: &LoopParts) -> Result<StateSpace> {
    let chain = parts
        .washout
        .to_state_space()?
        .series(&parts.compensator.to_state_space()?)?
        .series(&StateSpace::gain(parts.gain))?
        .series(&parts.surrogate.to_state_space()?)?
        .series(&parts.plant.to_state_space()?)?;
    chain.feedback_negative()
}

/// Damping ratio above which an eigenvalue pair is not considered a
/// candidate for an electromechanical mode when tracking.
pub const OSCILLATORY_ZETA: f64 = 0.5;
/// Relative frequency window of the mode-matching ambiguity guard.
pub const AMBIGUITY_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenCase {
    pub label: String,
    pub delay_s: Option<f64>,
    pub gain: f64,
    /// Two target modes first (ascending frequency), then the remaining
    /// upper-half-plane eigenvalues by ascending frequency.
    pub modes: Vec<ModeReport>,
    #[serde(skip)]
    pub all_eigenvalues: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenStudy {
    pub baseline: Vec<ModeReport>,
    pub cases: Vec<EigenCase>,
}

fn upper(eigs: &[C64]) -> Vec<C64> {
    eigs.iter().copied().filter(|l| l.im >= 0.0).collect()
}

/// Pick the eigenvalues tracking the two target frequencies (rad/s). The
/// nearest oscillatory candidate in frequency wins; a second candidate
/// that is also within 5% is reported as ambiguous.
pub fn match_modes(eigs: &[C64], targets: (f64, f64)) -> Result<[usize; 2]> {
    let mut out = [usize::MAX; 2];
    for (slot, w) in [targets.0, targets.1].into_iter().enumerate() {
        let mut cands: Vec<(usize, f64)> = eigs
            .iter()
            .enumerate()
            .filter(|(_, l)| l.im > 0.0 && ModeReport::from_eigenvalue(**l).damping_ratio < OSCILLATORY_ZETA)
            .filter(|(i, _)| slot == 0 || *i != out[0])
            .map(|(i, l)| (i, (l.im - w).abs()))
            .collect();
        cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some(&(best, _)) = cands.first() else {
            return Err(Error::Analysis(format!("no oscillatory eigenvalue near {:.4} Hz", w / (2.0 * PI))));
        };
        if let Some(&(second, d2)) = cands.get(1) {
            if d2 <= AMBIGUITY_FRACTION * w {
                return Err(Error::AmbiguousMode {
                    target_hz: w / (2.0 * PI),
                    candidates_hz: vec![eigs[best].im / (2.0 * PI), eigs[second].im / (2.0 * PI)],
                });
            }
        }
        out[slot] = best;
    }
    Ok(out)
}

fn case_from_eigs(label: String, delay_s: Option<f64>, gain: f64, all: Vec<C64>, targets: (f64, f64)) -> Result<EigenCase> {
    let up = upper(&all);
    let idx = match_modes(&up, targets)?;
    let mut modes: Vec<ModeReport> = idx.iter().map(|i| ModeReport::from_eigenvalue(up[*i])).collect();
    if modes[0].freq_hz > modes[1].freq_hz {
        modes.swap(0, 1);
    }
    let mut rest: Vec<ModeReport> = up
        .iter()
        .enumerate()
        .filter(|(i, _)| !idx.contains(i))
        .map(|(_, l)| ModeReport::from_eigenvalue(*l))
        .collect();
    rest.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz).then(a.eigenvalue.re.total_cmp(&b.eigenvalue.re)));
    modes.extend(rest);
    Ok(EigenCase { label, delay_s, gain, modes, all_eigenvalues: all })
}

/// Eigenvalues of the closed loop and the two tracked target modes.
/// `targets` are the open-loop oscillation frequencies in rad/s.
pub fn closed_loop_eigs(parts: &LoopParts, targets: (f64, f64)) -> Result<EigenCase> {
    let ss = closed_loop_state_space(parts)?;
    if ss.order() > 100 {
        return Err(Error::Analysis(format!("closed loop has {} states, limit 100", ss.order())));
    }
    case_from_eigs(format!("K={}", parts.gain), None, parts.gain, eigen(ss.a())?, targets)
}

/// Plant target modes without POD action.
pub fn baseline(plant: &TransferFunction, targets: (f64, f64)) -> Result<Vec<ModeReport>> {
    let eigs = plant.poles()?;
    Ok(case_from_eigs("baseline".into(), None, 0.0, eigs, targets)?.modes[..2].to_vec())
}

pub const DEFAULT_SWEEP_DELAYS: [f64; 4] = [0.0, 0.15, 0.3, 0.6];

/// Closed-loop target modes at a fixed design while the constant delay
/// seen by the loop varies. The case matching `design_delay_s` is labelled
/// as the design point.
pub fn delay_sweep(
    parts: &LoopParts,
    targets: (f64, f64),
    delays: &[f64],
    design_delay_s: f64,
    band_hz: (f64, f64),
) -> Result<EigenStudy> {
    let mut cases = Vec::with_capacity(delays.len());
    for &d in delays {
        let surrogate = build_surrogate(d, band_hz)?;
        let p = LoopParts { surrogate: surrogate.pade, ..parts.clone() };
        let mut case = closed_loop_eigs(&p, targets)?;
        let design = (d - design_delay_s).abs() < 1e-12;
        case.label = if design { format!("delay {d} s (design)") } else { format!("delay {d} s") };
        case.delay_s = Some(d);
        cases.push(case);
    }
    Ok(EigenStudy { baseline: baseline(&parts.plant, targets)?, cases })
}

/// Bode table CSV on a log grid with exact band endpoints.
pub fn bode_table(tf: &TransferFunction, band_hz: (f64, f64), n_points: usize) -> Result<String> {
    if n_points < 2 {
        return Err(Error::Analysis(format!("bode table needs at least 2 points, got {n_points}")));
    }
    if !(band_hz.0 > 0.0 && band_hz.1 > band_hz.0) {
        return Err(Error::Analysis(format!("invalid band {band_hz:?}")));
    }
    Ok(bode_csv(&bode_rows(tf, &logspace(band_hz.0, band_hz.1, n_points))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delaymodel::pade_approx;
    use crate::refplant::{build_reference_plant, P_INPUT};
    use approx::assert_relative_eq;

    fn default_parts(gain: f64) -> (LoopParts, (f64, f64)) {
        let plant = build_reference_plant(&Default::default()).unwrap();
        let parts = LoopParts {
            washout: crate::poddesign::washout(5.0).unwrap(),
            compensator: crate::poddesign::leadlag_tf(0.5, 0.2, 0.3, 0.1).unwrap(),
            gain,
            surrogate: pade_approx(0.3, 4).unwrap(),
            plant: plant.path_tf(P_INPUT).unwrap(),
        };
        (parts, plant.mode_frequencies_rad())
    }

    #[test]
    fn unity_parts_give_unity() {
        let u = TransferFunction::unity();
        let p = LoopParts { washout: u.clone(), compensator: u.clone(), gain: 1.0, surrogate: u.clone(), plant: u.clone() };
        assert_eq!(open_loop(&p).unwrap(), u);
        assert!(open_loop(&LoopParts { gain: 0.0, ..p }).unwrap().is_zero());
    }

    #[test]
    fn zero_gain_reproduces_baseline() {
        let (parts, targets) = default_parts(0.0);
        let case = closed_loop_eigs(&parts, targets).unwrap();
        let base = baseline(&parts.plant, targets).unwrap();
        for i in 0..2 {
            assert!((case.modes[i].eigenvalue - base[i].eigenvalue).norm() < 1e-9);
        }
    }

    #[test]
    fn closed_loop_matches_characteristic_polynomial() {
        // Eigenvalues of the state-space loop are roots of den + num of L.
        let (parts, targets) = default_parts(0.7);
        let l = open_loop(&parts).unwrap();
        let charpoly = crate::lti::poly::add(l.den(), l.num());
        let roots = crate::lti::poly::roots(&charpoly).unwrap();
        let case = closed_loop_eigs(&parts, targets).unwrap();
        assert_eq!(roots.len(), case.all_eigenvalues.len());
        for r in roots {
            let d = case.all_eigenvalues.iter().map(|e| (e - r).norm()).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6 * r.norm().max(1.0), "{r}");
        }
    }

    #[test]
    fn ambiguous_candidates_reported() {
        let eigs = vec![C64::new(-0.1, 2.83), C64::new(-0.12, 2.9), C64::new(-0.2, 5.65)];
        assert!(matches!(match_modes(&eigs, (2.827, 5.655)), Err(Error::AmbiguousMode { .. })));
        let eigs = vec![C64::new(-0.1, 2.83), C64::new(-0.2, 5.65), C64::new(-3.0, 2.8)];
        assert_eq!(match_modes(&eigs, (2.827, 5.655)).unwrap(), [0, 1]);
    }

    #[test]
    fn delay_sweep_marks_design_case() {
        let (parts, targets) = default_parts(0.3);
        let study = delay_sweep(&parts, targets, &DEFAULT_SWEEP_DELAYS, 0.3, (0.1, 2.0)).unwrap();
        assert_eq!(study.cases.len(), 4);
        assert_eq!(study.cases.iter().filter(|c| c.label.contains("design")).count(), 1);
        for c in &study.cases {
            assert!(c.modes[0].freq_hz < c.modes[1].freq_hz);
        }
    }

    #[test]
    fn bode_table_cases() {
        let csv = bode_table(&TransferFunction::unity(), (0.1, 2.0), 5).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "freq_hz,mag_db,phase_deg");
        assert_eq!(rows.len(), 6);
        assert!(rows[1].starts_with("1e-1,"));
        assert!(rows[5].starts_with("2e0,"));
        for r in &rows[1..] {
            let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(v[1], 0.0);
            assert_eq!(v[2], 0.0);
        }
        assert!(bode_table(&TransferFunction::unity(), (0.1, 2.0), 1).is_err());
    }

    #[test]
    fn delay_bode_slope() {
        let p = pade_approx(0.3, 6).unwrap();
        let csv = bode_table(&p, (0.1, 2.0), 20).unwrap();
        for r in csv.lines().skip(1) {
            let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
            assert!(v[1].abs() < 1e-6);
            assert_relative_eq!(v[2], -360.0 * 0.3 * v[0], epsilon = 0.5);
        }
    }
}
