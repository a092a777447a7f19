use std::f64::consts::PI;
use std::sync::OnceLock;

use podlab_core::analysis::closed_loop_eigs;
use podlab_core::channel::{measure_campaign, throughput_from_log, throughput_from_trace, DelayDistribution};
use podlab_core::pipeline::{self, DesignOutcome, Identification, ProjectConfig};
use podlab_core::refplant::{build_reference_plant, free_response};
use podlab_core::simloop::{ensemble, run_closed_loop};
use rustfft::{num_complex::Complex, FftPlanner};

fn designed() -> &'static (ProjectConfig, Identification, DesignOutcome) {
    static CELL: OnceLock<(ProjectConfig, Identification, DesignOutcome)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ProjectConfig::default();
        let (ident, out) = pipeline::run_design(&cfg).unwrap();
        (cfg, ident, out)
    })
}

#[test]
fn free_response_spectrum_peaks_at_modes() {
    let plant = build_reference_plant(&Default::default()).unwrap();
    let dt = 0.01;
    let y = free_response(&plant, &Default::default(), dt, 60.0).unwrap();
    let n = y.len();
    let mut buf: Vec<Complex<f64>> = y.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin = 1.0 / (n as f64 * dt);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    // Two largest local maxima.
    let mut peaks: Vec<(usize, f64)> =
        (1..mag.len() - 1).filter(|&k| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1]).map(|k| (k, mag[k])).collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut found: Vec<f64> = peaks[..2].iter().map(|(k, _)| *k as f64 * bin).collect();
    found.sort_by(f64::total_cmp);
    for (f, m) in found.iter().zip(&plant.true_modes) {
        assert!((f - m.freq_hz).abs() <= bin, "peak {f} Hz vs mode {} Hz", m.freq_hz);
    }
}

#[test]
fn identification_recovers_frequency_and_damping() {
    let (_, ident, _) = designed();
    for path in [&ident.p, &ident.q] {
        let poles = path.fit.tf.poles().unwrap();
        for truth in &ident.plant.true_modes {
            let w = 2.0 * PI * truth.freq_hz;
            let best = poles
                .iter()
                .filter(|l| l.im > 0.0)
                .min_by(|a, b| (a.im - w).abs().total_cmp(&(b.im - w).abs()))
                .unwrap();
            let m = podlab_core::lti::ModeReport::from_eigenvalue(*best);
            assert!((m.freq_hz - truth.freq_hz).abs() < 0.05 * truth.freq_hz);
            assert!((m.damping_ratio - truth.damping_ratio).abs() < 0.3 * truth.damping_ratio);
        }
    }
}

#[test]
fn selected_gains_move_modes_left() {
    let (_, _, out) = designed();
    for ld in [&out.p, &out.q] {
        let parts = ld.parts(&out.surrogate).unwrap();
        let at_k = closed_loop_eigs(&parts, ld.modes_rad_s).unwrap();
        let at_0 = closed_loop_eigs(&podlab_core::analysis::LoopParts { gain: 0.0, ..parts.clone() }, ld.modes_rad_s)
            .unwrap();
        let half = closed_loop_eigs(&podlab_core::analysis::LoopParts { gain: 0.5 * parts.gain, ..parts }, ld.modes_rad_s)
            .unwrap();
        for i in 0..2 {
            assert!(at_k.modes[i].eigenvalue.re < at_0.modes[i].eigenvalue.re);
            // Halving the gain keeps each tracked mode between its K = 0 and
            // design positions.
            let span = (at_k.modes[i].eigenvalue - at_0.modes[i].eigenvalue).norm();
            assert!((half.modes[i].eigenvalue - at_k.modes[i].eigenvalue).norm() <= span);
        }
    }
}

#[test]
fn received_steps_match_channel_throughput() {
    let (cfg, ident, out) = designed();
    let sim = podlab_core::simloop::SimConfig { duration_s: 60.0, ..cfg.simulation.clone() };
    let tr = run_closed_loop(&ident.plant, out.p.design(), out.q.design(), &cfg.channel, &sim, 3, true).unwrap();
    let seen = throughput_from_trace(&tr.p_d_recv, sim.dt_s, 1.0).unwrap();
    let chan = throughput_from_log(&measure_campaign(&cfg.channel, 2000).unwrap(), 1.0).unwrap();
    assert!((seen.mean - chan.mean).abs() <= 1.0, "{} vs {}", seen.mean, chan.mean);
    assert!(seen.mode.abs_diff(chan.mode) <= 1);
}

#[test]
fn delay_can_only_hurt() {
    let (cfg, ident, out) = designed();
    let mut c0 = cfg.clone();
    c0.channel.delay = DelayDistribution::PointMass { value: 0.0 };
    c0.channel.rate_hz = 1000.0;
    c0.design.best_effort = true;
    let out0 = pipeline::design(&c0, ident).unwrap();
    assert!(!out0.p.report.converged, "zero-delay exact phase design is not reachable on this plant");
    let n = 10;
    let transparent = ensemble(n, 7, &ident.plant, out0.p.design(), out0.q.design(), &c0.channel, &cfg.simulation).unwrap();
    let delayed = ensemble(n, 7, &ident.plant, out.p.design(), out.q.design(), &cfg.channel, &cfg.simulation).unwrap();
    assert!(transparent.median_ratio < 1.0);
    assert!(
        transparent.median_ratio <= delayed.median_ratio,
        "{} vs {}",
        transparent.median_ratio,
        delayed.median_ratio
    );
}
