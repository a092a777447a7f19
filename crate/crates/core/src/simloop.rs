//! Closed-loop time-domain harness: plant, central POD controller and one
//! stochastic channel per receiving CIG unit.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelEmulator};
use crate::error::{Error, Result};
use crate::lti::{fmt_sig, Rk4, StateSpace};
use crate::poddesign::CompensatorDesign;
use crate::refplant::{apply_disturbance, DisturbanceScenario, PlantPair, P_INPUT, Q_INPUT};

/// One converter-interfaced unit receiving references from the central
/// controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CigUnit {
    pub name: String,
    pub p: bool,
    pub q: bool,
    #[serde(default = "one")]
    pub participation: f64,
}

fn one() -> f64 {
    1.0
}

/// Two PV units on both loops, a battery on P only, a STATCOM on Q only.
pub fn default_units() -> Vec<CigUnit> {
    vec![
        CigUnit { name: "pv1".into(), p: true, q: true, participation: 1.0 },
        CigUnit { name: "pv2".into(), p: true, q: true, participation: 1.0 },
        CigUnit { name: "battery".into(), p: true, q: false, participation: 1.0 },
        CigUnit { name: "statcom".into(), p: false, q: true, participation: 1.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt_s: f64,
    pub duration_s: f64,
    pub scenario: DisturbanceScenario,
    pub units: Vec<CigUnit>,
    /// Energy window; defaults to the whole trace.
    #[serde(default)]
    pub metric_window_s: Option<(f64, f64)>,
    /// Ensemble size.
    #[serde(default = "default_runs")]
    pub n_runs: usize,
}

fn default_runs() -> usize {
    50
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 1e-3,
            duration_s: 30.0,
            scenario: DisturbanceScenario::default(),
            units: default_units(),
            metric_window_s: None,
            n_runs: 50,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0 && self.dt_s <= 1e-3) {
            return Err(Error::Sim(format!("step must be in (0, 1 ms], got {} s", self.dt_s)));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Sim("duration must be positive".into()));
        }
        if !self.units.iter().any(|u| u.p) || !self.units.iter().any(|u| u.q) {
            return Err(Error::Sim("need at least one unit on each of the P and Q loops".into()));
        }
        if self.n_runs == 0 {
            return Err(Error::Sim("n_runs must be >= 1".into()));
        }
        if self.units.iter().any(|u| !(u.participation > 0.0)) {
            return Err(Error::Sim("unit participation must be positive".into()));
        }
        self.scenario.validate()
    }

    pub fn window(&self) -> (f64, f64) {
        self.metric_window_s.unwrap_or((0.0, self.duration_s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub t_s: Vec<f64>,
    pub omega_g_pu: Vec<f64>,
    pub p_d_sent: Vec<f64>,
    /// As applied at the first P unit.
    pub p_d_recv: Vec<f64>,
    pub q_d_sent: Vec<f64>,
    /// As applied at the first Q unit.
    pub q_d_recv: Vec<f64>,
    pub pod_enabled: bool,
    pub seed: u64,
}

impl SimTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,omega_g_pu,pD_sent,pD_recv,qD_sent,qD_recv\n");
        for i in 0..self.t_s.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_sig(self.t_s[i]),
                fmt_sig(self.omega_g_pu[i]),
                fmt_sig(self.p_d_sent[i]),
                fmt_sig(self.p_d_recv[i]),
                fmt_sig(self.q_d_sent[i]),
                fmt_sig(self.q_d_recv[i])
            ));
        }
        s
    }

    /// Largest transmitted magnitude on each loop.
    pub fn peak_references(&self) -> (f64, f64) {
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        (peak(&self.p_d_sent).max(peak(&self.p_d_recv)), peak(&self.q_d_sent).max(peak(&self.q_d_recv)))
    }
}

/// Central controller for one loop: washout and lead-lag realized in state
/// space, then gain with the sign that closes a negative-feedback loop, then
/// the limiter.
struct PodChannel {
    rk: Rk4,
    gain: f64,
    limit: f64,
}

impl PodChannel {
    fn new(design: &CompensatorDesign, dt: f64) -> Result<Self> {
        design.validate()?;
        let ss: StateSpace = design.washout()?.series(&design.leadlag()?).to_state_space()?;
        Ok(Self { rk: Rk4::new(ss, dt, None)?, gain: design.gain, limit: design.limit_pu })
    }

    fn output(&self, y: &DVector<f64>) -> f64 {
        (-self.gain * self.rk.output(y)[0]).clamp(-self.limit, self.limit)
    }
}

/// Simulate the disturbed plant with both POD loops acting through the
/// channels. With `pod_on = false` no references are sent and the trace is
/// the plant's own response.
pub fn run_closed_loop(
    plant: &PlantPair,
    p_design: &CompensatorDesign,
    q_design: &CompensatorDesign,
    channel: &ChannelConfig,
    sim: &SimConfig,
    seed: u64,
    pod_on: bool,
) -> Result<SimTrace> {
    sim.validate()?;
    let dt = sim.dt_s;
    let setup = apply_disturbance(plant, &sim.scenario)?;
    let mut plant_rk = Rk4::new(plant.combined.clone(), dt, Some(setup.x0.clone()))
        .map_err(|e| Error::Sim(format!("plant integration: {e}")))?;
    let mut p_ctl = PodChannel::new(p_design, dt)?;
    let mut q_ctl = PodChannel::new(q_design, dt)?;
    let ch_cfg = ChannelConfig { seed, ..channel.clone() };
    let mut channels = sim
        .units
        .iter()
        .enumerate()
        .map(|(i, _)| ChannelEmulator::new(ch_cfg.clone(), i as u64, 2))
        .collect::<Result<Vec<_>>>()?;
    let p_weight: f64 = sim.units.iter().filter(|u| u.p).map(|u| u.participation).sum();
    let q_weight: f64 = sim.units.iter().filter(|u| u.q).map(|u| u.participation).sum();
    let first_p = sim.units.iter().position(|u| u.p).expect("validated");
    let first_q = sim.units.iter().position(|u| u.q).expect("validated");

    let steps = (sim.duration_s / dt).round() as usize + 1;
    let mut tr = SimTrace {
        t_s: Vec::with_capacity(steps),
        omega_g_pu: Vec::with_capacity(steps),
        p_d_sent: Vec::with_capacity(steps),
        p_d_recv: Vec::with_capacity(steps),
        q_d_sent: Vec::with_capacity(steps),
        q_d_recv: Vec::with_capacity(steps),
        pod_enabled: pod_on,
        seed,
    };
    let mut u = DVector::zeros(2);
    let mut y_vec = DVector::zeros(1);
    for k in 0..steps {
        let t = k as f64 * dt;
        let ext = setup.inputs_at(t);
        u[P_INPUT] = ext[0];
        u[Q_INPUT] = ext[1];
        // Plant D is zero, so the output does not depend on this step's input.
        let y = plant_rk.output(&u)[0];
        y_vec[0] = y;
        let (p_sent, q_sent) = if pod_on { (p_ctl.output(&y_vec), q_ctl.output(&y_vec)) } else { (0.0, 0.0) };
        let (mut p_in, mut q_in) = (0.0, 0.0);
        let (mut p_recv, mut q_recv) = (0.0, 0.0);
        if pod_on {
            for (i, (ch, unit)) in channels.iter_mut().zip(&sim.units).enumerate() {
                let got = ch.advance(t, &[p_sent, q_sent]);
                if unit.p {
                    p_in += unit.participation * got[0];
                }
                if unit.q {
                    q_in += unit.participation * got[1];
                }
                if i == first_p {
                    p_recv = got[0];
                }
                if i == first_q {
                    q_recv = got[1];
                }
            }
            p_in /= p_weight;
            q_in /= q_weight;
        }
        u[P_INPUT] += p_in;
        u[Q_INPUT] += q_in;
        tr.t_s.push(t);
        tr.omega_g_pu.push(y);
        tr.p_d_sent.push(p_sent);
        tr.p_d_recv.push(p_recv);
        tr.q_d_sent.push(q_sent);
        tr.q_d_recv.push(q_recv);
        if pod_on {
            p_ctl.rk.step(&y_vec);
            q_ctl.rk.step(&y_vec);
        }
        plant_rk.step(&u);
    }
    Ok(tr)
}

/// `∫ ω_g² dt` over the window by the trapezoidal rule.
pub fn damping_metric(trace: &SimTrace, window: (f64, f64)) -> Result<f64> {
    let (t0, t1) = window;
    let (first, last) = match (trace.t_s.first(), trace.t_s.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Sim("empty trace".into())),
    };
    let tol = 1e-9;
    if !(t1 > t0) || t0 < first - tol || t1 > last + tol {
        return Err(Error::Sim(format!("window ({t0}, {t1}) not inside trace [{first}, {last}]")));
    }
    let idx: Vec<usize> = (0..trace.t_s.len()).filter(|i| trace.t_s[*i] >= t0 - tol && trace.t_s[*i] <= t1 + tol).collect();
    if idx.len() < 2 {
        return Err(Error::Sim("window holds fewer than two samples".into()));
    }
    Ok(idx
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            0.5 * (trace.omega_g_pu[a].powi(2) + trace.omega_g_pu[b].powi(2)) * (trace.t_s[b] - trace.t_s[a])
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_runs: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub metrics: Vec<f64>,
    pub ratios: Vec<f64>,
    pub baseline_metric: f64,
    pub median_ratio: f64,
    pub max_ratio: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Run `n_runs` closed-loop transients with seeds `base_seed + i` plus one
/// POD-off baseline, in parallel. Results are keyed by run index, so the
/// output does not depend on scheduling.
pub fn ensemble(
    n_runs: usize,
    base_seed: u64,
    plant: &PlantPair,
    p_design: &CompensatorDesign,
    q_design: &CompensatorDesign,
    channel: &ChannelConfig,
    sim: &SimConfig,
) -> Result<EnsembleStats> {
    if n_runs == 0 {
        return Err(Error::Sim("ensemble needs at least one run".into()));
    }
    let window = sim.window();
    let base = run_closed_loop(plant, p_design, q_design, channel, sim, base_seed, false)?;
    let baseline_metric = damping_metric(&base, window)?;
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let metrics = seeds
        .par_iter()
        .map(|s| {
            let tr = run_closed_loop(plant, p_design, q_design, channel, sim, *s, true)?;
            damping_metric(&tr, window)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = metrics.iter().map(|m| m / baseline_metric).collect();
    Ok(EnsembleStats {
        n_runs,
        base_seed,
        median_ratio: median(&ratios),
        max_ratio: ratios.iter().cloned().fold(0.0, f64::max),
        seeds,
        metrics,
        ratios,
        baseline_metric,
    })
}
