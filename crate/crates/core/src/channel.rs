//! Event-driven emulator of the plant communication channel: per-message
//! stochastic delay, limited message rate, optional quantization, plus the
//! measurement pipeline used to characterise it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};

/// Probability law of the per-message delay, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayDistribution {
    /// Piecewise-uniform density over `edges`, with `probabilities[i]` the
    /// mass of `[edges[i], edges[i+1])`.
    EmpiricalHistogram { edges: Vec<f64>, probabilities: Vec<f64> },
    Uniform { low: f64, high: f64 },
    TruncatedNormal { mean: f64, std_dev: f64, low: f64, high: f64 },
    PointMass { value: f64 },
}

/// Histogram file layout: bin edges, bin probabilities and the mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub edges: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mean_s: f64,
}

impl DelayDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Channel(m));
        match self {
            Self::EmpiricalHistogram { edges, probabilities } => {
                if edges.len() < 2 || probabilities.len() != edges.len() - 1 {
                    return bad(format!(
                        "histogram needs n+1 edges for n bins (got {} edges, {} bins)",
                        edges.len(),
                        probabilities.len()
                    ));
                }
                if edges[0] < 0.0 || edges.windows(2).any(|w| !(w[1] > w[0])) {
                    return bad("histogram edges must be non-negative and strictly increasing".into());
                }
                if probabilities.iter().any(|p| !(*p >= 0.0)) {
                    return bad("histogram probabilities must be non-negative".into());
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("histogram mass is {total}, expected 1"));
                }
            }
            Self::Uniform { low, high } => {
                if !(*low >= 0.0 && high >= low) {
                    return bad(format!("uniform support [{low}, {high}] invalid"));
                }
            }
            Self::TruncatedNormal { mean, std_dev, low, high } => {
                if !(*low >= 0.0 && high > low && *std_dev > 0.0 && mean.is_finite()) {
                    return bad("truncated normal needs 0 <= low < high and std_dev > 0".into());
                }
            }
            Self::PointMass { value } => {
                if !(*value >= 0.0) {
                    return bad(format!("point mass at {value} is negative"));
                }
            }
        }
        Ok(())
    }

    pub fn tau_min(&self) -> f64 {
        match self {
            Self::EmpiricalHistogram { edges, .. } => edges[0],
            Self::Uniform { low, .. } | Self::TruncatedNormal { low, .. } => *low,
            Self::PointMass { value } => *value,
        }
    }

    pub fn tau_max(&self) -> f64 {
        match self {
            Self::EmpiricalHistogram { edges, .. } => *edges.last().expect("validated"),
            Self::Uniform { high, .. } | Self::TruncatedNormal { high, .. } => *high,
            Self::PointMass { value } => *value,
        }
    }

    /// Mean delay θ computed from the parameters.
    pub fn mean(&self) -> f64 {
        match self {
            Self::EmpiricalHistogram { edges, probabilities } => probabilities
                .iter()
                .zip(edges.windows(2))
                .map(|(p, w)| p * 0.5 * (w[0] + w[1]))
                .sum(),
            Self::Uniform { low, high } => 0.5 * (low + high),
            Self::TruncatedNormal { mean, std_dev, low, high } => {
                let n = NormalDist::standard();
                let (a, b) = ((low - mean) / std_dev, (high - mean) / std_dev);
                let z = n.cdf(b) - n.cdf(a);
                mean + std_dev * (n.pdf(a) - n.pdf(b)) / z
            }
            Self::PointMass { value } => *value,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::EmpiricalHistogram { edges, probabilities } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let last = probabilities.len() - 1;
                let mut bin = last;
                for (i, p) in probabilities.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        bin = i;
                        break;
                    }
                }
                let v: f64 = rng.random();
                edges[bin] + v * (edges[bin + 1] - edges[bin])
            }
            Self::Uniform { low, high } => {
                let v: f64 = rng.random();
                low + v * (high - low)
            }
            Self::TruncatedNormal { mean, std_dev, low, high } => {
                let normal = Normal::new(*mean, *std_dev).expect("validated std_dev");
                for _ in 0..10_000 {
                    let x = normal.sample(rng);
                    if x >= *low && x <= *high {
                        return x;
                    }
                }
                // Pathological truncation far in a tail: fall back to the
                // nearer bound.
                if (mean - low).abs() < (mean - high).abs() {
                    *low
                } else {
                    *high
                }
            }
            Self::PointMass { value } => *value,
        }
    }

    pub fn histogram_record(&self) -> Option<HistogramRecord> {
        match self {
            Self::EmpiricalHistogram { edges, probabilities } => Some(HistogramRecord {
                edges: edges.clone(),
                probabilities: probabilities.clone(),
                mean_s: self.mean(),
            }),
            _ => None,
        }
    }

    pub fn from_histogram_record(rec: &HistogramRecord) -> Result<Self> {
        let d = Self::EmpiricalHistogram { edges: rec.edges.clone(), probabilities: rec.probabilities.clone() };
        d.validate()?;
        let m = d.mean();
        if (m - rec.mean_s).abs() > 1e-9 {
            return Err(Error::Channel(format!("histogram mean_s {} disagrees with bins ({m})", rec.mean_s)));
        }
        Ok(d)
    }

    /// Equal-width histogram of measured delays over `[min, max]`.
    pub fn fit_histogram(delays: &[f64], n_bins: usize) -> Result<Self> {
        if delays.len() < 2 || n_bins == 0 {
            return Err(Error::Channel("histogram fit needs at least two delays and one bin".into()));
        }
        if delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Channel("delays must be finite and non-negative".into()));
        }
        let lo = delays.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1e-6;
        }
        let width = (hi - lo) / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; n_bins];
        for d in delays {
            counts[(((d - lo) / width) as usize).min(n_bins - 1)] += 1;
        }
        let n = delays.len() as f64;
        let probabilities = counts.iter().map(|c| *c as f64 / n).collect();
        let d = Self::EmpiricalHistogram { edges, probabilities };
        d.validate()?;
        Ok(d)
    }

    /// Default delay histogram: 20 equal bins on [0.05, 1.5] s, right
    /// skewed, exponentially tilted so the mean is `target_mean`.
    pub fn default_histogram(target_mean: f64) -> Self {
        let (lo, hi, nbins) = (0.05, 1.5, 20);
        let width = (hi - lo) / nbins as f64;
        let edges: Vec<f64> = (0..=nbins).map(|i| lo + width * i as f64).collect();
        let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        // Gamma-like bump peaking near 0.25 s with a long thin tail.
        let base: Vec<f64> = centers.iter().map(|c| {
            let x = (c - lo) / 0.07;
            x.powf(2.5) * (-x).exp() + 1e-4
        }).collect();
        let tilted = |beta: f64| -> (Vec<f64>, f64) {
            let w: Vec<f64> = base.iter().zip(&centers).map(|(b, c)| b * (beta * c).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / z).collect();
            let m = p.iter().zip(&centers).map(|(p, c)| p * c).sum();
            (p, m)
        };
        let (mut a, mut b) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if tilted(mid).1 < target_mean {
                a = mid;
            } else {
                b = mid;
            }
        }
        let (mut probabilities, _) = tilted(0.5 * (a + b));
        // Fold rounding residue into the modal bin so the mass is 1 to 1e-15.
        let total: f64 = probabilities.iter().sum();
        let k = probabilities
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        probabilities[k] += 1.0 - total;
        Self::EmpiricalHistogram { edges, probabilities }
    }
}

/// How message emission instants are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionProcess {
    /// Period `1/rate` with ±20% uniform jitter around each slot.
    #[default]
    JitteredPeriodic,
    /// Exponential inter-send gaps with mean `1/rate`.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub delay: DelayDistribution,
    pub rate_hz: f64,
    #[serde(default)]
    pub quantization_step: f64,
    #[serde(default)]
    pub emission: EmissionProcess,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            delay: DelayDistribution::default_histogram(0.3),
            rate_hz: 3.5,
            quantization_step: 0.0,
            emission: EmissionProcess::JitteredPeriodic,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        self.delay.validate()?;
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::Channel(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if !(self.quantization_step >= 0.0) {
            return Err(Error::Channel(format!("quantization_step must be >= 0, got {}", self.quantization_step)));
        }
        Ok(())
    }

    pub fn quantize(&self, v: f64) -> f64 {
        if self.quantization_step > 0.0 {
            (v / self.quantization_step).round() * self.quantization_step
        } else {
            v
        }
    }
}

pub const JITTER_FRACTION: f64 = 0.2;

/// Per-instance random stream: the seed selects the generator, `stream`
/// separates instances sharing a seed (one per receiving unit).
pub fn channel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    pub t_sent: f64,
    pub t_received: f64,
}

impl DelayRecord {
    pub fn delay(&self) -> f64 {
        self.t_received - self.t_sent
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayLog {
    pub records: Vec<DelayRecord>,
}

impl DelayLog {
    pub fn delays(&self) -> Vec<f64> {
        self.records.iter().map(DelayRecord::delay).collect()
    }

    pub fn mean_delay(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.delays().iter().sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_sent_s,t_received_s\n");
        for r in &self.records {
            s.push_str(&format!("{},{}\n", crate::lti::fmt_sig(r.t_sent), crate::lti::fmt_sig(r.t_received)));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != "t_sent_s,t_received_s" {
                    return Err(Error::Channel(format!("delay log header must be t_sent_s,t_received_s, got {line}")));
                }
                header_seen = true;
                continue;
            }
            let mut it = line.split(',');
            let parse = |v: Option<&str>| -> Result<f64> {
                v.and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Channel(format!("delay log line {}: malformed", ln + 1)))
            };
            let r = DelayRecord { t_sent: parse(it.next())?, t_received: parse(it.next())? };
            if r.delay() < 0.0 {
                return Err(Error::Channel(format!("delay log line {}: negative delay", ln + 1)));
            }
            records.push(r);
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    t_sent: f64,
    t_arrive: f64,
    seq: u64,
    payload: Vec<f64>,
}

/// Single-owner event queue for one receiving unit.
///
/// Messages are emitted on the configured schedule carrying the sender's
/// current value, arrive after a sampled delay, and are applied by the
/// receiver with a zero-order hold. A message sent before the one currently
/// applied is discarded on arrival.
#[derive(Debug, Clone)]
pub struct ChannelEmulator {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    next_slot: u64,
    next_send: f64,
    seq: u64,
    in_flight: Vec<InFlight>,
    applied_sent: f64,
    applied: Vec<f64>,
    log: DelayLog,
    applied_times: Vec<f64>,
    discarded: usize,
}

impl ChannelEmulator {
    pub fn new(cfg: ChannelConfig, stream: u64, width: usize) -> Result<Self> {
        cfg.validate()?;
        let rng = channel_rng(cfg.seed, stream);
        let mut em = Self {
            cfg,
            rng,
            next_slot: 0,
            next_send: 0.0,
            seq: 0,
            in_flight: Vec::new(),
            applied_sent: f64::NEG_INFINITY,
            applied: vec![0.0; width],
            log: DelayLog::default(),
            applied_times: Vec::new(),
            discarded: 0,
        };
        em.next_send = em.draw_send_time(0.0);
        Ok(em)
    }

    fn draw_send_time(&mut self, prev: f64) -> f64 {
        let period = 1.0 / self.cfg.rate_hz;
        match self.cfg.emission {
            EmissionProcess::JitteredPeriodic => {
                let j: f64 = self.rng.random_range(-JITTER_FRACTION..=JITTER_FRACTION);
                let t = (self.next_slot as f64 + 0.5 + j) * period;
                self.next_slot += 1;
                t
            }
            EmissionProcess::Poisson => {
                let gap = Exp::new(self.cfg.rate_hz).expect("positive rate").sample(&mut self.rng);
                prev + gap
            }
        }
    }

    /// Advance the channel to time `t` with the sender currently holding
    /// `value`; returns the value applied at the receiver.
    pub fn advance(&mut self, t: f64, value: &[f64]) -> &[f64] {
        while self.next_send <= t {
            let t_sent = self.next_send;
            let delay = self.cfg.delay.sample(&mut self.rng);
            let payload = value.iter().map(|v| self.cfg.quantize(*v)).collect();
            self.in_flight.push(InFlight { t_sent, t_arrive: t_sent + delay, seq: self.seq, payload });
            self.seq += 1;
            self.next_send = self.draw_send_time(t_sent);
        }
        if self.in_flight.iter().any(|m| m.t_arrive <= t) {
            let mut due: Vec<InFlight> = Vec::new();
            self.in_flight.retain(|m| {
                if m.t_arrive <= t {
                    due.push(m.clone());
                    false
                } else {
                    true
                }
            });
            due.sort_by(|a, b| a.t_arrive.total_cmp(&b.t_arrive).then(a.seq.cmp(&b.seq)));
            for m in due {
                self.log.records.push(DelayRecord { t_sent: m.t_sent, t_received: m.t_arrive });
                if m.t_sent > self.applied_sent {
                    self.applied_sent = m.t_sent;
                    self.applied = m.payload;
                    self.applied_times.push(m.t_arrive);
                } else {
                    self.discarded += 1;
                }
            }
        }
        &self.applied
    }

    pub fn applied(&self) -> &[f64] {
        &self.applied
    }

    /// Send time of the message currently applied, if any.
    pub fn applied_sent_time(&self) -> Option<f64> {
        self.applied_sent.is_finite().then_some(self.applied_sent)
    }

    /// Arrival times of every applied (non-discarded) message.
    pub fn applied_times(&self) -> &[f64] {
        &self.applied_times
    }

    pub fn log(&self) -> &DelayLog {
        &self.log
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }
}

/// Result of pushing a uniformly sampled signal through a channel.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub received: Vec<f64>,
    pub applied_times: Vec<f64>,
    pub applied_sent_times: Vec<f64>,
    pub log: DelayLog,
}

/// Pass `input` (sampled at `sample_rate_hz`) through one channel instance.
pub fn transmit(input: &[f64], sample_rate_hz: f64, cfg: &ChannelConfig, stream: u64) -> Result<Transmission> {
    cfg.validate()?;
    let required = 100.0 * cfg.rate_hz;
    if sample_rate_hz < required {
        return Err(Error::SampleRateTooLow { actual: sample_rate_hz, required });
    }
    let mut em = ChannelEmulator::new(cfg.clone(), stream, 1)?;
    let dt = 1.0 / sample_rate_hz;
    let mut received = Vec::with_capacity(input.len());
    let mut applied_sent_times = Vec::with_capacity(input.len());
    for (k, v) in input.iter().enumerate() {
        let t = k as f64 * dt;
        received.push(em.advance(t, std::slice::from_ref(v))[0]);
        applied_sent_times.push(em.applied_sent_time().unwrap_or(f64::NEG_INFINITY));
    }
    Ok(Transmission {
        received,
        applied_times: em.applied_times.clone(),
        applied_sent_times,
        log: em.log.clone(),
    })
}

/// Delay measurement campaign: `n_messages` sent on the configured schedule,
/// each logged with its send and receive time.
pub fn measure_campaign(cfg: &ChannelConfig, n_messages: usize) -> Result<DelayLog> {
    cfg.validate()?;
    if n_messages == 0 {
        return Err(Error::Channel("campaign needs at least one message".into()));
    }
    let mut em = ChannelEmulator::new(cfg.clone(), 0, 0)?;
    let mut records = Vec::with_capacity(n_messages);
    for _ in 0..n_messages {
        let t_sent = em.next_send;
        let delay = em.cfg.delay.sample(&mut em.rng);
        records.push(DelayRecord { t_sent, t_received: t_sent + delay });
        em.next_send = em.draw_send_time(t_sent);
    }
    Ok(DelayLog { records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    pub window_s: f64,
    pub counts: Vec<usize>,
    /// Number of windows observing each message count.
    pub histogram: BTreeMap<usize, usize>,
    pub mode: usize,
    pub mean: f64,
}

impl ThroughputStats {
    /// Fraction of windows whose count lies in `set`.
    pub fn mass_on(&self, set: &[usize]) -> f64 {
        let hit: usize = set.iter().filter_map(|k| self.histogram.get(k)).sum();
        hit as f64 / self.counts.len() as f64
    }
}

/// Histogram of events per window over `[t_start, t_end)`. Only complete
/// windows are counted.
pub fn throughput_stats(event_times: &[f64], t_start: f64, t_end: f64, window_s: f64) -> Result<ThroughputStats> {
    if !(window_s > 0.0) {
        return Err(Error::Channel("window must be positive".into()));
    }
    let n_windows = ((t_end - t_start) / window_s + 1e-9).floor();
    if !(n_windows >= 10.0) {
        return Err(Error::Channel(format!(
            "trace spans {:.3} s, need at least 10 windows of {window_s} s",
            t_end - t_start
        )));
    }
    let n_windows = n_windows as usize;
    let mut counts = vec![0usize; n_windows];
    for &t in event_times {
        if t < t_start {
            continue;
        }
        let k = ((t - t_start) / window_s).floor() as usize;
        if k < n_windows {
            counts[k] += 1;
        }
    }
    let mut histogram = BTreeMap::new();
    for c in &counts {
        *histogram.entry(*c).or_insert(0) += 1;
    }
    let mode = histogram
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(k, _)| *k)
        .unwrap_or(0);
    let mean = counts.iter().sum::<usize>() as f64 / n_windows as f64;
    Ok(ThroughputStats { window_s, counts, histogram, mode, mean })
}

/// Throughput seen by the receiver of a delay log: arrivals per window over
/// the span of send times.
pub fn throughput_from_log(log: &DelayLog, window_s: f64) -> Result<ThroughputStats> {
    let first = log.records.iter().map(|r| r.t_sent).fold(f64::INFINITY, f64::min);
    let last = log.records.iter().map(|r| r.t_sent).fold(f64::NEG_INFINITY, f64::max);
    if !first.is_finite() {
        return Err(Error::Channel("empty delay log".into()));
    }
    let t0 = (first / window_s).floor() * window_s;
    let times: Vec<f64> = log.records.iter().map(|r| r.t_received).collect();
    throughput_stats(&times, t0, last, window_s)
}

/// Throughput of a received, uniformly sampled trace: the number of distinct
/// held values per window (value changes).
pub fn throughput_from_trace(received: &[f64], dt: f64, window_s: f64) -> Result<ThroughputStats> {
    let times: Vec<f64> = received
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] != w[0])
        .map(|(k, _)| (k + 1) as f64 * dt)
        .collect();
    throughput_stats(&times, 0.0, received.len() as f64 * dt, window_s)
}

/// Highest frequency a channel with message rate `f_s` can convey.
pub fn nyquist_limit(f_s: f64) -> Result<f64> {
    if !(f_s > 0.0) {
        return Err(Error::Channel(format!("message rate must be positive, got {f_s}")));
    }
    Ok(f_s / 2.0)
}
