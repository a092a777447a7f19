//! Project configuration and the end-to-end design flow: identify both
//! plant paths, build the delay surrogate, design and tune both loops.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::LoopParts;
use crate::channel::{ChannelConfig, DelayDistribution, HistogramRecord};
use crate::delaymodel::{build_surrogate, expected_delay, DelaySurrogate};
use crate::error::{Error, Result};
use crate::lti::TransferFunction;
use crate::poddesign::{
    default_gain_grid, design_compensator, power_limits, select_gain, washout, CompensatorDesign, DesignOptions,
    DesignReport, DoglegOptions, LimitsInput, LoopKind,
};
use crate::refplant::{build_reference_plant, PlantConfig, PlantPair, P_INPUT, Q_INPUT};
use crate::simloop::SimConfig;
use crate::sysid::{find_modes, identify_path, ExperimentRecord, FrfEstimate, IdentificationConfig, IdentifiedPlant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub washout_tw_s: f64,
    pub band_hz: (f64, f64),
    pub n_starts: usize,
    pub limits: LimitsInput,
    /// Fraction of each loop's selected gain that is applied. Both loops act
    /// on the same modes at once, so each runs below its stand-alone gain.
    #[serde(default = "default_gain_share")]
    pub combined_gain_share: f64,
    /// Keep the best unconverged phase solution instead of failing.
    #[serde(default)]
    pub best_effort: bool,
}

fn default_gain_share() -> f64 {
    0.5
}

impl Default for DesignSection {
    fn default() -> Self {
        Self {
            washout_tw_s: crate::poddesign::DEFAULT_WASHOUT_S,
            band_hz: (0.1, 2.0),
            n_starts: 8,
            limits: LimitsInput { k: 0.1, p_r: 0.5, q_r: 0.0, s_n: 1.0 },
            combined_gain_share: default_gain_share(),
            best_effort: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub plant: PlantConfig,
    pub channel: ChannelConfig,
    /// Histogram written by `channel fit`; replaces `channel.delay` when set.
    #[serde(default)]
    pub delay_histogram_file: Option<PathBuf>,
    pub identification: IdentificationConfig,
    pub design: DesignSection,
    pub simulation: SimConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            plant: PlantConfig::default(),
            channel: ChannelConfig::default(),
            delay_histogram_file: None,
            identification: IdentificationConfig::default(),
            design: DesignSection::default(),
            simulation: SimConfig::default(),
        }
    }
}

impl ProjectConfig {
    /// Check the schema, resolve the optional histogram file relative to
    /// `base_dir` and validate every section.
    pub fn finish_load(mut self, base_dir: &Path) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(p) = &self.delay_histogram_file {
            let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("delay_histogram_file {}: {e}", path.display())))?;
            let rec: HistogramRecord = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("delay_histogram_file {}: {e}", path.display())))?;
            self.channel.delay = DelayDistribution::from_histogram_record(&rec)?;
            self.delay_histogram_file = Some(path);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.channel.validate()?;
        self.identification.prbs.validate()?;
        let share = self.design.combined_gain_share;
        if !(share > 0.0 && share <= 1.0) {
            return Err(Error::Config(format!("design.combined_gain_share must be in (0, 1], got {share}")));
        }
        self.simulation.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.channel.seed = seed;
        self
    }

    pub fn design_options(&self) -> DesignOptions {
        DesignOptions {
            washout_tw_s: self.design.washout_tw_s,
            channel_rate_hz: Some(self.channel.rate_hz),
            band_hz: self.design.band_hz,
            n_starts: self.design.n_starts,
            dogleg: DoglegOptions::default(),
            best_effort: self.design.best_effort,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathIdentification {
    pub experiment: ExperimentRecord,
    pub frf: FrfEstimate,
    pub fit: IdentifiedPlant,
    pub modes: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub plant: PlantPair,
    pub p: PathIdentification,
    pub q: PathIdentification,
}

pub fn identify(cfg: &ProjectConfig) -> Result<Identification> {
    let plant = build_reference_plant(&cfg.plant)?;
    let one = |input: usize| -> Result<PathIdentification> {
        let path = plant.combined.select_input(input)?;
        let (experiment, frf, fit) = identify_path(&path, &cfg.identification)?;
        let modes = find_modes(&fit)?;
        Ok(PathIdentification { experiment, frf, fit, modes })
    };
    let p = one(P_INPUT)?;
    let q = one(Q_INPUT)?;
    Ok(Identification { plant, p, q })
}

pub fn surrogate(cfg: &ProjectConfig) -> Result<DelaySurrogate> {
    build_surrogate(expected_delay(&cfg.channel.delay)?, cfg.design.band_hz)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopDesign {
    pub report: DesignReport,
    pub modes_rad_s: (f64, f64),
    pub plant: TransferFunction,
}

impl LoopDesign {
    pub fn design(&self) -> &CompensatorDesign {
        &self.report.design
    }

    pub fn parts(&self, surrogate: &DelaySurrogate) -> Result<LoopParts> {
        Ok(LoopParts {
            washout: washout(self.report.design.washout_tw_s)?,
            compensator: self.report.design.leadlag()?,
            gain: self.report.design.gain,
            surrogate: surrogate.pade.clone(),
            plant: self.plant.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub surrogate: DelaySurrogate,
    pub p: LoopDesign,
    pub q: LoopDesign,
}

fn design_loop(
    path: &PathIdentification,
    surrogate: &DelaySurrogate,
    kind: LoopKind,
    limit: f64,
    share: f64,
    opts: &DesignOptions,
) -> Result<LoopDesign> {
    let mut report = design_compensator(&path.fit.tf, surrogate, path.modes, kind, opts)?;
    let mut ld = LoopDesign { report: report.clone(), modes_rad_s: path.modes, plant: path.fit.tf.clone() };
    let parts = ld.parts(surrogate)?;
    let grid = default_gain_grid(&parts, path.modes)?;
    let sel = select_gain(&parts, path.modes, &grid)?;
    report.design.gain = share * sel.gain;
    report.design.limit_pu = limit;
    report.gain_selection = Some(sel);
    ld.report = report;
    Ok(ld)
}

/// Design both loops independently on the identified paths, then scale
/// each selected gain by the combined-action share.
pub fn design(cfg: &ProjectConfig, ident: &Identification) -> Result<DesignOutcome> {
    let opts = cfg.design_options();
    let surrogate = surrogate(cfg)?;
    let (p_l, q_l) = power_limits(&cfg.design.limits)?;
    let p = design_loop(&ident.p, &surrogate, LoopKind::Active, p_l, cfg.design.combined_gain_share, &opts)?;
    let q = design_loop(&ident.q, &surrogate, LoopKind::Reactive, q_l, cfg.design.combined_gain_share, &opts)?;
    Ok(DesignOutcome { surrogate, p, q })
}

/// Identification followed by design.
pub fn run_design(cfg: &ProjectConfig) -> Result<(Identification, DesignOutcome)> {
    let ident = identify(cfg)?;
    let out = design(cfg, &ident)?;
    Ok((ident, out))
}
