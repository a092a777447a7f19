//! `podlab` command line: each subcommand runs one stage of the design
//! flow and writes its artifacts under the output directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use podlab_core::analysis::{bode_table, delay_sweep, open_loop, DEFAULT_SWEEP_DELAYS};
use podlab_core::channel::{measure_campaign, nyquist_limit, throughput_from_log, DelayDistribution, DelayLog};
use podlab_core::lti::{bode_csv, bode_rows, fmt_sig, logspace};
use podlab_core::pipeline::{self, ProjectConfig};
use podlab_core::refplant::{build_reference_plant, free_response, P_INPUT, Q_INPUT};
use podlab_core::simloop::{damping_metric, ensemble, run_closed_loop};
use podlab_core::sysid::{experiment_frf, find_modes, fit_rational, run_experiment, ExperimentRecord, FitOptions};
use podlab_core::{Error, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "podlab", version, about = "Delay-aware POD controller design and simulation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    group: Group,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML project file; the built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", env = "PODLAB_OUT", default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Group {
    /// Reference plant.
    #[command(subcommand)]
    Plant(PlantCmd),
    /// Communication channel measurements.
    #[command(subcommand)]
    Channel(ChannelCmd),
    /// PRBS identification.
    #[command(subcommand)]
    Sysid(SysidCmd),
    /// Compensator design.
    #[command(subcommand)]
    Design(DesignCmd),
    /// Frequency and eigenvalue analysis of the designed loops.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Time-domain simulation.
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Debug, Subcommand)]
enum PlantCmd {
    /// Build the plant; write its model, path Bode tables and free response.
    Build,
}

#[derive(Debug, Subcommand)]
enum ChannelCmd {
    /// Run a delay measurement campaign.
    Measure {
        #[arg(long, default_value_t = 10_000)]
        messages: usize,
    },
    /// Fit a delay histogram to a measured log.
    Fit {
        /// Delay log CSV; defaults to `delay_log.csv` in the output directory.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
}

#[derive(Debug, Subcommand)]
enum SysidCmd {
    /// Run the PRBS experiment on both plant paths.
    Prbs,
    /// Estimate FRFs and fit rational models to recorded experiments.
    Fit {
        #[arg(long)]
        experiment_p: Option<PathBuf>,
        #[arg(long)]
        experiment_q: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum DesignCmd {
    /// Identify both paths and design both compensators.
    Run,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCmd {
    /// Bode tables of the designed open loops.
    Bode {
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Closed-loop eigenvalues across channel delays.
    Eig,
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// One closed-loop transient plus the POD-off reference.
    Run,
    /// Seeded Monte-Carlo ensemble.
    Ensemble {
        /// Overrides `simulation.n_runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
}

struct Ctx {
    cfg: ProjectConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn load(g: &GlobalArgs) -> Result<Self> {
        let (cfg, hash) = match &g.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let cfg: ProjectConfig =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let base = path.parent().unwrap_or(Path::new("."));
                (cfg.finish_load(base)?, hex(&Sha256::digest(text.as_bytes())))
            }
            None => {
                let cfg = ProjectConfig::default();
                cfg.validate()?;
                let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
                (cfg, hex(&Sha256::digest(text.as_bytes())))
            }
        };
        let seed = g.seed.unwrap_or(cfg.seed);
        let cfg = cfg.with_seed(seed);
        fs::create_dir_all(&g.out).map_err(|e| Error::Io(format!("{}: {e}", g.out.display())))?;
        Ok(Self { cfg, hash, seed, out: g.out.clone() })
    }

    fn stamp(&self) -> String {
        format!("# podlab config_hash={} seed={}\n", self.hash, self.seed)
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<()> {
        self.write(name, &format!("{}{body}", self.stamp()))
    }

    fn write_json<T: Serialize>(&self, name: &str, command: &str, result: &T) -> Result<()> {
        let doc = json!({
            "config_hash": self.hash,
            "seed": self.seed,
            "command": command,
            "result": result,
        });
        self.write(name, &(serde_json::to_string_pretty(&doc)? + "\n"))
    }

    fn read(&self, explicit: &Option<PathBuf>, default: &str) -> Result<String> {
        let path = explicit.clone().unwrap_or_else(|| self.out.join(default));
        fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn plant_build(ctx: &Ctx) -> Result<()> {
    let plant = build_reference_plant(&ctx.cfg.plant)?;
    let p_tf = plant.path_tf(P_INPUT)?;
    let q_tf = plant.path_tf(Q_INPUT)?;
    ctx.write_json(
        "plant.json",
        "plant build",
        &json!({
            "state_space": plant.combined.record(),
            "true_modes": plant.true_modes,
            "p_path": p_tf,
            "q_path": q_tf,
        }),
    )?;
    let band = ctx.cfg.identification.band_hz;
    ctx.write_csv("plant_bode_p.csv", &bode_table(&p_tf, band, 200)?)?;
    ctx.write_csv("plant_bode_q.csv", &bode_table(&q_tf, band, 200)?)?;
    let dt = 0.01;
    let y = free_response(&plant, &ctx.cfg.simulation.scenario, dt, ctx.cfg.simulation.duration_s)?;
    let mut csv = String::from("t_s,omega_g_pu\n");
    for (k, v) in y.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", fmt_sig(k as f64 * dt), fmt_sig(*v)));
    }
    ctx.write_csv("free_response.csv", &csv)
}

fn channel_measure(ctx: &Ctx, messages: usize) -> Result<()> {
    let log = measure_campaign(&ctx.cfg.channel, messages)?;
    ctx.write_csv("delay_log.csv", &log.to_csv())?;
    let stats = throughput_from_log(&log, 1.0)?;
    let summary = json!({
        "messages": messages,
        "mean_delay_s": log.mean_delay(),
        "configured_mean_delay_s": ctx.cfg.channel.delay.mean(),
        "throughput": stats,
        "mass_on_3_4": stats.mass_on(&[3, 4]),
        "nyquist_limit_hz": nyquist_limit(ctx.cfg.channel.rate_hz)?,
    });
    println!(
        "mean delay {:.4} s, {:.1}% of 1 s windows carry 3-4 messages",
        log.mean_delay(),
        100.0 * stats.mass_on(&[3, 4])
    );
    ctx.write_json("throughput.json", "channel measure", &summary)
}

fn channel_fit(ctx: &Ctx, log: &Option<PathBuf>, bins: usize) -> Result<()> {
    let log = DelayLog::from_csv(&ctx.read(log, "delay_log.csv")?)?;
    let fit = DelayDistribution::fit_histogram(&log.delays(), bins)?;
    let rec = fit.histogram_record().expect("fit returns a histogram");
    println!("fitted {} bins, mean {:.4} s", bins, rec.mean_s);
    // Top-level layout stays loadable as `delay_histogram_file`.
    let doc = json!({
        "config_hash": ctx.hash,
        "seed": ctx.seed,
        "edges": rec.edges,
        "probabilities": rec.probabilities,
        "mean_s": rec.mean_s,
    });
    ctx.write("delay_histogram.json", &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn sysid_prbs(ctx: &Ctx) -> Result<()> {
    let plant = build_reference_plant(&ctx.cfg.plant)?;
    for (name, input) in [("p", P_INPUT), ("q", Q_INPUT)] {
        let rec = run_experiment(&plant.combined.select_input(input)?, &ctx.cfg.identification)?;
        ctx.write_csv(&format!("experiment_{name}.csv"), &rec.to_csv())?;
    }
    Ok(())
}

fn sysid_fit(ctx: &Ctx, exp_p: &Option<PathBuf>, exp_q: &Option<PathBuf>) -> Result<()> {
    let mut paths = serde_json::Map::new();
    for (name, explicit) in [("p", exp_p), ("q", exp_q)] {
        let rec = ExperimentRecord::from_csv(&ctx.read(explicit, &format!("experiment_{name}.csv"))?)?;
        let frf = experiment_frf(&rec, &ctx.cfg.identification)?;
        let fit = fit_rational(&frf.points, ctx.cfg.identification.fit_order, FitOptions::default())?;
        let modes = find_modes(&fit)?;
        let mut csv = String::from("freq_hz,mag_db,phase_deg,coherence\n");
        for (p, c) in frf.points.iter().zip(&frf.coherence) {
            csv.push_str(&format!("{},{},{},{}\n", fmt_sig(p.freq_hz), fmt_sig(p.mag_db()), fmt_sig(p.phase_deg()), fmt_sig(*c)));
        }
        ctx.write_csv(&format!("frf_{name}.csv"), &csv)?;
        let freqs: Vec<f64> = frf.points.iter().map(|p| p.freq_hz).collect();
        ctx.write_csv(&format!("fit_bode_{name}.csv"), &bode_csv(&bode_rows(&fit.tf, &freqs)?))?;
        println!(
            "{name}: modes {:.4} / {:.4} Hz, fit error {:.3} dB / {:.2}°",
            modes.0 / (2.0 * std::f64::consts::PI),
            modes.1 / (2.0 * std::f64::consts::PI),
            fit.frf_fit_mag_err_db,
            fit.frf_fit_phase_err_deg
        );
        paths.insert(name.into(), json!({ "fit": fit, "modes_rad_s": [modes.0, modes.1] }));
    }
    ctx.write_json("identified.json", "sysid fit", &paths)
}

fn design_run(ctx: &Ctx) -> Result<()> {
    let (_, out) = pipeline::run_design(&ctx.cfg)?;
    for (name, ld) in [("P", &out.p), ("Q", &out.q)] {
        let d = ld.design();
        println!(
            "{name}: T = [{:.4}, {:.4}, {:.4}, {:.4}] s, K = {:.4}, limit {:.4} pu, loop phase {:.2e}° / {:.2e}°",
            d.t1_s,
            d.t2_s,
            d.t3_s,
            d.t4_s,
            d.gain,
            d.limit_pu,
            ld.report.budgets[0].open_loop_wrapped_deg(),
            ld.report.budgets[1].open_loop_wrapped_deg()
        );
    }
    ctx.write_json("design.json", "design run", &out)
}

fn analyze_bode(ctx: &Ctx, points: usize) -> Result<()> {
    let (_, out) = pipeline::run_design(&ctx.cfg)?;
    let band = ctx.cfg.design.band_hz;
    for (name, ld) in [("p", &out.p), ("q", &out.q)] {
        let parts = ld.parts(&out.surrogate)?;
        ctx.write_csv(&format!("bode_open_loop_{name}.csv"), &bode_table(&open_loop(&parts)?, band, points)?)?;
        ctx.write_csv(&format!("bode_compensator_{name}.csv"), &bode_table(&parts.compensator, band, points)?)?;
    }
    let freqs = logspace(band.0, band.1, points);
    ctx.write_csv("bode_delay_surrogate.csv", &bode_csv(&bode_rows(&out.surrogate.pade, &freqs)?))
}

fn analyze_eig(ctx: &Ctx) -> Result<()> {
    let (_, out) = pipeline::run_design(&ctx.cfg)?;
    let mut delays = DEFAULT_SWEEP_DELAYS.to_vec();
    if !delays.iter().any(|d| (d - out.surrogate.theta_s).abs() < 1e-12) {
        delays.push(out.surrogate.theta_s);
        delays.sort_by(f64::total_cmp);
    }
    let mut studies = serde_json::Map::new();
    for (name, ld) in [("p", &out.p), ("q", &out.q)] {
        let parts = ld.parts(&out.surrogate)?;
        let study = delay_sweep(&parts, ld.modes_rad_s, &delays, out.surrogate.theta_s, ctx.cfg.design.band_hz)?;
        for c in &study.cases {
            println!(
                "{name} {}: ζ = {:.3} @ {:.3} Hz, {:.3} @ {:.3} Hz",
                c.label, c.modes[0].damping_ratio, c.modes[0].freq_hz, c.modes[1].damping_ratio, c.modes[1].freq_hz
            );
        }
        studies.insert(name.into(), serde_json::to_value(&study)?);
    }
    ctx.write_json("eig.json", "analyze eig", &studies)
}

fn sim_run(ctx: &Ctx) -> Result<()> {
    let (ident, out) = pipeline::run_design(&ctx.cfg)?;
    let sim = &ctx.cfg.simulation;
    let on = run_closed_loop(&ident.plant, out.p.design(), out.q.design(), &ctx.cfg.channel, sim, ctx.seed, true)?;
    let off = run_closed_loop(&ident.plant, out.p.design(), out.q.design(), &ctx.cfg.channel, sim, ctx.seed, false)?;
    let (m_on, m_off) = (damping_metric(&on, sim.window())?, damping_metric(&off, sim.window())?);
    println!("energy ratio POD on / off: {:.4}", m_on / m_off);
    ctx.write_csv("trace.csv", &on.to_csv())?;
    ctx.write_csv("trace_pod_off.csv", &off.to_csv())?;
    ctx.write_json(
        "run.json",
        "sim run",
        &json!({ "metric_pod_on": m_on, "metric_pod_off": m_off, "ratio": m_on / m_off, "window_s": sim.window() }),
    )
}

fn sim_ensemble(ctx: &Ctx, runs: Option<usize>) -> Result<()> {
    let (ident, out) = pipeline::run_design(&ctx.cfg)?;
    let n = runs.unwrap_or(ctx.cfg.simulation.n_runs);
    let stats = ensemble(n, ctx.seed, &ident.plant, out.p.design(), out.q.design(), &ctx.cfg.channel, &ctx.cfg.simulation)?;
    println!("{n} runs: median ratio {:.4}, max ratio {:.4}", stats.median_ratio, stats.max_ratio);
    ctx.write_json("ensemble.json", "sim ensemble", &stats)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx::load(&cli.global)?;
    match &cli.group {
        Group::Plant(PlantCmd::Build) => plant_build(&ctx),
        Group::Channel(ChannelCmd::Measure { messages }) => channel_measure(&ctx, *messages),
        Group::Channel(ChannelCmd::Fit { log, bins }) => channel_fit(&ctx, log, *bins),
        Group::Sysid(SysidCmd::Prbs) => sysid_prbs(&ctx),
        Group::Sysid(SysidCmd::Fit { experiment_p, experiment_q }) => sysid_fit(&ctx, experiment_p, experiment_q),
        Group::Design(DesignCmd::Run) => design_run(&ctx),
        Group::Analyze(AnalyzeCmd::Bode { points }) => analyze_bode(&ctx, *points),
        Group::Analyze(AnalyzeCmd::Eig) => analyze_eig(&ctx),
        Group::Sim(SimCmd::Run) => sim_run(&ctx),
        Group::Sim(SimCmd::Ensemble { runs }) => sim_ensemble(&ctx, *runs),
    }
}

/// Run the command line and return the process exit code: 0 on success, 1
/// on a domain error, 2 on a usage error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
