//! Command-line front end: excitation flights, identification,
//! discretization, controller synthesis, tracking simulation, and the two
//! UDP link roles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use quadnav::axis_model::zoh_discretize;
use quadnav::config::{AppConfig, ModelSection};
use quadnav::ident::{identify, Axis, ExcitationSpec, FlightLog};
use quadnav::link;
use quadnav::mpc::{write_setup_report, MpcSetup};
use quadnav::sigproc::linearity_report;
use quadnav::sim::{run_closed_loop, run_excitation, Controller, PlantState, SimConfig};

#[derive(Parser)]
#[command(name = "quadnav", about = "Quadcopter identification and steady-state-aware MPC toolkit", version)]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the RNG seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly a single-axis multisine excitation under PD control and log it.
    Excite {
        /// Axis to excite: x, y, or z.
        #[arg(long)]
        axis: String,
        /// Flight duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Output CSV log path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV spectrum report of the position response.
        #[arg(long)]
        spectrum_out: Option<PathBuf>,
    },
    /// Fit the per-axis model from three excitation logs.
    Identify {
        #[arg(long)]
        log_x: PathBuf,
        #[arg(long)]
        log_y: PathBuf,
        #[arg(long)]
        log_z: PathBuf,
        /// Write the fitted model as a TOML `[model]` section.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact zero-order-hold discretization of the model.
    Discretize {
        /// Sampling period in seconds.
        #[arg(long)]
        ts: Option<f64>,
    },
    /// Synthesize the MPC (maps, terminal cost/gain/set) and write the
    /// setup artifact.
    Synthesize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate closed-loop MPC tracking of the configured scenario.
    Track {
        #[arg(long)]
        duration: Option<f64>,
        /// Output CSV log path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the simulated plant over UDP.
    ServePlant {
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Fly the MPC over UDP against a plant server.
    Fly {
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::from_path(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

fn parse_axis(s: &str) -> anyhow::Result<Axis> {
    match s.to_ascii_lowercase().as_str() {
        "x" => Ok(Axis::X),
        "y" => Ok(Axis::Y),
        "z" => Ok(Axis::Z),
        other => bail!("unknown axis '{other}' (expected x, y, or z)"),
    }
}

fn synthesize_setup(cfg: &AppConfig) -> anyhow::Result<MpcSetup> {
    let model = cfg.continuous_model()?;
    let discrete = zoh_discretize(&model, cfg.timing.control_dt)?;
    Ok(MpcSetup::synthesize(
        &discrete,
        cfg.mpc_weights(),
        cfg.input_bounds(),
        cfg.mpc.omega_cap,
    )?)
}

fn read_log(path: &PathBuf) -> anyhow::Result<FlightLog> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(FlightLog::read_csv(BufReader::new(file))?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Excite {
            axis,
            duration,
            out,
            spectrum_out,
        } => {
            let axis = parse_axis(axis)?;
            let duration = duration.unwrap_or(cfg.sim.duration);
            let spec = ExcitationSpec::standard(axis, duration);
            let mut sim_cfg = SimConfig::excitation(cfg.continuous_model()?);
            sim_cfg.noise_sigma = cfg.sim.noise_sigma;
            sim_cfg.seed = cfg.sim.seed;
            sim_cfg.duration = duration;
            sim_cfg.bounds = cfg.input_bounds();
            let outp = run_excitation(&sim_cfg, &spec, &cfg.pd_gains())?;
            let file = File::create(out)?;
            outp.log.write_csv(BufWriter::new(file))?;
            if let Some(sp) = spectrum_out {
                let pos = outp.log.position_series(axis)?;
                let u = outp.log.input_series(axis)?;
                let report = linearity_report(&u, &pos, &spec.probe_freqs())?;
                report.write_csv(BufWriter::new(File::create(sp)?))?;
                if report.nonlinear_flag {
                    eprintln!("warning: off-probe spectral energy suggests nonlinearity");
                }
            }
            println!(
                "excited {} axis for {:.1} s: {} samples, max |u| = {:.4}, max bound violation = {:.2e}",
                axis.name(),
                duration,
                outp.log.rows.len(),
                outp.max_input[axis.index()],
                outp.max_bound_violation
            );
        }
        Command::Identify {
            log_x,
            log_y,
            log_z,
            out,
        } => {
            let (model, fits) = identify(
                &read_log(log_x)?,
                &read_log(log_y)?,
                &read_log(log_z)?,
                &cfg.input_bounds(),
            )?;
            for fit in &fits {
                println!(
                    "{}: alpha = {:.6}, beta = {:.6}, residual rms = {:.3e} ({} rows)",
                    fit.axis.name(),
                    fit.alpha_hat,
                    fit.beta_hat,
                    fit.residual_rms,
                    fit.sample_count
                );
            }
            if let Some(path) = out {
                let section = ModelSection {
                    alpha: [model.x_axis.alpha, model.y_axis.alpha, model.z_axis.alpha],
                    beta: [model.x_axis.beta, model.y_axis.beta, model.z_axis.beta],
                };
                let mut f = File::create(path)?;
                writeln!(f, "[model]")?;
                writeln!(f, "alpha = [{}, {}, {}]", section.alpha[0], section.alpha[1], section.alpha[2])?;
                writeln!(f, "beta = [{}, {}, {}]", section.beta[0], section.beta[1], section.beta[2])?;
            }
        }
        Command::Discretize { ts } => {
            let ts = ts.unwrap_or(cfg.timing.control_dt);
            let model = cfg.continuous_model()?;
            let d = zoh_discretize(&model, ts)?;
            println!("Ts = {ts}");
            println!("A =");
            for i in 0..6 {
                let row: Vec<String> = (0..6).map(|j| format!("{:+.9}", d.a[(i, j)])).collect();
                println!("  {}", row.join(" "));
            }
            println!("B =");
            for i in 0..6 {
                let row: Vec<String> = (0..3).map(|j| format!("{:+.9}", d.b[(i, j)])).collect();
                println!("  {}", row.join(" "));
            }
        }
        Command::Synthesize { out } => {
            let setup = synthesize_setup(&cfg)?;
            write_setup_report(&setup, BufWriter::new(File::create(out)?))?;
            println!(
                "synthesis complete: omega* = {}, terminal set rows = {}, artifact -> {}",
                setup.terminal.omega_star,
                setup.terminal.hx.nrows(),
                out.display()
            );
        }
        Command::Track { duration, out } => {
            let setup = synthesize_setup(&cfg)?;
            let mut sim_cfg = cfg.sim_config()?;
            if let Some(d) = duration {
                sim_cfg.duration = *d;
            }
            let scenario = cfg.scenario()?;
            let outp = run_closed_loop(
                &sim_cfg,
                &scenario,
                &Controller::Mpc(&setup),
                PlantState::default(),
            )?;
            let (mean, std) = outp.solve_time_stats();
            println!(
                "tracked for {:.1} s: rms error = {:.4} m, final error = {:.4} m",
                sim_cfg.duration, outp.rms_error, outp.final_error
            );
            println!(
                "solves: {} total, {:.3} +/- {:.3} ms, max bound violation = {:.2e}",
                outp.solves.len(),
                mean * 1e3,
                std * 1e3,
                outp.max_bound_violation
            );
            if let Some(path) = out {
                outp.log.write_csv(BufWriter::new(File::create(path)?))?;
            }
        }
        Command::ServePlant { duration } => {
            let mut sim_cfg = cfg.sim_config()?;
            sim_cfg.delay_steps = 0; // latency comes from the link itself
            if let Some(d) = duration {
                sim_cfg.duration = *d;
            }
            let report = link::serve_plant(
                &sim_cfg,
                cfg.link.plant_addr.parse().context("plant_addr")?,
                cfg.link.ctrl_addr.parse().context("ctrl_addr")?,
                cfg.link.time_scale,
                None,
            )?;
            println!(
                "plant served {} ticks: {} poses sent, {} commands ({} stale, {} malformed)",
                report.trajectory.len(),
                report.stats.sent,
                report.stats.received,
                report.stats.stale_dropped,
                report.stats.malformed
            );
        }
        Command::Fly { duration } => {
            let setup = synthesize_setup(&cfg)?;
            let sim_cfg = cfg.sim_config()?;
            let duration = duration.unwrap_or(sim_cfg.duration);
            let report = link::fly(
                &setup,
                &cfg.scenario()?,
                cfg.link.ctrl_addr.parse().context("ctrl_addr")?,
                cfg.link.plant_addr.parse().context("plant_addr")?,
                sim_cfg.control_ratio(),
                sim_cfg.sensor_dt,
                duration,
                Duration::from_secs(5),
            )?;
            println!(
                "flew over the link: {} poses ({} stale dropped), {} commands sent",
                report.stats.received, report.stats.stale_dropped, report.stats.sent
            );
            if let Some((t, pos)) = report.poses.last() {
                println!("last pose t = {t:.2}, position = [{:.3}, {:.3}, {:.3}]", pos[0], pos[1], pos[2]);
            }
        }
    }
    Ok(())
}
