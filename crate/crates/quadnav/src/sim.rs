//! Closed-loop simulator: exact discrete plant propagation at the sensor
//! rate, measurement noise, an input delay line, and either the PD loop
//! (excitation flights) or the steady-state-aware MPC.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::axis_model::{zoh_axis, AxisBlock, ContinuousModel};
use crate::ident::{
    excitation_reference, pd_control, saturate, DesiredState, ExcitationSpec, FlightLog, LogRow,
    MeasuredState, PdGains,
};
use crate::mpc::{mpc_step, InputBounds, MpcSetup, MpcWarm, StepDiagnostics};
use crate::{Error, Result};

/// True plant state: per-axis position/velocity plus kinematic yaw.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlantState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub yaw: f64,
}

/// Simulation timing, noise, and actuation settings.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: ContinuousModel,
    /// Sensor / plant propagation period (120 Hz).
    pub sensor_dt: f64,
    /// Controller period; a multiple of `sensor_dt` (MPC: 0.2 s).
    pub control_dt: f64,
    /// Std dev of the additive position measurement noise \[m\].
    pub noise_sigma: f64,
    /// Actuation delay in controller ticks.
    pub delay_steps: usize,
    pub bounds: InputBounds,
    pub seed: u64,
    pub duration: f64,
}

impl SimConfig {
    /// Settings of the tracking experiments: 120 Hz sensing, 5 Hz control,
    /// one-tick actuation delay.
    pub fn tracking(model: ContinuousModel) -> Self {
        Self {
            model,
            sensor_dt: 1.0 / 120.0,
            control_dt: 0.2,
            noise_sigma: 2e-5,
            delay_steps: 1,
            bounds: InputBounds::default(),
            seed: 0,
            duration: 60.0,
        }
    }

    /// Settings of the identification flights: PD at the sensor rate, no
    /// commanded delay.
    pub fn excitation(model: ContinuousModel) -> Self {
        Self {
            model,
            sensor_dt: 1.0 / 120.0,
            control_dt: 1.0 / 120.0,
            noise_sigma: 2e-5,
            delay_steps: 0,
            bounds: InputBounds::default(),
            seed: 0,
            duration: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_dt > 0.0) || !(self.duration > 0.0) {
            return Err(Error::InvalidParameter(
                "sensor_dt and duration must be positive".into(),
            ));
        }
        let ratio = self.control_dt / self.sensor_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 - 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "control_dt must be an integer multiple of sensor_dt (ratio {ratio})"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        self.bounds.validate()
    }

    pub fn control_ratio(&self) -> usize {
        (self.control_dt / self.sensor_dt).round() as usize
    }
}

/// Reference trajectory of a run.
#[derive(Debug, Clone)]
pub enum Scenario {
    /// Piecewise-constant waypoints `(start time, position)`, held until the
    /// next entry.
    Waypoints(Vec<(f64, Vector3<f64>)>),
    /// Figure-eight at constant altitude.
    Lemniscate { a: f64, period: f64, z_ref: f64 },
    /// Single-axis multisine around hover (PD excitation flights).
    Excitation(ExcitationSpec),
}

impl Scenario {
    /// Default figure-eight: 1 m lobe scale, 30 s lap, 1.5 m altitude.
    pub fn standard_lemniscate() -> Self {
        Self::Lemniscate {
            a: 1.0,
            period: 30.0,
            z_ref: 1.5,
        }
    }

    /// Reference position and velocity at time `t`.
    pub fn reference_at(&self, t: f64) -> Result<DesiredState> {
        match self {
            Self::Waypoints(points) => {
                if points.is_empty() {
                    return Err(Error::InvalidParameter("empty waypoint list".into()));
                }
                let mut pos = points[0].1;
                for &(start, p) in points {
                    if t + 1e-12 >= start {
                        pos = p;
                    }
                }
                Ok(DesiredState {
                    pos,
                    vel: Vector3::zeros(),
                })
            }
            Self::Lemniscate { a, period, z_ref } => {
                if !(*a > 0.0) || !(*period > 0.0) {
                    return Err(Error::InvalidParameter(
                        "lemniscate scale and period must be positive".into(),
                    ));
                }
                let w = 2.0 * std::f64::consts::PI / period;
                let phi = w * t;
                let (s, c) = phi.sin_cos();
                let d = 1.0 + s * s;
                let x = a * c / d;
                let y = a * s * c / d;
                // d/dphi of the Bernoulli parameterization.
                let dx = -a * s * (3.0 - s * s) / (d * d);
                let dy = a * ((c * c - s * s) * d - 2.0 * s * s * c * c) / (d * d);
                Ok(DesiredState {
                    pos: Vector3::new(x, y, *z_ref),
                    vel: Vector3::new(dx * w, dy * w, 0.0),
                })
            }
            Self::Excitation(spec) => excitation_reference(spec, t.min(spec.duration)),
        }
    }
}

/// Controller running inside the loop.
pub enum Controller<'a> {
    Pd(PdGains),
    Mpc(&'a MpcSetup),
}

/// Full run output: the flight log at the sensor rate plus controller
/// diagnostics.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: FlightLog,
    /// `(t, theta*)` at each MPC tick (empty for PD runs).
    pub theta_history: Vec<(f64, Vector3<f64>)>,
    /// Per-solve diagnostics (empty for PD runs).
    pub solves: Vec<StepDiagnostics>,
    /// Largest pre-saturation input-bound violation across the run.
    pub max_bound_violation: f64,
    /// Final true position error against the reference.
    pub final_error: f64,
    /// RMS of the position tracking error over the run.
    pub rms_error: f64,
    /// Largest applied input magnitude per channel.
    pub max_input: [f64; 4],
    pub final_state: PlantState,
}

impl SimOutput {
    /// Mean and standard deviation of the solve wall time in seconds.
    pub fn solve_time_stats(&self) -> (f64, f64) {
        if self.solves.is_empty() {
            return (0.0, 0.0);
        }
        let times: Vec<f64> = self.solves.iter().map(|d| d.solve_time.as_secs_f64()).collect();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
        (mean, var.sqrt())
    }
}

/// Per-axis exact discretization blocks at step `dt`.
pub fn plant_blocks(model: &ContinuousModel, dt: f64) -> Result<[AxisBlock; 3]> {
    Ok([
        zoh_axis(model.x_axis, dt)?,
        zoh_axis(model.y_axis, dt)?,
        zoh_axis(model.z_axis, dt)?,
    ])
}

/// One exact-discretization plant step of length `dt` encoded in the
/// per-axis blocks.
pub fn plant_step(blocks: &[AxisBlock; 3], state: &PlantState, u: [f64; 4], dt: f64) -> PlantState {
    let mut pos = state.pos;
    let mut vel = state.vel;
    for axis in 0..3 {
        let b = &blocks[axis];
        let p = pos[axis];
        let v = vel[axis];
        pos[axis] = p + b.a12 * v + b.b1 * u[axis];
        vel[axis] = b.a22 * v + b.b2 * u[axis];
    }
    PlantState {
        pos,
        vel,
        yaw: state.yaw + u[3] * dt,
    }
}

/// Position measurement with additive Gaussian noise.
pub fn measure(state: &PlantState, sigma: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    if sigma == 0.0 {
        return state.pos;
    }
    let dist = Normal::new(0.0, sigma).expect("valid normal");
    Vector3::new(
        state.pos[0] + dist.sample(rng),
        state.pos[1] + dist.sample(rng),
        state.pos[2] + dist.sample(rng),
    )
}

/// Run the closed loop from `initial` and return the log plus diagnostics.
///
/// The plant advances at `sensor_dt` with the currently applied input held
/// (zero-order hold); the controller fires every `control_ratio` sensor
/// ticks and its command passes through a `delay_steps`-tick delay line.
/// The MPC receives the measured position and a backward-difference
/// velocity estimate in its state.
pub fn run_closed_loop(
    config: &SimConfig,
    scenario: &Scenario,
    controller: &Controller,
    initial: PlantState,
) -> Result<SimOutput> {
    config.validate()?;
    let blocks = plant_blocks(&config.model, config.sensor_dt)?;
    let ratio = config.control_ratio();
    let n_steps = (config.duration / config.sensor_dt).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial;
    let mut prev_meas = initial.pos;
    let mut prev_yaw = initial.yaw;
    let mut delay: VecDeque<[f64; 4]> = VecDeque::new();
    for _ in 0..config.delay_steps {
        delay.push_back([0.0; 4]);
    }
    let mut applied = [0.0f64; 4];
    let mut warm = MpcWarm::new();

    let mut rows = Vec::with_capacity(n_steps);
    let mut theta_history = Vec::new();
    let mut solves = Vec::new();
    let mut max_bound_violation = 0.0f64;
    let mut max_input = [0.0f64; 4];
    let mut err_sq_sum = 0.0;
    let mut final_error = 0.0;

    for k in 0..n_steps {
        let t = k as f64 * config.sensor_dt;
        let meas_pos = measure(&state, config.noise_sigma, &mut rng);
        let meas_vel = if k == 0 {
            Vector3::zeros()
        } else {
            (meas_pos - prev_meas) / config.sensor_dt
        };
        let yaw_rate = (state.yaw - prev_yaw) / config.sensor_dt;
        prev_meas = meas_pos;
        prev_yaw = state.yaw;
        let desired = scenario.reference_at(t)?;

        if k % ratio == 0 {
            let cmd = match controller {
                Controller::Pd(gains) => {
                    let pose = MeasuredState {
                        pos: meas_pos,
                        vel: meas_vel,
                        yaw: state.yaw,
                        yaw_rate,
                    };
                    let mut raw = pd_control(gains, &pose, &desired);
                    // Align each channel with the plant's input sign
                    // convention (the identified gains are negative), so a
                    // positive position error accelerates toward it.
                    let betas = [
                        config.model.x_axis.beta,
                        config.model.y_axis.beta,
                        config.model.z_axis.beta,
                    ];
                    for j in 0..3 {
                        if betas[j] < 0.0 {
                            raw[j] = -raw[j];
                        }
                    }
                    let sat = saturate(raw, &config.bounds);
                    for j in 0..4 {
                        let lim = if j < 3 {
                            config.bounds.u_max[j]
                        } else {
                            config.bounds.yaw_max
                        };
                        max_bound_violation = max_bound_violation.max(sat[j].abs() - lim);
                    }
                    sat
                }
                Controller::Mpc(setup) => {
                    let x = nalgebra::Vector6::new(
                        meas_pos[0], meas_vel[0], meas_pos[1], meas_vel[1], meas_pos[2],
                        meas_vel[2],
                    );
                    let (u, theta, diag) = mpc_step(setup, &x, &desired.pos, &mut warm)?;
                    max_bound_violation = max_bound_violation.max(diag.bound_violation);
                    theta_history.push((t, theta));
                    solves.push(diag);
                    // Safety-net clip at solver tolerance level.
                    let sat = saturate([u[0], u[1], u[2], 0.0], &config.bounds);
                    sat
                }
            };
            delay.push_back(cmd);
            if let Some(front) = delay.pop_front() {
                applied = front;
            }
        }

        rows.push(LogRow {
            t,
            ref_pos: [desired.pos[0], desired.pos[1], desired.pos[2]],
            pos: [state.pos[0], state.pos[1], state.pos[2]],
            u: [applied[0], applied[1], applied[2]],
            u_yaw: applied[3],
            vel: None,
            acc: None,
        });
        for j in 0..4 {
            max_input[j] = max_input[j].max(applied[j].abs());
        }
        let err = (state.pos - desired.pos).norm();
        err_sq_sum += err * err;
        final_error = err;

        state = plant_step(&blocks, &state, applied, config.sensor_dt);
    }

    Ok(SimOutput {
        log: FlightLog { dt: config.sensor_dt, rows },
        theta_history,
        solves,
        max_bound_violation,
        final_error,
        rms_error: (err_sq_sum / n_steps as f64).sqrt(),
        max_input,
        final_state: state,
    })
}

/// Run the standard single-axis excitation flight under PD control and
/// return its log, ready for identification.
pub fn run_excitation(
    config: &SimConfig,
    spec: &ExcitationSpec,
    gains: &PdGains,
) -> Result<SimOutput> {
    let mut cfg = config.clone();
    cfg.duration = cfg.duration.min(spec.duration);
    run_closed_loop(
        &cfg,
        &Scenario::Excitation(spec.clone()),
        &Controller::Pd(*gains),
        PlantState::default(),
    )
}
