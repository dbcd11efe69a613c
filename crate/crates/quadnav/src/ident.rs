//! Closed-loop identification: PD nominal controller, multi-sine excitation
//! reference, flight-log bookkeeping, and the least-squares parameter fit.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::axis_model::{AxisParams, ContinuousModel};
use crate::mpc::InputBounds;
use crate::sigproc::{difference_quotient, lowpass, Series};
use crate::{exec, Error, Result};

/// Velocity-data low-pass cutoff used ahead of the acceleration difference.
pub const VEL_FILTER_HZ: f64 = 5.0;
/// Acceleration smoothing cutoff.
pub const ACC_FILTER_HZ: f64 = 10.0;
/// Rows discarded at the start of a log to let the filters settle.
pub const WARMUP_SECONDS: f64 = 2.0;
/// Fits are rejected when input RMS falls below this fraction of the
/// saturation bound.
pub const MIN_INPUT_RMS_FRACTION: f64 = 1e-4;
/// Condition-number cap on the regression design matrix.
pub const MAX_DESIGN_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// PD gains for the three translational axes and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp_x: f64,
    pub kp_y: f64,
    pub kp_z: f64,
    pub kp_yaw: f64,
    pub kd_x: f64,
    pub kd_y: f64,
    pub kd_z: f64,
    pub kd_yaw: f64,
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kp_x, self.kp_y, self.kp_z, self.kp_yaw, self.kd_x, self.kd_y, self.kd_z,
            self.kd_yaw,
        ];
        if all.iter().any(|&g| !(g.is_finite() && g > 0.0)) {
            return Err(Error::InvalidParameter(
                "all PD gains must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PdGains {
    /// Gains used on the reference vehicle.
    fn default() -> Self {
        Self {
            kp_x: 0.050,
            kp_y: 0.050,
            kp_z: 1.700,
            kp_yaw: 1.000,
            kd_x: 0.065,
            kd_y: 0.065,
            kd_z: 0.200,
            kd_yaw: 0.800,
        }
    }
}

/// Measured vehicle state as seen by the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

/// Desired position and feed-forward velocity (yaw setpoint is zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
}

/// Raw PD law: `u_i = -kp_i (p_i - p_i^d) - kd_i (v_i - v_i^d)`, yaw
/// regulated to zero. Returns `[u_x, u_y, u_z, u_yaw]` before saturation.
pub fn pd_control(gains: &PdGains, pose: &MeasuredState, desired: &DesiredState) -> [f64; 4] {
    let kp = [gains.kp_x, gains.kp_y, gains.kp_z];
    let kd = [gains.kd_x, gains.kd_y, gains.kd_z];
    let mut u = [0.0f64; 4];
    for i in 0..3 {
        u[i] = -kp[i] * (pose.pos[i] - desired.pos[i]) - kd[i] * (pose.vel[i] - desired.vel[i]);
    }
    u[3] = -gains.kp_yaw * pose.yaw - gains.kd_yaw * pose.yaw_rate;
    u
}

/// Componentwise clamp of the raw input to the admissible box.
pub fn saturate(u: [f64; 4], bounds: &InputBounds) -> [f64; 4] {
    [
        u[0].clamp(-bounds.u_max[0], bounds.u_max[0]),
        u[1].clamp(-bounds.u_max[1], bounds.u_max[1]),
        u[2].clamp(-bounds.u_max[2], bounds.u_max[2]),
        u[3].clamp(-bounds.yaw_max, bounds.yaw_max),
    ]
}

/// Multi-sine excitation reference for one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    /// `(amplitude [m], frequency [Hz])` pairs.
    pub components: Vec<(f64, f64)>,
    pub duration: f64,
    pub axis: Axis,
}

impl ExcitationSpec {
    /// The identification trajectory: components at 0.1, 0.2, 0.35 and
    /// 0.5 Hz with amplitudes 0.3, 0.06, 0.01, 0.01 m.
    pub fn standard(axis: Axis, duration: f64) -> Self {
        Self {
            components: vec![(0.3, 0.1), (0.06, 0.2), (0.01, 0.35), (0.01, 0.5)],
            duration,
            axis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidParameter("excitation duration must be positive".into()));
        }
        for (i, &(_, f)) in self.components.iter().enumerate() {
            if !(f > 0.0) {
                return Err(Error::InvalidParameter(format!("frequency {f} must be positive")));
            }
            if self.components[..i].iter().any(|&(_, g)| (g - f).abs() < 1e-12) {
                return Err(Error::InvalidParameter(format!("duplicate frequency {f}")));
            }
        }
        Ok(())
    }

    pub fn probe_freqs(&self) -> Vec<f64> {
        self.components.iter().map(|&(_, f)| f).collect()
    }
}

/// Reference position and analytic feed-forward velocity for the active
/// axis at time `t`; off-axis references are zero.
pub fn excitation_reference(spec: &ExcitationSpec, t: f64) -> Result<DesiredState> {
    if t < 0.0 || t > spec.duration {
        return Err(Error::OutOfRange {
            t,
            duration: spec.duration,
        });
    }
    let mut pos = 0.0;
    let mut vel = 0.0;
    for &(a, f) in &spec.components {
        let w = 2.0 * std::f64::consts::PI * f;
        pos += a * (w * t).sin();
        vel += a * w * (w * t).cos();
    }
    let mut out = DesiredState {
        pos: Vector3::zeros(),
        vel: Vector3::zeros(),
    };
    out.pos[spec.axis.index()] = pos;
    out.vel[spec.axis.index()] = vel;
    Ok(out)
}

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub ref_pos: [f64; 3],
    pub pos: [f64; 3],
    pub u: [f64; 3],
    pub u_yaw: f64,
    pub vel: Option<[f64; 3]>,
    pub acc: Option<[f64; 3]>,
}

/// Timestamped record of one flight at fixed sampling period `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightLog {
    pub dt: f64,
    pub rows: Vec<LogRow>,
}

impl FlightLog {
    pub fn new(dt: f64) -> Self {
        Self { dt, rows: Vec::new() }
    }

    pub fn position_series(&self, axis: Axis) -> Result<Series> {
        let i = axis.index();
        Series::new(
            self.rows.first().map_or(0.0, |r| r.t),
            self.dt,
            self.rows.iter().map(|r| r.pos[i]).collect(),
        )
    }

    pub fn input_series(&self, axis: Axis) -> Result<Series> {
        let i = axis.index();
        Series::new(
            self.rows.first().map_or(0.0, |r| r.t),
            self.dt,
            self.rows.iter().map(|r| r.u[i]).collect(),
        )
    }

    /// CSV header: `t,ref_x,ref_y,ref_z,pos_x,pos_y,pos_z,u_x,u_y,u_z,u_yaw`
    /// with `vel_*` / `acc_*` appended when the derived columns are present.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let with_vel = self.rows.iter().all(|r| r.vel.is_some()) && !self.rows.is_empty();
        let with_acc = self.rows.iter().all(|r| r.acc.is_some()) && !self.rows.is_empty();
        let mut header =
            String::from("t,ref_x,ref_y,ref_z,pos_x,pos_y,pos_z,u_x,u_y,u_z,u_yaw");
        if with_vel {
            header.push_str(",vel_x,vel_y,vel_z");
        }
        if with_acc {
            header.push_str(",acc_x,acc_y,acc_z");
        }
        writeln!(w, "{header}")?;
        for r in &self.rows {
            write!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.ref_pos[0],
                r.ref_pos[1],
                r.ref_pos[2],
                r.pos[0],
                r.pos[1],
                r.pos[2],
                r.u[0],
                r.u[1],
                r.u[2],
                r.u_yaw
            )?;
            if with_vel {
                let v = r.vel.unwrap();
                write!(w, ",{},{},{}", v[0], v[1], v[2])?;
            }
            if with_acc {
                let a = r.acc.unwrap();
                write!(w, ",{},{},{}", a[0], a[1], a[2])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::CsvParse {
                line: 1,
                message: "empty file".into(),
            })??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 11 || cols[0] != "t" {
            return Err(Error::CsvParse {
                line: 1,
                message: format!("unexpected header: {header}"),
            });
        }
        let has_vel = cols.len() >= 14 && cols[11] == "vel_x";
        let has_acc = cols.last() == Some(&"acc_z");

        let mut rows = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .trim()
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::CsvParse {
                    line: idx + 2,
                    message: e.to_string(),
                })?;
            if vals.len() != cols.len() {
                return Err(Error::CsvParse {
                    line: idx + 2,
                    message: format!("expected {} fields, got {}", cols.len(), vals.len()),
                });
            }
            let mut cursor = 11;
            let vel = if has_vel {
                cursor += 3;
                Some([vals[11], vals[12], vals[13]])
            } else {
                None
            };
            let acc = if has_acc {
                Some([vals[cursor], vals[cursor + 1], vals[cursor + 2]])
            } else {
                None
            };
            rows.push(LogRow {
                t: vals[0],
                ref_pos: [vals[1], vals[2], vals[3]],
                pos: [vals[4], vals[5], vals[6]],
                u: [vals[7], vals[8], vals[9]],
                u_yaw: vals[10],
                vel,
                acc,
            });
        }
        let dt = if rows.len() >= 2 { rows[1].t - rows[0].t } else { 1.0 / 120.0 };
        Ok(Self { dt, rows })
    }
}

/// Result of a single-axis least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub axis: Axis,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub residual_rms: f64,
    pub sample_count: usize,
}

/// Build the regression `acc = -alpha * vel + beta * u` from a flight log.
///
/// The acceleration column is the doubly differenced position passed through
/// the 5 Hz and 10 Hz low-pass stages. The velocity and input columns are
/// passed through the *same* filter chain (plus half-sample averaging for
/// the second difference) so all three columns carry identical phase; the
/// model relation between them is then preserved exactly by linearity.
/// Rows inside the filter warm-up window are dropped.
pub fn build_regression(log: &FlightLog, axis: Axis) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let warmup = (WARMUP_SECONDS / log.dt).round() as usize;
    if log.rows.len() < warmup + 20 {
        return Err(Error::SeriesTooShort {
            need: warmup + 20,
            got: log.rows.len(),
        });
    }
    let pos = log.position_series(axis)?;
    let u = log.input_series(axis)?;

    // Acceleration chain: diff -> LP5 -> diff -> LP10.
    let vel_raw = difference_quotient(&pos)?;
    let vel_filt = lowpass(&vel_raw, VEL_FILTER_HZ)?;
    let acc_raw = difference_quotient(&vel_filt)?;
    let acc = lowpass(&acc_raw, ACC_FILTER_HZ)?;

    // Velocity column: half-sample average stands in for the second
    // difference's delay, then the same two filters.
    let vel_avg = Series::new(
        vel_raw.t0 + 0.5 * log.dt,
        log.dt,
        vel_raw.samples.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
    )?;
    let vel_col = lowpass(&lowpass(&vel_avg, VEL_FILTER_HZ)?, ACC_FILTER_HZ)?;

    // Input column: the same half-sample average (the double difference of
    // a zero-order-hold trajectory sees the two hold segments equally).
    let u_avg = Series::new(
        u.t0 + 0.5 * log.dt,
        log.dt,
        u.samples.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
    )?;
    let u_filt = lowpass(&lowpass(&u_avg, VEL_FILTER_HZ)?, ACC_FILTER_HZ)?;

    let n_rows = acc.len().saturating_sub(warmup);
    if n_rows < 10 {
        return Err(Error::SeriesTooShort { need: warmup + 12, got: log.rows.len() });
    }
    let mut design = DMatrix::zeros(n_rows, 2);
    let mut target = DVector::zeros(n_rows);
    for i in 0..n_rows {
        let k = warmup + i;
        design[(i, 0)] = -vel_col.samples[k];
        design[(i, 1)] = u_filt.samples[k];
        target[i] = acc.samples[k];
    }
    Ok((design, target))
}

/// Solve `min || design * [alpha; beta] - target ||` via normal equations.
pub fn least_squares_fit(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<(f64, f64, f64)> {
    let n = design.nrows();
    if n < 10 {
        return Err(Error::InsufficientExcitation(format!(
            "need at least 10 rows, got {n}"
        )));
    }
    let gram = design.transpose() * design;
    let eig = gram.symmetric_eigenvalues();
    let (e_min, e_max) = (eig.min(), eig.max());
    if e_min <= 0.0 || (e_max / e_min).sqrt() > MAX_DESIGN_CONDITION {
        return Err(Error::InsufficientExcitation(format!(
            "design matrix condition number {:.3e} exceeds {MAX_DESIGN_CONDITION:.0e}",
            if e_min > 0.0 { (e_max / e_min).sqrt() } else { f64::INFINITY }
        )));
    }
    let rhs = design.transpose() * target;
    let sol = gram
        .cholesky()
        .ok_or_else(|| Error::InsufficientExcitation("normal equations not SPD".into()))?
        .solve(&rhs);
    let residual = design * &sol - target;
    let rms = (residual.norm_squared() / n as f64).sqrt();
    Ok((sol[0], sol[1], rms))
}

/// Fit one axis from its excitation log.
pub fn fit_axis(log: &FlightLog, axis: Axis, bounds: &InputBounds) -> Result<FitResult> {
    let u = log.input_series(axis)?;
    let u_rms = (u.samples.iter().map(|v| v * v).sum::<f64>() / u.len().max(1) as f64).sqrt();
    let bound = bounds.u_max[axis.index()];
    if u_rms < MIN_INPUT_RMS_FRACTION * bound {
        return Err(Error::InsufficientExcitation(format!(
            "{} axis input RMS {u_rms:.3e} below {MIN_INPUT_RMS_FRACTION:e} of bound {bound}",
            axis.name()
        )));
    }
    let (design, target) = build_regression(log, axis)?;
    let (alpha, beta, rms) = least_squares_fit(&design, &target)?;
    if alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha {
            axis: axis.name(),
            alpha,
        });
    }
    Ok(FitResult {
        axis,
        alpha_hat: alpha,
        beta_hat: beta,
        residual_rms: rms,
        sample_count: design.nrows(),
    })
}

/// Identify all three axes (one excitation log per axis) and assemble the
/// continuous model. The axes are independent and run in parallel when the
/// `parallel` feature is enabled.
pub fn identify(
    log_x: &FlightLog,
    log_y: &FlightLog,
    log_z: &FlightLog,
    bounds: &InputBounds,
) -> Result<(ContinuousModel, [FitResult; 3])> {
    let jobs = vec![(log_x, Axis::X), (log_y, Axis::Y), (log_z, Axis::Z)];
    let fits = exec::map(jobs, |(log, axis): (&FlightLog, Axis)| {
        fit_axis(log, axis, bounds)
    });
    let mut results = Vec::with_capacity(3);
    for fit in fits {
        results.push(fit?);
    }
    let model = ContinuousModel::new(
        AxisParams::new(results[0].alpha_hat, results[0].beta_hat)?,
        AxisParams::new(results[1].alpha_hat, results[1].beta_hat)?,
        AxisParams::new(results[2].alpha_hat, results[2].beta_hat)?,
    );
    Ok((model, [results[0], results[1], results[2]]))
}
