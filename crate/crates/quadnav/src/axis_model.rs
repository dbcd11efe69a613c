//! Per-axis continuous model, exact zero-order-hold discretization, and
//! closed-form response oracles.
//!
//! Each axis obeys `p_ddot + alpha * p_dot = beta * u` with `alpha > 0`.
//! State ordering is fixed as `[p_x, v_x, p_y, v_y, p_z, v_z]` and shared by
//! every module in the crate.

use nalgebra::{Matrix2, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Below this value of `alpha * Ts` the discretization switches to a series
/// expansion to avoid catastrophic cancellation in `(1 - e^{-a T}) / a`.
pub const SMALL_ALPHA_TS: f64 = 1e-6;

/// Drag-like coefficient and input gain of one translational axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisParams {
    /// Drag-like coefficient [1/s]; positive for a physical vehicle.
    pub alpha: f64,
    /// Input gain; [m/s^2 per rad] for x/y, [1/s] for z.
    pub beta: f64,
}

impl AxisParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite axis parameters (alpha={alpha}, beta={beta})"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// Decoupled three-axis continuous model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    pub x_axis: AxisParams,
    pub y_axis: AxisParams,
    pub z_axis: AxisParams,
}

impl ContinuousModel {
    pub fn new(x_axis: AxisParams, y_axis: AxisParams, z_axis: AxisParams) -> Self {
        Self {
            x_axis,
            y_axis,
            z_axis,
        }
    }

    /// Identified parameters of the reference vehicle.
    pub fn bebop2() -> Self {
        Self {
            x_axis: AxisParams {
                alpha: 0.0527,
                beta: -5.4779,
            },
            y_axis: AxisParams {
                alpha: 0.0187,
                beta: -7.0608,
            },
            z_axis: AxisParams {
                alpha: 1.7873,
                beta: -1.7382,
            },
        }
    }

    pub fn axes(&self) -> [AxisParams; 3] {
        [self.x_axis, self.y_axis, self.z_axis]
    }
}

/// Discrete-time model `x(k+1) = A x(k) + B u(k)`, `y = C x`, obtained by
/// exact zero-order hold at sampling period `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
    pub c: Matrix3x6<f64>,
    pub ts: f64,
}

/// One 2x2 axis block of the ZOH discretization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisBlock {
    pub a12: f64,
    pub a22: f64,
    pub b1: f64,
    pub b2: f64,
}

/// Exact ZOH discretization of a single axis.
///
/// `a12 = (1 - e^{-a T})/a`, `a22 = e^{-a T}`, `b1 = beta (T - a12)/a`,
/// `b2 = beta a12`, with a Taylor branch when `a T < SMALL_ALPHA_TS`.
pub fn zoh_axis(axis: AxisParams, ts: f64) -> Result<AxisBlock> {
    if !ts.is_finite() || ts <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sampling period must be positive and finite, got {ts}"
        )));
    }
    if !axis.alpha.is_finite() || !axis.beta.is_finite() {
        return Err(Error::InvalidParameter(
            "non-finite axis parameters".into(),
        ));
    }
    let x = axis.alpha * ts;
    let a22 = (-x).exp();
    let (a12, b1) = if x.abs() < SMALL_ALPHA_TS {
        // 3rd-order expansions in x = alpha*Ts.
        let a12 = ts * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
        let b1 = axis.beta * ts * ts * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0);
        (a12, b1)
    } else {
        // exp_m1 keeps full precision where 1 - e^{-x} would cancel.
        let a12 = -(-x).exp_m1() / axis.alpha;
        let b1 = axis.beta * (ts - a12) / axis.alpha;
        (a12, b1)
    };
    Ok(AxisBlock {
        a12,
        a22,
        b1,
        b2: axis.beta * a12,
    })
}

/// ZOH discretization of the full three-axis model.
pub fn zoh_discretize(model: &ContinuousModel, ts: f64) -> Result<DiscreteModel> {
    let blocks = [
        zoh_axis(model.x_axis, ts)?,
        zoh_axis(model.y_axis, ts)?,
        zoh_axis(model.z_axis, ts)?,
    ];
    let mut a = Matrix6::zeros();
    let mut b = Matrix6x3::zeros();
    for (i, blk) in blocks.iter().enumerate() {
        let r = 2 * i;
        a[(r, r)] = 1.0;
        a[(r, r + 1)] = blk.a12;
        a[(r + 1, r + 1)] = blk.a22;
        b[(r, i)] = blk.b1;
        b[(r + 1, i)] = blk.b2;
    }
    Ok(DiscreteModel {
        a,
        b,
        c: position_selector(),
        ts,
    })
}

/// Output matrix selecting the three positions from the interleaved state.
pub fn position_selector() -> Matrix3x6<f64> {
    let mut c = Matrix3x6::zeros();
    c[(0, 0)] = 1.0;
    c[(1, 2)] = 1.0;
    c[(2, 4)] = 1.0;
    c
}

impl DiscreteModel {
    /// One exact propagation step under piecewise-constant input.
    pub fn exact_step(&self, x: &Vector6<f64>, u: &Vector3<f64>) -> Vector6<f64> {
        self.a * x + self.b * u
    }

    /// The 2x2 block of the given axis (0 = x, 1 = y, 2 = z).
    pub fn axis_block(&self, axis: usize) -> Matrix2<f64> {
        let r = 2 * axis;
        Matrix2::new(self.a[(r, r)], self.a[(r, r + 1)], 0.0, self.a[(r + 1, r + 1)])
    }
}

/// Position at time `t` when coasting from initial velocity `v0` with zero
/// input: `(v0/alpha)(1 - e^{-alpha t})`.
pub fn free_response(axis: AxisParams, v0: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    v0 / axis.alpha * (1.0 - (-axis.alpha * t).exp())
}

/// Position at time `t` under constant input `u0` from rest:
/// `(beta u0/alpha) t + (beta u0/alpha^2)(e^{-alpha t} - 1)`.
///
/// The slope tends to `beta u0 / alpha` (constant steady-state velocity).
pub fn step_response(axis: AxisParams, u0: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    let g = axis.beta * u0 / axis.alpha;
    g * t + g / axis.alpha * ((-axis.alpha * t).exp() - 1.0)
}

/// Velocity at time `t` under constant input `u0` from rest.
pub fn step_velocity(axis: AxisParams, u0: f64, t: f64) -> f64 {
    let g = axis.beta * u0 / axis.alpha;
    g * (1.0 - (-axis.alpha * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_model() -> ContinuousModel {
        ContinuousModel::bebop2()
    }

    #[test]
    fn rejects_nonpositive_alpha() {
        assert!(AxisParams::new(0.0, 1.0).is_err());
        assert!(AxisParams::new(-0.1, 1.0).is_err());
        assert!(AxisParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn zoh_matches_printed_matrices() {
        let d = zoh_discretize(&paper_model(), 0.2).unwrap();
        // Printed A_d entries.
        let a_expected = [
            (0, 1, 0.19895),
            (1, 1, 0.98952),
            (2, 3, 0.19963),
            (3, 3, 0.99627),
            (4, 5, 0.16816),
            (5, 5, 0.69946),
        ];
        for &(r, c, v) in &a_expected {
            assert!(
                (d.a[(r, c)] - v).abs() < 1e-3,
                "A[({r},{c})] = {} vs {v}",
                d.a[(r, c)]
            );
        }
        let b_expected = [
            (0, 0, -0.10917348),
            (1, 0, -1.08982035),
            (2, 1, -0.141040918),
            (3, 1, -1.409531141),
            (4, 2, -0.030967224),
            (5, 2, -0.292295416),
        ];
        for &(r, c, v) in &b_expected {
            assert!(
                (d.b[(r, c)] - v).abs() < 1e-3,
                "B[({r},{c})] = {} vs {v}",
                d.b[(r, c)]
            );
        }
        assert_eq!(d.c, position_selector());
    }

    #[test]
    fn zoh_z_axis_block() {
        let blk = zoh_axis(AxisParams { alpha: 1.7873, beta: -1.7382 }, 0.2).unwrap();
        assert!((blk.a22 - 0.69946).abs() < 1e-4);
        assert!((blk.a12 - 0.16816).abs() < 1e-4);
        assert!((blk.b2 - (-0.29230)).abs() < 1e-4);
    }

    #[test]
    fn zoh_small_alpha_is_double_integrator() {
        let blk = zoh_axis(AxisParams { alpha: 1e-9, beta: 1.0 }, 0.2).unwrap();
        assert!((blk.a12 - 0.2).abs() < 1e-9);
        assert!((blk.b1 - 0.02).abs() < 1e-10);
        assert!((blk.b2 - 0.2).abs() < 1e-9);
    }

    #[test]
    fn zoh_continuous_across_branch_switch() {
        // alpha*Ts straddling the series threshold.
        let ts = 0.2;
        let a_lo = SMALL_ALPHA_TS / ts * (1.0 - 1e-9);
        let a_hi = SMALL_ALPHA_TS / ts * (1.0 + 1e-9);
        let lo = zoh_axis(AxisParams { alpha: a_lo, beta: 1.0 }, ts).unwrap();
        let hi = zoh_axis(AxisParams { alpha: a_hi, beta: 1.0 }, ts).unwrap();
        assert!((lo.a12 - hi.a12).abs() < 1e-10);
        assert!((lo.b1 - hi.b1).abs() < 1e-10);
        assert!((lo.b2 - hi.b2).abs() < 1e-10);
    }

    #[test]
    fn free_response_examples() {
        let axis = AxisParams { alpha: 1.0, beta: 1.0 };
        assert!((free_response(axis, 1.0, 1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(free_response(axis, 0.0, 5.0), 0.0);
        // Asymptote sigma/alpha.
        let ax = AxisParams { alpha: 0.0527, beta: -5.4779 };
        let sigma = 0.3;
        assert!((free_response(ax, sigma, 1e4) - sigma / ax.alpha).abs() < 1e-6);
    }

    #[test]
    fn step_response_examples() {
        let axis = AxisParams { alpha: 1.0, beta: 1.0 };
        assert_eq!(step_response(axis, 0.0, 10.0), 0.0);
        let expect = 2.0 + (-2.0f64).exp() - 1.0;
        assert!((step_response(axis, 1.0, 2.0) - expect).abs() < 1e-12);
        // Steady-state velocity sigma*beta/alpha.
        let ax = AxisParams { alpha: 0.0527, beta: -5.4779 };
        let sigma = 0.05;
        let v_inf = sigma * ax.beta / ax.alpha;
        assert!((step_velocity(ax, sigma, 1e4) - v_inf).abs() < 1e-9);
    }

    #[test]
    fn exact_step_matches_paper_block() {
        let d = zoh_discretize(&paper_model(), 0.2).unwrap();
        let mut x = Vector6::zeros();
        x[1] = 1.0; // unit x velocity
        let next = d.exact_step(&x, &Vector3::zeros());
        assert!((next[0] - 0.19895).abs() < 1e-3);
        assert!((next[1] - 0.98952).abs() < 1e-3);
    }

    #[test]
    fn exact_step_zero_fixed_point() {
        let d = zoh_discretize(&paper_model(), 0.2).unwrap();
        let next = d.exact_step(&Vector6::zeros(), &Vector3::zeros());
        assert_eq!(next, Vector6::zeros());
    }

    #[test]
    fn composed_steps_match_step_response() {
        let model = paper_model();
        let ts = 0.2;
        let d = zoh_discretize(&model, ts).unwrap();
        let u = Vector3::new(0.03, -0.02, 0.1);
        let mut x = Vector6::zeros();
        let n = 50;
        for _ in 0..n {
            x = d.exact_step(&x, &u);
        }
        let t = n as f64 * ts;
        for (i, axis) in model.axes().iter().enumerate() {
            let p = step_response(*axis, u[i], t);
            let v = step_velocity(*axis, u[i], t);
            assert!((x[2 * i] - p).abs() <= 1e-9 * p.abs().max(1.0), "axis {i} pos");
            assert!((x[2 * i + 1] - v).abs() <= 1e-9 * v.abs().max(1.0), "axis {i} vel");
        }
    }

    proptest! {
        #[test]
        fn block_eigenvalues_are_one_and_exp(alpha in 1e-4f64..5.0, ts in 1e-3f64..1.0) {
            let blk = zoh_axis(AxisParams { alpha, beta: 1.0 }, ts).unwrap();
            // Upper-triangular block: eigenvalues on the diagonal.
            prop_assert!((blk.a22 - (-alpha * ts).exp()).abs() < 1e-12);
            prop_assert!(blk.a22 > 0.0 && blk.a22 < 1.0);
        }

        #[test]
        fn composition_equals_closed_form(
            alpha in 0.01f64..2.0,
            beta in -10.0f64..-0.5,
            u0 in -0.06f64..0.06,
            n in 1usize..200,
        ) {
            let axis = AxisParams { alpha, beta };
            let ts = 0.2;
            let blk = zoh_axis(axis, ts).unwrap();
            let (mut p, mut v) = (0.0f64, 0.0f64);
            for _ in 0..n {
                let (p1, v1) = (p + blk.a12 * v + blk.b1 * u0, blk.a22 * v + blk.b2 * u0);
                p = p1;
                v = v1;
            }
            let t = n as f64 * ts;
            let p_ref = step_response(axis, u0, t);
            prop_assert!((p - p_ref).abs() <= 1e-9 * p_ref.abs().max(1.0));
        }
    }
}
