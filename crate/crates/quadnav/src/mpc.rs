//! Steady-state-aware MPC synthesis and per-step solve: steady-state
//! characterizing maps, Riccati terminal cost, terminal gain, maximal
//! admissible terminal set, and condensed QP construction.
//!
//! The decision vector of the per-step QP is `z = [u(0); ...; u(N-1); theta]`
//! where `theta` parameterizes an artificial steady state `M theta`, steady
//! input `W theta`, and steady output `L theta`.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::axis_model::DiscreteModel;
use crate::qp::{self, QpProblem, QpSolution, QpStatus, WarmStart};
use crate::{Error, Result};

/// Convergence threshold on the Riccati fixed-point update.
pub const DARE_UPDATE_TOL: f64 = 1e-10;
/// Iteration cap for the Riccati fixed point.
pub const DARE_MAX_ITER: usize = 100_000;
/// Required DARE residual of the accepted terminal cost.
pub const DARE_RESIDUAL_TOL: f64 = 1e-8;
/// Constraint tightening inside the determinacy-search redundancy LPs.
pub const DETERMINACY_MARGIN: f64 = 1e-6;
/// Default cap on the determinacy index search.
pub const OMEGA_CAP: usize = 200;

const QP_TOL: f64 = 1e-6;
const QP_MAX_ITER: usize = 20_000;

/// Symmetric box bounds on the control input (plus the yaw channel clamp
/// used by the PD loop; yaw is not part of the MPC input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub u_max: [f64; 3],
    pub yaw_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            u_max: [0.06, 0.06, 0.6],
            yaw_max: 1.0,
        }
    }
}

impl InputBounds {
    pub fn validate(&self) -> Result<()> {
        if self.u_max.iter().chain([&self.yaw_max]).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(
                "input bounds must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Maps from the characterizing vector to steady state / input / output:
/// `x_f = M theta`, `u_f = W theta`, `r = L theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateMaps {
    pub m: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// Horizon and cost weights of the per-step problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcWeights {
    pub horizon: usize,
    pub qx: DMatrix<f64>,
    pub qu: DMatrix<f64>,
    pub qr: DMatrix<f64>,
    pub qfx: DMatrix<f64>,
    pub qfu: DMatrix<f64>,
}

impl MpcWeights {
    /// Experimental weights: `N = 10`, `Qx = 5 I6`, `Qu = diag(35, 20, 1)`,
    /// `Qr = 500 I3`, `Qfx = I6`, `Qfu = 0`.
    pub fn standard() -> Self {
        Self {
            horizon: 10,
            qx: DMatrix::identity(6, 6) * 5.0,
            qu: DMatrix::from_diagonal(&DVector::from_vec(vec![35.0, 20.0, 1.0])),
            qr: DMatrix::identity(3, 3) * 500.0,
            qfx: DMatrix::identity(6, 6),
            qfu: DMatrix::zeros(3, 3),
        }
    }

    pub fn validate(&self, n_states: usize, n_inputs: usize, n_outputs: usize) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        check_symmetric_psd("Qx", &self.qx, n_states, false)?;
        check_symmetric_psd("Qu", &self.qu, n_inputs, true)?;
        check_symmetric_psd("Qr", &self.qr, n_outputs, true)?;
        check_symmetric_psd("Qfx", &self.qfx, n_states, false)?;
        check_symmetric_psd("Qfu", &self.qfu, n_inputs, false)?;
        Ok(())
    }
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>, dim: usize, strict: bool) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if (m - m.transpose()).amax() > 1e-10 {
        return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    let floor = if strict { 1e-12 } else { -1e-10 };
    if min_eig < floor {
        return Err(Error::InvalidParameter(format!(
            "{name} has eigenvalue {min_eig:.3e} below the definiteness floor"
        )));
    }
    Ok(())
}

/// Terminal cost, terminal gain, and the terminal set
/// `Omega = {(x, theta) : Hx x + Htheta theta <= bound}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub qn: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub omega_star: usize,
    pub hx: DMatrix<f64>,
    pub htheta: DMatrix<f64>,
    pub hbound: DVector<f64>,
}

/// Spectral radius via complex eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Rank check of the controllability matrix `[B AB ... A^{n-1}B]`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    ctrb.rank(1e-9 * ctrb.amax().max(1.0)) == n
}

/// Solve the steady-state equations `[A - I, B; C, 0] [M; W] = [0; L]`
/// with `L = I`, and verify the consistency identities.
pub fn build_maps(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<SteadyStateMaps> {
    let n = a.nrows();
    let m_in = b.ncols();
    let p = c.nrows();
    if p != m_in {
        return Err(Error::DimensionMismatch(format!(
            "steady-state map needs square coupling (inputs {m_in} vs outputs {p})"
        )));
    }
    if !is_controllable(a, b) {
        return Err(Error::SteadyStateRankDeficient);
    }
    let dim = n + p;
    let mut sys = DMatrix::zeros(dim, dim);
    sys.view_mut((0, 0), (n, n)).copy_from(&(a - DMatrix::identity(n, n)));
    sys.view_mut((0, n), (n, m_in)).copy_from(b);
    sys.view_mut((n, 0), (p, n)).copy_from(c);
    let lu = sys.lu();

    let mut m_map = DMatrix::zeros(n, p);
    let mut w_map = DMatrix::zeros(m_in, p);
    for j in 0..p {
        let mut rhs = DVector::zeros(dim);
        rhs[n + j] = 1.0;
        let sol = lu.solve(&rhs).ok_or(Error::SteadyStateRankDeficient)?;
        m_map.set_column(j, &sol.rows(0, n));
        w_map.set_column(j, &sol.rows(n, m_in));
    }
    let l_map = DMatrix::identity(p, p);

    // Consistency: M = A M + B W and L = C M.
    let res1 = (&m_map - (a * &m_map + b * &w_map)).amax();
    let res2 = (&l_map - c * &m_map).amax();
    if res1 > 1e-8 || res2 > 1e-8 {
        return Err(Error::SteadyStateRankDeficient);
    }
    Ok(SteadyStateMaps {
        m: m_map,
        l: l_map,
        w: w_map,
    })
}

/// Riccati fixed-point iteration
/// `Q <- A'QA - (A'QB)(Qu + B'QB)^{-1}(B'QA) + Qx` from `Q0 = Qx`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    qu: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut q = qx.clone();
    for _ in 0..DARE_MAX_ITER {
        let bqa = b.transpose() * &q * a;
        let inner = qu + b.transpose() * &q * b;
        let inv = inner
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("Qu + B'QB not positive definite".into()))?
            .inverse();
        let mut q_next = a.transpose() * &q * a - bqa.transpose() * inv * &bqa + qx;
        // Symmetrize to keep roundoff from accumulating.
        q_next = (&q_next + q_next.transpose()) * 0.5;
        let update = (&q_next - &q).amax();
        q = q_next;
        if update < DARE_UPDATE_TOL {
            return Ok(q);
        }
    }
    Err(Error::RiccatiDiverged(DARE_MAX_ITER))
}

/// Infinity norm of the DARE residual at `q`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    qu: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> f64 {
    let bqa = b.transpose() * q * a;
    let inner = qu + b.transpose() * q * b;
    let inv = inner.lu().try_inverse().expect("inner matrix invertible");
    let rhs = a.transpose() * q * a - bqa.transpose() * inv * &bqa + qx;
    (q - rhs).amax()
}

/// Terminal gain `K = -(Qu + B'QN B)^{-1} (B'QN A)`; the closed loop
/// `A + BK` must be Schur.
pub fn terminal_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qu: &DMatrix<f64>,
    qn: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let inner = qu + b.transpose() * qn * b;
    let inv = inner
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("Qu + B'QN B not positive definite".into()))?
        .inverse();
    let k = -(inv * (b.transpose() * qn * a));
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        return Err(Error::UnstableTerminalGain(rho));
    }
    Ok(k)
}

/// Six half-space rows (one +/- pair per input) of `K Phi^omega xi` within
/// the input box, stacked for `omega = 0..=omega_star`.
///
/// Uses the algebraically consistent terminal-law propagation
/// `u_hat(omega | x, theta) = K (A + BK)^omega (x - M theta)`, and finds the
/// determinacy index Gilbert-Tan style: the smallest `omega` for which every
/// constraint row at step `omega + 1` is implied (with margin) by the rows
/// up to `omega`, checked by redundancy LPs. Unbounded LPs at small `omega`
/// simply advance the search.
pub fn terminal_set(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    m_map: &DMatrix<f64>,
    u_max: &[f64],
    omega_cap: usize,
) -> Result<(usize, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    let m_in = b.ncols();
    assert_eq!(u_max.len(), m_in);
    let phi = a + b * k;
    let rho = spectral_radius(&phi);
    if rho >= 1.0 {
        return Err(Error::UnstableTerminalGain(rho));
    }

    // Rows in xi = x - M theta space for one propagation step.
    let rows_at = |k_phi_pow: &DMatrix<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let mut rows = DMatrix::zeros(2 * m_in, n);
        let mut bound = DVector::zeros(2 * m_in);
        for j in 0..m_in {
            for col in 0..n {
                rows[(2 * j, col)] = k_phi_pow[(j, col)];
                rows[(2 * j + 1, col)] = -k_phi_pow[(j, col)];
            }
            bound[2 * j] = u_max[j];
            bound[2 * j + 1] = u_max[j];
        }
        (rows, bound)
    };

    let mut k_phi = k.clone(); // K Phi^omega, starting at omega = 0
    let (mut stacked_g, mut stacked_b) = rows_at(&k_phi);
    let mut omega = 0usize;
    loop {
        // Candidate rows at step omega + 1.
        let k_phi_next = &k_phi * &phi;
        let (cand_g, cand_b) = rows_at(&k_phi_next);
        let mut all_redundant = true;
        for i in 0..cand_g.nrows() {
            let c = DVector::from_iterator(n, cand_g.row(i).iter().cloned());
            let sol = qp::solve_lp(&c, &stacked_g, &stacked_b, QP_TOL, QP_MAX_ITER)?;
            let redundant = sol.status == QpStatus::Optimal
                && sol.objective <= cand_b[i] - DETERMINACY_MARGIN;
            if !redundant {
                all_redundant = false;
                break;
            }
        }
        if all_redundant {
            break;
        }
        omega += 1;
        if omega > omega_cap {
            return Err(Error::DeterminacyCapExceeded(omega_cap));
        }
        stacked_g = DMatrix::from_rows(
            &stacked_g
                .row_iter()
                .chain(cand_g.row_iter())
                .collect::<Vec<_>>(),
        );
        stacked_b = DVector::from_iterator(
            stacked_b.len() + cand_b.len(),
            stacked_b.iter().chain(cand_b.iter()).cloned(),
        );
        k_phi = k_phi_next;
    }

    // Half-spaces over (x, theta): rows * x - rows * M * theta <= bound.
    let htheta = -&stacked_g * m_map;
    Ok((omega, stacked_g, htheta, stacked_b))
}

/// Fully synthesized controller: model, maps, weights, terminal
/// ingredients, bounds, and the cached condensed matrices.
#[derive(Debug, Clone)]
pub struct MpcSetup {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub ts: f64,
    pub maps: SteadyStateMaps,
    pub weights: MpcWeights,
    pub terminal: TerminalIngredients,
    pub bounds: InputBounds,
    cond: Condensed,
}

/// Condensed matrices that do not depend on the current state or reference.
#[derive(Debug, Clone)]
struct Condensed {
    hess: DMatrix<f64>,
    /// `f = fx_map * x + fr_map * r`.
    fx_map: DMatrix<f64>,
    fr_map: DMatrix<f64>,
    /// Constant cost terms `x' cx x + r' cr r`.
    cx: DMatrix<f64>,
    cr: DMatrix<f64>,
    /// Constraint matrix over `z` (input box then terminal rows).
    g: DMatrix<f64>,
    /// Constant part of the constraint rhs.
    b_const: DVector<f64>,
    /// Terminal rhs correction `-Hx A^N x`.
    term_x_map: DMatrix<f64>,
    /// `A^N`.
    a_pow_n: DMatrix<f64>,
    /// `x_des = xdes_map * r`.
    xdes_map: DMatrix<f64>,
}

impl MpcSetup {
    /// Synthesize the controller for the quadcopter model: steady-state
    /// maps, Riccati terminal cost, terminal gain, terminal set, and the
    /// condensed QP matrices.
    pub fn synthesize(
        model: &DiscreteModel,
        weights: MpcWeights,
        bounds: InputBounds,
        omega_cap: usize,
    ) -> Result<Self> {
        bounds.validate()?;
        let a = DMatrix::from_fn(6, 6, |i, j| model.a[(i, j)]);
        let b = DMatrix::from_fn(6, 3, |i, j| model.b[(i, j)]);
        let c = DMatrix::from_fn(3, 6, |i, j| model.c[(i, j)]);
        // x_des = [r1 0 r2 0 r3 0]'.
        let mut xdes_map = DMatrix::zeros(6, 3);
        xdes_map[(0, 0)] = 1.0;
        xdes_map[(2, 1)] = 1.0;
        xdes_map[(4, 2)] = 1.0;
        Self::from_matrices(a, b, c, model.ts, weights, bounds, omega_cap, xdes_map)
    }

    /// Dimension-generic synthesis path (also used by the scalar oracles in
    /// tests). `xdes_map` maps the reference to the desired steady state.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        ts: f64,
        weights: MpcWeights,
        bounds: InputBounds,
        omega_cap: usize,
        xdes_map: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m_in = b.ncols();
        let p = c.nrows();
        weights.validate(n, m_in, p)?;

        let maps = build_maps(&a, &b, &c)?;
        let qn = solve_dare(&a, &b, &weights.qx, &weights.qu)?;
        let res = dare_residual(&a, &b, &weights.qx, &weights.qu, &qn);
        if res > DARE_RESIDUAL_TOL {
            return Err(Error::RiccatiDiverged(DARE_MAX_ITER));
        }
        let k = terminal_gain(&a, &b, &weights.qu, &qn)?;
        let u_max: Vec<f64> = bounds.u_max[..m_in.min(3)].to_vec();
        let (omega_star, hx, htheta, hbound) =
            terminal_set(&a, &b, &k, &maps.m, &u_max, omega_cap)?;
        let terminal = TerminalIngredients {
            qn,
            k,
            omega_star,
            hx,
            htheta,
            hbound,
        };
        Self::assemble(a, b, c, ts, maps, weights, terminal, bounds, xdes_map)
    }

    /// Assemble the condensed matrices from already-built ingredients.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        ts: f64,
        maps: SteadyStateMaps,
        weights: MpcWeights,
        terminal: TerminalIngredients,
        bounds: InputBounds,
        xdes_map: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m_in = b.ncols();
        let p = c.nrows();
        let horizon = weights.horizon;
        let nz = m_in * horizon + p;

        // Prediction: x_hat(s) = A^s x + S_s U with S_s (n x mN).
        let mut a_pows = Vec::with_capacity(horizon + 1);
        a_pows.push(DMatrix::identity(n, n));
        for s in 1..=horizon {
            a_pows.push(&a_pows[s - 1] * &a);
        }
        let mut s_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
        s_blocks.push(DMatrix::zeros(n, m_in * horizon));
        for s in 1..=horizon {
            let mut s_mat = DMatrix::zeros(n, m_in * horizon);
            for j in 0..s {
                let blk = &a_pows[s - 1 - j] * &b;
                s_mat.view_mut((0, j * m_in), (n, m_in)).copy_from(&blk);
            }
            s_blocks.push(s_mat);
        }

        let mut hess = DMatrix::zeros(nz, nz);
        let mut fx_map = DMatrix::zeros(nz, n);
        let mut fr_map = DMatrix::zeros(nz, p);
        let mut cx = DMatrix::zeros(n, n);
        let mut cr = DMatrix::zeros(p, p);

        // Residual map E (rows x nz) with weight Q and affine parts
        // d = dx_map * x + dr_map * r contributes:
        //   H += 2 E'QE, fx += 2 E'Q dx_map, fr += 2 E'Q dr_map,
        //   cx += dx'Q dx, cr += dr'Q dr.
        let mut add_term = |e: &DMatrix<f64>,
                            q: &DMatrix<f64>,
                            dx: Option<&DMatrix<f64>>,
                            dr: Option<&DMatrix<f64>>| {
            let eq = e.transpose() * q;
            hess += 2.0 * &eq * e;
            if let Some(dx) = dx {
                fx_map += 2.0 * &eq * dx;
                cx += dx.transpose() * q * dx;
            }
            if let Some(dr) = dr {
                fr_map += 2.0 * &eq * dr;
                cr += dr.transpose() * q * dr;
            }
        };

        // Stage state and terminal terms: ||x_hat(s) - M theta||^2.
        for s in 0..=horizon {
            let q = if s == horizon {
                &terminal.qn
            } else {
                &weights.qx
            };
            let mut e = DMatrix::zeros(n, nz);
            e.view_mut((0, 0), (n, m_in * horizon)).copy_from(&s_blocks[s]);
            e.view_mut((0, m_in * horizon), (n, p)).copy_from(&(-&maps.m));
            add_term(&e, q, Some(&a_pows[s]), None);
        }
        // Input terms: ||u(s) - W theta||^2.
        for s in 0..horizon {
            let mut e = DMatrix::zeros(m_in, nz);
            for j in 0..m_in {
                e[(j, s * m_in + j)] = 1.0;
            }
            e.view_mut((0, m_in * horizon), (m_in, p)).copy_from(&(-&maps.w));
            add_term(&e, &weights.qu, None, None);
        }
        // Reference offset: ||r - L theta||^2 with residual (-L theta) + r.
        {
            let mut e = DMatrix::zeros(p, nz);
            e.view_mut((0, m_in * horizon), (p, p)).copy_from(&(-&maps.l));
            add_term(&e, &weights.qr, None, Some(&DMatrix::identity(p, p)));
        }
        // ||M theta - x_des||^2 with x_des = xdes_map * r.
        {
            let mut e = DMatrix::zeros(n, nz);
            e.view_mut((0, m_in * horizon), (n, p)).copy_from(&maps.m);
            add_term(&e, &weights.qfx, None, Some(&(-&xdes_map)));
        }
        // ||W theta - u_des||^2 with u_des = 0 (identically zero for this
        // plant since W = 0).
        {
            let mut e = DMatrix::zeros(m_in, nz);
            e.view_mut((0, m_in * horizon), (m_in, p)).copy_from(&maps.w);
            add_term(&e, &weights.qfu, None, None);
        }
        hess = (&hess + hess.transpose()) * 0.5;

        // Constraints: input box then terminal half-spaces.
        let q_rows = terminal.hx.nrows();
        let n_box = 2 * m_in * horizon;
        let mut g = DMatrix::zeros(n_box + q_rows, nz);
        let mut b_const = DVector::zeros(n_box + q_rows);
        for s in 0..horizon {
            for j in 0..m_in {
                let row = 2 * (s * m_in + j);
                g[(row, s * m_in + j)] = 1.0;
                g[(row + 1, s * m_in + j)] = -1.0;
                b_const[row] = bounds.u_max[j.min(2)];
                b_const[row + 1] = bounds.u_max[j.min(2)];
            }
        }
        if q_rows > 0 {
            let gu = &terminal.hx * &s_blocks[horizon];
            g.view_mut((n_box, 0), (q_rows, m_in * horizon)).copy_from(&gu);
            g.view_mut((n_box, m_in * horizon), (q_rows, p))
                .copy_from(&terminal.htheta);
            b_const.rows_mut(n_box, q_rows).copy_from(&terminal.hbound);
        }
        let term_x_map = if q_rows > 0 {
            -&terminal.hx * &a_pows[horizon]
        } else {
            DMatrix::zeros(0, n)
        };

        let cond = Condensed {
            hess,
            fx_map,
            fr_map,
            cx,
            cr,
            g,
            b_const,
            term_x_map,
            a_pow_n: a_pows[horizon].clone(),
            xdes_map,
        };
        Ok(Self {
            a,
            b,
            c,
            ts,
            maps,
            weights,
            terminal,
            bounds,
            cond,
        })
    }

    pub fn num_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Condensed QP for the current state and reference. The objective of
    /// the returned problem equals the uncondensed cost (the constant part
    /// is carried in `c0`).
    pub fn condense_dyn(&self, x: &DVector<f64>, r: &DVector<f64>) -> Result<QpProblem> {
        if x.len() != self.num_states() || r.len() != self.c.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "state length {} / reference length {}",
                x.len(),
                r.len()
            )));
        }
        let f = &self.cond.fx_map * x + &self.cond.fr_map * r;
        let mut b_vec = self.cond.b_const.clone();
        let q_rows = self.cond.term_x_map.nrows();
        if q_rows > 0 {
            let corr = &self.cond.term_x_map * x;
            let base = b_vec.len() - q_rows;
            for i in 0..q_rows {
                b_vec[base + i] += corr[i];
            }
        }
        let mut p = QpProblem::new(self.cond.hess.clone(), f, self.cond.g.clone(), b_vec)?;
        p.c0 = (x.transpose() * &self.cond.cx * x)[(0, 0)]
            + (r.transpose() * &self.cond.cr * r)[(0, 0)];
        Ok(p)
    }

    /// Fixed-size wrapper over [`Self::condense_dyn`].
    pub fn condense(&self, x: &Vector6<f64>, r: &Vector3<f64>) -> Result<QpProblem> {
        self.condense_dyn(
            &DVector::from_iterator(6, x.iter().cloned()),
            &DVector::from_iterator(3, r.iter().cloned()),
        )
    }

    /// Predicted terminal state for a given decision vector.
    fn predicted_terminal(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let m_in = self.num_inputs();
        let horizon = self.weights.horizon;
        let mut xs = &self.cond.a_pow_n * x;
        // Accumulate S_N U without materializing S_N: A^{N-1-j} B u_j.
        let mut a_pow = DMatrix::identity(self.num_states(), self.num_states());
        for j in (0..horizon).rev() {
            let u_j = z.rows(j * m_in, m_in);
            xs += &a_pow * (&self.b * u_j);
            a_pow = &a_pow * &self.a;
        }
        xs
    }

    /// Desired steady state for a reference.
    pub fn x_des(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.cond.xdes_map * r
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub objective: f64,
    pub iterations: usize,
    pub solve_time: std::time::Duration,
    /// Largest input-bound violation of the returned input before any
    /// safety-net saturation (should be ~solver tolerance).
    pub bound_violation: f64,
}

/// Warm-start state carried across MPC steps: the previous solution plus
/// the terminal quantities needed to append the terminal law.
#[derive(Debug, Clone, Default)]
pub struct MpcWarm {
    prev: Option<QpSolution>,
    prev_terminal_state: Option<DVector<f64>>,
}

impl MpcWarm {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One MPC step: condense, solve (warm-started with the shifted previous
/// solution plus the terminal law, the feasible candidate of the recursive
/// feasibility argument), and return the first input and `theta*`.
pub fn mpc_step_dyn(
    setup: &MpcSetup,
    x: &DVector<f64>,
    r: &DVector<f64>,
    warm: &mut MpcWarm,
) -> Result<(DVector<f64>, DVector<f64>, StepDiagnostics)> {
    let problem = setup.condense_dyn(x, r)?;
    let m_in = setup.num_inputs();
    let horizon = setup.weights.horizon;
    let p = setup.c.nrows();
    let nz = m_in * horizon + p;

    let warm_start = match (&warm.prev, &warm.prev_terminal_state) {
        (Some(prev), Some(xn)) => {
            let mut z = DVector::zeros(nz);
            // Shift the input sequence by one.
            for s in 0..horizon - 1 {
                for j in 0..m_in {
                    z[s * m_in + j] = prev.z[(s + 1) * m_in + j];
                }
            }
            let theta = prev.z.rows(m_in * horizon, p).clone_owned();
            // Append the terminal law K (x_hat(N) - M theta).
            let kappa = &setup.terminal.k * (xn - &setup.maps.m * &theta);
            for j in 0..m_in {
                z[(horizon - 1) * m_in + j] = kappa[j];
            }
            z.rows_mut(m_in * horizon, p).copy_from(&theta);
            WarmStart {
                z: Some(z),
                duals: Some(prev.duals.clone()),
            }
        }
        _ => WarmStart::default(),
    };

    let start = Instant::now();
    let sol = qp::solve_warm(&problem, QP_TOL, QP_MAX_ITER, &warm_start);
    let solve_time = start.elapsed();
    if sol.status != QpStatus::Optimal {
        return Err(Error::QpFailed {
            status: sol.status,
            primal: sol.primal_residual,
            dual: sol.dual_residual,
        });
    }

    let u0 = sol.z.rows(0, m_in).clone_owned();
    let theta = sol.z.rows(m_in * horizon, p).clone_owned();
    let bound_violation = (0..m_in)
        .map(|j| u0[j].abs() - setup.bounds.u_max[j.min(2)])
        .fold(0.0f64, f64::max)
        .max(0.0);
    let diag = StepDiagnostics {
        objective: sol.objective,
        iterations: sol.iterations,
        solve_time,
        bound_violation,
    };
    warm.prev_terminal_state = Some(setup.predicted_terminal(x, &sol.z));
    warm.prev = Some(sol);
    Ok((u0, theta, diag))
}

/// Fixed-size wrapper over [`mpc_step_dyn`].
pub fn mpc_step(
    setup: &MpcSetup,
    x: &Vector6<f64>,
    r: &Vector3<f64>,
    warm: &mut MpcWarm,
) -> Result<(Vector3<f64>, Vector3<f64>, StepDiagnostics)> {
    let (u, theta, diag) = mpc_step_dyn(
        setup,
        &DVector::from_iterator(6, x.iter().cloned()),
        &DVector::from_iterator(3, r.iter().cloned()),
        warm,
    )?;
    Ok((
        Vector3::new(u[0], u[1], u[2]),
        Vector3::new(theta[0], theta[1], theta[2]),
        diag,
    ))
}

/// Sampling-based check of terminal-set positive invariance: draws points
/// of `Omega`, applies the terminal law, and reports the largest violation
/// of either the input box or the successor's membership in `Omega`.
pub fn invariance_violation(setup: &MpcSetup, samples: usize, seed: u64) -> f64 {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let n = setup.num_states();
    let m_in = setup.num_inputs();
    let term = &setup.terminal;
    let phi = &setup.a + &setup.b * &term.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        // Random xi scaled inside the set (Omega's xi-section is convex and
        // contains the origin); a random shrink keeps interior coverage.
        let xi_raw = DVector::from_fn(n, |_, _| rng.random_range(-1.0f64..1.0));
        let mut scale = f64::INFINITY;
        for i in 0..term.hx.nrows() {
            let row_val: f64 = (0..n).map(|j| term.hx[(i, j)] * xi_raw[j]).sum();
            if row_val > 0.0 {
                scale = scale.min(term.hbound[i] / row_val);
            }
        }
        let shrink = rng.random_range(0.0f64..1.0);
        let xi = if scale.is_finite() {
            &xi_raw * (scale * shrink)
        } else {
            xi_raw * shrink
        };

        // Input-box violation of the terminal law.
        let u = &term.k * &xi;
        for j in 0..m_in {
            worst = worst.max(u[j].abs() - setup.bounds.u_max[j.min(2)]);
        }
        // Successor membership.
        let xi_next = &phi * &xi;
        for i in 0..term.hx.nrows() {
            let row_val: f64 = (0..n).map(|j| term.hx[(i, j)] * xi_next[j]).sum();
            worst = worst.max(row_val - term.hbound[i]);
        }
    }
    worst
}

/// Write the synthesis artifact: every matrix at full precision, for audit
/// and reuse.
pub fn write_setup_report<W: Write>(setup: &MpcSetup, mut w: W) -> Result<()> {
    let dump = |w: &mut W, name: &str, m: &DMatrix<f64>| -> Result<()> {
        writeln!(w, "[{name}] {}x{}", m.nrows(), m.ncols())?;
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    };
    writeln!(w, "# steady-state-aware MPC setup artifact")?;
    writeln!(w, "ts = {}", setup.ts)?;
    writeln!(w, "horizon = {}", setup.weights.horizon)?;
    writeln!(w, "omega_star = {}", setup.terminal.omega_star)?;
    writeln!(
        w,
        "u_max = {} {} {}",
        setup.bounds.u_max[0], setup.bounds.u_max[1], setup.bounds.u_max[2]
    )?;
    dump(&mut w, "A", &setup.a)?;
    dump(&mut w, "B", &setup.b)?;
    dump(&mut w, "C", &setup.c)?;
    dump(&mut w, "M", &setup.maps.m)?;
    dump(&mut w, "L", &setup.maps.l)?;
    dump(&mut w, "W", &setup.maps.w)?;
    dump(&mut w, "Q_N", &setup.terminal.qn)?;
    dump(&mut w, "K", &setup.terminal.k)?;
    dump(&mut w, "Omega_Hx", &setup.terminal.hx)?;
    dump(&mut w, "Omega_Htheta", &setup.terminal.htheta)?;
    writeln!(w, "[Omega_bound] {}", setup.terminal.hbound.len())?;
    for v in setup.terminal.hbound.iter() {
        writeln!(w, "{v:.17e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axis_model::{zoh_discretize, ContinuousModel};

    fn paper_setup() -> MpcSetup {
        let d = zoh_discretize(&ContinuousModel::bebop2(), 0.2).unwrap();
        MpcSetup::synthesize(&d, MpcWeights::standard(), InputBounds::default(), OMEGA_CAP)
            .unwrap()
    }

    fn scalar_weights(horizon: usize, qx: f64, qu: f64) -> MpcWeights {
        MpcWeights {
            horizon,
            qx: DMatrix::from_element(1, 1, qx),
            qu: DMatrix::from_element(1, 1, qu),
            qr: DMatrix::from_element(1, 1, 1.0),
            qfx: DMatrix::from_element(1, 1, 0.0),
            qfu: DMatrix::from_element(1, 1, 0.0),
        }
    }

    #[test]
    fn maps_for_paper_model() {
        let d = zoh_discretize(&ContinuousModel::bebop2(), 0.2).unwrap();
        let a = DMatrix::from_fn(6, 6, |i, j| d.a[(i, j)]);
        let b = DMatrix::from_fn(6, 3, |i, j| d.b[(i, j)]);
        let c = DMatrix::from_fn(3, 6, |i, j| d.c[(i, j)]);
        let maps = build_maps(&a, &b, &c).unwrap();
        // M = position-selector transpose, L = I, W = 0.
        assert!((&maps.m - c.transpose()).amax() < 1e-10);
        assert!((&maps.l - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(maps.w.amax() < 1e-10, "W = {}", maps.w);
    }

    #[test]
    fn maps_scalar_system() {
        // a = 0.5, b = 1, c = 1: M = 1, W = 0.5, L = 1.
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let maps = build_maps(&a, &b, &c).unwrap();
        assert!((maps.m[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((maps.w[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((maps.l[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maps_reject_uncontrollable() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_vec(2, 1, vec![1.0, 0.0]);
        let c = DMatrix::from_vec(1, 2, vec![0.0, 1.0]);
        assert!(build_maps(&a, &b, &c).is_err());
    }

    #[test]
    fn dare_scalar_deadbeat() {
        let a = DMatrix::from_element(1, 1, 0.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let qn = solve_dare(&a, &b, &q, &q).unwrap();
        assert!((qn[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dare_scalar_golden_ratio() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let qn = solve_dare(&a, &b, &q, &q).unwrap();
        let expect = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert!((qn[(0, 0)] - expect).abs() < 1e-8, "{}", qn[(0, 0)]);
        let k = terminal_gain(&a, &b, &q, &qn).unwrap();
        assert!((k[(0, 0)] - (-0.618034)).abs() < 1e-5);
        assert!((1.0 + k[(0, 0)] - 0.381966).abs() < 1e-5);
    }

    #[test]
    fn dare_paper_model_certified() {
        let d = zoh_discretize(&ContinuousModel::bebop2(), 0.2).unwrap();
        let a = DMatrix::from_fn(6, 6, |i, j| d.a[(i, j)]);
        let b = DMatrix::from_fn(6, 3, |i, j| d.b[(i, j)]);
        let w = MpcWeights::standard();
        let qn = solve_dare(&a, &b, &w.qx, &w.qu).unwrap();
        assert!(dare_residual(&a, &b, &w.qx, &w.qu, &qn) <= 1e-8);
        assert!((&qn - qn.transpose()).amax() < 1e-10);
        let eig_min = qn.clone().symmetric_eigenvalues().min();
        assert!(eig_min > -1e-10, "Q_N not PSD: {eig_min}");
        let k = terminal_gain(&a, &b, &w.qu, &qn).unwrap();
        assert!(spectral_radius(&(&a + &b * &k)) < 1.0);
    }

    #[test]
    fn terminal_gain_vanishes_with_huge_input_penalty() {
        let d = zoh_discretize(&ContinuousModel::bebop2(), 0.2).unwrap();
        let a = DMatrix::from_fn(6, 6, |i, j| d.a[(i, j)]);
        let b = DMatrix::from_fn(6, 3, |i, j| d.b[(i, j)]);
        let qx = DMatrix::identity(6, 6);
        let qu = DMatrix::identity(3, 3) * 1e9;
        // With an enormous input penalty the gain collapses toward zero.
        let bqa = b.transpose() * &qx * &a;
        let inner = &qu + b.transpose() * &qx * &b;
        let k = -(inner.cholesky().unwrap().inverse() * bqa);
        assert!(k.amax() < 1e-6);
    }

    #[test]
    fn terminal_set_deadbeat_scalar() {
        // a + b k = 0: constraints vanish after one step, omega* = 0.
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let k = DMatrix::from_element(1, 1, -0.5);
        let m_map = DMatrix::from_element(1, 1, 1.0);
        let (omega, hx, _, bound) = terminal_set(&a, &b, &k, &m_map, &[1.0], 50).unwrap();
        assert_eq!(omega, 0);
        assert_eq!(hx.nrows(), 2);
        assert!((bound[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_set_geometric_decay_scalar() {
        // K = 1, a + bk = 0.5: |0.5^1 xi| <= 1 implied by |xi| <= 1.
        let a = DMatrix::from_element(1, 1, -0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let k = DMatrix::from_element(1, 1, 1.0);
        let m_map = DMatrix::from_element(1, 1, 1.0);
        let (omega, _, _, _) = terminal_set(&a, &b, &k, &m_map, &[1.0], 50).unwrap();
        assert_eq!(omega, 0);
    }

    #[test]
    fn paper_terminal_set_finite_and_invariant() {
        let setup = paper_setup();
        assert!(setup.terminal.omega_star <= OMEGA_CAP);
        assert_eq!(
            setup.terminal.hx.nrows(),
            6 * (setup.terminal.omega_star + 1)
        );
        let worst = invariance_violation(&setup, 1000, 42);
        assert!(worst <= 1e-9, "invariance violation {worst:.3e}");
    }

    #[test]
    fn condense_at_steady_state_is_zero() {
        let setup = paper_setup();
        let r = Vector3::new(0.7, -0.4, 1.2);
        let x = Vector6::new(r[0], 0.0, r[1], 0.0, r[2], 0.0);
        let problem = setup.condense(&x, &r).unwrap();
        let mut warm = MpcWarm::new();
        let (u, theta, diag) = mpc_step(&setup, &x, &r, &mut warm).unwrap();
        assert!(u.amax() < 1e-5, "u = {u}");
        assert!((theta - r).amax() < 1e-5, "theta = {theta}");
        assert!(diag.objective.abs() < 1e-6, "objective {}", diag.objective);
        // The uncondensed optimum z = [0...0, r] has objective zero.
        let mut z = DVector::zeros(33);
        z.rows_mut(30, 3).copy_from(&DVector::from_vec(vec![r[0], r[1], r[2]]));
        assert!(problem.objective(&z).abs() < 1e-10);
    }

    #[test]
    fn qfu_term_identically_zero() {
        let setup = paper_setup();
        assert!(setup.maps.w.amax() < 1e-10);
    }

    #[test]
    fn condense_scalar_hand_qp() {
        // N = 1, scalar a = 0.5, b = 1, c = 1, no terminal rows.
        // z = [u0, theta]; qx = 1, qu = 1, qr = 1, qfx = qfu = 0, W = 0.5.
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let maps = build_maps(&a, &b, &c).unwrap();
        let weights = scalar_weights(1, 1.0, 1.0);
        let terminal = TerminalIngredients {
            qn: DMatrix::from_element(1, 1, 1.0),
            k: DMatrix::zeros(1, 1),
            omega_star: 0,
            hx: DMatrix::zeros(0, 1),
            htheta: DMatrix::zeros(0, 1),
            hbound: DVector::zeros(0),
        };
        let setup = MpcSetup::assemble(
            a,
            b,
            c,
            1.0,
            maps,
            weights,
            terminal,
            InputBounds { u_max: [10.0, 10.0, 10.0], yaw_max: 1.0 },
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let x0 = 2.0;
        let r = 1.0;
        let p = setup
            .condense_dyn(
                &DVector::from_element(1, x0),
                &DVector::from_element(1, r),
            )
            .unwrap();
        // Cost: (x0 - th)^2 + (u - 0.5 th)^2 + QN (0.5 x0 + u - th)^2
        //       + (r - th)^2, QN = 1 (qfx = 0).
        // Hand KKT: minimize over (u, th).
        // d/du: 2(u - .5 th) + 2(.5 x0 + u - th) = 0
        // d/dth: -2(x0 - th) - (u - .5 th) - 2(.5 x0 + u - th)(-1)*... do it
        // numerically instead: dense 2x2 solve of H z = -f.
        let z_opt = p.h.clone().cholesky().unwrap().solve(&(-&p.f));
        // Cross-check against a brute-force grid refinement.
        let eval = |u: f64, th: f64| -> f64 {
            (x0 - th).powi(2)
                + (u - 0.5 * th).powi(2)
                + (0.5 * x0 + u - th).powi(2)
                + (r - th).powi(2)
        };
        let (mut best_u, mut best_th, mut best) = (0.0, 0.0, f64::INFINITY);
        let mut lo_u = -5.0;
        let mut hi_u = 5.0;
        let mut lo_t = -5.0;
        let mut hi_t = 5.0;
        for _ in 0..8 {
            let (mut bu, mut bt, mut bv) = (best_u, best_th, best);
            for iu in 0..=60 {
                for it in 0..=60 {
                    let u = lo_u + (hi_u - lo_u) * iu as f64 / 60.0;
                    let th = lo_t + (hi_t - lo_t) * it as f64 / 60.0;
                    let v = eval(u, th);
                    if v < bv {
                        bu = u;
                        bt = th;
                        bv = v;
                    }
                }
            }
            best_u = bu;
            best_th = bt;
            best = bv;
            let du = (hi_u - lo_u) / 10.0;
            let dt = (hi_t - lo_t) / 10.0;
            lo_u = bu - du;
            hi_u = bu + du;
            lo_t = bt - dt;
            hi_t = bt + dt;
        }
        assert!((z_opt[0] - best_u).abs() < 1e-4, "u {} vs {best_u}", z_opt[0]);
        assert!((z_opt[1] - best_th).abs() < 1e-4, "th {} vs {best_th}", z_opt[1]);
        assert!((p.objective(&z_opt) - best).abs() < 1e-6);
    }

    #[test]
    fn first_input_sign_convention() {
        // beta_x < 0: moving x toward a positive reference needs u_x < 0.
        let setup = paper_setup();
        let x = Vector6::zeros();
        let r = Vector3::new(1.0, 0.0, 1.5);
        let mut warm = MpcWarm::new();
        let (u, _, _) = mpc_step(&setup, &x, &r, &mut warm).unwrap();
        assert!(u[0] < 0.0, "u_x = {}", u[0]);
        assert!(u[2] < 0.0, "u_z = {}", u[2]);
        // One-step simulation confirms motion toward the reference.
        let mut xv = DVector::zeros(6);
        for _ in 0..5 {
            let (ui, _, _) = mpc_step_dyn(
                &setup,
                &xv,
                &DVector::from_vec(vec![1.0, 0.0, 1.5]),
                &mut warm,
            )
            .unwrap();
            xv = &setup.a * &xv + &setup.b * &ui;
        }
        assert!(xv[0] > 0.0);
        assert!(xv[4] > 0.0);
    }

    #[test]
    fn cost_nonincreasing_along_closed_loop() {
        let setup = paper_setup();
        let mut x = DVector::zeros(6);
        let r = DVector::from_vec(vec![1.0, 1.0, 1.5]);
        let mut warm = MpcWarm::new();
        let mut prev_obj = f64::INFINITY;
        for k in 0..60 {
            let (u, _, diag) = mpc_step_dyn(&setup, &x, &r, &mut warm).unwrap();
            assert!(
                diag.objective <= prev_obj + 1e-5,
                "step {k}: {} > {}",
                diag.objective,
                prev_obj
            );
            prev_obj = diag.objective;
            x = &setup.a * &x + &setup.b * &u;
        }
        // Converged near the desired steady state.
        assert!((x[0] - 1.0).abs() < 1e-3);
        assert!((x[2] - 1.0).abs() < 1e-3);
        assert!((x[4] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn setup_report_contains_all_blocks() {
        let setup = paper_setup();
        let mut buf = Vec::new();
        write_setup_report(&setup, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for key in ["[A]", "[B]", "[C]", "[M]", "[L]", "[W]", "[Q_N]", "[K]", "[Omega_Hx]", "omega_star"] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
