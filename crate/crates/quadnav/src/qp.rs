//! Dense convex QP solver based on operator splitting (ADMM), with an
//! active-set polish step so optimal solutions come with certified KKT
//! residuals. An LP mode with a tiny quadratic regularization serves the
//! redundancy programs of the terminal-set determinacy search.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::{Error, Result};

/// Quadratic regularization used by [`solve_lp`].
pub const LP_REGULARIZATION: f64 = 1e-8;

/// Solutions whose infinity norm exceeds this are reported as unbounded in
/// LP mode (the regularized optimum of an unbounded LP sits at ~c/eps).
const LP_UNBOUNDED_NORM: f64 = 1e6;

/// Hard divergence guard for the iterates.
const DIVERGENCE_NORM: f64 = 1e10;

const SIGMA: f64 = 1e-6;
const CHECK_INTERVAL: usize = 25;
const RHO_UPDATE_INTERVAL: usize = 50;

/// `minimize 1/2 z' H z + f' z + c0  subject to  G z <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Hessian, symmetric positive semidefinite.
    pub h: DMatrix<f64>,
    /// Linear cost term.
    pub f: DVector<f64>,
    /// Constraint matrix (one row per inequality).
    pub g: DMatrix<f64>,
    /// Constraint right-hand side.
    pub b: DVector<f64>,
    /// Constant cost offset, carried so reported objectives match the
    /// uncondensed cost.
    pub c0: f64,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || f.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "H is {}x{}, f has length {}",
                h.nrows(),
                h.ncols(),
                f.len()
            )));
        }
        if g.ncols() != n || g.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "G is {}x{} with rhs length {} for n = {n}",
                g.nrows(),
                g.ncols(),
                b.len()
            )));
        }
        let sym_err = (&h - h.transpose()).amax();
        if sym_err > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "Hessian asymmetry {sym_err:.3e} exceeds 1e-12"
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite constraint bound".into()));
        }
        Ok(Self { h, f, g, b, c0: 0.0 })
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.g.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[(0, 0)] + self.f.dot(z) + self.c0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality multipliers (nonnegative at optimality).
    pub duals: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

/// Warm-start data carried across MPC steps.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub z: Option<DVector<f64>>,
    pub duals: Option<DVector<f64>>,
}

impl WarmStart {
    pub fn from_solution(sol: &QpSolution) -> Self {
        Self {
            z: Some(sol.z.clone()),
            duals: Some(sol.duals.clone()),
        }
    }
}

/// Infinity norms of the KKT conditions at `(z, duals)`:
/// stationarity `Hz + f + G'lambda`, primal violation `max(Gz - b, 0)`,
/// and complementary slackness `lambda .* (Gz - b)`.
///
/// Deliberately independent of the solver internals so tests can re-check
/// any reported optimum.
pub fn kkt_residuals(p: &QpProblem, z: &DVector<f64>, duals: &DVector<f64>) -> (f64, f64, f64) {
    let stationarity = (&p.h * z + &p.f + p.g.transpose() * duals).amax();
    let slack = &p.g * z - &p.b;
    let primal = slack.iter().fold(0.0f64, |a, &s| a.max(s));
    let comp = slack
        .iter()
        .zip(duals.iter())
        .fold(0.0f64, |a, (&s, &l)| a.max((l * s).abs()));
    (stationarity, primal, comp)
}

/// Solve the QP with ADMM from a cold start.
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    solve_warm(p, tol, max_iter, &WarmStart::default())
}

/// Solve the QP with ADMM, optionally warm-started.
pub fn solve_warm(p: &QpProblem, tol: f64, max_iter: usize, warm: &WarmStart) -> QpSolution {
    let n = p.num_vars();
    let m = p.num_constraints();

    let mut z = warm
        .z
        .clone()
        .filter(|v| v.len() == n)
        .unwrap_or_else(|| DVector::zeros(n));
    let mut lambda = warm
        .duals
        .clone()
        .filter(|v| v.len() == m)
        .unwrap_or_else(|| DVector::zeros(m));
    let mut y = if m > 0 { (&p.g * &z).inf(&p.b) } else { DVector::zeros(0) };

    let mut rho = 1.0f64;
    let gt = p.g.transpose();
    let mut chol = factorize(p, rho);

    let mut status = QpStatus::MaxIter;
    let mut iter = 0usize;
    let mut primal_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let mut lambda_at_last_check = lambda.clone();

    while iter < max_iter {
        iter += 1;

        // z-update: (H + sigma I + rho G'G) z = sigma z - f + G'(rho y - lambda)
        let mut rhs = SIGMA * &z - &p.f;
        if m > 0 {
            rhs += &gt * (rho * &y - &lambda);
        }
        z = chol.solve(&rhs);

        if m > 0 {
            let gz = &p.g * &z;
            // y-update: projection onto {y <= b}.
            let v = &gz + &lambda / rho;
            let y_next = v.inf(&p.b);
            lambda += rho * (&gz - &y_next);
            y = y_next;
        }

        if z.amax() > DIVERGENCE_NORM {
            status = QpStatus::Unbounded;
            break;
        }

        if iter % CHECK_INTERVAL == 0 || iter == max_iter {
            let gz = if m > 0 { &p.g * &z } else { DVector::zeros(0) };
            primal_res = if m > 0 { (&gz - &y).amax() } else { 0.0 };
            let mut stat = &p.h * &z + &p.f;
            if m > 0 {
                stat += &gt * &lambda;
            }
            dual_res = stat.amax();
            if primal_res <= tol && dual_res <= tol {
                status = QpStatus::Optimal;
                break;
            }

            // Primal infeasibility certificate: a dual direction d with
            // G'd ~ 0, d >= 0, and b'd < 0 proves {Gz <= b} empty.
            if m > 0 {
                let dl = &lambda - &lambda_at_last_check;
                let dl_norm = dl.amax();
                if dl_norm > tol {
                    let gt_dl = (&gt * &dl).amax();
                    let b_dl = p.b.dot(&dl);
                    if gt_dl <= 1e-8 * dl_norm * p.g.amax().max(1.0)
                        && b_dl < -1e-8 * dl_norm * p.b.amax().max(1.0)
                    {
                        status = QpStatus::Infeasible;
                        break;
                    }
                }
                lambda_at_last_check = lambda.clone();
            }

            if iter % RHO_UPDATE_INTERVAL == 0 && m > 0 {
                let ratio = (primal_res.max(1e-12) / dual_res.max(1e-12)).sqrt();
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho / rho > 5.0 || rho / new_rho > 5.0 {
                    rho = new_rho;
                    chol = factorize(p, rho);
                }
            }
        }
    }

    let mut sol = QpSolution {
        objective: p.objective(&z),
        z,
        duals: lambda,
        status,
        primal_residual: primal_res,
        dual_residual: dual_res,
        iterations: iter,
    };

    if sol.status == QpStatus::Optimal && m > 0 {
        polish(p, tol, &mut sol);
    }
    sol
}

fn factorize(p: &QpProblem, rho: f64) -> Cholesky<f64, nalgebra::Dyn> {
    let n = p.num_vars();
    let mut kkt = p.h.clone();
    for i in 0..n {
        kkt[(i, i)] += SIGMA;
    }
    if p.num_constraints() > 0 {
        kkt += rho * p.g.transpose() * &p.g;
    }
    Cholesky::new(kkt).expect("H + sigma I + rho G'G must be positive definite")
}

/// Re-solve the KKT system restricted to the active constraints. Accepted
/// only when it improves every residual, so the polished point is at least
/// as certified as the ADMM iterate.
fn polish(p: &QpProblem, tol: f64, sol: &mut QpSolution) {
    let n = p.num_vars();
    let slack = &p.g * &sol.z - &p.b;
    let active: Vec<usize> = (0..p.num_constraints())
        .filter(|&i| sol.duals[i] > tol || slack[i] > -10.0 * tol)
        .collect();
    let na = active.len();

    let delta = 1e-10;
    let mut kkt = DMatrix::zeros(n + na, n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for (k, &row) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = p.g[(row, j)];
            kkt[(j, n + k)] = p.g[(row, j)];
        }
        kkt[(n + k, n + k)] = -delta;
    }
    let mut rhs = DVector::zeros(n + na);
    rhs.rows_mut(0, n).copy_from(&(-&p.f));
    for (k, &row) in active.iter().enumerate() {
        rhs[n + k] = p.b[row];
    }

    let Some(solved) = kkt.lu().solve(&rhs) else {
        return;
    };
    let z_pol = DVector::from_iterator(n, solved.iter().take(n).cloned());
    let mut duals_pol = DVector::zeros(p.num_constraints());
    for (k, &row) in active.iter().enumerate() {
        duals_pol[row] = solved[n + k].max(0.0);
    }

    let (stat_old, prim_old, comp_old) = kkt_residuals(p, &sol.z, &sol.duals);
    let (stat_new, prim_new, comp_new) = kkt_residuals(p, &z_pol, &duals_pol);
    if stat_new <= stat_old.max(tol) && prim_new <= prim_old.max(tol) && comp_new <= comp_old.max(tol)
    {
        sol.objective = p.objective(&z_pol);
        sol.z = z_pol;
        sol.duals = duals_pol;
        sol.primal_residual = prim_new;
        sol.dual_residual = stat_new;
    }
}

/// `maximize c' z  subject to  G z <= b`, via the QP solver with an
/// `eps * I` Hessian. Unbounded problems are reported distinctly: the
/// regularized optimum of an unbounded LP lands at norm ~`|c|/eps`, far
/// beyond anything a bounded instance produces here.
pub fn solve_lp(
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    let n = c.len();
    let h = DMatrix::identity(n, n) * LP_REGULARIZATION;
    let p = QpProblem::new(h, -c, g.clone(), b.clone())?;
    let mut sol = solve(&p, tol, max_iter);
    // Report the maximization objective.
    sol.objective = c.dot(&sol.z);
    if sol.status == QpStatus::Optimal && sol.z.amax() > LP_UNBOUNDED_NORM {
        sol.status = QpStatus::Unbounded;
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn no_constraints(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn unconstrained_identity() {
        let (g, b) = no_constraints(3);
        let p = QpProblem::new(DMatrix::identity(3, 3), DVector::zeros(3), g, b).unwrap();
        let sol = solve(&p, 1e-8, 20000);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.z.amax() < 1e-8);
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn clipped_scalar() {
        // min 1/2 z^2 - z  s.t. z <= 0.5  ->  z = 0.5
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let sol = solve(&p, 1e-8, 20000);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 0.5).abs() < 1e-7, "z = {}", sol.z[0]);
        let (s, pr, cs) = kkt_residuals(&p, &sol.z, &sol.duals);
        assert!(s <= 1e-8 && pr <= 1e-8 && cs <= 1e-8, "{s} {pr} {cs}");
    }

    #[test]
    fn kkt_flags_perturbed_point() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let sol = solve(&p, 1e-8, 20000);
        let z_bad = DVector::from_element(1, sol.z[0] + 0.1);
        let (s, pr, _) = kkt_residuals(&p, &z_bad, &sol.duals);
        assert!(s > 1e-3 || pr > 1e-3);
    }

    #[test]
    fn kkt_empty_constraints_exact_zero() {
        let (g, b) = no_constraints(2);
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, -2.0]),
            g,
            b,
        )
        .unwrap();
        let sol = solve(&p, 1e-9, 20000);
        let (_, pr, cs) = kkt_residuals(&p, &sol.z, &sol.duals);
        assert_eq!(pr, 0.0);
        assert_eq!(cs, 0.0);
    }

    #[test]
    fn lp_scalar_box() {
        // max z s.t. z <= 3, -z <= 0
        let c = DVector::from_element(1, 1.0);
        let g = DMatrix::from_vec(2, 1, vec![1.0, -1.0]);
        let b = DVector::from_vec(vec![3.0, 0.0]);
        let sol = solve_lp(&c, &g, &b, 1e-8, 40000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.objective - 3.0).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn lp_unit_box_corner() {
        // max z1 + z2 over the unit box -> 2
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let g = DMatrix::from_vec(
            4,
            2,
            vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0],
        );
        let b = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let sol = solve_lp(&c, &g, &b, 1e-8, 40000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.objective - 2.0).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn lp_unconstrained_is_unbounded() {
        let c = DVector::from_vec(vec![1.0, -0.5]);
        let (g, b) = no_constraints(2);
        let sol = solve_lp(&c, &g, &b, 1e-6, 40000).unwrap();
        assert_eq!(sol.status, QpStatus::Unbounded);
    }

    #[test]
    fn lp_halfspace_unbounded_direction() {
        // max z1 with only z2 <= 1 constrained.
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let g = DMatrix::from_vec(1, 2, vec![0.0, 1.0]);
        let b = DVector::from_element(1, 1.0);
        let sol = solve_lp(&c, &g, &b, 1e-6, 40000).unwrap();
        assert_eq!(sol.status, QpStatus::Unbounded);
    }

    #[test]
    fn detects_infeasible() {
        // z <= -1 and z >= 2.
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_vec(2, 1, vec![1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -2.0]),
        )
        .unwrap();
        let sol = solve(&p, 1e-6, 50000);
        assert!(
            matches!(sol.status, QpStatus::Infeasible | QpStatus::MaxIter),
            "status {:?}",
            sol.status
        );
        assert_ne!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let mut h = DMatrix::identity(2, 2);
        h[(0, 1)] = 1e-6;
        let (g, b) = no_constraints(2);
        assert!(QpProblem::new(h, DVector::zeros(2), g, b).is_err());
    }

    /// Projected gradient on box constraints; independent oracle.
    fn box_pg_oracle(
        h: &DMatrix<f64>,
        f: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> DVector<f64> {
        let lip = h.amax() * h.nrows() as f64;
        let step = 1.0 / lip;
        let mut z = DVector::zeros(f.len());
        for _ in 0..400_000 {
            let grad = h * &z + f;
            let z_new = (&z - step * grad).sup(lo).inf(hi);
            if (&z_new - &z).amax() < 1e-13 {
                z = z_new;
                break;
            }
            z = z_new;
        }
        z
    }

    #[test]
    fn random_box_qps_match_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 5;
            let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &r * r.transpose() + DMatrix::identity(n, n);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let lo = DVector::from_fn(n, |_, _| rng.random_range(-1.0..0.0));
            let hi = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));

            let mut g = DMatrix::zeros(2 * n, n);
            let mut b = DVector::zeros(2 * n);
            for i in 0..n {
                g[(i, i)] = 1.0;
                b[i] = hi[i];
                g[(n + i, i)] = -1.0;
                b[n + i] = -lo[i];
            }
            let p = QpProblem::new(h.clone(), f.clone(), g, b).unwrap();
            let sol = solve(&p, 1e-8, 50000);
            assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
            let oracle = box_pg_oracle(&h, &f, &lo, &hi);
            let obj_oracle = p.objective(&oracle);
            assert!(
                (sol.objective - obj_oracle).abs() <= 1e-6,
                "trial {trial}: {} vs {}",
                sol.objective,
                obj_oracle
            );
            let (s, pr, cs) = kkt_residuals(&p, &sol.z, &sol.duals);
            assert!(s <= 1e-6 && pr <= 1e-6 && cs <= 1e-6, "trial {trial}: {s} {pr} {cs}");
        }
    }

    #[test]
    fn warm_start_agrees_with_cold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &r * r.transpose() + DMatrix::identity(n, n);
        let f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut g = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            b[i] = 0.5;
            g[(n + i, i)] = -1.0;
            b[n + i] = 0.5;
        }
        let p = QpProblem::new(h, f, g, b).unwrap();
        let tol = 1e-8;
        let cold = solve(&p, tol, 50000);
        let warm_data = WarmStart {
            z: Some(DVector::from_fn(n, |_, _| rng.random_range(-0.4..0.4))),
            duals: Some(DVector::zeros(2 * n)),
        };
        let warm = solve_warm(&p, tol, 50000, &warm_data);
        assert_eq!(cold.status, QpStatus::Optimal);
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!((cold.objective - warm.objective).abs() <= 10.0 * tol);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn scaling_invariance(gamma in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &r * r.transpose() + DMatrix::identity(n, n);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let mut g = DMatrix::zeros(2 * n, n);
            let mut b = DVector::zeros(2 * n);
            for i in 0..n {
                g[(i, i)] = 1.0;
                b[i] = 0.3;
                g[(n + i, i)] = -1.0;
                b[n + i] = 0.3;
            }
            let p1 = QpProblem::new(h.clone(), f.clone(), g.clone(), b.clone()).unwrap();
            let p2 = QpProblem::new(gamma * h, gamma * f, g, b).unwrap();
            let s1 = solve(&p1, 1e-9, 100000);
            let s2 = solve(&p2, 1e-9, 100000);
            prop_assert_eq!(s1.status, QpStatus::Optimal);
            prop_assert_eq!(s2.status, QpStatus::Optimal);
            prop_assert!((&s1.z - &s2.z).amax() < 1e-5);
            prop_assert!((gamma * s1.objective - s2.objective).abs() < 1e-5 * gamma.max(1.0));
        }
    }
}
