//! In-tree constrained optimization: an SQP core with explicit
//! infeasibility certification, plus the two small auxiliary problems of
//! the contact pipeline (contact-force initialization and on-plane
//! inverse kinematics).
//!
//! Infeasibility is a first-class verdict here, not an error path: the
//! supervisor switches modes on it. A dedicated feasibility-restoration
//! phase (projected Gauss-Newton on squared violations) both rescues
//! stalled SQP iterations and certifies empty feasible sets.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::geometry::PlaneObstacle;
use crate::model::{
    forward_kinematics, generalized_contact_force, integrate_step, ContactWrench, ControlInput,
    UvmsModel, UvmsState,
};
use crate::ocp::{DecisionVector, Mode, OcpProblem};

/// Terminal verdict of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// KKT point within tolerances.
    Optimal,
    /// Restoration converged to a violation above `tol_infeas`: the
    /// constraint set is (locally) certified empty.
    Infeasible,
    /// Iteration budget exhausted without a verdict.
    IterationLimit,
}

/// Tolerances and iteration limits.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Constraint-violation tolerance for optimality/feasibility.
    pub tol_feas: f64,
    /// Stationarity tolerance.
    pub tol_opt: f64,
    /// Violation above which a stationary restoration point certifies
    /// infeasibility; must exceed `tol_feas`.
    pub tol_infeas: f64,
    pub max_iterations: usize,
    /// Multiplier applied to the penalty parameter when it must grow.
    pub penalty_growth: f64,
    /// Armijo sufficient-decrease coefficient.
    pub armijo: f64,
    /// Backtracking ratio of the line search.
    pub backtrack: f64,
    /// Smallest accepted line-search step before declaring a stall.
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_feas: 1e-6,
            tol_opt: 1e-6,
            tol_infeas: 1e-4,
            max_iterations: 200,
            penalty_growth: 2.0,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-10,
        }
    }
}

impl SolverConfig {
    fn validate(&self) {
        assert!(self.tol_feas > 0.0 && self.tol_opt > 0.0, "tolerances must be positive");
        assert!(self.tol_feas < self.tol_infeas, "tol_feas must be below tol_infeas");
        assert!(self.max_iterations > 0, "max_iterations must be positive");
        assert!(self.penalty_growth > 1.0, "penalty_growth must exceed 1");
        assert!((0.0..1.0).contains(&self.armijo), "armijo must be in (0,1)");
        assert!((0.0..1.0).contains(&self.backtrack), "backtrack must be in (0,1)");
    }
}

/// One accepted major iterate, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct IterationTrace {
    /// ℓ1 merit value at the iterate.
    pub merit: f64,
    /// Max constraint violation at the iterate.
    pub violation: f64,
    /// Penalty parameter in force when the iterate was accepted.
    pub penalty: f64,
}

/// Outcome of [`solve`].
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub psi: DecisionVector,
    pub objective: f64,
    /// Max constraint violation (∞-norm) at the returned point.
    pub violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub trace: Vec<IterationTrace>,
}

/// Outcome of [`check_feasibility`].
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Feasible witness when `feasible`, else the least-violating point
    /// found.
    pub witness: DecisionVector,
    pub violation: f64,
    pub iterations: usize,
}

/// A generic smooth NLP: `min f(x)` s.t. `c_eq(x) = 0`, `c_in(x) <= 0`,
/// `lo <= x <= hi`. Evaluation must be pure; `refresh` may update
/// iterate-frozen problem data between major iterations.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    fn jacobians(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// Re-freeze iterate-dependent data; returns true if anything changed.
    fn refresh(&mut self, _x: &DVector<f64>) -> bool {
        false
    }
}

impl Nlp for OcpProblem {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.psi_min.clone(), self.psi_max.clone())
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        OcpProblem::objective(self, &self.view(x))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.objective_gradient(&self.view(x))
    }

    fn constraints(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let b = OcpProblem::constraints(self, &self.view(x));
        (b.eq, b.ineq)
    }

    fn jacobians(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        self.constraint_jacobian(&self.view(x))
    }

    fn refresh(&mut self, x: &DVector<f64>) -> bool {
        if self.mode == Mode::III {
            let psi = self.view(x);
            self.refresh_tangents(&psi);
            true
        } else {
            false
        }
    }
}

trait ViewExt {
    fn view(&self, x: &DVector<f64>) -> DecisionVector;
}

impl ViewExt for OcpProblem {
    fn view(&self, x: &DVector<f64>) -> DecisionVector {
        DecisionVector { layout: self.layout, data: x.clone() }
    }
}

/// Defect-free initial guess: zero inputs, nominal timestep, states rolled
/// out through the true dynamics from the measured state.
pub fn cold_start(problem: &OcpProblem) -> DecisionVector {
    let mut psi = DecisionVector::zeros(problem.layout);
    let dt = problem.dt_nom.clamp(problem.dt_bounds.0, problem.dt_bounds.1);
    psi.set_dt(dt);
    let u = ControlInput::zero(problem.layout.n_links);
    let f_c = DVector::zeros(6 + problem.layout.n_links);
    let mut h = problem.h0.clone();
    for i in 1..=problem.layout.n_p {
        h = integrate_step(&problem.model, &h, &u, &f_c, dt).unwrap_or_else(|_| h.clone());
        psi.set_state(i, &h);
    }
    psi
}

/// Solve one transcribed control problem.
pub fn solve(problem: &OcpProblem, init: &DecisionVector, config: &SolverConfig) -> SolveResult {
    assert_eq!(problem.layout, init.layout, "decision vector layout mismatch");
    let mut nlp = problem.clone();
    let raw = solve_nlp(&mut nlp, &init.data, config);
    SolveResult {
        status: raw.status,
        psi: DecisionVector { layout: problem.layout, data: raw.x },
        objective: raw.objective,
        violation: raw.violation,
        iterations: raw.iterations,
        wall_time: raw.wall_time,
        trace: raw.trace,
    }
}

/// Restoration-only feasibility verdict: minimizes squared constraint
/// violations inside the decision box and reports whether the violation
/// drops below `tol_feas`. An exhausted iteration budget counts as
/// infeasible (switching to an emergency mode early is safe; missing a
/// true infeasibility is not).
pub fn check_feasibility(
    problem: &OcpProblem,
    init: &DecisionVector,
    config: &SolverConfig,
) -> FeasibilityReport {
    assert_eq!(problem.layout, init.layout, "decision vector layout mismatch");
    config.validate();
    let mut nlp = problem.clone();
    let (lo, hi) = Nlp::bounds(&nlp);
    let out = restore(&mut nlp, &init.data, &lo, &hi, config, config.max_iterations);
    FeasibilityReport {
        feasible: out.violation <= config.tol_feas,
        witness: DecisionVector { layout: problem.layout, data: out.x },
        violation: out.violation,
        iterations: out.iterations,
    }
}

// ---------------------------------------------------------------------------
// SQP core
// ---------------------------------------------------------------------------

struct RawResult {
    status: SolveStatus,
    x: DVector<f64>,
    objective: f64,
    violation: f64,
    iterations: usize,
    wall_time: f64,
    trace: Vec<IterationTrace>,
}

fn clamp_box(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| x[j].clamp(lo[j], hi[j]))
}

fn violation_inf(ceq: &DVector<f64>, cin: &DVector<f64>) -> f64 {
    let e = ceq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    cin.iter().fold(e, |m, v| m.max(*v))
}

fn violation_l1(ceq: &DVector<f64>, cin: &DVector<f64>) -> f64 {
    ceq.iter().map(|v| v.abs()).sum::<f64>() + cin.iter().map(|v| v.max(0.0)).sum::<f64>()
}

/// Stationarity residual of the Lagrangian, with bound multipliers
/// eliminated by projection.
fn kkt_residual(
    grad_l: &DVector<f64>,
    x: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    let mut r = 0.0f64;
    for j in 0..x.len() {
        let g = grad_l[j];
        let at_lo = x[j] - lo[j] <= 1e-9 * (1.0 + lo[j].abs());
        let at_hi = hi[j] - x[j] <= 1e-9 * (1.0 + hi[j].abs());
        let v = if at_lo && at_hi {
            0.0
        } else if at_lo {
            (-g).max(0.0)
        } else if at_hi {
            g.max(0.0)
        } else {
            g.abs()
        };
        r = r.max(v);
    }
    r
}

fn solve_nlp<N: Nlp>(nlp: &mut N, x0: &DVector<f64>, config: &SolverConfig) -> RawResult {
    config.validate();
    let t_start = Instant::now();
    let n = nlp.dim();
    let (lo, hi) = nlp.bounds();
    let mut x = clamp_box(x0, &lo, &hi);
    nlp.refresh(&x);

    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut f = nlp.objective(&x);
    let mut grad = nlp.gradient(&x);
    let (mut ceq, mut cin) = nlp.constraints(&x);
    let (mut jeq, mut jin) = nlp.jacobians(&x);
    let mut mu: f64 = 10.0;
    let mut iterations = 0usize;
    let mut restorations = 0usize;
    let mut trace = vec![IterationTrace {
        merit: f + mu * violation_l1(&ceq, &cin),
        violation: violation_inf(&ceq, &cin),
        penalty: mu,
    }];
    let mut status = SolveStatus::IterationLimit;
    // Stall watchdog: a small-step line search can keep accepting points
    // whose merit creeps down while the violation sits still for dozens of
    // iterations. When that happens, force the penalty up and hand the
    // iterate to restoration instead of burning the whole budget.
    let mut stall_best = f64::INFINITY;
    let mut stall_count = 0usize;
    const STALL_LIMIT: usize = 12;
    // Acceptable-point exit: once feasible, a long run of negligible merit
    // improvement means the quasi-Newton model has flattened out and further
    // iterations only spend wall time.
    let mut slow_count = 0usize;
    const SLOW_LIMIT: usize = 8;

    while iterations < config.max_iterations {
        iterations += 1;
        let viol = violation_inf(&ceq, &cin);
        let mut need_restore = false;

        if viol <= config.tol_feas {
            stall_best = f64::INFINITY;
            stall_count = 0;
        } else if viol < 0.5 * stall_best {
            stall_best = viol;
            stall_count = 0;
        } else {
            stall_count += 1;
            if stall_count >= STALL_LIMIT {
                mu = (mu * 10.0).min(1e8);
                stall_best = f64::INFINITY;
                stall_count = 0;
                need_restore = true;
            }
        }

        match if need_restore {
            Err(QpError::Cycling)
        } else {
            solve_qp_subproblem(&bfgs, &grad, &jeq, &ceq, &jin, &cin, &lo, &hi, &x)
        } {
            Ok((d, lam_eq, lam_in)) => {
                let grad_l = &grad + jeq.transpose() * &lam_eq + jin.transpose() * &lam_in;
                let kkt = kkt_residual(&grad_l, &x, &lo, &hi);
                if viol <= config.tol_feas && (kkt <= config.tol_opt || d.amax() <= config.tol_opt)
                {
                    status = SolveStatus::Optimal;
                    break;
                }

                // ℓ1 penalty must dominate the multipliers for d to be a
                // descent direction of the merit.
                let lam_max = lam_eq.amax().max(lam_in.amax());
                if mu < 1.1 * lam_max {
                    mu = config.penalty_growth * lam_max;
                }

                let l1 = violation_l1(&ceq, &cin);
                let phi0 = f + mu * l1;
                let dir = grad.dot(&d) - mu * l1;
                let mut alpha = 1.0f64;
                let mut accepted = None;
                while alpha >= config.min_step {
                    let xt = clamp_box(&(&x + &d * alpha), &lo, &hi);
                    let ft = nlp.objective(&xt);
                    let (ceqt, cint) = nlp.constraints(&xt);
                    let phit = ft + mu * violation_l1(&ceqt, &cint);
                    if phit <= phi0 + config.armijo * alpha * dir.min(0.0) {
                        accepted = Some((xt, ft, ceqt, cint));
                        break;
                    }
                    alpha *= config.backtrack;
                }

                match accepted {
                    Some((xt, ft, ceqt, cint)) => {
                        let grad_t = nlp.gradient(&xt);
                        let (jeqt, jint) = nlp.jacobians(&xt);
                        // Damped BFGS on the Lagrangian gradient.
                        let gl_old = &grad + jeq.transpose() * &lam_eq + jin.transpose() * &lam_in;
                        let gl_new =
                            &grad_t + jeqt.transpose() * &lam_eq + jint.transpose() * &lam_in;
                        let s = &xt - &x;
                        let y = gl_new - gl_old;
                        bfgs_update(&mut bfgs, &s, &y);

                        x = xt;
                        f = ft;
                        grad = grad_t;
                        if nlp.refresh(&x) {
                            let b = nlp.constraints(&x);
                            ceq = b.0;
                            cin = b.1;
                            let j = nlp.jacobians(&x);
                            jeq = j.0;
                            jin = j.1;
                        } else {
                            ceq = ceqt;
                            cin = cint;
                            jeq = jeqt;
                            jin = jint;
                        }
                        let merit_prev = trace.last().map(|t| t.merit).unwrap_or(f64::INFINITY);
                        let merit_now = f + mu * violation_l1(&ceq, &cin);
                        trace.push(IterationTrace {
                            merit: merit_now,
                            violation: violation_inf(&ceq, &cin),
                            penalty: mu,
                        });
                        let rel_drop =
                            (merit_prev - merit_now) / merit_prev.abs().max(1.0);
                        if violation_inf(&ceq, &cin) <= config.tol_feas
                            && rel_drop.abs() <= 10.0 * config.tol_opt
                        {
                            slow_count += 1;
                            if slow_count >= SLOW_LIMIT {
                                status = SolveStatus::Optimal;
                                break;
                            }
                        } else {
                            slow_count = 0;
                        }
                    }
                    None => need_restore = true,
                }
            }
            Err(_) => need_restore = true,
        }

        if need_restore {
            restorations += 1;
            if restorations > 5 {
                break;
            }
            let budget = (config.max_iterations - iterations).max(1);
            let out = restore(nlp, &x, &lo, &hi, config, budget);
            iterations += out.iterations;
            if out.violation <= config.tol_feas {
                x = out.x;
                nlp.refresh(&x);
                f = nlp.objective(&x);
                grad = nlp.gradient(&x);
                let b = nlp.constraints(&x);
                ceq = b.0;
                cin = b.1;
                let j = nlp.jacobians(&x);
                jeq = j.0;
                jin = j.1;
                bfgs = DMatrix::identity(n, n);
                trace.push(IterationTrace {
                    merit: f + mu * violation_l1(&ceq, &cin),
                    violation: violation_inf(&ceq, &cin),
                    penalty: mu,
                });
                continue;
            }
            x = out.x;
            let b = nlp.constraints(&x);
            ceq = b.0;
            cin = b.1;
            f = nlp.objective(&x);
            status = if out.stationary && out.violation > config.tol_infeas {
                SolveStatus::Infeasible
            } else {
                SolveStatus::IterationLimit
            };
            break;
        }
    }

    RawResult {
        status,
        objective: f,
        violation: violation_inf(&ceq, &cin),
        x,
        iterations,
        wall_time: t_start.elapsed().as_secs_f64(),
        trace,
    }
}

/// Powell-damped BFGS update keeping the approximation positive definite.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let sbs = s.dot(&(&*b * s));
    if sbs <= 1e-14 || s.norm_squared() <= 1e-20 {
        return;
    }
    let sy = s.dot(y);
    let y_used = if sy < 0.2 * sbs {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + (&*b * s) * (1.0 - theta)
    } else {
        y.clone()
    };
    let sy_used = s.dot(&y_used);
    if sy_used <= 1e-14 {
        return;
    }
    let bs = &*b * s;
    *b -= &bs * bs.transpose() / sbs;
    *b += &y_used * y_used.transpose() / sy_used;
}

// ---------------------------------------------------------------------------
// Feasibility restoration
// ---------------------------------------------------------------------------

struct RestoreOutcome {
    x: DVector<f64>,
    violation: f64,
    /// True when the squared-violation objective is stationary inside the
    /// box (certificate quality); false when the budget ran out first.
    stationary: bool,
    iterations: usize,
}

/// Projected Levenberg-Marquardt on `1/2 (‖c_eq‖² + ‖max(c_in,0)‖²)`
/// inside the decision box.
fn restore<N: Nlp>(
    nlp: &mut N,
    x0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    config: &SolverConfig,
    max_iter: usize,
) -> RestoreOutcome {
    let n = nlp.dim();
    let mut x = clamp_box(x0, lo, hi);
    nlp.refresh(&x);
    let theta_of = |ceq: &DVector<f64>, cin: &DVector<f64>| {
        0.5 * (ceq.norm_squared() + cin.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>())
    };
    let (mut ceq, mut cin) = nlp.constraints(&x);
    let mut theta = theta_of(&ceq, &cin);
    let mut lambda = 1e-3f64;
    let mut iterations = 0usize;
    let mut stationary = false;

    while iterations < max_iter.max(1) {
        iterations += 1;
        if violation_inf(&ceq, &cin) <= config.tol_feas {
            break;
        }
        let (jeq, jin) = nlp.jacobians(&x);
        // Gauss-Newton pieces over the active residuals.
        let mut jtj = jeq.transpose() * &jeq;
        let mut gradt = jeq.transpose() * &ceq;
        for i in 0..cin.len() {
            if cin[i] > 0.0 {
                let row = jin.row(i).transpose();
                jtj += &row * row.transpose();
                gradt += row * cin[i];
            }
        }
        // Projected-gradient stationarity inside the box.
        let mut pg = 0.0f64;
        for j in 0..n {
            let g = gradt[j];
            let at_lo = x[j] - lo[j] <= 1e-12 * (1.0 + lo[j].abs());
            let at_hi = hi[j] - x[j] <= 1e-12 * (1.0 + hi[j].abs());
            let v = if at_lo { (-g).max(0.0) } else if at_hi { g.max(0.0) } else { g.abs() };
            pg = pg.max(v);
        }
        if pg <= 1e-10 * (1.0 + theta) {
            stationary = true;
            break;
        }

        let mut improved = false;
        for _ in 0..14 {
            let h = &jtj + DMatrix::identity(n, n) * lambda;
            let Some(ch) = h.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dx = ch.solve(&(-&gradt));
            let mut alpha = 1.0f64;
            for _ in 0..6 {
                let xt = clamp_box(&(&x + &dx * alpha), lo, hi);
                let (ceqt, cint) = nlp.constraints(&xt);
                let thetat = theta_of(&ceqt, &cint);
                if thetat < theta {
                    x = xt;
                    ceq = ceqt;
                    cin = cint;
                    theta = thetat;
                    improved = true;
                    break;
                }
                alpha *= 0.25;
            }
            if improved {
                lambda = (lambda / 3.0).max(1e-10);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !improved {
            stationary = true;
            break;
        }
        nlp.refresh(&x);
    }

    let violation = violation_inf(&ceq, &cin);
    RestoreOutcome { x, violation, stationary, iterations }
}

// ---------------------------------------------------------------------------
// Dense active-set QP (dual method)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QpError {
    NotPositiveDefinite,
    Infeasible,
    Cycling,
}

#[derive(Debug)]
struct QpOut {
    x: DVector<f64>,
    /// Multiplier per constraint row (`>= 0` for inequality rows).
    u_rows: DVector<f64>,
}

fn dependence_tol(np: &DVector<f64>) -> f64 {
    1e-11 * (1.0 + np.norm_squared())
}

/// `d = Jᵀn`; primal step `z = J2 J2ᵀ n`; dual step `r = R⁻¹ J1ᵀ n`.
fn project_steps(
    j_op: &DMatrix<f64>,
    r_mat: &DMatrix<f64>,
    q: usize,
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = np.len();
    let d = j_op.transpose() * np;
    let mut z = DVector::zeros(n);
    for k in q..n {
        z.axpy(d[k], &j_op.column(k).into_owned(), 1.0);
    }
    let mut rv = DVector::zeros(q);
    for i in (0..q).rev() {
        let mut s = d[i];
        for k in i + 1..q {
            s -= r_mat[(i, k)] * rv[k];
        }
        rv[i] = s / r_mat[(i, i)];
    }
    (d, z, rv)
}

/// Append the constraint whose rotated coordinates are `d` to the QR
/// factors; returns false if it is linearly dependent on the active set.
fn add_constraint(j_op: &mut DMatrix<f64>, r_mat: &mut DMatrix<f64>, d: &mut DVector<f64>, q: usize) -> bool {
    let n = d.len();
    for k in ((q + 1)..n).rev() {
        let (cc, ss) = (d[k - 1], d[k]);
        if ss == 0.0 {
            continue;
        }
        let h = cc.hypot(ss);
        let (c, s) = (cc / h, ss / h);
        d[k - 1] = h;
        d[k] = 0.0;
        for i in 0..n {
            let t1 = j_op[(i, k - 1)];
            let t2 = j_op[(i, k)];
            j_op[(i, k - 1)] = c * t1 + s * t2;
            j_op[(i, k)] = -s * t1 + c * t2;
        }
    }
    for i in 0..=q.min(n - 1) {
        r_mat[(i, q)] = d[i];
    }
    d[q].abs() > 1e-12 * (1.0 + d.norm())
}

/// Remove active constraint at position `l` and re-triangularize.
fn delete_constraint(
    j_op: &mut DMatrix<f64>,
    r_mat: &mut DMatrix<f64>,
    act: &mut Vec<usize>,
    u: &mut Vec<f64>,
    l: usize,
) {
    let n = j_op.nrows();
    let q = act.len();
    act.remove(l);
    u.remove(l);
    for col in l..q - 1 {
        for row in 0..q {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..q {
        r_mat[(row, q - 1)] = 0.0;
    }
    let qn = q - 1;
    for j in l..qn {
        let (cc, ss) = (r_mat[(j, j)], r_mat[(j + 1, j)]);
        if ss == 0.0 {
            continue;
        }
        let h = cc.hypot(ss);
        let (c, s) = (cc / h, ss / h);
        for col in j..qn {
            let t1 = r_mat[(j, col)];
            let t2 = r_mat[(j + 1, col)];
            r_mat[(j, col)] = c * t1 + s * t2;
            r_mat[(j + 1, col)] = -s * t1 + c * t2;
        }
        for i in 0..n {
            let t1 = j_op[(i, j)];
            let t2 = j_op[(i, j + 1)];
            j_op[(i, j)] = c * t1 + s * t2;
            j_op[(i, j + 1)] = -s * t1 + c * t2;
        }
    }
}

/// Dual active-set method for `min 1/2 xᵀGx + aᵀx` s.t. `C x >= b`, the
/// first `n_eq` rows being equalities. `G` must be positive definite.
fn goldfarb_idnani(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    n_eq: usize,
) -> Result<QpOut, QpError> {
    let n = a.len();
    let m = b.len();
    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut x = -chol.solve(a);
    let mut j_op = chol
        .l()
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut r_mat = DMatrix::<f64>::zeros(n, n);
    let mut act: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();

    // Equality rows first; multipliers unrestricted, never dropped.
    for i in 0..n_eq {
        let np = c.row(i).transpose();
        let (mut d, z, rv) = project_steps(&j_op, &r_mat, act.len(), &np);
        let npz = np.dot(&z);
        let slack = b[i] - np.dot(&x);
        if npz > dependence_tol(&np) {
            let t2 = slack / npz;
            x += &z * t2;
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t2 * rv[j];
            }
            if !add_constraint(&mut j_op, &mut r_mat, &mut d, act.len()) {
                return Err(QpError::Cycling);
            }
            act.push(i);
            u.push(t2);
        } else if slack.abs() > 1e-8 * (1.0 + b[i].abs()) {
            return Err(QpError::Infeasible);
        }
    }

    let viol_tol = 1e-9 * (1.0 + b.amax());
    let max_steps = 20 * (n + m + 1);
    let mut steps = 0usize;
    loop {
        let mut best = viol_tol;
        let mut cand = None;
        for i in n_eq..m {
            if act.contains(&i) {
                continue;
            }
            let s = b[i] - c.row(i).transpose().dot(&x);
            if s > best {
                best = s;
                cand = Some(i);
            }
        }
        let Some(ip) = cand else {
            let mut u_rows = DVector::zeros(m);
            for (j, &i) in act.iter().enumerate() {
                u_rows[i] = u[j];
            }
            return Ok(QpOut { x, u_rows });
        };
        let np = c.row(ip).transpose();
        let mut u_plus = 0.0f64;
        loop {
            steps += 1;
            if steps > max_steps {
                return Err(QpError::Cycling);
            }
            let (mut d, z, rv) = project_steps(&j_op, &r_mat, act.len(), &np);
            let mut t1 = f64::INFINITY;
            let mut l_drop = None;
            for j in 0..act.len() {
                if act[j] >= n_eq && rv[j] > 1e-12 {
                    let t = u[j] / rv[j];
                    if t < t1 {
                        t1 = t;
                        l_drop = Some(j);
                    }
                }
            }
            let npz = np.dot(&z);
            let slack = b[ip] - np.dot(&x);
            let t2 = if npz > dependence_tol(&np) { slack / npz } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                x += &z * t;
            }
            for j in 0..act.len() {
                u[j] -= t * rv[j];
            }
            u_plus += t;
            if t2.is_finite() && t >= t2 {
                if !add_constraint(&mut j_op, &mut r_mat, &mut d, act.len()) {
                    return Err(QpError::Cycling);
                }
                act.push(ip);
                u.push(u_plus);
                break;
            }
            let l = l_drop.expect("a blocking constraint exists when the step is partial");
            delete_constraint(&mut j_op, &mut r_mat, &mut act, &mut u, l);
        }
    }
}

/// Bound entries at or beyond this magnitude are treated as absent.
const BOUND_HUGE: f64 = 1e8;

type QpStep = (DVector<f64>, DVector<f64>, DVector<f64>);

/// Linearized subproblem around `x`: `min 1/2 dᵀHd + gᵀd` subject to
/// `J_eq d = -c_eq`, `J_in d <= -c_in`, `lo-x <= d <= hi-x`. Returns the
/// step and the (eq, ineq) multipliers of the nonlinear constraints.
#[allow(clippy::too_many_arguments)]
fn solve_qp_subproblem(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    jeq: &DMatrix<f64>,
    ceq: &DVector<f64>,
    jin: &DMatrix<f64>,
    cin: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<QpStep, QpError> {
    let n = grad.len();
    let me = ceq.len();
    let mi = cin.len();

    enum RowKind {
        Eq(usize),
        Other,
        Ineq(usize),
    }
    let mut rows: Vec<(DVector<f64>, f64, RowKind)> = Vec::new();
    for i in 0..me {
        rows.push((jeq.row(i).transpose(), -ceq[i], RowKind::Eq(i)));
    }
    // Pinned variables become equality rows instead of an opposing pair.
    let mut pinned = vec![false; n];
    for j in 0..n {
        if hi[j] - lo[j] <= 1e-12 * (1.0 + lo[j].abs()) {
            pinned[j] = true;
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e, lo[j] - x[j], RowKind::Other));
        }
    }
    let n_eq_rows = rows.len();
    for i in 0..mi {
        rows.push((-jin.row(i).transpose(), cin[i], RowKind::Ineq(i)));
    }
    for j in 0..n {
        if pinned[j] {
            continue;
        }
        if lo[j] > -BOUND_HUGE {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e, lo[j] - x[j], RowKind::Other));
        }
        if hi[j] < BOUND_HUGE {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            rows.push((e, x[j] - hi[j], RowKind::Other));
        }
    }

    let m = rows.len();
    let mut c_mat = DMatrix::zeros(m, n);
    let mut b_vec = DVector::zeros(m);
    for (i, (row, bi, _)) in rows.iter().enumerate() {
        c_mat.row_mut(i).copy_from(&row.transpose());
        b_vec[i] = *bi;
    }

    // Regularization ladder in case the quasi-Newton matrix has drifted.
    let mut out = None;
    for reg in [1e-8, 1e-4, 1e-1] {
        let h = hess + DMatrix::identity(n, n) * reg;
        match goldfarb_idnani(&h, grad, &c_mat, &b_vec, n_eq_rows) {
            Ok(sol) => {
                out = Some(sol);
                break;
            }
            Err(QpError::NotPositiveDefinite) => continue,
            Err(e) => return Err(e),
        }
    }
    let sol = out.ok_or(QpError::NotPositiveDefinite)?;

    let mut lam_eq = DVector::zeros(me);
    let mut lam_in = DVector::zeros(mi);
    for (i, (_, _, kind)) in rows.iter().enumerate() {
        match kind {
            RowKind::Eq(k) => lam_eq[*k] = -sol.u_rows[i],
            RowKind::Ineq(k) => lam_in[*k] = sol.u_rows[i],
            RowKind::Other => {}
        }
    }
    Ok((sol.x, lam_eq, lam_in))
}

// ---------------------------------------------------------------------------
// Auxiliary problems
// ---------------------------------------------------------------------------

/// Outcome of [`solve_contact_init`].
#[derive(Debug, Clone)]
pub struct ContactInitResult {
    /// Wall-frame contact wrench (pure force; reaction torques pinned).
    pub wrench: ContactWrench,
    /// True when the arm posture cannot react any contact force (contact
    /// map joint rows near zero) or the force program failed.
    pub degenerate: bool,
}

/// Number of facets of the inscribed polyhedral friction cone.
const CONE_FACETS: usize = 24;

/// Largest admissible initial contact force: maximizes the wall-normal
/// force the arm can react within joint-torque bounds and the friction
/// cone. Solved as a small convex program over the three wall-frame force
/// components (a tiny quadratic regularizer bounds the degenerate
/// directions).
pub fn solve_contact_init(
    model: &UvmsModel,
    h: &UvmsState,
    plane: &PlaneObstacle,
    tau_lo: &DVector<f64>,
    tau_hi: &DVector<f64>,
) -> ContactInitResult {
    let nl = model.n_links();
    assert_eq!(tau_lo.len(), nl, "torque bound dimension mismatch");
    assert_eq!(tau_hi.len(), nl, "torque bound dimension mismatch");

    // Joint-space response of a unit wall-frame force.
    let mut m3 = DMatrix::zeros(nl, 3);
    for k in 0..3 {
        let mut f = Vector3::zeros();
        f[k] = 1.0;
        let gcf = generalized_contact_force(model, h, &ContactWrench::from_force(f), plane);
        for j in 0..nl {
            m3[(j, k)] = gcf[6 + j];
        }
    }
    let degenerate_out =
        ContactInitResult { wrench: ContactWrench::zero(), degenerate: true };
    if m3.norm() < 1e-9 {
        return degenerate_out;
    }

    let reg = 1e-6;
    let g = DMatrix::identity(3, 3) * (2.0 * reg);
    let a = DVector::from_vec(vec![-1.0, 0.0, 0.0]);

    // Rows in `C F >= b` form.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    rows.push((DVector::from_vec(vec![1.0, 0.0, 0.0]), 0.0)); // unilateral
    rows.push((DVector::from_vec(vec![-1.0, 0.0, 0.0]), -1e6)); // safety cap
    for j in 0..nl {
        // tau = -M3 F within bounds.
        let mj = m3.row(j).transpose();
        rows.push((-mj.clone(), tau_lo[j]));
        rows.push((mj, -tau_hi[j]));
    }
    let mu_in = plane.friction * (std::f64::consts::PI / CONE_FACETS as f64).cos();
    for k in 0..CONE_FACETS {
        let th = 2.0 * std::f64::consts::PI * k as f64 / CONE_FACETS as f64;
        rows.push((DVector::from_vec(vec![mu_in, -th.cos(), -th.sin()]), 0.0));
    }
    let m = rows.len();
    let mut c_mat = DMatrix::zeros(m, 3);
    let mut b_vec = DVector::zeros(m);
    for (i, (row, bi)) in rows.iter().enumerate() {
        c_mat.row_mut(i).copy_from(&row.transpose());
        b_vec[i] = *bi;
    }
    match goldfarb_idnani(&g, &a, &c_mat, &b_vec, 0) {
        Ok(sol) => ContactInitResult {
            wrench: ContactWrench::from_force(Vector3::new(sol.x[0], sol.x[1], sol.x[2])),
            degenerate: false,
        },
        Err(_) => degenerate_out,
    }
}

/// Outcome of [`solve_ik_on_plane`].
#[derive(Debug, Clone)]
pub struct IkResult {
    pub status: SolveStatus,
    pub q_m: DVector<f64>,
}

struct IkNlp<'a> {
    model: &'a UvmsModel,
    position: Vector3<f64>,
    orientation: Vector3<f64>,
    prev: DVector<f64>,
    plane: &'a PlaneObstacle,
}

impl IkNlp<'_> {
    fn ee_gap(&self, q: &DVector<f64>) -> f64 {
        let kin = forward_kinematics(self.model, &self.position, &self.orientation, q);
        self.plane.point_distance(&kin.ee_pose.translation.vector)
    }
}

impl Nlp for IkNlp<'_> {
    fn dim(&self) -> usize {
        self.prev.len()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.model.joint_lower_limits(), self.model.joint_upper_limits())
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        (x - &self.prev).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.prev) * 2.0
    }

    fn constraints(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_vec(vec![self.ee_gap(x)]), DVector::zeros(0))
    }

    fn jacobians(&self, x: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut j = DMatrix::zeros(1, n);
        let step = 1e-6;
        let mut xp = x.clone();
        for k in 0..n {
            xp[k] = x[k] + step;
            let fp = self.ee_gap(&xp);
            xp[k] = x[k] - step;
            let fm = self.ee_gap(&xp);
            xp[k] = x[k];
            j[(0, k)] = (fp - fm) / (2.0 * step);
        }
        (j, DMatrix::zeros(0, n))
    }
}

/// Minimal-motion manipulator posture with the end-effector on the plane:
/// `min ‖q_m − q_m_prev‖²` subject to the contact equality and joint
/// limits, for a fixed vehicle pose.
pub fn solve_ik_on_plane(
    model: &UvmsModel,
    position: &Vector3<f64>,
    orientation: &Vector3<f64>,
    q_m_prev: &DVector<f64>,
    plane: &PlaneObstacle,
    config: &SolverConfig,
) -> IkResult {
    assert_eq!(q_m_prev.len(), model.n_links(), "q_m_prev dimension mismatch");
    let mut nlp = IkNlp {
        model,
        position: *position,
        orientation: *orientation,
        prev: q_m_prev.clone(),
        plane,
    };
    let raw = solve_nlp(&mut nlp, q_m_prev, config);
    IkResult { status: raw.status, q_m: raw.x }
}
