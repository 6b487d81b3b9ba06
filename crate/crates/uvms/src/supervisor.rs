//! The switching logic that turns the three transcriptions into one
//! controller: mode selection, the Mode II variable-horizon loop, Mode III
//! contact initialization, warm starting, and the post-solve trajectory
//! recomputation. Produces one control input per step.

use nalgebra::{DVector, Rotation3};

use crate::geometry::{all_body_distances, closing_speed, PlaneObstacle};
use crate::model::{
    forward_kinematics_state, generalized_contact_force, integrate_step, ContactWrench,
    ControlInput, UvmsModel, UvmsState,
};
use crate::ocp::{build_problem, DecisionVector, Layout, Mode, OcpConfig, OcpProblem};
use crate::solver::{
    check_feasibility, cold_start, solve, solve_contact_init, solve_ik_on_plane, SolveStatus,
    SolverConfig,
};

/// End-effector is considered "in contact" below this plane gap [m]; must
/// exceed both the solver feasibility tolerance and the plant's penalty
/// compliance depth.
pub const CONTACT_TOL: f64 = 5e-3;

/// Mutable controller memory carried between steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub mode: Mode,
    /// Step counter.
    pub k: usize,
    /// Current horizon `N_p^(k)`; equals `nominal_horizon` outside Mode II.
    pub horizon: usize,
    /// Horizon used at the previous step (`N_p^(k-1)`), for mode selection.
    pub prev_horizon: usize,
    pub nominal_horizon: usize,
    pub dt_nom: f64,
    /// Last accepted solution, states replaced by the recomputed rollout.
    pub last_solution: Option<DecisionVector>,
    /// Timestep the last solution was computed with.
    pub last_dt: f64,
    pub last_input: ControlInput,
    pub last_wrench: ContactWrench,
    /// Full-state regulation target.
    pub mission_reference: DVector<f64>,
}

/// Per-step controller output.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub input: ControlInput,
    pub mode: Mode,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub violation: f64,
    /// Per-body (distance, closing speed) at the measured state.
    pub proximity: Vec<(f64, f64)>,
    /// Mode II expected time until contact.
    pub time_to_contact: Option<f64>,
    /// Horizon used for this step's solve.
    pub horizon: usize,
    /// Timestep of this step's solution.
    pub dt_star: f64,
    /// Mode I feasibility verdict, when one was computed.
    pub feasible: Option<bool>,
    /// True when the solver failed and the previous input was held.
    pub degraded: bool,
}

/// Algorithm-3 mode selection. `prev` is `None` on the first step, where
/// the verdict alone decides; afterwards exactly one forward transition
/// (I→II on infeasibility, II→III on exhausted horizon, III→I on
/// separation) or a self-loop.
pub fn select_mode(
    prev: Option<Mode>,
    feasible: Option<bool>,
    n_p_prev: usize,
    d_dot0_prev: f64,
) -> Mode {
    match prev {
        None => {
            if feasible.expect("first step requires a feasibility verdict") {
                Mode::I
            } else {
                Mode::II
            }
        }
        Some(Mode::I) => {
            if feasible.expect("Mode I requires a feasibility verdict") {
                Mode::I
            } else {
                Mode::II
            }
        }
        Some(Mode::II) => {
            if n_p_prev == 1 {
                Mode::III
            } else {
                Mode::II
            }
        }
        Some(Mode::III) => {
            if d_dot0_prev > 0.0 {
                Mode::I
            } else {
                Mode::III
            }
        }
    }
}

/// Algorithm-1 horizon bookkeeping after a Mode II solve with optimized
/// timestep `dt_star`: shrink the horizon to cover the remaining expected
/// time to contact, or — once a single step remains — restore the nominal
/// horizon and hand over to Mode III.
pub fn mode2_horizon_update(
    n_p: usize,
    dt_star: f64,
    dt_nom: f64,
    nominal_n_p: usize,
) -> (usize, Mode) {
    assert!(n_p >= 1, "horizon must be at least 1");
    assert!(dt_star > 0.0 && dt_nom > 0.0, "timesteps must be positive");
    if n_p > 1 {
        let t_exp = (n_p - 1) as f64 * dt_star;
        (((t_exp / dt_nom).ceil() as usize).max(1), Mode::II)
    } else {
        (nominal_n_p, Mode::III)
    }
}

/// Algorithm-2 Mode III initial guess: per horizon step, pick the largest
/// reactable contact force, roll the dynamics one step under the last
/// known inputs, keep the vehicle coordinates, re-posture the arm onto the
/// plane by inverse kinematics, and zero the joint rates. Returns the
/// assembled decision vector and a degraded flag when the force program or
/// the IK failed along the way (posture is then held).
pub fn mode3_initialize(
    model: &UvmsModel,
    h0: &UvmsState,
    plane: &PlaneObstacle,
    last_input: &ControlInput,
    config: &OcpConfig,
    solver_config: &SolverConfig,
) -> (DecisionVector, bool) {
    let layout = Layout { mode: Mode::III, n_p: config.n_p, n_links: model.n_links() };
    let tau = model.torque_limits();
    let tau_lo = -tau.clone();

    // One pass over the horizon at a given force scale. Fails when the
    // rollout leaves the plane unreachable for the arm at any step.
    let attempt = |scale: f64| -> Option<(DecisionVector, bool)> {
        let mut psi = DecisionVector::zeros(layout);
        let mut h = h0.clone();
        let mut q_prev = h0.joint_angles.clone();
        let mut degenerate = false;
        for i in 1..=config.n_p {
            let ci = solve_contact_init(model, &h, plane, &tau_lo, &tau);
            degenerate |= ci.degenerate;
            let mut force = ci.wrench.force * scale;
            force.x = force.x.min(config.contact_force_max);

            // Counteract the contact torque at the joints: an unbalanced
            // push spins the light distal links fast enough that the
            // fixed-step rollout diverges.
            let wrench = ContactWrench::from_force(force);
            let f_gen = generalized_contact_force(model, &h, &wrench, plane);
            let mut u = last_input.clone();
            for j in 0..model.n_links() {
                u.joint_torques[j] =
                    (last_input.joint_torques[j] - f_gen[6 + j]).clamp(tau_lo[j], tau[j]);
            }
            let h_next = match integrate_step(model, &h, &u, &f_gen, config.dt_nom) {
                Ok(h_next) if h_next.is_finite() => h_next,
                _ => return None,
            };
            let ik = solve_ik_on_plane(
                model,
                &h_next.position,
                &h_next.orientation,
                &q_prev,
                plane,
                solver_config,
            );
            if ik.status != SolveStatus::Optimal {
                return None;
            }
            psi.set_force(i, &force);
            psi.set_input(i - 1, &u);
            h = h_next;
            h.joint_angles = ik.q_m.clone();
            q_prev = ik.q_m;
            h.joint_rates.fill(0.0);
            psi.set_state(i, &h);
        }
        Some((psi, degenerate))
    };

    // The transcription keeps the end-effector on the plane for the whole
    // horizon, so a push strong enough to outrun the arm's reach is not an
    // admissible guess: back the whole force program off until the rollout
    // stays reachable, bottoming out at free drift.
    for scale in [1.0, 0.5, 0.25, 0.125, 0.0625, 0.0] {
        if let Some((psi, degenerate)) = attempt(scale) {
            return (psi, degenerate);
        }
    }

    // Even the free drift leaves the plane unreachable: hold the measured
    // posture with zero rates and report the guess as degraded.
    let mut psi = DecisionVector::zeros(layout);
    let mut h = h0.clone();
    h.joint_rates.fill(0.0);
    for i in 1..=config.n_p {
        psi.set_input(i - 1, last_input);
        psi.set_state(i, &h);
    }
    (psi, true)
}

/// Replace the decision states by an exact rollout of the decision inputs
/// (and forces, in Mode III) through the true dynamics, so solver
/// tolerances do not propagate through the warm start.
pub fn recompute_trajectory(
    model: &UvmsModel,
    h0: &UvmsState,
    plane: Option<&PlaneObstacle>,
    psi: &DecisionVector,
    dt_nom: f64,
) -> DecisionVector {
    let mut out = psi.clone();
    let dt = psi.dt(dt_nom);
    let mut h = h0.clone();
    let zero_f = DVector::zeros(6 + psi.layout.n_links);
    for i in 1..=psi.layout.n_p {
        let f_gen = if psi.layout.mode == Mode::III {
            let plane = plane.expect("Mode III recompute needs the contact plane");
            let wrench = ContactWrench::from_force(psi.force(i));
            generalized_contact_force(model, &h, &wrench, plane)
        } else {
            zero_f.clone()
        };
        h = integrate_step(model, &h, &psi.input(i - 1), &f_gen, dt)
            .unwrap_or_else(|_| h.clone());
        out.set_state(i, &h);
    }
    out
}

/// Receding-horizon warm start: shift the previous (recomputed) solution
/// by one step and repeat the terminal block. Across Mode II horizon
/// changes the shifted trajectory is linearly resampled over the remaining
/// expected time to contact.
pub fn warm_start(
    prev: &DecisionVector,
    prev_dt: f64,
    new_layout: Layout,
    dt_bounds: (f64, f64),
) -> DecisionVector {
    let old = prev.layout;
    let mut out = DecisionVector::zeros(new_layout);

    if new_layout.mode == old.mode && new_layout.n_p == old.n_p {
        let n_p = old.n_p;
        out.set_dt(prev_dt.clamp(dt_bounds.0, dt_bounds.1));
        for i in 0..n_p {
            out.set_input(i, &prev.input((i + 1).min(n_p - 1)));
        }
        for i in 1..=n_p {
            out.set_state(i, &prev.state((i + 1).min(n_p)));
        }
        if new_layout.mode == Mode::III {
            for i in 1..=n_p {
                out.set_force(i, &prev.force((i + 1).min(n_p)));
            }
        }
        return out;
    }

    // Horizon change: the shifted tail spans t_exp = (N_p_old - 1) dt*.
    // Old (shifted) node j sits at time j * dt*, j = 0..N_p_old-1, with
    // node 0 being the state the plant is about to reach.
    let n_old = old.n_p;
    let n_new = new_layout.n_p;
    let t_exp = ((n_old - 1) as f64 * prev_dt).max(dt_bounds.0);
    let dt_new = (t_exp / n_new as f64).clamp(dt_bounds.0, dt_bounds.1);
    out.set_dt(dt_new);

    let old_state = |j: usize| prev.state(j.clamp(1, n_old)).to_vector();
    for i in 1..=n_new {
        let t = i as f64 * dt_new;
        let j = (t / prev_dt).floor() as usize;
        let frac = (t / prev_dt - j as f64).clamp(0.0, 1.0);
        // Shifted node j corresponds to original node j+1.
        let a = old_state(j + 1);
        let b = old_state(j + 2);
        let h = UvmsState::from_vector(new_layout.n_links, &(&a * (1.0 - frac) + &b * frac));
        out.set_state(i, &h);
    }
    for i in 0..n_new {
        let t = i as f64 * dt_new;
        let j = ((t / prev_dt).floor() as usize + 1).min(n_old - 1);
        out.set_input(i, &prev.input(j));
    }
    out
}

/// One controller instance: configuration plus mutable state.
#[derive(Debug, Clone)]
pub struct Supervisor {
    pub model: UvmsModel,
    pub planes: Vec<PlaneObstacle>,
    pub ocp: OcpConfig,
    pub solver: SolverConfig,
    pub state: ControllerState,
}

impl Supervisor {
    pub fn new(
        model: UvmsModel,
        planes: Vec<PlaneObstacle>,
        ocp: OcpConfig,
        solver: SolverConfig,
        mission_reference: DVector<f64>,
    ) -> Self {
        assert!(!planes.is_empty(), "supervisor needs at least one plane obstacle");
        assert_eq!(
            mission_reference.len(),
            2 * (6 + model.n_links()),
            "mission reference must be a full state vector"
        );
        let state = ControllerState {
            mode: Mode::I,
            k: 0,
            horizon: ocp.n_p,
            prev_horizon: ocp.n_p,
            nominal_horizon: ocp.n_p,
            dt_nom: ocp.dt_nom,
            last_solution: None,
            last_dt: ocp.dt_nom,
            last_input: ControlInput::zero(model.n_links()),
            last_wrench: ContactWrench::zero(),
            mission_reference,
        };
        Self { model, planes, ocp, solver, state }
    }

    /// Nearest plane by hull distance.
    fn active_plane(&self, h: &UvmsState) -> &PlaneObstacle {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.planes.iter().enumerate() {
            if let Ok(prox) = crate::geometry::body_distance(&self.model, h, 0, p) {
                if prox.distance < best_d {
                    best_d = prox.distance;
                    best = i;
                }
            }
        }
        &self.planes[best]
    }

    fn mode1_problem(&self, h: &UvmsState) -> OcpProblem {
        let mut cfg = self.ocp.clone();
        cfg.n_p = self.state.nominal_horizon;
        let reference = vec![self.state.mission_reference.clone(); cfg.n_p];
        build_problem(Mode::I, &self.model, h, reference, self.planes.clone(), &cfg)
            .expect("mode I problem assembly")
    }

    fn emergency_problem(&self, mode: Mode, h: &UvmsState, n_p: usize) -> OcpProblem {
        let mut cfg = self.ocp.clone();
        cfg.n_p = n_p;
        let plane = self.active_plane(h).clone();
        build_problem(mode, &self.model, h, vec![], vec![plane], &cfg)
            .expect("emergency problem assembly")
    }

    /// A solve result that may safely drive the plant.
    fn usable(&self, status: SolveStatus, violation: f64) -> bool {
        match status {
            SolveStatus::Optimal => true,
            SolveStatus::IterationLimit => violation <= self.solver.tol_infeas,
            SolveStatus::Infeasible => false,
        }
    }

    /// One full control step: mode selection, solve, horizon bookkeeping,
    /// trajectory recomputation; emits the input for the plant. Never
    /// panics on solver failure — the previous input is held instead.
    pub fn control_step(&mut self, h: &UvmsState) -> StepOutput {
        assert!(h.is_finite(), "measured state must be finite");
        let plane = self.active_plane(h).clone();
        let proximity = all_body_distances(&self.model, h, &plane)
            .expect("proximity query at measured state");
        let d_dot0 = closing_speed(&self.model, h, 0, &plane)
            .expect("closing speed at measured state");

        // Mode I feasibility verdict, when mode selection needs one.
        let prev = (self.state.k > 0).then_some(self.state.mode);
        let needs_verdict = prev.is_none() || prev == Some(Mode::I);
        let mut m1_witness = None;
        let verdict = if needs_verdict {
            let problem = self.mode1_problem(h);
            let init = match (&self.state.last_solution, self.state.mode) {
                (Some(psi), Mode::I) => {
                    warm_start(psi, self.state.last_dt, problem.layout, problem.dt_bounds)
                }
                _ => cold_start(&problem),
            };
            let report = check_feasibility(&problem, &init, &self.solver);
            m1_witness = Some(report.witness);
            Some(report.feasible)
        } else {
            None
        };

        let mut mode = select_mode(prev, verdict, self.state.prev_horizon, d_dot0);
        // Measured contact pre-empts the horizon schedule: the plant can
        // touch a step before the shrinking horizon reaches one, and a
        // contact-free Mode II model is wrong from that moment on.
        if mode == Mode::II && self.ee_gap(h, &plane) <= CONTACT_TOL {
            mode = Mode::III;
        }
        let entering = prev != Some(mode);
        if entering || mode != Mode::II {
            if mode == Mode::II && entering {
                self.state.horizon = self.state.nominal_horizon;
            } else if mode != Mode::II {
                self.state.horizon = self.state.nominal_horizon;
            }
        }

        let mut out = StepOutput {
            input: self.state.last_input.clone(),
            mode,
            status: SolveStatus::IterationLimit,
            iterations: 0,
            objective: 0.0,
            violation: f64::INFINITY,
            proximity,
            time_to_contact: None,
            horizon: self.state.horizon,
            dt_star: self.state.dt_nom,
            feasible: verdict,
            degraded: false,
        };

        match mode {
            Mode::I => {
                let problem = self.mode1_problem(h);
                let init = match (&self.state.last_solution, entering) {
                    (Some(psi), false) => {
                        warm_start(psi, self.state.last_dt, problem.layout, problem.dt_bounds)
                    }
                    _ => m1_witness.take().unwrap_or_else(|| cold_start(&problem)),
                };
                let res = solve(&problem, &init, &self.solver);
                out.status = res.status;
                out.iterations = res.iterations;
                out.objective = res.objective;
                out.violation = res.violation;
                if self.usable(res.status, res.violation) {
                    let fixed =
                        recompute_trajectory(&self.model, h, None, &res.psi, self.state.dt_nom);
                    out.input = fixed.input(0);
                    self.state.last_solution = Some(fixed);
                    self.state.last_dt = self.state.dt_nom;
                } else {
                    out.degraded = true;
                }
                self.state.prev_horizon = self.state.nominal_horizon;
            }
            Mode::II => {
                let n_p = self.state.horizon;
                let problem = self.emergency_problem(Mode::II, h, n_p);
                let init = match (&self.state.last_solution, entering) {
                    (Some(psi), false) if psi.layout.mode == Mode::II => {
                        warm_start(psi, self.state.last_dt, problem.layout, problem.dt_bounds)
                    }
                    _ => {
                        // Entering from Mode I: reuse the restoration
                        // witness trajectory where the layouts agree.
                        let mut init = cold_start(&problem);
                        if let Some(w) = m1_witness.take() {
                            if w.layout.n_p == n_p {
                                for i in 0..n_p {
                                    init.set_input(i, &w.input(i));
                                }
                                for i in 1..=n_p {
                                    init.set_state(i, &w.state(i));
                                }
                            }
                        }
                        init
                    }
                };
                let res = solve(&problem, &init, &self.solver);
                out.status = res.status;
                out.iterations = res.iterations;
                out.objective = res.objective;
                out.violation = res.violation;
                out.horizon = n_p;
                if self.usable(res.status, res.violation) {
                    let dt_star = res.psi.dt(self.state.dt_nom);
                    out.dt_star = dt_star;
                    out.time_to_contact = Some((n_p.saturating_sub(1)) as f64 * dt_star);
                    let fixed = recompute_trajectory(
                        &self.model,
                        h,
                        Some(&plane),
                        &res.psi,
                        self.state.dt_nom,
                    );
                    out.input = fixed.input(0);
                    self.state.last_solution = Some(fixed);
                    self.state.last_dt = dt_star;
                    let (next, _) =
                        mode2_horizon_update(n_p, dt_star, self.state.dt_nom, self.state.nominal_horizon);
                    self.state.prev_horizon = n_p;
                    self.state.horizon = next;
                } else {
                    out.degraded = true;
                    self.state.prev_horizon = n_p;
                }
            }
            Mode::III => {
                let n_p = self.state.nominal_horizon;
                let problem = self.emergency_problem(Mode::III, h, n_p);
                let init = match (&self.state.last_solution, entering) {
                    (Some(psi), false) if psi.layout.mode == Mode::III => {
                        warm_start(psi, self.state.last_dt, problem.layout, problem.dt_bounds)
                    }
                    _ => {
                        let (psi, degraded) = mode3_initialize(
                            &self.model,
                            h,
                            &plane,
                            &self.state.last_input,
                            &{
                                let mut c = self.ocp.clone();
                                c.n_p = n_p;
                                c
                            },
                            &self.solver,
                        );
                        out.degraded |= degraded;
                        psi
                    }
                };
                let res = solve(&problem, &init, &self.solver);
                out.status = res.status;
                out.iterations = res.iterations;
                out.objective = res.objective;
                out.violation = res.violation;
                if self.usable(res.status, res.violation) {
                    let fixed = recompute_trajectory(
                        &self.model,
                        h,
                        Some(&plane),
                        &res.psi,
                        self.state.dt_nom,
                    );
                    out.input = fixed.input(0);
                    self.state.last_wrench = ContactWrench::from_force(res.psi.force(1));
                    self.state.last_solution = Some(fixed);
                    self.state.last_dt = self.state.dt_nom;
                } else {
                    // Holding the previous input while pressed against the
                    // wall can wedge a joint on its end stop; release the
                    // arm and back the hull away instead.
                    out.degraded = true;
                    out.input = self.release_input(h, &plane);
                    self.state.last_solution = None;
                }
                self.state.prev_horizon = n_p;
            }
        }

        self.state.mode = mode;
        self.state.k += 1;
        self.state.last_input = out.input.clone();
        out
    }

    /// Passive retreat used when a push-off solve fails: joints released,
    /// half thrust straight away from the wall.
    fn release_input(&self, h: &UvmsState, plane: &PlaneObstacle) -> ControlInput {
        let rot = Rotation3::from_euler_angles(h.orientation.x, h.orientation.y, h.orientation.z);
        let n_body = rot.inverse() * plane.normal.normalize();
        let mut u = ControlInput::zero(self.model.n_links());
        for i in 0..3 {
            u.vehicle_wrench[i] = 0.5 * self.model.vehicle_wrench_max[i] * n_body[i];
        }
        u
    }

    /// Plane gap of the end-effector at `h`.
    pub fn ee_gap(&self, h: &UvmsState, plane: &PlaneObstacle) -> f64 {
        let kin = forward_kinematics_state(&self.model, h);
        plane.point_distance(&kin.ee_pose.translation.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::Mode;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wall() -> PlaneObstacle {
        PlaneObstacle::new(Vector3::new(-1.0, 0.0, 0.0), 3.0, 0.4)
    }

    #[test]
    fn mode_selection_truth_table() {
        // First step: verdict decides.
        assert_eq!(select_mode(None, Some(true), 8, 0.0), Mode::I);
        assert_eq!(select_mode(None, Some(false), 8, 0.0), Mode::II);
        // Mode I: infeasibility is the only exit.
        assert_eq!(select_mode(Some(Mode::I), Some(true), 8, -1.0), Mode::I);
        assert_eq!(select_mode(Some(Mode::I), Some(false), 8, 1.0), Mode::II);
        // Mode II: exhausted horizon is the only exit.
        assert_eq!(select_mode(Some(Mode::II), None, 3, 1.0), Mode::II);
        assert_eq!(select_mode(Some(Mode::II), None, 1, -1.0), Mode::III);
        // Mode III: separation is the only exit, strictly positive.
        assert_eq!(select_mode(Some(Mode::III), None, 8, -0.1), Mode::III);
        assert_eq!(select_mode(Some(Mode::III), None, 8, 0.0), Mode::III);
        assert_eq!(select_mode(Some(Mode::III), None, 1, 0.2), Mode::I);
    }

    #[test]
    fn horizon_update_arithmetic() {
        assert_eq!(mode2_horizon_update(10, 0.05, 0.1, 10), (5, Mode::II));
        assert_eq!(mode2_horizon_update(2, 0.1, 0.1, 10), (1, Mode::II));
        assert_eq!(mode2_horizon_update(1, 0.1, 0.1, 10), (10, Mode::III));
        // Shrinks monotonically whenever dt* <= dt_nom.
        let mut n_p = 12;
        while n_p > 1 {
            let (next, mode) = mode2_horizon_update(n_p, 0.07, 0.1, 12);
            assert!(next < n_p, "horizon failed to shrink: {n_p} -> {next}");
            assert_eq!(mode, Mode::II);
            n_p = next;
        }
    }

    fn problem(mode: Mode, n_p: usize, h0: &UvmsState) -> OcpProblem {
        let model = UvmsModel::default_article();
        let mut cfg = OcpConfig::defaults(3);
        cfg.n_p = n_p;
        let reference = if mode == Mode::I { vec![h0.to_vector(); n_p] } else { vec![] };
        build_problem(mode, &model, h0, reference, vec![wall()], &cfg).unwrap()
    }

    #[test]
    fn recompute_is_exact_on_rollouts_and_scrubs_noise() {
        let model = UvmsModel::default_article();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut h0 = UvmsState::zero(3);
        h0.linear_velocity.x = 0.2;
        let p = problem(Mode::I, 5, &h0);
        let mut psi = cold_start(&p);
        for i in 0..5 {
            let mut u = ControlInput::zero(3);
            for j in 0..6 {
                u.vehicle_wrench[j] = rng.gen_range(-3.0..3.0);
            }
            psi.set_input(i, &u);
        }
        let exact = recompute_trajectory(&model, &h0, None, &psi, p.dt_nom);

        // A solver-exact vector is a fixed point.
        let again = recompute_trajectory(&model, &h0, None, &exact, p.dt_nom);
        assert!((&again.data - &exact.data).amax() < 1e-9);

        // Injected state noise is scrubbed: the recomputed trajectory is
        // defect-free.
        let mut noisy = exact.clone();
        for i in 1..=5 {
            let mut hv = noisy.state(i).to_vector();
            for v in hv.iter_mut() {
                *v += rng.gen_range(-1e-6..1e-6);
            }
            noisy.set_state(i, &UvmsState::from_vector(3, &hv));
        }
        let fixed = recompute_trajectory(&model, &h0, None, &noisy, p.dt_nom);
        let defects = p.dynamics_defects(&fixed);
        assert!(defects.amax() < 1e-12, "residual defects {}", defects.amax());
    }

    #[test]
    fn warm_start_shift_and_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h0 = UvmsState::zero(3);
        let p = problem(Mode::II, 5, &h0);
        let mut psi = cold_start(&p);
        psi.set_dt(0.08);
        for i in 0..5 {
            let mut u = ControlInput::zero(3);
            for j in 0..6 {
                u.vehicle_wrench[j] = rng.gen_range(-2.0..2.0);
            }
            psi.set_input(i, &u);
        }
        let psi = recompute_trajectory(&UvmsModel::default_article(), &h0, Some(&wall()), &psi, 0.1);

        // Same-horizon shift copies blocks 2..N_p.
        let same = warm_start(&psi, 0.08, psi.layout, p.dt_bounds);
        for i in 1..5 {
            assert_eq!(same.state(i).to_vector(), psi.state(i + 1).to_vector());
        }
        assert_eq!(same.state(5).to_vector(), psi.state(5).to_vector());
        for i in 0..4 {
            assert_eq!(same.input(i).to_vector(), psi.input(i + 1).to_vector());
        }

        // Horizon 5 -> 3: the resampled guess spans the same remaining
        // time to contact.
        let new_layout = Layout { mode: Mode::II, n_p: 3, n_links: 3 };
        let resampled = warm_start(&psi, 0.08, new_layout, p.dt_bounds);
        let t_exp = 4.0 * 0.08;
        assert_relative_eq!(resampled.dt(0.1) * 3.0, t_exp, epsilon = 1e-12);
        // Terminal node matches the old terminal state (same total span).
        assert!(
            (resampled.state(3).to_vector() - psi.state(5).to_vector()).amax() < 1e-9
        );

        // A steady trajectory — all blocks identical — is a fixed point of
        // the shift.
        let steady_p = problem(Mode::I, 4, &h0);
        let mut steady = DecisionVector::zeros(steady_p.layout);
        let mut u = ControlInput::zero(3);
        u.vehicle_wrench[2] = 1.5;
        for i in 0..4 {
            steady.set_input(i, &u);
        }
        for i in 1..=4 {
            steady.set_state(i, &h0);
        }
        let shifted = warm_start(&steady, 0.1, steady.layout, steady_p.dt_bounds);
        assert!((&shifted.data - &steady.data).amax() < 1e-12);
    }

    /// A posture with the end-effector on the wall, for Mode III tests.
    fn contact_posture() -> (UvmsModel, UvmsState, PlaneObstacle) {
        let model = UvmsModel::default_article();
        let mut h = UvmsState::zero(3);
        // Bent-elbow posture keeps the arm well inside the workspace, so
        // the push-off guess has reach to spare as the vehicle recedes.
        h.joint_angles = DVector::from_vec(vec![0.5, -1.0, 0.5]);
        let kin = forward_kinematics_state(&model, &h);
        let ee = kin.ee_pose.translation.vector;
        let plane = PlaneObstacle::new(Vector3::new(-1.0, 0.0, 0.0), ee.x, 0.4);
        (model, h, plane)
    }

    #[test]
    fn mode3_initialize_holds_contact_and_beats_constant_guess() {
        let (model, h, plane) = contact_posture();
        let mut cfg = OcpConfig::defaults(3);
        cfg.n_p = 4;
        let sc = SolverConfig::default();

        // Stationary contact: guesses stay near the measured state.
        let (psi, degraded) = mode3_initialize(&model, &h, &plane, &ControlInput::zero(3), &cfg, &sc);
        assert!(!degraded);
        for i in 1..=4 {
            let hi = psi.state(i);
            assert!((hi.position - h.position).norm() < 0.3);
            assert!((hi.joint_angles.clone() - h.joint_angles.clone()).amax() < 1.0);
            // Contact equality holds to IK tolerance at every step.
            let kin = forward_kinematics_state(&model, &hi);
            assert!(
                plane.point_distance(&kin.ee_pose.translation.vector).abs() < 1e-5,
                "step {i} off the plane"
            );
            assert_eq!(hi.joint_rates.amax(), 0.0);
        }

        // Head-on flavor: vehicle still closing. The structured guess must
        // be finite and good enough for the push-off solve to converge.
        let mut h2 = h.clone();
        h2.linear_velocity.x = 0.3;
        let p = {
            let mut c = cfg.clone();
            c.n_p = 4;
            build_problem(Mode::III, &model, &h2, vec![], vec![plane.clone()], &c).unwrap()
        };
        let (alg2, _) = mode3_initialize(&model, &h2, &plane, &ControlInput::zero(3), &cfg, &sc);
        assert!(alg2.data.iter().all(|v| v.is_finite()));
        let res = solve(&p, &alg2, &sc);
        assert!(
            res.status == SolveStatus::Optimal
                || (res.status == SolveStatus::IterationLimit && res.violation <= sc.tol_infeas),
            "push-off solve failed from the structured guess: {:?}, viol {:.3e}",
            res.status,
            res.violation
        );
    }

    #[test]
    fn control_step_free_space_stays_mode_one() {
        let model = UvmsModel::default_article();
        let mut cfg = OcpConfig::defaults(3);
        cfg.n_p = 4;
        let sc = SolverConfig::default();
        let mut h = UvmsState::zero(3);
        let mut target = h.to_vector();
        target[0] = 0.2; // small surge move, far from the wall at x = 3
        let mut sup = Supervisor::new(model.clone(), vec![wall()], cfg, sc, target);

        for _ in 0..5 {
            let out = sup.control_step(&h);
            assert_eq!(out.mode, Mode::I);
            assert_eq!(out.feasible, Some(true));
            assert!(
                !out.degraded,
                "degraded step in free space: status {:?}, viol {:.3e}, iters {}",
                out.status, out.violation, out.iterations
            );
            // Applied input within bounds.
            let (lo, hi) = model.input_bounds();
            let u = out.input.to_vector();
            for j in 0..u.len() {
                assert!(u[j] >= lo[j] - 1e-9 && u[j] <= hi[j] + 1e-9);
            }
            let f = DVector::zeros(9);
            h = integrate_step(&model, &h, &out.input, &f, 0.1).unwrap();
        }
        // Regulation actually makes progress toward the target.
        assert!(h.position.x > 0.01, "no progress toward the target");
    }
}
