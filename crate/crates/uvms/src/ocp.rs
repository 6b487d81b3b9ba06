//! Mode-dependent transcription of the control problem.
//!
//! Each controller mode becomes one constrained NLP over a packed decision
//! vector: inputs and multiple-shooting states for every horizon step, plus
//! a shared timestep in mode II and per-step contact forces in mode III.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{body_distance, closing_speed, PlaneObstacle};
use crate::model::{
    forward_kinematics_state, generalized_contact_force, geometric_jacobian, integrate_step,
    ContactWrench, ControlInput, UvmsModel, UvmsState, PITCH_GUARD,
};

/// Stand-in for unbounded decision entries.
pub const UNBOUNDED: f64 = 1e9;

/// Differencing step for gradients/Jacobians. Absolute, not scaled by the
/// variable magnitude: the dominant error source is the (absolute) noise
/// floor of the model's internal finite differences, and this sits near the
/// optimal central-difference trade-off against it.
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid problem config: {0}")]
    InvalidConfig(String),
}

/// Controller mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Nominal tracking with obstacle avoidance.
    I,
    /// Contact initiation: variable horizon, terminal end-effector contact.
    II,
    /// Push-off: contact forces as decisions, hull closing speed minimized.
    III,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::I => write!(f, "I"),
            Mode::II => write!(f, "II"),
            Mode::III => write!(f, "III"),
        }
    }
}

/// Packing layout of a decision vector.
///
/// Blocks, in order: `[dt]` (mode II only), inputs `u_0..u_{Np-1}`, states
/// `h_1..h_{Np}`, forces `F_1..F_{Np}` (mode III only, wall frame, 3
/// components each). Input `u_i` drives the step from `h_i` to `h_{i+1}`;
/// force `F_i` acts during the step ending at `h_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub mode: Mode,
    pub n_p: usize,
    pub n_links: usize,
}

impl Layout {
    pub fn n_x(&self) -> usize {
        2 * (6 + self.n_links)
    }

    pub fn n_u(&self) -> usize {
        6 + self.n_links
    }

    pub fn dt_index(&self) -> Option<usize> {
        (self.mode == Mode::II).then_some(0)
    }

    fn inputs_base(&self) -> usize {
        usize::from(self.mode == Mode::II)
    }

    fn states_base(&self) -> usize {
        self.inputs_base() + self.n_p * self.n_u()
    }

    fn forces_base(&self) -> usize {
        self.states_base() + self.n_p * self.n_x()
    }

    pub fn len(&self) -> usize {
        self.forces_base() + if self.mode == Mode::III { 3 * self.n_p } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index range of input `u_i`, `i` in `0..N_p`.
    pub fn input(&self, i: usize) -> Range<usize> {
        assert!(i < self.n_p);
        let s = self.inputs_base() + i * self.n_u();
        s..s + self.n_u()
    }

    /// Index range of state `h_i`, `i` in `1..=N_p`.
    pub fn state(&self, i: usize) -> Range<usize> {
        assert!(i >= 1 && i <= self.n_p);
        let s = self.states_base() + (i - 1) * self.n_x();
        s..s + self.n_x()
    }

    /// Index range of force `F_i`, `i` in `1..=N_p` (mode III only).
    pub fn force(&self, i: usize) -> Range<usize> {
        assert!(self.mode == Mode::III && i >= 1 && i <= self.n_p);
        let s = self.forces_base() + (i - 1) * 3;
        s..s + 3
    }
}

/// A packed decision vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub layout: Layout,
    pub data: DVector<f64>,
}

impl DecisionVector {
    pub fn zeros(layout: Layout) -> Self {
        Self { layout, data: DVector::zeros(layout.len()) }
    }

    pub fn dt(&self, dt_nom: f64) -> f64 {
        self.layout.dt_index().map_or(dt_nom, |k| self.data[k])
    }

    pub fn set_dt(&mut self, dt: f64) {
        if let Some(k) = self.layout.dt_index() {
            self.data[k] = dt;
        }
    }

    pub fn input(&self, i: usize) -> ControlInput {
        let r = self.layout.input(i);
        ControlInput::from_vector(self.layout.n_links, &DVector::from(self.data.rows(r.start, r.len()).into_owned()))
    }

    pub fn set_input(&mut self, i: usize, u: &ControlInput) {
        let r = self.layout.input(i);
        self.data.rows_mut(r.start, r.len()).copy_from(&u.to_vector());
    }

    pub fn state(&self, i: usize) -> UvmsState {
        let r = self.layout.state(i);
        UvmsState::from_vector(self.layout.n_links, &self.data.rows(r.start, r.len()).into_owned())
    }

    pub fn set_state(&mut self, i: usize, h: &UvmsState) {
        let r = self.layout.state(i);
        self.data.rows_mut(r.start, r.len()).copy_from(&h.to_vector());
    }

    pub fn force(&self, i: usize) -> Vector3<f64> {
        let r = self.layout.force(i);
        Vector3::new(self.data[r.start], self.data[r.start + 1], self.data[r.start + 2])
    }

    pub fn set_force(&mut self, i: usize, f: &Vector3<f64>) {
        let r = self.layout.force(i);
        self.data.rows_mut(r.start, 3).copy_from(f);
    }
}

/// Tunables shared by all three transcriptions.
#[derive(Debug, Clone)]
pub struct OcpConfig {
    pub n_p: usize,
    pub dt_nom: f64,
    /// Mode II timestep decision bounds.
    pub dt_bounds: (f64, f64),
    /// Diagonal state-error weights, length `2(6+N_l)`.
    pub w_s: DVector<f64>,
    /// Diagonal input weights, length `6+N_l`.
    pub w_u: DVector<f64>,
    /// Mode II terminal EE-velocity weight.
    pub mode2_weight: f64,
    /// Mode II distance regularizer.
    pub mode2_eps: f64,
    /// Safety margin for avoidance distance constraints.
    pub d_safe: f64,
    /// Bound on each wall-frame contact force component (mode III).
    pub contact_force_max: f64,
    /// Per-channel scaling of the input bounds (thruster degradation).
    pub input_scale: DVector<f64>,
}

impl OcpConfig {
    pub fn defaults(n_links: usize) -> Self {
        let n_x = 2 * (6 + n_links);
        let n_u = 6 + n_links;
        let n_dof = 6 + n_links;
        let mut w_s = DVector::from_element(n_x, 1.0);
        // Attitude excursions are heavily penalized: an unweighted tracker
        // happily trades metres of position error for a radian of pitch,
        // which drives the Euler parameterization toward its singularity.
        for i in 3..6 {
            w_s[i] = 20.0;
        }
        for i in 6..n_dof {
            w_s[i] = 2.0;
        }
        for i in n_dof..n_x {
            w_s[i] = 0.1;
        }
        for i in n_dof + 3..n_dof + 6 {
            w_s[i] = 1.0;
        }
        Self {
            n_p: 8,
            dt_nom: 0.1,
            dt_bounds: (0.02, 0.5),
            w_s,
            w_u: DVector::from_element(n_u, 1e-3),
            mode2_weight: 30.0,
            mode2_eps: 1e-3,
            d_safe: 0.02,
            contact_force_max: 400.0,
            input_scale: DVector::from_element(n_u, 1.0),
        }
    }
}

/// Row bookkeeping for a [`ConstraintBundle`].
#[derive(Debug, Clone)]
pub struct ConstraintRanges {
    /// Dynamics defects (equalities).
    pub defects: Range<usize>,
    /// End-effector contact equalities.
    pub contact: Range<usize>,
    /// Friction direction equalities.
    pub friction_dir: Range<usize>,
    /// Distance inequalities.
    pub distance: Range<usize>,
    /// Friction cone inequalities.
    pub cone: Range<usize>,
}

/// Stacked residuals: `eq = 0`, `ineq <= 0`.
#[derive(Debug, Clone)]
pub struct ConstraintBundle {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub ranges: ConstraintRanges,
}

/// One transcribed problem: immutable except for the frozen friction
/// tangents, which the solver refreshes between major iterations.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub mode: Mode,
    pub layout: Layout,
    pub model: UvmsModel,
    pub h0: UvmsState,
    /// State reference per horizon step (mode I; empty otherwise).
    pub reference: Vec<DVector<f64>>,
    pub planes: Vec<PlaneObstacle>,
    pub w_s: DVector<f64>,
    pub w_u: DVector<f64>,
    pub mode2_weight: f64,
    pub mode2_eps: f64,
    pub dt_nom: f64,
    pub dt_bounds: (f64, f64),
    pub d_safe: f64,
    pub psi_min: DVector<f64>,
    pub psi_max: DVector<f64>,
    /// Unit tangential EE-velocity directions (wall frame, in-plane
    /// components), one per step; zero below the sliding threshold. Held
    /// constant during differentiation.
    pub frozen_tangents: Vec<Vector2<f64>>,
}

/// Assemble the NLP for one mode at measured state `h0`.
pub fn build_problem(
    mode: Mode,
    model: &UvmsModel,
    h0: &UvmsState,
    reference: Vec<DVector<f64>>,
    planes: Vec<PlaneObstacle>,
    config: &OcpConfig,
) -> Result<OcpProblem, OcpError> {
    let bad = |m: String| Err(OcpError::InvalidConfig(m));
    let layout = Layout { mode, n_p: config.n_p, n_links: model.n_links() };
    if config.n_p < 1 {
        return bad("n_p must be >= 1".into());
    }
    if !(config.dt_nom > 0.0) {
        return bad(format!("dt_nom must be positive, got {}", config.dt_nom));
    }
    if !(config.dt_bounds.0 > 0.0 && config.dt_bounds.0 <= config.dt_bounds.1) {
        return bad(format!("dt_bounds out of order: {:?}", config.dt_bounds));
    }
    if config.w_s.len() != layout.n_x() || config.w_s.iter().any(|w| *w < 0.0) {
        return bad(format!("w_s must be {} nonnegative entries", layout.n_x()));
    }
    if config.w_u.len() != layout.n_u() || config.w_u.iter().any(|w| *w < 0.0) {
        return bad(format!("w_u must be {} nonnegative entries", layout.n_u()));
    }
    if !(config.mode2_eps > 0.0) {
        return bad("mode2_eps must be positive".into());
    }
    if config.input_scale.len() != layout.n_u()
        || config.input_scale.iter().any(|s| !(0.0..=1.0).contains(s))
    {
        return bad("input_scale must have one entry in [0,1] per input channel".into());
    }
    if mode == Mode::I && reference.len() != config.n_p {
        return bad(format!("mode I needs {} reference states, got {}", config.n_p, reference.len()));
    }
    if mode == Mode::I && reference.iter().any(|r| r.len() != layout.n_x()) {
        return bad("reference state dimension mismatch".into());
    }
    if mode != Mode::I && planes.is_empty() {
        return bad("modes II/III need at least one plane obstacle".into());
    }
    if !h0.is_finite() {
        return bad("initial state is not finite".into());
    }

    // Decision bounds.
    let mut lo = DVector::from_element(layout.len(), -UNBOUNDED);
    let mut hi = DVector::from_element(layout.len(), UNBOUNDED);
    if let Some(k) = layout.dt_index() {
        lo[k] = config.dt_bounds.0;
        hi[k] = config.dt_bounds.1;
    }
    let (u_lo, u_hi) = model.input_bounds();
    for i in 0..config.n_p {
        let r = layout.input(i);
        for (k, idx) in r.enumerate() {
            lo[idx] = u_lo[k] * config.input_scale[k];
            hi[idx] = u_hi[k] * config.input_scale[k];
        }
    }
    let (q_lo, q_hi) = (model.joint_lower_limits(), model.joint_upper_limits());
    for i in 1..=config.n_p {
        let r = layout.state(i);
        // Pitch guard.
        lo[r.start + 4] = -PITCH_GUARD + 1e-3;
        hi[r.start + 4] = PITCH_GUARD - 1e-3;
        for j in 0..model.n_links() {
            lo[r.start + 6 + j] = q_lo[j];
            hi[r.start + 6 + j] = q_hi[j];
        }
    }
    if mode == Mode::III {
        for i in 1..=config.n_p {
            let r = layout.force(i);
            lo[r.start] = 0.0; // unilateral normal force
            hi[r.start] = config.contact_force_max;
            for k in 1..3 {
                lo[r.start + k] = -config.contact_force_max;
                hi[r.start + k] = config.contact_force_max;
            }
        }
    }

    Ok(OcpProblem {
        mode,
        layout,
        model: model.clone(),
        h0: h0.clone(),
        reference,
        planes,
        w_s: config.w_s.clone(),
        w_u: config.w_u.clone(),
        mode2_weight: config.mode2_weight,
        mode2_eps: config.mode2_eps,
        dt_nom: config.dt_nom,
        dt_bounds: config.dt_bounds,
        d_safe: config.d_safe,
        psi_min: lo,
        psi_max: hi,
        frozen_tangents: vec![Vector2::zeros(); config.n_p],
    })
}

/// Hull angular-velocity weight in the push-off cost.
pub(crate) const MODE3_SPIN_WEIGHT: f64 = 5.0;

/// Terminal-weight profile: extra emphasis on early closing speeds.
pub(crate) fn mode3_weight(n_p: usize, i: usize, d_dot: f64) -> f64 {
    if d_dot >= 0.0 {
        return 0.0;
    }
    if n_p == 1 {
        return 1.0;
    }
    1.0 + (n_p - i) as f64 / (n_p - 1) as f64
}

impl OcpProblem {
    /// Decision state at step `i`; `i = 0` is the measured state.
    pub fn state_at(&self, psi: &DecisionVector, i: usize) -> UvmsState {
        if i == 0 {
            self.h0.clone()
        } else {
            psi.state(i)
        }
    }

    pub fn objective(&self, psi: &DecisionVector) -> f64 {
        match self.mode {
            Mode::I => self.objective_mode1(psi),
            Mode::II => self.objective_mode2(psi),
            Mode::III => self.objective_mode3(psi),
        }
    }

    /// Tracking cost: weighted state error plus input effort.
    pub fn objective_mode1(&self, psi: &DecisionVector) -> f64 {
        let mut j = 0.0;
        for i in 1..=self.layout.n_p {
            let r = self.layout.state(i);
            for k in 0..self.layout.n_x() {
                let e = psi.data[r.start + k] - self.reference[i - 1][k];
                j += self.w_s[k] * e * e;
            }
        }
        for i in 0..self.layout.n_p {
            let r = self.layout.input(i);
            for k in 0..self.layout.n_u() {
                let u = psi.data[r.start + k];
                j += self.w_u[k] * u * u;
            }
        }
        j
    }

    /// Contact-initiation cost: drive the hull toward the wall while
    /// keeping the EE slow along the whole approach. Weighting only the
    /// terminal node lets the optimizer whip the tip through the interior
    /// nodes and arrive "slow" on paper but hot in the plant.
    pub fn objective_mode2(&self, psi: &DecisionVector) -> f64 {
        let h_end = psi.state(self.layout.n_p);
        let d0 = body_distance(&self.model, &h_end, 0, &self.planes[0])
            .map(|p| p.distance)
            .unwrap_or(f64::INFINITY);
        let n_p = self.layout.n_p;
        let mut v_sum = 0.0;
        for i in 1..=n_p {
            let h = psi.state(i);
            let jac = geometric_jacobian(&self.model, &h);
            let twist = jac * h.velocity_vector();
            v_sum += twist.rows(0, 3).norm();
        }
        1.0 / (d0 + self.mode2_eps) + self.mode2_weight * v_sum / n_p as f64
    }

    /// Push-off cost: penalizes hull approach speed (`d_dot < 0`) along the
    /// horizon, so the minimizer drives the hull rate through zero and free.
    /// Hull angular velocity is regularized because a spinning hull can
    /// produce a positive closest-point rate without actually backing away.
    pub fn objective_mode3(&self, psi: &DecisionVector) -> f64 {
        let n_p = self.layout.n_p;
        let mut j = 0.0;
        for i in 1..=n_p {
            let h = psi.state(i);
            let dd = closing_speed(&self.model, &h, 0, &self.planes[0]).unwrap_or(0.0);
            j -= mode3_weight(n_p, i, dd) * dd;
            j += MODE3_SPIN_WEIGHT * h.angular_velocity.norm_squared();
        }
        for i in 0..n_p {
            let r = self.layout.input(i);
            for k in 0..self.layout.n_u() {
                let u = psi.data[r.start + k];
                j += self.w_u[k] * u * u;
            }
        }
        j
    }

    /// Multiple-shooting defect for step `i`: decision state minus the
    /// integrated prediction from step `i-1`.
    fn defect_block(&self, psi: &DecisionVector, i: usize) -> DVector<f64> {
        let h_prev = self.state_at(psi, i - 1);
        let u = psi.input(i - 1);
        let dt = psi.dt(self.dt_nom);
        let f_c = if self.mode == Mode::III {
            generalized_contact_force(
                &self.model,
                &h_prev,
                &ContactWrench::from_force(psi.force(i)),
                &self.planes[0],
            )
        } else {
            DVector::zeros(self.model.n_dof())
        };
        // A blown-up prediction falls back to the previous state so the
        // residual stays finite for the solver.
        let h_pred = integrate_step(&self.model, &h_prev, &u, &f_c, dt).unwrap_or(h_prev);
        psi.state(i).to_vector() - h_pred.to_vector()
    }

    /// All dynamics defects, stacked by step.
    pub fn dynamics_defects(&self, psi: &DecisionVector) -> DVector<f64> {
        let n_x = self.layout.n_x();
        let mut r = DVector::zeros(self.layout.n_p * n_x);
        for i in 1..=self.layout.n_p {
            r.rows_mut((i - 1) * n_x, n_x).copy_from(&self.defect_block(psi, i));
        }
        r
    }

    /// Normalized EE-to-plane distance at step `i`.
    pub fn contact_constraint(&self, psi: &DecisionVector, i: usize) -> f64 {
        let h = psi.state(i);
        let kin = forward_kinematics_state(&self.model, &h);
        let plane = &self.planes[0];
        plane.point_distance(&kin.ee_pose.translation.vector) / plane.normal.norm()
    }

    /// Friction residuals for step `i`: `(cone, direction)` with the cone
    /// an inequality and the direction an equality against the frozen
    /// tangential EE-velocity direction.
    pub fn friction_constraints(&self, psi: &DecisionVector, i: usize) -> (f64, f64) {
        let f = psi.force(i);
        let f_tan = Vector2::new(f.y, f.z);
        let mu = self.planes[0].friction;
        let cone = f_tan.norm() - mu * f.x.abs();
        let e = self.frozen_tangents[i - 1];
        let dir = f_tan.dot(&e) + f_tan.norm() * e.norm();
        (cone, dir)
    }

    /// Bodies under a distance constraint at step `i`, with their margins.
    fn constrained_bodies(&self, i: usize) -> Vec<(usize, f64)> {
        let ee = self.model.n_bodies() - 1;
        (0..self.model.n_bodies())
            .filter_map(|j| match self.mode {
                Mode::I => Some((j, self.d_safe)),
                Mode::II if j == ee => (i < self.layout.n_p).then_some((j, 0.0)),
                Mode::II => Some((j, self.d_safe)),
                Mode::III => (j != ee).then_some((j, self.d_safe)),
            })
            .collect()
    }

    fn distance_block(&self, psi: &DecisionVector, i: usize) -> Vec<f64> {
        let h = psi.state(i);
        let kin = forward_kinematics_state(&self.model, &h);
        let mut out = Vec::new();
        for plane in &self.planes {
            for (j, margin) in self.constrained_bodies(i) {
                let se = if j == 0 {
                    &self.model.vehicle_collision
                } else {
                    &self.model.links[j - 1].collision
                };
                let d = crate::geometry::distance_to_plane(se, kin.body_pose(j), plane).distance;
                out.push(margin - d);
            }
        }
        out
    }

    /// All avoidance inequalities (`<= 0`), stacked by step.
    pub fn distance_constraints(&self, psi: &DecisionVector) -> DVector<f64> {
        let mut out = Vec::new();
        for i in 1..=self.layout.n_p {
            out.extend(self.distance_block(psi, i));
        }
        DVector::from_vec(out)
    }

    fn n_contact(&self) -> usize {
        match self.mode {
            Mode::I => 0,
            Mode::II => 1,
            Mode::III => self.layout.n_p,
        }
    }

    fn n_friction(&self) -> usize {
        if self.mode == Mode::III {
            self.layout.n_p
        } else {
            0
        }
    }

    fn distance_rows_per_step(&self, i: usize) -> usize {
        self.planes.len() * self.constrained_bodies(i).len()
    }

    pub fn eq_dim(&self) -> usize {
        self.layout.n_p * self.layout.n_x() + self.n_contact() + self.n_friction()
    }

    pub fn ineq_dim(&self) -> usize {
        (1..=self.layout.n_p).map(|i| self.distance_rows_per_step(i)).sum::<usize>()
            + self.n_friction()
    }

    fn ranges(&self) -> ConstraintRanges {
        let n_def = self.layout.n_p * self.layout.n_x();
        let n_con = self.n_contact();
        let n_fr = self.n_friction();
        let n_dist = self.ineq_dim() - n_fr;
        ConstraintRanges {
            defects: 0..n_def,
            contact: n_def..n_def + n_con,
            friction_dir: n_def + n_con..n_def + n_con + n_fr,
            distance: 0..n_dist,
            cone: n_dist..n_dist + n_fr,
        }
    }

    /// Every residual family, stacked and indexed.
    pub fn constraints(&self, psi: &DecisionVector) -> ConstraintBundle {
        let ranges = self.ranges();
        let mut eq = DVector::zeros(self.eq_dim());
        eq.rows_mut(0, ranges.defects.len()).copy_from(&self.dynamics_defects(psi));
        match self.mode {
            Mode::I => {}
            Mode::II => {
                eq[ranges.contact.start] = self.contact_constraint(psi, self.layout.n_p);
            }
            Mode::III => {
                for i in 1..=self.layout.n_p {
                    eq[ranges.contact.start + i - 1] = self.contact_constraint(psi, i);
                    let (_, dir) = self.friction_constraints(psi, i);
                    eq[ranges.friction_dir.start + i - 1] = dir;
                }
            }
        }
        let mut ineq = DVector::zeros(self.ineq_dim());
        ineq.rows_mut(0, ranges.distance.len()).copy_from(&self.distance_constraints(psi));
        if self.mode == Mode::III {
            for i in 1..=self.layout.n_p {
                let (cone, _) = self.friction_constraints(psi, i);
                ineq[ranges.cone.start + i - 1] = cone;
            }
        }
        ConstraintBundle { eq, ineq, ranges }
    }

    /// Re-evaluate the frozen friction tangents at the current iterate.
    pub fn refresh_tangents(&mut self, psi: &DecisionVector) {
        if self.mode != Mode::III {
            return;
        }
        let plane = self.planes[0].clone();
        for i in 1..=self.layout.n_p {
            let h = psi.state(i);
            let jac = geometric_jacobian(&self.model, &h);
            let twist = jac * h.velocity_vector();
            let v_w = plane.wall_frame.inverse() * Vector3::new(twist[0], twist[1], twist[2]);
            let tan = Vector2::new(v_w.y, v_w.z);
            self.frozen_tangents[i - 1] =
                if tan.norm() >= 1e-6 { tan / tan.norm() } else { Vector2::zeros() };
        }
    }

    /// Central-difference objective gradient. The step is sized well above
    /// the noise floor of the model's internal finite differences.
    pub fn objective_gradient(&self, psi: &DecisionVector) -> DVector<f64> {
        let mut g = DVector::zeros(self.layout.len());
        let mut x = psi.clone();
        for v in 0..self.layout.len() {
            let step = FD_STEP;
            x.data[v] = psi.data[v] + step;
            let fp = self.objective(&x);
            x.data[v] = psi.data[v] - step;
            let fm = self.objective(&x);
            g[v] = (fp - fm) / (2.0 * step);
            x.data[v] = psi.data[v];
        }
        g
    }

    /// Central-difference constraint Jacobians `(eq, ineq)`, evaluating
    /// only the residual blocks a column can touch.
    pub fn constraint_jacobian(&self, psi: &DecisionVector) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.layout.len();
        let n_x = self.layout.n_x();
        let n_p = self.layout.n_p;
        let ranges = self.ranges();
        let mut j_eq = DMatrix::zeros(self.eq_dim(), n);
        let mut j_in = DMatrix::zeros(self.ineq_dim(), n);

        let dist_offset: Vec<usize> = (1..=n_p)
            .scan(0usize, |acc, i| {
                let o = *acc;
                *acc += self.distance_rows_per_step(i);
                Some(o)
            })
            .collect();

        let mut x = psi.clone();
        for v in 0..n {
            let step = FD_STEP;

            // Which steps' defects does this column reach?
            let defect_steps: Vec<usize> = if Some(v) == self.layout.dt_index() {
                (1..=n_p).collect()
            } else if v < self.layout.states_base() {
                let i = (v - self.layout.inputs_base()) / self.layout.n_u();
                vec![i + 1]
            } else if v < self.layout.forces_base() {
                let i = (v - self.layout.states_base()) / n_x + 1;
                if i < n_p {
                    vec![i, i + 1]
                } else {
                    vec![i]
                }
            } else {
                vec![(v - self.layout.forces_base()) / 3 + 1]
            };
            let is_state = v >= self.layout.states_base() && v < self.layout.forces_base();
            let state_step =
                if is_state { (v - self.layout.states_base()) / n_x + 1 } else { 0 };
            let is_force = self.mode == Mode::III && v >= self.layout.forces_base();
            let force_step = if is_force { (v - self.layout.forces_base()) / 3 + 1 } else { 0 };

            // One local residual sweep at a signed offset from psi.
            let sweep = |x: &DecisionVector| {
                let defects: Vec<DVector<f64>> =
                    defect_steps.iter().map(|&i| self.defect_block(x, i)).collect();
                let mut contact = 0.0;
                let mut dist = Vec::new();
                if is_state {
                    let i = state_step;
                    contact = match self.mode {
                        Mode::II if i == n_p => self.contact_constraint(x, i),
                        Mode::III => self.contact_constraint(x, i),
                        _ => 0.0,
                    };
                    dist = self.distance_block(x, i);
                }
                let fric = if is_force { self.friction_constraints(x, force_step) } else { (0.0, 0.0) };
                (defects, contact, dist, fric)
            };

            x.data[v] = psi.data[v] + step;
            let plus = sweep(&x);
            x.data[v] = psi.data[v] - step;
            let minus = sweep(&x);
            x.data[v] = psi.data[v];

            // The timestep column is by far the most nonlinear; one extra
            // half-step sweep buys an extrapolated estimate there.
            let defect_cols: Vec<DVector<f64>> = if Some(v) == self.layout.dt_index() {
                x.data[v] = psi.data[v] + step / 2.0;
                let hp = sweep(&x);
                x.data[v] = psi.data[v] - step / 2.0;
                let hm = sweep(&x);
                x.data[v] = psi.data[v];
                defect_steps
                    .iter()
                    .enumerate()
                    .map(|(b, _)| {
                        let coarse = (&plus.0[b] - &minus.0[b]) / (2.0 * step);
                        let fine = (&hp.0[b] - &hm.0[b]) / step;
                        (fine * 4.0 - coarse) / 3.0
                    })
                    .collect()
            } else {
                defect_steps
                    .iter()
                    .enumerate()
                    .map(|(b, _)| (&plus.0[b] - &minus.0[b]) / (2.0 * step))
                    .collect()
            };
            for (b, &i) in defect_steps.iter().enumerate() {
                for k in 0..n_x {
                    j_eq[((i - 1) * n_x + k, v)] = defect_cols[b][k];
                }
            }
            if is_state {
                let i = state_step;
                match self.mode {
                    Mode::II if i == n_p => {
                        j_eq[(ranges.contact.start, v)] = (plus.1 - minus.1) / (2.0 * step);
                    }
                    Mode::III => {
                        j_eq[(ranges.contact.start + i - 1, v)] =
                            (plus.1 - minus.1) / (2.0 * step);
                    }
                    _ => {}
                }
                for k in 0..plus.2.len() {
                    j_in[(dist_offset[i - 1] + k, v)] =
                        (plus.2[k] - minus.2[k]) / (2.0 * step);
                }
            }
            if is_force {
                let i = force_step;
                j_eq[(ranges.friction_dir.start + i - 1, v)] =
                    (plus.3 .1 - minus.3 .1) / (2.0 * step);
                j_in[(ranges.cone.start + i - 1, v)] =
                    (plus.3 .0 - minus.3 .0) / (2.0 * step);
            }
        }
        (j_eq, j_in)
    }

    /// Decision box bounds `(lo, hi)`.
    pub fn bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.psi_min, &self.psi_max)
    }
}
