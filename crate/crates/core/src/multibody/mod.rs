//! Articulated rigid-body dynamics of the cervical spine and skull.
//!
//! The chain is a fixed base followed by movable bones (C7 … C1, skull).
//! Every joint has three rotational degrees of freedom, parameterized as
//! intrinsic X-Y-Z Euler angles. Internally each joint is expanded into
//! three single-axis revolute joints (two of them carrying massless
//! intermediate bodies), which lets the textbook recursive algorithms run
//! unchanged:
//!
//! * the joint-space mass matrix comes from the Composite Rigid Body
//!   Algorithm,
//! * Coriolis, centrifugal and gravity terms come from recursive
//!   Newton-Euler with zero joint acceleration.
//!
//! Stepping uses semi-implicit Euler with a Cholesky solve of
//! `M q̈ = P f_m + Jᵀ f_ext − C + τ_spring`.

mod config;
pub(crate) mod spatial;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};

pub use config::{LimitsDoc, LinkDoc, SpineDocument, SpringDoc};

use crate::error::{Error, Result};
use crate::muscle::HillMuscle;
use spatial::{axis_rotation, cross_force, cross_motion, spatial_inertia, SVec, Xform};

/// Default symmetric joint range, 60° each way.
pub const DEFAULT_JOINT_LIMIT: f64 = std::f64::consts::FRAC_PI_3;

/// Central-difference step for moment arms, rad.
pub const MOMENT_ARM_STEP: f64 = 1e-5;

/// Largest accepted integration step, s.
pub const MAX_DT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BoneLink {
    pub name: String,
    pub mass: f64,
    /// Rotational inertia about the center of mass, in the link frame.
    pub inertia: Matrix3<f64>,
    /// Joint frame origin to center of mass, link frame.
    pub com_offset: Vector3<f64>,
    pub parent: Option<usize>,
    /// Joint location in the parent frame.
    pub joint_origin: Vector3<f64>,
}

/// Rotational damped spring on one joint, one coefficient per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSpring {
    pub k_s: Vector3<f64>,
    pub k_d: Vector3<f64>,
    pub q0: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimits {
    pub lower: Vector3<f64>,
    pub upper: Vector3<f64>,
}

impl Default for JointLimits {
    fn default() -> Self {
        JointLimits {
            lower: Vector3::repeat(-DEFAULT_JOINT_LIMIT),
            upper: Vector3::repeat(DEFAULT_JOINT_LIMIT),
        }
    }
}

/// Joint angles and rates, three per movable link.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl GeneralizedState {
    pub fn zeros(dof: usize) -> Self {
        GeneralizedState {
            q: DVector::zeros(dof),
            qdot: DVector::zeros(dof),
        }
    }
}

/// A point force applied to a bone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub link: usize,
    /// Application point in the link frame.
    pub point: Vector3<f64>,
    /// Force in world coordinates.
    pub force: Vector3<f64>,
}

/// World-frame pose and velocity of one link's joint frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFrame {
    /// Link-to-world rotation.
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl LinkFrame {
    pub fn identity() -> Self {
        LinkFrame {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
            omega: Vector3::zeros(),
            velocity: Vector3::zeros(),
        }
    }

    pub fn point_position(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.rotation * local
    }

    pub fn point_velocity(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.velocity + self.omega.cross(&(self.rotation * local))
    }
}

/// Validated cervical-spine model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SpineModel {
    links: Vec<BoneLink>,
    springs: Vec<JointSpring>,
    limits: Vec<JointLimits>,
    gravity: Vector3<f64>,
    body_inertia: Vec<Matrix6<f64>>,
}

impl SpineModel {
    /// Builds and validates a model from a parsed spine document.
    pub fn from_document(doc: &SpineDocument) -> Result<Self> {
        config::build(doc)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: SpineDocument = toml::from_str(text).map_err(|e| Error::Config(format!("spine document: {e}")))?;
        Self::from_document(&doc)
    }

    /// The shipped nine-link neck (base, C7 … C1, skull).
    pub fn bundled() -> Self {
        Self::from_toml(crate::bundled::SPINE_TOML).expect("bundled spine document is valid")
    }

    pub(crate) fn from_parts(
        links: Vec<BoneLink>,
        springs: Vec<JointSpring>,
        limits: Vec<JointLimits>,
        gravity: Vector3<f64>,
    ) -> Self {
        let body_inertia = links[1..]
            .iter()
            .map(|l| spatial_inertia(l.mass, &l.com_offset, &l.inertia))
            .collect();
        SpineModel {
            links,
            springs,
            limits,
            gravity,
            body_inertia,
        }
    }

    pub fn links(&self) -> &[BoneLink] {
        &self.links
    }

    pub fn springs(&self) -> &[JointSpring] {
        &self.springs
    }

    pub fn limits(&self) -> &[JointLimits] {
        &self.limits
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn num_movable(&self) -> usize {
        self.links.len() - 1
    }

    pub fn dof(&self) -> usize {
        3 * self.num_movable()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Link that owns generalized coordinate `k`.
    pub fn dof_link(k: usize) -> usize {
        k / 3 + 1
    }

    /// Spring rest posture with zero velocity.
    pub fn rest_state(&self) -> GeneralizedState {
        let mut s = GeneralizedState::zeros(self.dof());
        for (j, spring) in self.springs.iter().enumerate() {
            for a in 0..3 {
                s.q[3 * j + a] = spring.q0[a];
            }
        }
        s
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dof() {
            return Err(Error::Dimension {
                expected: self.dof(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// True when every angle lies inside its joint range.
    pub fn within_limits(&self, q: &DVector<f64>) -> bool {
        (0..self.dof()).all(|k| {
            let lim = &self.limits[k / 3];
            q[k] >= lim.lower[k % 3] && q[k] <= lim.upper[k % 3]
        })
    }

    /// Joint rotation (child to parent) for movable link `j` (1-based link index).
    fn joint_rotation(q: &[f64]) -> Matrix3<f64> {
        axis_rotation(0, q[0]) * axis_rotation(1, q[1]) * axis_rotation(2, q[2])
    }

    /// World poses of all links; velocities are zero when `qdot` is `None`.
    pub fn forward_kinematics(&self, q: &DVector<f64>, qdot: Option<&DVector<f64>>) -> Vec<LinkFrame> {
        let mut frames = Vec::with_capacity(self.links.len());
        frames.push(LinkFrame::identity());
        for k in 1..self.links.len() {
            let p = frames[k - 1];
            let qi = &q.as_slice()[3 * (k - 1)..3 * k];
            let rx = axis_rotation(0, qi[0]);
            let ry = axis_rotation(1, qi[1]);
            let rz = axis_rotation(2, qi[2]);
            let rotation = p.rotation * rx * ry * rz;
            let position = p.position + p.rotation * self.links[k].joint_origin;
            let (omega, velocity) = match qdot {
                Some(qd) => {
                    let qd = &qd.as_slice()[3 * (k - 1)..3 * k];
                    let local = Vector3::x() * qd[0] + rx * (Vector3::y() * qd[1]) + rx * ry * (Vector3::z() * qd[2]);
                    (
                        p.omega + p.rotation * local,
                        p.velocity + p.omega.cross(&(position - p.position)),
                    )
                }
                None => (Vector3::zeros(), Vector3::zeros()),
            };
            frames.push(LinkFrame {
                rotation,
                position,
                omega,
                velocity,
            });
        }
        frames
    }

    /// Recomputes rotation and position of links `start..` from their
    /// parents and joint rotations, leaving velocities untouched.
    fn place_links(&self, joints: &[Matrix3<f64>], frames: &mut [LinkFrame], start: usize) {
        for k in start.max(1)..self.links.len() {
            let p = frames[k - 1];
            frames[k].rotation = p.rotation * joints[k - 1];
            frames[k].position = p.position + p.rotation * self.links[k].joint_origin;
        }
    }

    /// Parent-to-body transforms of the expanded single-axis chain.
    fn body_transforms(&self, q: &DVector<f64>) -> Vec<Xform> {
        (0..self.dof())
            .map(|b| {
                let axis = b % 3;
                let xj = Xform::rotation(axis_rotation(axis, q[b]).transpose());
                if axis == 0 {
                    xj.compose(&Xform::translation(self.links[b / 3 + 1].joint_origin))
                } else {
                    xj
                }
            })
            .collect()
    }

    fn inertia_of(&self, b: usize) -> Option<&Matrix6<f64>> {
        (b % 3 == 2).then(|| &self.body_inertia[b / 3])
    }

    /// Joint-space mass matrix `M(q)` by the Composite Rigid Body Algorithm.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let xup = self.body_transforms(q);
        let mut ic: Vec<Matrix6<f64>> = (0..n)
            .map(|b| self.inertia_of(b).copied().unwrap_or_else(Matrix6::zeros))
            .collect();
        for b in (1..n).rev() {
            let x = xup[b].to_matrix();
            let carried = x.transpose() * ic[b] * x;
            ic[b - 1] += carried;
        }
        let mut m = DMatrix::zeros(n, n);
        for b in 0..n {
            let mut f: SVec = ic[b].column(b % 3).into_owned();
            m[(b, b)] = f[b % 3];
            let mut j = b;
            while j > 0 {
                f = xup[j].transpose_force(&f);
                j -= 1;
                m[(b, j)] = f[j % 3];
                m[(j, b)] = f[j % 3];
            }
        }
        m
    }

    /// Recursive Newton-Euler: the joint torques required to realize `qddot`
    /// under gravity and the given external wrenches.
    pub fn inverse_dynamics(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qddot: Option<&DVector<f64>>,
        wrenches: &[Wrench],
    ) -> DVector<f64> {
        let n = self.dof();
        let xup = self.body_transforms(q);
        let mut v = vec![SVec::zeros(); n];
        let mut a = vec![SVec::zeros(); n];
        let mut f = vec![SVec::zeros(); n];
        let g = self.gravity;
        let base_acc = SVec::new(0.0, 0.0, 0.0, -g.x, -g.y, -g.z);

        // World-to-link rotations are only needed to express wrenches locally.
        let mut world_to_body = Matrix3::identity();
        for b in 0..n {
            let axis = b % 3;
            let mut vj = SVec::zeros();
            vj[axis] = qdot[b];
            let (vp, ap) = if b == 0 {
                (SVec::zeros(), base_acc)
            } else {
                (v[b - 1], a[b - 1])
            };
            v[b] = xup[b].apply_motion(&vp) + vj;
            a[b] = xup[b].apply_motion(&ap) + cross_motion(&v[b], &vj);
            if let Some(qdd) = qddot {
                a[b][axis] += qdd[b];
            }
            if let Some(inertia) = self.inertia_of(b) {
                let iv = inertia * v[b];
                f[b] = inertia * a[b] + cross_force(&v[b], &iv);
            }
            world_to_body = xup[b].e * world_to_body;
            if axis == 2 {
                let link = b / 3 + 1;
                for w in wrenches.iter().filter(|w| w.link == link) {
                    let local = world_to_body * w.force;
                    let n_ = w.point.cross(&local);
                    f[b] -= SVec::new(n_.x, n_.y, n_.z, local.x, local.y, local.z);
                }
            }
        }
        let mut tau = DVector::zeros(n);
        for b in (0..n).rev() {
            tau[b] = f[b][b % 3];
            if b > 0 {
                let carried = xup[b].transpose_force(&f[b]);
                f[b - 1] += carried;
            }
        }
        tau
    }

    /// Coriolis, centrifugal and gravity generalized forces, `C(q, q̇)`.
    pub fn bias_forces(&self, state: &GeneralizedState) -> DVector<f64> {
        self.inverse_dynamics(&state.q, &state.qdot, None, &[])
    }

    /// Joint spring torques `τ = −k_s (q − q0) − k_d q̇`, per axis.
    pub fn spring_torques(&self, state: &GeneralizedState) -> DVector<f64> {
        DVector::from_fn(self.dof(), |k, _| {
            let s = &self.springs[k / 3];
            let a = k % 3;
            -s.k_s[a] * (state.q[k] - s.q0[a]) - s.k_d[a] * state.qdot[k]
        })
    }

    /// Muscle moment arms `P[k, j] = −∂l_j/∂q_k` by central differences.
    ///
    /// A muscle whose attachments all sit on links at or below some link
    /// `lo` and at or above `hi` only responds to the joints in between,
    /// so other rows are left at zero without evaluation.
    pub fn moment_arm_matrix(&self, muscles: &[HillMuscle], q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(q)?;
        let n = self.dof();
        let mut p = DMatrix::zeros(n, muscles.len());
        let spans: Vec<Option<(usize, usize)>> = muscles.iter().map(|m| m.path.link_span()).collect();
        let base = self.forward_kinematics(q, None);
        let mut joints: Vec<Matrix3<f64>> = q.as_slice().chunks(3).map(Self::joint_rotation).collect();
        let mut plus = base.clone();
        let mut minus = base.clone();
        let mut active = Vec::with_capacity(muscles.len());
        // Top down, so each pass recomputes every link an earlier pass moved.
        for k in (0..n).rev() {
            let link = Self::dof_link(k);
            active.clear();
            active.extend(spans.iter().enumerate().filter_map(|(j, s)| match s {
                Some((lo, hi)) if *lo < link && link <= *hi => Some(j),
                _ => None,
            }));
            if active.is_empty() {
                continue;
            }
            let mut qi = [q[3 * (link - 1)], q[3 * (link - 1) + 1], q[3 * (link - 1) + 2]];
            let rest = joints[link - 1];
            qi[k % 3] = q[k] + MOMENT_ARM_STEP;
            joints[link - 1] = Self::joint_rotation(&qi);
            self.place_links(&joints, &mut plus, link);
            qi[k % 3] = q[k] - MOMENT_ARM_STEP;
            joints[link - 1] = Self::joint_rotation(&qi);
            self.place_links(&joints, &mut minus, link);
            joints[link - 1] = rest;
            for &j in &active {
                let lp = muscles[j].path.length_on_links(&plus)?;
                let lm = muscles[j].path.length_on_links(&minus)?;
                p[(k, j)] = -(lp - lm) / (2.0 * MOMENT_ARM_STEP);
            }
        }
        Ok(p)
    }

    /// One semi-implicit Euler step of the equation of motion.
    ///
    /// `moment_arms` is the `dof × n` matrix from [`Self::moment_arm_matrix`]
    /// and `muscle_forces` the matching tensions (non-negative).
    pub fn step_dynamics(
        &self,
        state: &GeneralizedState,
        moment_arms: &DMatrix<f64>,
        muscle_forces: &DVector<f64>,
        wrenches: &[Wrench],
        dt: f64,
    ) -> Result<GeneralizedState> {
        self.check_dim(&state.q)?;
        self.check_dim(&state.qdot)?;
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(Error::Config(format!("time step {dt} outside (0, {MAX_DT}]")));
        }
        if moment_arms.nrows() != self.dof() || moment_arms.ncols() != muscle_forces.len() {
            return Err(Error::Dimension {
                expected: moment_arms.ncols(),
                got: muscle_forces.len(),
            });
        }
        if let Some(bad) = muscle_forces.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
            return Err(Error::Data(format!("muscle force {bad} is not a finite tension")));
        }
        if let Some(w) = wrenches.iter().find(|w| w.link == 0 || w.link >= self.links.len()) {
            return Err(Error::Data(format!("wrench on immovable or unknown link {}", w.link)));
        }

        let m = self.mass_matrix(&state.q);
        let bias = self.inverse_dynamics(&state.q, &state.qdot, None, wrenches);
        let rhs = moment_arms * muscle_forces + self.spring_torques(state) - bias;
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::SingularMassMatrix(state.q.iter().copied().collect()))?;
        let qddot = chol.solve(&rhs);

        let mut qdot = &state.qdot + qddot * dt;
        let mut q = &state.q + &qdot * dt;
        for k in 0..self.dof() {
            let lim = &self.limits[k / 3];
            let (lo, hi) = (lim.lower[k % 3], lim.upper[k % 3]);
            if q[k] < lo {
                q[k] = lo;
                qdot[k] = 0.0;
            } else if q[k] > hi {
                q[k] = hi;
                qdot[k] = 0.0;
            }
        }
        Ok(GeneralizedState { q, qdot })
    }

    pub fn kinetic_energy(&self, state: &GeneralizedState) -> f64 {
        let m = self.mass_matrix(&state.q);
        0.5 * state.qdot.dot(&(m * &state.qdot))
    }

    /// Gravitational plus joint-spring potential energy.
    pub fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let frames = self.forward_kinematics(q, None);
        let gravity: f64 = self.links[1..]
            .iter()
            .zip(&frames[1..])
            .map(|(l, f)| -l.mass * self.gravity.dot(&f.point_position(&l.com_offset)))
            .sum();
        let spring: f64 = (0..self.dof())
            .map(|k| {
                let s = &self.springs[k / 3];
                0.5 * s.k_s[k % 3] * (q[k] - s.q0[k % 3]).powi(2)
            })
            .sum();
        gravity + spring
    }

    /// Orientation of the last link relative to the base as intrinsic
    /// X-Y-Z angles `(pitch, yaw, roll)`.
    pub fn end_orientation(&self, q: &DVector<f64>) -> Vector3<f64> {
        let r = (0..self.num_movable()).fold(Matrix3::identity(), |acc, j| {
            acc * Self::joint_rotation(&q.as_slice()[3 * j..3 * j + 3])
        });
        euler_xyz(&r)
    }
}

/// Decomposes `r = Rx(a) Ry(b) Rz(c)` into `(a, b, c)`.
pub fn euler_xyz(r: &Matrix3<f64>) -> Vector3<f64> {
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Vector3::new(a, b, c)
}

/// Rotation matrix for intrinsic X-Y-Z angles.
pub fn rotation_xyz(angles: &Vector3<f64>) -> Matrix3<f64> {
    axis_rotation(0, angles.x) * axis_rotation(1, angles.y) * axis_rotation(2, angles.z)
}

#[cfg(test)]
mod tests;
