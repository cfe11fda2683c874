//! Two-rate head-neck controller.
//!
//! The voluntary layer runs at 25 Hz. For a desired head orientation it
//! picks per-joint angles, solves a regularized nonnegative static balance
//! for feedforward activations and records the muscle strains of the
//! desired posture as setpoints. The reflex layer runs every physics step
//! and adds PD feedback on strain and strain rate:
//!
//! ```text
//! a = clamp(a_ff + k_p (e − e*) + k_v (ė − ė*), 0, 1)
//! ```
//!
//! A muscle stretched past its setpoint is excited, which shortens it back
//! toward the setpoint.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibody::{GeneralizedState, SpineModel, DEFAULT_JOINT_LIMIT};
use crate::muscle::{force_length, passive_force, HillMuscle, KinematicPose, MuscleState};

/// Physics steps per voluntary update (4 kHz / 25 Hz).
pub const STEPS_PER_VOLUNTARY: usize = 160;

/// Physics step, s.
pub const PHYSICS_DT: f64 = 2.5e-4;

/// Share of the head rotation carried by each joint, base to skull.
pub const DEFAULT_WEIGHTS: [f64; 8] = [0.06, 0.08, 0.10, 0.12, 0.14, 0.15, 0.17, 0.18];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadPoseTarget {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl HeadPoseTarget {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.pitch, self.yaw, self.roll)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetpointSignal {
    pub e: DVector<f64>,
    pub edot: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflexGains {
    pub k_p: f64,
    pub k_v: f64,
}

impl Default for ReflexGains {
    fn default() -> Self {
        ReflexGains { k_p: 5.0, k_v: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub gains: ReflexGains,
    pub weights: Vec<f64>,
    /// Tikhonov weight of the feedforward solve.
    pub lambda: f64,
    /// Largest accepted head rotation per axis, rad.
    pub max_angle: f64,
    /// Residual torque norm above which the feedforward balance is flagged, N·m.
    pub residual_tolerance: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gains: ReflexGains::default(),
            weights: DEFAULT_WEIGHTS.to_vec(),
            lambda: 1e-3,
            max_angle: DEFAULT_JOINT_LIMIT,
            residual_tolerance: 0.05,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.weights.len() != joints {
            return Err(Error::Config(format!(
                "{} distribution weights for {joints} joints",
                self.weights.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "distribution weights must be non-negative and sum to 1".into(),
            ));
        }
        if !(self.gains.k_p >= 0.0 && self.gains.k_v >= 0.0) {
            return Err(Error::Config("reflex gains must be non-negative".into()));
        }
        if !(self.lambda >= 0.0) || !(self.max_angle > 0.0) {
            return Err(Error::Config("invalid controller regularization or range".into()));
        }
        Ok(())
    }
}

/// Splits a head rotation over the joints: `q_j = q0_j + w_j · target`.
pub fn distribute_orientation(
    spine: &SpineModel,
    target: &HeadPoseTarget,
    weights: &[f64],
    max_angle: f64,
) -> Result<DVector<f64>> {
    let t = target.as_vector();
    if t.iter().any(|x| !x.is_finite() || x.abs() > max_angle) {
        return Err(Error::Data(format!(
            "head target ({:.4}, {:.4}, {:.4}) rad outside ±{max_angle:.4}",
            t.x, t.y, t.z
        )));
    }
    if weights.len() != spine.num_movable() {
        return Err(Error::Dimension {
            expected: spine.num_movable(),
            got: weights.len(),
        });
    }
    let mut q = spine.rest_state().q;
    for (j, w) in weights.iter().enumerate() {
        for a in 0..3 {
            q[3 * j + a] += w * t[a];
        }
    }
    Ok(q)
}

/// Lawson-Hanson active set solution of `min ½ aᵀ G a − hᵀ a` subject to
/// `a ≥ 0`, for symmetric positive definite `G`.
pub fn nnls_gram(g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    let n = h.len();
    let mut a = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + h.amax());
    let solve = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| g[(idx[r], idx[c])]);
        let rhs = DVector::from_fn(idx.len(), |r, _| h[idx[r]]);
        let sol = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => sub.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(idx.len())),
        };
        let mut full = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            full[i] = sol[k];
        }
        full
    };
    for _ in 0..3 * n + 10 {
        let w = h - g * &a;
        let pick = (0..n)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let s = solve(&passive);
            if (0..n).filter(|&i| passive[i]).all(|i| s[i] > 0.0) {
                a = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (0..n).filter(|&i| passive[i] && s[i] <= 0.0) {
                alpha = alpha.min(a[i] / (a[i] - s[i]));
            }
            a += (s - &a) * alpha;
            for i in 0..n {
                if passive[i] && a[i] <= 1e-15 {
                    passive[i] = false;
                    a[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    a
}

/// Output of one voluntary update.
#[derive(Debug, Clone, PartialEq)]
pub struct VoluntaryCommand {
    pub q_target: DVector<f64>,
    pub a_ff: DVector<f64>,
    pub setpoints: SetpointSignal,
    /// Torque imbalance left by `a_ff`, N·m.
    pub residual: f64,
    /// True when the residual exceeds the configured tolerance.
    pub flagged: bool,
}

/// Feedforward activations and strain setpoints for a desired posture.
pub fn voluntary_update(
    spine: &SpineModel,
    muscles: &[HillMuscle],
    q_target: &DVector<f64>,
    config: &ControllerConfig,
) -> Result<VoluntaryCommand> {
    let rest = GeneralizedState {
        q: q_target.clone(),
        qdot: DVector::zeros(spine.dof()),
    };
    let frames = spine.forward_kinematics(q_target, None);
    let pose = KinematicPose::links_only(&frames);
    let states = muscles
        .iter()
        .map(|m| m.state(&pose, 0.0))
        .collect::<Result<Vec<MuscleState>>>()?;
    let p = spine.moment_arm_matrix(muscles, q_target)?;
    let passive = DVector::from_iterator(
        muscles.len(),
        muscles.iter().zip(&states).map(|(m, s)| passive_force(&m.params, s)),
    );
    let gain = DVector::from_iterator(
        muscles.len(),
        muscles.iter().zip(&states).map(|(m, s)| force_length(&m.params, s.l)),
    );
    let required = spine.bias_forces(&rest) - spine.spring_torques(&rest) - &p * &passive;
    let a_mat = DMatrix::from_fn(spine.dof(), muscles.len(), |r, c| p[(r, c)] * gain[c]);
    let gram = a_mat.transpose() * &a_mat + DMatrix::identity(muscles.len(), muscles.len()) * config.lambda;
    let h = a_mat.transpose() * &required;
    let a_ff = nnls_gram(&gram, &h).map(|x| x.clamp(0.0, 1.0));
    let residual = (&a_mat * &a_ff - &required).norm();
    let flagged = residual > config.residual_tolerance;
    if flagged {
        log::warn!("feedforward balance infeasible: residual torque {residual:.3e} N·m");
    }
    Ok(VoluntaryCommand {
        q_target: q_target.clone(),
        a_ff,
        setpoints: SetpointSignal {
            e: DVector::from_iterator(muscles.len(), states.iter().map(|s| s.e)),
            edot: DVector::zeros(muscles.len()),
        },
        residual,
        flagged,
    })
}

/// Feedback activations around the feedforward command.
pub fn reflex_update(
    setpoints: &SetpointSignal,
    states: &[MuscleState],
    a_ff: &DVector<f64>,
    gains: &ReflexGains,
) -> Result<DVector<f64>> {
    let n = states.len();
    if setpoints.e.len() != n || setpoints.edot.len() != n || a_ff.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: setpoints.e.len().min(a_ff.len()),
        });
    }
    Ok(DVector::from_fn(n, |i, _| {
        let a = a_ff[i] + gains.k_p * (states[i].e - setpoints.e[i]) + gains.k_v * (states[i].edot - setpoints.edot[i]);
        a.clamp(0.0, 1.0)
    }))
}

/// Closed-loop neck simulation: physics at 4 kHz, reflexes every step and
/// voluntary updates every [`STEPS_PER_VOLUNTARY`] steps.
#[derive(Debug, Clone)]
pub struct NeckSimulation<'a> {
    spine: &'a SpineModel,
    muscles: &'a [HillMuscle],
    config: ControllerConfig,
    pub state: GeneralizedState,
    target: HeadPoseTarget,
    command: Option<VoluntaryCommand>,
    steps: usize,
    pub voluntary_calls: usize,
    pub reflex_calls: usize,
    activations: DVector<f64>,
    saturated_steps: Vec<usize>,
    /// Longest run of consecutive steps any muscle spent at full activation.
    pub longest_saturation_steps: usize,
}

impl<'a> NeckSimulation<'a> {
    pub fn new(
        spine: &'a SpineModel,
        muscles: &'a [HillMuscle],
        config: ControllerConfig,
        state: GeneralizedState,
    ) -> Result<Self> {
        config.validate(spine.num_movable())?;
        Ok(NeckSimulation {
            spine,
            muscles,
            config,
            state,
            target: HeadPoseTarget::default(),
            command: None,
            steps: 0,
            voluntary_calls: 0,
            reflex_calls: 0,
            activations: DVector::zeros(muscles.len()),
            saturated_steps: vec![0; muscles.len()],
            longest_saturation_steps: 0,
        })
    }

    /// Changes the target; takes effect at the next voluntary boundary.
    pub fn set_target(&mut self, target: HeadPoseTarget) -> Result<()> {
        distribute_orientation(self.spine, &target, &self.config.weights, self.config.max_angle)?;
        self.target = target;
        Ok(())
    }

    pub fn target(&self) -> HeadPoseTarget {
        self.target
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * PHYSICS_DT
    }

    pub fn activations(&self) -> &DVector<f64> {
        &self.activations
    }

    pub fn command(&self) -> Option<&VoluntaryCommand> {
        self.command.as_ref()
    }

    /// Skull orientation relative to the base as (pitch, yaw, roll).
    pub fn head_orientation(&self) -> Vector3<f64> {
        self.spine.end_orientation(&self.state.q)
    }

    pub fn step(&mut self) -> Result<()> {
        if self.steps % STEPS_PER_VOLUNTARY == 0 {
            let q = distribute_orientation(self.spine, &self.target, &self.config.weights, self.config.max_angle)?;
            self.command = Some(voluntary_update(self.spine, self.muscles, &q, &self.config)?);
            self.voluntary_calls += 1;
        }
        let cmd = self.command.as_ref().expect("voluntary command set on the first step");
        let frames = self.spine.forward_kinematics(&self.state.q, Some(&self.state.qdot));
        let pose = KinematicPose::links_only(&frames);
        let mut states = self
            .muscles
            .iter()
            .map(|m| m.state(&pose, 0.0))
            .collect::<Result<Vec<_>>>()?;
        let a = reflex_update(&cmd.setpoints, &states, &cmd.a_ff, &self.config.gains)?;
        self.reflex_calls += 1;
        for (s, &ai) in states.iter_mut().zip(a.iter()) {
            s.a = ai;
        }
        let forces = crate::muscle::total_forces(self.muscles, &states)?;
        let p = self.spine.moment_arm_matrix(self.muscles, &self.state.q)?;
        self.state = self.spine.step_dynamics(&self.state, &p, &forces, &[], PHYSICS_DT)?;
        for (run, &ai) in self.saturated_steps.iter_mut().zip(a.iter()) {
            *run = if ai >= 1.0 { *run + 1 } else { 0 };
            self.longest_saturation_steps = self.longest_saturation_steps.max(*run);
        }
        self.activations = a;
        self.steps += 1;
        Ok(())
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::muscle::bundled_neck_muscles;
    use proptest::prelude::*;

    fn spine() -> &'static SpineModel {
        static S: std::sync::OnceLock<SpineModel> = std::sync::OnceLock::new();
        S.get_or_init(SpineModel::bundled)
    }

    fn muscles() -> &'static [HillMuscle] {
        static M: std::sync::OnceLock<Vec<HillMuscle>> = std::sync::OnceLock::new();
        M.get_or_init(|| bundled_neck_muscles(spine()))
    }

    #[test]
    fn zero_target_is_rest() {
        let q = distribute_orientation(spine(), &HeadPoseTarget::default(), &DEFAULT_WEIGHTS, 1.0).unwrap();
        assert_eq!(q, spine().rest_state().q);
    }

    #[test]
    fn uniform_weights_split_evenly() {
        let t = HeadPoseTarget {
            pitch: 16f64.to_radians(),
            ..Default::default()
        };
        let q = distribute_orientation(spine(), &t, &[0.125; 8], 1.0).unwrap();
        for j in 0..8 {
            assert!((q[3 * j].to_degrees() - 2.0).abs() < 1e-12);
            assert_eq!(q[3 * j + 1], 0.0);
        }
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let t = HeadPoseTarget {
            yaw: 1.2,
            ..Default::default()
        };
        assert!(distribute_orientation(spine(), &t, &DEFAULT_WEIGHTS, DEFAULT_JOINT_LIMIT).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        assert!((DEFAULT_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(DEFAULT_WEIGHTS.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rest_feedforward_is_nearly_zero() {
        let q = spine().rest_state().q;
        let cmd = voluntary_update(spine(), muscles(), &q, &ControllerConfig::default()).unwrap();
        assert!(cmd.a_ff.amax() < 0.02);
        assert!(!cmd.flagged);
    }

    #[test]
    fn setpoints_match_geometry() {
        let t = HeadPoseTarget {
            pitch: 0.2,
            yaw: -0.1,
            roll: 0.05,
        };
        let q = distribute_orientation(spine(), &t, &DEFAULT_WEIGHTS, 1.0).unwrap();
        let cmd = voluntary_update(spine(), muscles(), &q, &ControllerConfig::default()).unwrap();
        let frames = spine().forward_kinematics(&q, None);
        for (k, m) in muscles().iter().enumerate() {
            let (l, _) = crate::muscle::muscle_geometry(&m.path, &KinematicPose::links_only(&frames)).unwrap();
            assert_eq!(cmd.setpoints.e[k], (l - m.params.l_0) / m.params.l_0);
            assert_eq!(cmd.setpoints.edot[k], 0.0);
        }
    }

    #[test]
    fn reflex_examples() {
        let st = |e: f64, edot: f64| MuscleState {
            l: 1.0,
            ldot: 0.0,
            e,
            edot,
            a: 0.0,
        };
        let sp = SetpointSignal {
            e: DVector::from_element(1, 0.1),
            edot: DVector::from_element(1, 0.0),
        };
        let gains = ReflexGains { k_p: 2.0, k_v: 0.0 };
        let a = reflex_update(&sp, &[st(0.1, 0.0)], &DVector::from_element(1, 0.3), &gains).unwrap();
        assert_eq!(a[0], 0.3);
        let a = reflex_update(&sp, &[st(0.1, 0.0)], &DVector::from_element(1, 1.4), &gains).unwrap();
        assert_eq!(a[0], 1.0);
        // Stretched 0.1 past the setpoint.
        let a = reflex_update(&sp, &[st(0.2, 0.0)], &DVector::zeros(1), &gains).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-15);
        let a = reflex_update(&sp, &[st(0.0, 0.0)], &DVector::zeros(1), &gains).unwrap();
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn nnls_matches_known_solution() {
        // min ‖A a − b‖² with the second coordinate pinned at its bound.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -1.0, 1.0]);
        let x = nnls_gram(&(a.transpose() * &a), &(a.transpose() * &b));
        assert!((x[0] - 1.5).abs() < 1e-12 && x[1] == 0.0);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = nnls_gram(&(a.transpose() * &a), &(a.transpose() * &b));
        assert!((x - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-12);
    }

    #[test]
    fn rate_contract() {
        let mut sim =
            NeckSimulation::new(spine(), muscles(), ControllerConfig::default(), spine().rest_state()).unwrap();
        sim.run(2 * STEPS_PER_VOLUNTARY + 1).unwrap();
        assert_eq!(sim.voluntary_calls, 3);
        assert_eq!(sim.reflex_calls, 2 * STEPS_PER_VOLUNTARY + 1);
    }

    #[test]
    fn rest_posture_is_held() {
        let mut sim =
            NeckSimulation::new(spine(), muscles(), ControllerConfig::default(), spine().rest_state()).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..(5.0 / PHYSICS_DT) as usize {
            sim.step().unwrap();
            worst = worst.max(sim.state.q.amax());
        }
        assert!(worst.to_degrees() < 1.0, "{}", worst.to_degrees());
    }

    #[test]
    fn pitch_step_is_tracked() {
        let mut sim =
            NeckSimulation::new(spine(), muscles(), ControllerConfig::default(), spine().rest_state()).unwrap();
        let target = HeadPoseTarget {
            pitch: 15f64.to_radians(),
            ..Default::default()
        };
        sim.set_target(target).unwrap();
        sim.run((2.0 / PHYSICS_DT) as usize).unwrap();
        let err = (sim.head_orientation() - target.as_vector()).amax().to_degrees();
        assert!(err < 2.0, "{err}");
        assert!(sim.longest_saturation_steps as f64 * PHYSICS_DT <= 0.2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn feedforward_stays_in_unit_box(p in -0.8f64..0.8, y in -0.8f64..0.8, r in -0.5f64..0.5) {
            let t = HeadPoseTarget { pitch: p, yaw: y, roll: r };
            let q = distribute_orientation(spine(), &t, &DEFAULT_WEIGHTS, DEFAULT_JOINT_LIMIT).unwrap();
            let cmd = voluntary_update(spine(), muscles(), &q, &ControllerConfig::default()).unwrap();
            prop_assert!(cmd.a_ff.iter().all(|a| (0.0..=1.0).contains(a)));
        }

        #[test]
        fn reflex_output_is_clamped(e in -5.0f64..5.0, ed in -50.0f64..50.0, aff in -1.0f64..2.0) {
            let sp = SetpointSignal { e: DVector::zeros(1), edot: DVector::zeros(1) };
            let s = MuscleState { l: 1.0, ldot: 0.0, e, edot: ed, a: 0.0 };
            let a = reflex_update(&sp, &[s], &DVector::from_element(1, aff), &ReflexGains::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&a[0]));
        }

        #[test]
        fn single_axis_targets_are_reproduced(angle in -0.8f64..0.8, axis in 0usize..3) {
            let mut v = Vector3::zeros();
            v[axis] = angle;
            let t = HeadPoseTarget { pitch: v.x, yaw: v.y, roll: v.z };
            let q = distribute_orientation(spine(), &t, &DEFAULT_WEIGHTS, DEFAULT_JOINT_LIMIT).unwrap();
            prop_assert!((spine().end_orientation(&q) - v).amax() < 1e-9);
        }

        // Rotations about different axes do not commute, so mixed targets
        // are only reproduced to second order.
        #[test]
        fn distributed_angles_reproduce_small_targets(p in -0.05f64..0.05, y in -0.05f64..0.05, r in -0.05f64..0.05) {
            let t = HeadPoseTarget { pitch: p, yaw: y, roll: r };
            let q = distribute_orientation(spine(), &t, &DEFAULT_WEIGHTS, DEFAULT_JOINT_LIMIT).unwrap();
            let got = spine().end_orientation(&q);
            prop_assert!((got - t.as_vector()).amax().to_degrees() < 0.5);
        }
    }
}
