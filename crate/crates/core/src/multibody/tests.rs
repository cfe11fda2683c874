use super::*;
use crate::muscle::{muscle_geometry, Attachment, HillMuscle, HillParams, KinematicPose, MusclePath};
use proptest::prelude::*;

const G: f64 = 9.81;

fn diag(i: f64) -> [[f64; 3]; 3] {
    [[i, 0.0, 0.0], [0.0, i, 0.0], [0.0, 0.0, i]]
}

fn base_doc() -> LinkDoc {
    LinkDoc {
        name: "base".into(),
        parent: None,
        joint_origin: None,
        mass: 1.0,
        inertia: diag(0.01),
        com: [0.0; 3],
        spring: None,
        limits: None,
    }
}

fn link_doc(name: &str, parent: &str, origin: [f64; 3], mass: f64, inertia: f64, com: [f64; 3]) -> LinkDoc {
    LinkDoc {
        name: name.into(),
        parent: Some(parent.into()),
        joint_origin: Some(origin),
        mass,
        inertia: diag(inertia),
        com,
        spring: None,
        limits: None,
    }
}

/// A single bob hanging `r` below a spherical joint.
fn pendulum(mass: f64, r: f64, ic: f64, gravity: f64) -> SpineModel {
    SpineModel::from_document(&SpineDocument {
        gravity: [0.0, -gravity, 0.0],
        links: vec![base_doc(), link_doc("bob", "base", [0.0; 3], mass, ic, [0.0, -r, 0.0])],
    })
    .unwrap()
}

fn with_q(model: &SpineModel, vals: &[(usize, f64)]) -> DVector<f64> {
    let mut q = DVector::zeros(model.dof());
    for &(k, v) in vals {
        q[k] = v;
    }
    q
}

fn random_state(model: &SpineModel, seed: u64) -> GeneralizedState {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = model.dof();
    GeneralizedState {
        q: DVector::from_fn(n, |_, _| rng.gen_range(-0.8..0.8)),
        qdot: DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
    }
}

fn no_muscles(model: &SpineModel) -> (DMatrix<f64>, DVector<f64>) {
    (DMatrix::zeros(model.dof(), 0), DVector::zeros(0))
}

#[test]
fn bundled_spine_has_nine_links() {
    let m = SpineModel::bundled();
    assert_eq!(m.links().len(), 9);
    assert_eq!(m.dof(), 24);
    let names: Vec<&str> = m.links().iter().map(|l| l.name.as_str()).collect();
    assert_eq!(names, ["base", "C7", "C6", "C5", "C4", "C3", "C2", "C1", "skull"]);
    let skull = &m.links()[8];
    assert!(m.links()[1..8].iter().all(|l| l.mass < skull.mass));
}

#[test]
fn zero_mass_is_rejected() {
    let mut doc: SpineDocument = toml::from_str(crate::bundled::SPINE_TOML).unwrap();
    let c3 = doc.links.iter_mut().find(|l| l.name == "C3").unwrap();
    c3.mass = 0.0;
    let err = SpineModel::from_document(&doc).unwrap_err().to_string();
    assert!(err.contains("non-positive mass"), "{err}");
}

#[test]
fn cyclic_parents_are_rejected() {
    let mut a = link_doc("a", "b", [0.0; 3], 1.0, 0.01, [0.0; 3]);
    let b = link_doc("b", "a", [0.0; 3], 1.0, 0.01, [0.0; 3]);
    a.parent = Some("b".into());
    let doc = SpineDocument {
        gravity: [0.0; 3],
        links: vec![base_doc(), a, b],
    };
    let err = SpineModel::from_document(&doc).unwrap_err().to_string();
    assert!(err.contains("cyclic"), "{err}");
}

#[test]
fn non_spd_inertia_is_rejected() {
    let mut bad = link_doc("bob", "base", [0.0; 3], 1.0, 0.01, [0.0; 3]);
    bad.inertia[2][2] = -0.01;
    let doc = SpineDocument {
        gravity: [0.0; 3],
        links: vec![base_doc(), bad],
    };
    assert!(SpineModel::from_document(&doc).is_err());
    assert!(SpineModel::from_toml("gravity = [0.0").is_err());
}

#[test]
fn single_movable_link_has_three_dof() {
    let m = pendulum(1.0, 0.1, 1e-3, G);
    assert_eq!(m.dof(), 3);
    assert_eq!(m.rest_state(), GeneralizedState::zeros(3));
}

#[test]
fn point_mass_matrix_is_m_r_squared() {
    let (mass, r, eps) = (2.0, 0.3, 1e-9);
    let m = pendulum(mass, r, eps, G);
    let mm = m.mass_matrix(&DVector::zeros(3));
    let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![mass * r * r + eps, eps, mass * r * r + eps]));
    assert!((mm - expect).abs().max() < 1e-12);
}

#[test]
fn planar_two_link_matches_textbook() {
    let (m1, m2, l1, lc1, lc2, i1, i2) = (1.3, 0.7, 0.25, 0.12, 0.1, 0.004, 0.002);
    let model = SpineModel::from_document(&SpineDocument {
        gravity: [0.0; 3],
        links: vec![
            base_doc(),
            link_doc("l1", "base", [0.0; 3], m1, i1, [0.0, 0.0, lc1]),
            link_doc("l2", "l1", [0.0, 0.0, l1], m2, i2, [0.0, 0.0, lc2]),
        ],
    })
    .unwrap();
    for (q1, q2) in [(0.0, 0.0), (0.3, -0.9), (-0.7, 0.5), (1.0, 1.0)] {
        let mm = model.mass_matrix(&with_q(&model, &[(0, q1), (3, q2)]));
        let c2 = q2.cos();
        let m11 = m1 * lc1 * lc1 + i1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i2;
        let m12 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
        let m22 = m2 * lc2 * lc2 + i2;
        assert!((mm[(0, 0)] - m11).abs() < 1e-12);
        assert!((mm[(0, 3)] - m12).abs() < 1e-12);
        assert!((mm[(3, 0)] - m12).abs() < 1e-12);
        assert!((mm[(3, 3)] - m22).abs() < 1e-12);
    }
}

#[test]
fn bias_vanishes_without_sources() {
    let m = pendulum(1.0, 0.2, 1e-3, 0.0);
    let s = GeneralizedState {
        q: with_q(&m, &[(0, 0.4), (2, -0.2)]),
        qdot: DVector::zeros(3),
    };
    assert!(m.bias_forces(&s).norm() < 1e-15);
}

#[test]
fn pendulum_gravity_torque() {
    let (mass, r) = (1.5, 0.2);
    let m = pendulum(mass, r, 1e-3, G);
    for theta in [-0.9, -0.3, 0.1, 0.7] {
        let s = GeneralizedState {
            q: with_q(&m, &[(0, theta)]),
            qdot: DVector::zeros(3),
        };
        let tau = m.bias_forces(&s);
        assert!((tau[0] - mass * G * r * theta.sin()).abs() < 1e-12);
    }
}

#[test]
fn coriolis_skew_symmetry() {
    let m = SpineModel::bundled();
    let h = 1e-6;
    for seed in 0..20 {
        let s = random_state(&m, seed);
        let mdot = (m.mass_matrix(&(&s.q + &s.qdot * h)) - m.mass_matrix(&(&s.q - &s.qdot * h))) / (2.0 * h);
        let grav = m.bias_forces(&GeneralizedState {
            q: s.q.clone(),
            qdot: DVector::zeros(m.dof()),
        });
        let cor = m.bias_forces(&s) - grav;
        let lhs = s.qdot.dot(&(mdot * &s.qdot)) - 2.0 * s.qdot.dot(&cor);
        assert!(lhs.abs() < 1e-8, "seed {seed}: {lhs}");
    }
}

#[test]
fn spring_torque_examples() {
    let mut doc = SpineDocument {
        gravity: [0.0; 3],
        links: vec![base_doc(), link_doc("bob", "base", [0.0; 3], 1.0, 0.01, [0.0; 3])],
    };
    doc.links[1].spring = Some(SpringDoc {
        k_s: [2.0, 2.0, 2.0],
        k_d: [1.0, 1.0, 1.0],
        q0: [0.05, 0.0, 0.0],
    });
    let m = SpineModel::from_document(&doc).unwrap();
    let rest = m.rest_state();
    assert_eq!(m.spring_torques(&rest), DVector::zeros(3));
    let mut s = rest.clone();
    s.q[0] += 0.1;
    assert!((m.spring_torques(&s)[0] + 0.2).abs() < 1e-15);
    let mut s = rest;
    s.qdot[1] = 0.5;
    assert_eq!(m.spring_torques(&s)[1], -0.5);
}

#[test]
fn wrench_maps_through_jacobian_transpose() {
    let r = 0.2;
    let m = pendulum(1.0, r, 1e-3, 0.0);
    let w = Wrench {
        link: 1,
        point: Vector3::new(0.0, -r, 0.0),
        force: Vector3::new(0.0, 0.0, 3.0),
    };
    let tau = m.inverse_dynamics(&DVector::zeros(3), &DVector::zeros(3), None, &[w]);
    // r × F about x is −r·F; RNEA reports the torque needed to cancel it.
    assert!((tau[0] - r * 3.0).abs() < 1e-12);
    assert!(tau[1].abs() < 1e-12 && tau[2].abs() < 1e-12);
}

#[test]
fn equilibrium_step_is_identity() {
    let m = pendulum(1.0, 0.2, 1e-3, 0.0);
    let s = GeneralizedState {
        q: with_q(&m, &[(0, 0.3), (1, -0.2)]),
        qdot: DVector::zeros(3),
    };
    let (p, f) = no_muscles(&m);
    let next = m.step_dynamics(&s, &p, &f, &[], 2.5e-4).unwrap();
    assert_eq!(next, s);
}

#[test]
fn step_rejects_bad_inputs() {
    let m = pendulum(1.0, 0.2, 1e-3, G);
    let s = GeneralizedState::zeros(3);
    let (p, f) = no_muscles(&m);
    assert!(m.step_dynamics(&s, &p, &f, &[], 0.0).is_err());
    assert!(m.step_dynamics(&s, &p, &f, &[], 2e-3).is_err());
    assert!(m.step_dynamics(&GeneralizedState::zeros(4), &p, &f, &[], 1e-4).is_err());
    let p1 = DMatrix::zeros(3, 1);
    assert!(m
        .step_dynamics(&s, &p1, &DVector::from_element(1, -1.0), &[], 1e-4)
        .is_err());
    let w = Wrench {
        link: 0,
        point: Vector3::zeros(),
        force: Vector3::x(),
    };
    assert!(m.step_dynamics(&s, &p, &f, &[w], 1e-4).is_err());
}

#[test]
fn small_angle_period() {
    let (mass, r, ic) = (1.0, 0.25, 2e-3);
    let m = pendulum(mass, r, ic, G);
    let period = 2.0 * std::f64::consts::PI * ((ic + mass * r * r) / (mass * G * r)).sqrt();
    let dt = 2.5e-4;
    let (p, f) = no_muscles(&m);
    let mut s = GeneralizedState {
        q: with_q(&m, &[(0, 0.05)]),
        qdot: DVector::zeros(3),
    };
    let mut crossings = Vec::new();
    let steps = (10.0 / dt) as usize;
    for i in 0..steps {
        let next = m.step_dynamics(&s, &p, &f, &[], dt).unwrap();
        if s.q[0] < 0.0 && next.q[0] >= 0.0 {
            let frac = -s.q[0] / (next.q[0] - s.q[0]);
            crossings.push((i as f64 + frac) * dt);
        }
        s = next;
    }
    assert!(crossings.len() >= 3);
    let measured = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    assert!((measured - period).abs() / period < 0.01, "{measured} vs {period}");
}

fn total_energy(m: &SpineModel, s: &GeneralizedState) -> f64 {
    m.kinetic_energy(s) + m.potential_energy(&s.q)
}

#[test]
fn damped_energy_never_rises_over_windows() {
    let m = SpineModel::bundled();
    let (p, f) = no_muscles(&m);
    let mut s = m.rest_state();
    for k in 0..m.dof() {
        s.q[k] = 0.15 * ((k as f64) * 1.3).sin();
    }
    let mut prev = total_energy(&m, &s);
    for _ in 0..40 {
        for _ in 0..100 {
            s = m.step_dynamics(&s, &p, &f, &[], 2.5e-4).unwrap();
        }
        let e = total_energy(&m, &s);
        assert!(e <= prev + 1e-9 * prev.abs().max(1.0), "{e} > {prev}");
        prev = e;
    }
}

#[test]
fn damped_motion_settles() {
    let m = SpineModel::bundled();
    let (p, f) = no_muscles(&m);
    let mut s = m.rest_state();
    for k in 0..m.dof() {
        s.qdot[k] = if k % 2 == 0 { 1.0 } else { -0.7 };
    }
    let mut peak: f64 = 0.0;
    for _ in 0..40_000 {
        s = m.step_dynamics(&s, &p, &f, &[], 2.5e-4).unwrap();
        peak = peak.max(m.kinetic_energy(&s));
    }
    assert!(m.kinetic_energy(&s) < 0.01 * peak);
}

#[test]
fn stepping_is_deterministic() {
    let m = SpineModel::bundled();
    let muscles = crate::muscle::bundled_neck_muscles(&m);
    let s0 = random_state(&m, 7);
    let run = || {
        let mut s = s0.clone();
        for _ in 0..50 {
            let p = m.moment_arm_matrix(&muscles, &s.q).unwrap();
            let f = DVector::from_element(muscles.len(), 5.0);
            s = m.step_dynamics(&s, &p, &f, &[], 2.5e-4).unwrap();
        }
        s
    };
    let a = run();
    let b = run();
    assert!(a.q.iter().zip(b.q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a
        .qdot
        .iter()
        .zip(b.qdot.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn kinetic_energy_matches_world_kinematics() {
    let m = SpineModel::bundled();
    for seed in 0..10 {
        let s = random_state(&m, 100 + seed);
        let frames = m.forward_kinematics(&s.q, Some(&s.qdot));
        let world: f64 = m.links()[1..]
            .iter()
            .zip(&frames[1..])
            .map(|(l, f)| {
                let v = f.point_velocity(&l.com_offset);
                let iw = f.rotation * l.inertia * f.rotation.transpose();
                0.5 * l.mass * v.norm_squared() + 0.5 * f.omega.dot(&(iw * f.omega))
            })
            .sum();
        let ke = m.kinetic_energy(&s);
        assert!((ke - world).abs() < 1e-10 * world.max(1.0), "{ke} vs {world}");
    }
}

fn hill() -> HillParams {
    HillParams {
        k_s: 1.0,
        k_c: 1.0,
        k_d: 1.0,
        k_max: 100.0,
        l_m: 0.01,
        v_m: 0.2,
        l_0: 0.1,
    }
}

fn straight_muscle(a: (usize, [f64; 3]), b: (usize, [f64; 3])) -> HillMuscle {
    let at = |(link, p): (usize, [f64; 3])| Attachment::Link {
        link,
        point: Vector3::new(p[0], p[1], p[2]),
    };
    HillMuscle {
        name: "m".into(),
        params: hill(),
        path: MusclePath::new(vec![at(a), at(b)]).unwrap(),
    }
}

#[test]
fn single_link_muscle_has_zero_arm() {
    let m = pendulum(1.0, 0.2, 1e-3, G);
    let mus = straight_muscle((1, [0.0, 0.0, 0.0]), (1, [0.0, -0.1, 0.02]));
    let p = m.moment_arm_matrix(&[mus], &DVector::zeros(3)).unwrap();
    assert_eq!(p, DMatrix::zeros(3, 1));
}

#[test]
fn hinge_moment_arm_is_perpendicular_distance() {
    let m = pendulum(1.0, 0.2, 1e-3, G);
    let d = 0.03;
    let mus = straight_muscle((0, [0.0, 0.05, d]), (1, [0.0, -0.05, d]));
    let p = m.moment_arm_matrix(&[mus.clone()], &DVector::zeros(3)).unwrap();
    assert!((p[(0, 0)].abs() - d).abs() < 1e-4);
    assert!(p[(1, 0)].abs() < 1e-4 && p[(2, 0)].abs() < 1e-4);

    let f1 = DVector::from_element(1, 4.0);
    let tau1 = &p * &f1;
    let tau2 = &p * (f1 * 2.0);
    assert!((tau2 - tau1 * 2.0).norm() < 1e-15);
}

#[test]
fn virtual_work_identity() {
    let m = SpineModel::bundled();
    let muscles = crate::muscle::bundled_neck_muscles(&m);
    for seed in 0..10 {
        let mut s = random_state(&m, 300 + seed);
        s.q *= 0.5;
        let p = m.moment_arm_matrix(&muscles, &s.q).unwrap();
        let frames = m.forward_kinematics(&s.q, Some(&s.qdot));
        let pose = KinematicPose::links_only(&frames);
        for (j, mus) in muscles.iter().enumerate() {
            let f = 10.0;
            let (_, ldot) = muscle_geometry(&mus.path, &pose).unwrap();
            let joint_power = -(p.column(j) * f).dot(&s.qdot);
            let scale = (f * ldot).abs().max(1e-6);
            assert!(
                (f * ldot - joint_power).abs() <= 1e-3 * scale,
                "muscle {}: {} vs {}",
                mus.name,
                f * ldot,
                joint_power
            );
        }
    }
}

#[test]
fn end_orientation_of_single_joint() {
    let m = pendulum(1.0, 0.2, 1e-3, G);
    let q = with_q(&m, &[(0, 0.3), (1, -0.2), (2, 0.5)]);
    let o = m.end_orientation(&q);
    assert!((o - Vector3::new(0.3, -0.2, 0.5)).norm() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn mass_matrix_is_spd(q in prop::collection::vec(-DEFAULT_JOINT_LIMIT..DEFAULT_JOINT_LIMIT, 24)) {
        let m = bundled_model();
        let mm = m.mass_matrix(&DVector::from_vec(q));
        prop_assert!((&mm - mm.transpose()).abs().max() <= 1e-12);
        prop_assert!(mm.cholesky().is_some());
    }
}

proptest! {
    #[test]
    fn euler_roundtrip(a in -1.5f64..1.5, b in -1.5f64..1.5, c in -1.5f64..1.5) {
        let v = Vector3::new(a, b, c);
        prop_assert!((euler_xyz(&rotation_xyz(&v)) - v).norm() < 1e-10);
    }
}

fn bundled_model() -> &'static SpineModel {
    static MODEL: std::sync::OnceLock<SpineModel> = std::sync::OnceLock::new();
    MODEL.get_or_init(SpineModel::bundled)
}
