//! Shipped model data and the generators that produce it.
//!
//! The files under `data/` are compiled in. They are also reproducible from
//! the generators below (`neuroface bundle` rewrites them), and a test keeps
//! the two in sync.

use crate::multibody::{LimitsDoc, LinkDoc, SpineDocument, SpineModel, SpringDoc, DEFAULT_JOINT_LIMIT};
use crate::muscle::{muscle_geometry, AttachmentDoc, HillParams, KinematicPose, MuscleDoc, MuscleDocument};

pub const SPINE_TOML: &str = include_str!("../data/spine.toml");
pub const NECK_MUSCLES_TOML: &str = include_str!("../data/neck_muscles.toml");
pub const FACE_OBJ: &str = include_str!("../data/face.obj");
pub const FACE_MAP_TOML: &str = include_str!("../data/face_map.toml");
pub const EXPRESSIONS_TOML: &str = include_str!("../data/expressions.toml");
pub const AU_ORACLE_TOML: &str = include_str!("../data/au_oracle.toml");
pub const CONFIG_TOML: &str = include_str!("../data/config.toml");

/// File name and generated contents of every bundled data file.
pub fn generate_all() -> Vec<(&'static str, String)> {
    let spine = SpineModel::from_document(&spine_document()).expect("generated spine is valid");
    let face = crate::skin::generate::canonical_face();
    vec![
        ("spine.toml", to_toml(&spine_document())),
        ("neck_muscles.toml", to_toml(&neck_muscle_document(&spine))),
        ("face.obj", face.obj),
        ("face_map.toml", face.map),
        (
            "expressions.toml",
            to_toml(&crate::datagen::default_expression_document()),
        ),
        ("au_oracle.toml", to_toml(&crate::datagen::default_oracle_document())),
        ("config.toml", crate::pipeline::RunConfig::default().to_toml()),
    ]
}

pub(crate) fn to_toml<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("bundled documents serialize")
}

const VERTEBRAE: [&str; 7] = ["C7", "C6", "C5", "C4", "C3", "C2", "C1"];

fn diag(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

/// Nine-link neck. Vertebrae are stacked along +y, 16 mm apart; the skull's
/// center of mass sits directly above its joint so the upright posture is a
/// gravitational equilibrium.
pub fn spine_document() -> SpineDocument {
    let spring = SpringDoc {
        k_s: [20.0, 10.0, 20.0],
        k_d: [1.2, 0.8, 1.2],
        q0: [0.0; 3],
    };
    let limits = LimitsDoc {
        lower: [-DEFAULT_JOINT_LIMIT; 3],
        upper: [DEFAULT_JOINT_LIMIT; 3],
    };
    let mut links = vec![LinkDoc {
        name: "base".into(),
        parent: None,
        joint_origin: None,
        mass: 5.0,
        inertia: diag(0.05, 0.05, 0.05),
        com: [0.0, -0.05, 0.0],
        spring: None,
        limits: None,
    }];
    let mut parent = "base";
    for (i, name) in VERTEBRAE.iter().enumerate() {
        let mass = 0.40 - 0.02 * i as f64;
        links.push(LinkDoc {
            name: (*name).into(),
            parent: Some(parent.into()),
            joint_origin: Some(if i == 0 { [0.0, 0.02, 0.0] } else { [0.0, 0.016, 0.0] }),
            mass,
            inertia: diag(1.5e-3, 2.0e-3, 1.5e-3),
            com: [0.0, 0.008, 0.0],
            spring: Some(spring.clone()),
            limits: Some(limits.clone()),
        });
        parent = name;
    }
    links.push(LinkDoc {
        name: "skull".into(),
        parent: Some("C1".into()),
        joint_origin: Some([0.0, 0.016, 0.0]),
        mass: 4.5,
        inertia: diag(0.022, 0.018, 0.016),
        com: [0.0, 0.045, 0.0],
        spring: Some(spring),
        limits: Some(limits),
    });
    SpineDocument {
        gravity: [0.0, -9.81, 0.0],
        links,
    }
}

/// (group, lower point offset, upper point offset); x is mirrored for `_R`.
const SEGMENT_GROUPS: [(&str, [f64; 3], [f64; 3]); 4] = [
    ("anterior", [0.012, -0.006, 0.016], [0.012, 0.008, 0.016]),
    ("posterior", [0.012, -0.006, -0.022], [0.012, 0.008, -0.022]),
    ("lateral", [0.026, -0.006, 0.0], [0.026, 0.008, 0.0]),
    ("oblique", [0.024, -0.006, 0.012], [0.004, 0.008, -0.018]),
];

/// (name, base point, skull point) for muscles spanning the whole neck.
const LONG_MUSCLES: [(&str, [f64; 3], [f64; 3]); 2] = [
    ("sternocleidomastoid", [0.03, 0.0, 0.045], [0.055, 0.03, -0.035]),
    ("splenius_capitis", [0.012, 0.0, -0.045], [0.04, 0.04, -0.055]),
];

fn mirror(p: [f64; 3], side: &str) -> [f64; 3] {
    if side == "L" {
        p
    } else {
        [-p[0], p[1], p[2]]
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Eight short muscles across every joint plus two long pairs, with rest
/// lengths measured in the upright posture.
pub fn neck_muscle_document(spine: &SpineModel) -> MuscleDocument {
    let frames = spine.forward_kinematics(&spine.rest_state().q, None);
    let pose = KinematicPose::links_only(&frames);
    let links = spine.links();
    let mut muscles = Vec::new();
    let mut push = |name: String, a: AttachmentDoc, b: AttachmentDoc, k_max: f64| {
        let doc = MuscleDoc {
            name,
            hill: HillParams {
                k_s: 20.0,
                k_c: 6.0,
                k_d: 2.0,
                k_max,
                l_m: 0.0,
                v_m: 0.2,
                l_0: 1.0,
            },
            attachments: vec![a, b],
        };
        let built = MuscleDocument {
            muscles: vec![doc.clone()],
        }
        .build(spine)
        .expect("generated muscle is valid");
        let (l, _) = muscle_geometry(&built[0].path, &pose).expect("rest geometry");
        let mut doc = doc;
        doc.hill.l_0 = round_sig(l);
        doc.hill.l_m = round_sig(0.5 * l);
        muscles.push(doc);
    };
    for j in 1..links.len() {
        let below = &links[j - 1].name;
        let origin = links[j].joint_origin;
        let origin = [origin.x, origin.y, origin.z];
        for (group, lo, hi) in SEGMENT_GROUPS {
            for side in ["L", "R"] {
                push(
                    format!("{}_{group}_{side}", links[j].name),
                    AttachmentDoc::Link {
                        link: below.clone(),
                        point: add(origin, mirror(lo, side)),
                    },
                    AttachmentDoc::Link {
                        link: links[j].name.clone(),
                        point: mirror(hi, side),
                    },
                    20000.0,
                );
            }
        }
    }
    for (name, base, skull) in LONG_MUSCLES {
        for side in ["L", "R"] {
            push(
                format!("{name}_{side}"),
                AttachmentDoc::Link {
                    link: "base".into(),
                    point: mirror(base, side),
                },
                AttachmentDoc::Link {
                    link: "skull".into(),
                    point: mirror(skull, side),
                },
                2000.0,
            );
        }
    }
    MuscleDocument { muscles }
}

/// Rounds to 12 significant digits so the text form stays readable.
pub(crate) fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(11 - mag);
    (x * scale).round() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_files_match_generators() {
        let files = [
            SPINE_TOML,
            NECK_MUSCLES_TOML,
            FACE_OBJ,
            FACE_MAP_TOML,
            EXPRESSIONS_TOML,
            AU_ORACLE_TOML,
            CONFIG_TOML,
        ];
        for ((name, generated), shipped) in generate_all().into_iter().zip(files) {
            assert!(generated == shipped, "{name} is stale; run `neuroface bundle`");
        }
    }

    #[test]
    fn neck_muscles_are_paired_and_at_rest() {
        let spine = SpineModel::bundled();
        let muscles = crate::muscle::bundled_neck_muscles(&spine);
        assert_eq!(muscles.len(), 8 * 8 + 4);
        let frames = spine.forward_kinematics(&spine.rest_state().q, None);
        for m in &muscles {
            let (l, _) = muscle_geometry(&m.path, &KinematicPose::links_only(&frames)).unwrap();
            assert!((l - m.params.l_0).abs() < 1e-9, "{}", m.name);
        }
    }
}
