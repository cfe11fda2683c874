//! Procedural canonical face.
//!
//! The face is a parametric sheet over `(u, v) ∈ [−1, 1] × [0, 1]`, with `u`
//! running across the face (positive toward the subject's left) and `v`
//! from chin to forehead. Tissue layers are offsets of the sheet along its
//! inward normal; the skull is a shell just below the muscle layer. Grid columns
//! are placed symmetrically about `u = 0`, and the left half is built by
//! mirroring the right, so the mesh is exactly symmetric.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

use super::io::{FaceMap, JawDoc, MuscleMapEntry, PinsDoc, SpringGroupDoc};
use super::Bone;

pub const COLS: usize = 17;
pub const ROWS: usize = 21;
pub const LAYER_DEPTHS: [f64; 4] = [0.0, 0.003, 0.006, 0.009];
pub const SKULL_DEPTH: f64 = 0.010;
pub const SKULL_THICKNESS: f64 = 0.005;

const HALF_WIDTH: f64 = 0.07;
const DEPTH_RADIUS: f64 = 0.09;
const SWEEP_DEG: f64 = 75.0;
const CHIN_Y: f64 = -0.06;
const HEIGHT: f64 = 0.2;
const NOSE_HEIGHT: f64 = 0.02;

pub fn u_of(i: usize) -> f64 {
    (2.0 * i as f64 - (COLS - 1) as f64) / (COLS - 1) as f64
}

pub fn v_of(j: usize) -> f64 {
    j as f64 / (ROWS - 1) as f64
}

pub fn col_of(u: f64) -> usize {
    (((u + 1.0) / 2.0) * (COLS - 1) as f64)
        .round()
        .clamp(0.0, (COLS - 1) as f64) as usize
}

pub fn row_of(v: f64) -> usize {
    (v * (ROWS - 1) as f64).round().clamp(0.0, (ROWS - 1) as f64) as usize
}

pub fn node_id(layer: usize, col: usize, row: usize) -> usize {
    layer * COLS * ROWS + row * COLS + col
}

fn nose(u: f64, v: f64) -> f64 {
    NOSE_HEIGHT * (-0.5 * (u / 0.1).powi(2) - 0.5 * ((v - 0.42) / 0.07).powi(2)).exp()
}

/// Point at depth `d` below the sheet, for `u ≥ 0`.
fn half_point(u: f64, v: f64, d: f64) -> Vector3<f64> {
    let sweep = SWEEP_DEG.to_radians();
    let phi = u * sweep;
    let (s, c) = phi.sin_cos();
    let base = Vector3::new(
        HALF_WIDTH * s,
        CHIN_Y + HEIGHT * v,
        DEPTH_RADIUS * c - 0.04 * (v - 0.45).powi(2),
    );
    let du = Vector3::new(HALF_WIDTH * c * sweep, 0.0, -DEPTH_RADIUS * s * sweep);
    let dv = Vector3::new(0.0, HEIGHT, -0.08 * (v - 0.45));
    let normal = du.cross(&dv).normalize();
    base - normal * d + Vector3::z() * (nose(u, v) * (1.0 - d / SKULL_DEPTH).max(0.0))
}

/// Point at depth `d` below the sheet.
pub fn sheet_point(u: f64, v: f64, d: f64) -> Vector3<f64> {
    let p = half_point(u.abs(), v, d);
    if u < 0.0 {
        Vector3::new(-p.x, p.y, p.z)
    } else {
        p
    }
}

/// Muscle-layer support for a grid location.
fn muscle_pin(col: usize, row: usize) -> Option<Bone> {
    let u = u_of(col).abs();
    let v = v_of(row);
    if v <= 0.175 && u <= 0.625 {
        Some(Bone::Mandible)
    } else if u <= 0.375 && v > 0.175 && v < 0.325 {
        None
    } else {
        Some(Bone::Cranium)
    }
}

/// Skull cells carried by the mandible (lower jaw and lower teeth).
fn mandible_cell(col: usize, row: usize) -> bool {
    row <= 3 && (3..=12).contains(&col)
}

/// The mouth opening: no tissue joins these rows across these columns.
fn crosses_mouth(a: (usize, usize), b: (usize, usize)) -> bool {
    let rows = (a.1.min(b.1), a.1.max(b.1));
    rows == (4, 5) && [a.0, b.0].iter().all(|&c| u_of(c).abs() <= 0.125 + 1e-12)
}

/// (stem, bone, origin (u, v), insertion (u, v), peak force N, width m),
/// given for the left side.
type MuscleRow = (&'static str, Bone, (f64, f64), (f64, f64), f64, f64);

const MUSCLES: [MuscleRow; 26] = [
    (
        "frontalis_inner",
        Bone::Cranium,
        (0.12, 0.98),
        (0.125, 0.70),
        0.20,
        0.015,
    ),
    (
        "frontalis_major",
        Bone::Cranium,
        (0.30, 0.98),
        (0.25, 0.70),
        0.20,
        0.015,
    ),
    ("frontalis_outer", Bone::Cranium, (0.50, 0.96), (0.5, 0.70), 0.20, 0.015),
    (
        "corrugator_supercilii",
        Bone::Cranium,
        (0.04, 0.60),
        (0.25, 0.70),
        0.15,
        0.012,
    ),
    ("procerus", Bone::Cranium, (0.02, 0.46), (0.125, 0.65), 0.15, 0.010),
    (
        "depressor_supercilii",
        Bone::Cranium,
        (0.10, 0.52),
        (0.125, 0.70),
        0.12,
        0.010,
    ),
    (
        "orbicularis_oculi_upper",
        Bone::Cranium,
        (0.38, 0.50),
        (0.375, 0.60),
        0.15,
        0.012,
    ),
    (
        "orbicularis_oculi_lower",
        Bone::Cranium,
        (0.38, 0.60),
        (0.375, 0.50),
        0.12,
        0.012,
    ),
    (
        "orbicularis_oculi_orbital",
        Bone::Cranium,
        (0.28, 0.56),
        (0.5, 0.45),
        0.15,
        0.015,
    ),
    (
        "levator_palpebrae",
        Bone::Cranium,
        (0.38, 0.78),
        (0.375, 0.60),
        0.12,
        0.010,
    ),
    (
        "levator_labii_alaeque_nasi",
        Bone::Cranium,
        (0.07, 0.58),
        (0.125, 0.30),
        0.15,
        0.010,
    ),
    (
        "levator_labii_superioris",
        Bone::Cranium,
        (0.22, 0.50),
        (0.0, 0.25),
        0.15,
        0.012,
    ),
    ("nasalis", Bone::Cranium, (0.18, 0.30), (0.125, 0.40), 0.12, 0.010),
    (
        "zygomatic_minor",
        Bone::Cranium,
        (0.50, 0.46),
        (0.125, 0.25),
        0.15,
        0.012,
    ),
    (
        "zygomatic_major",
        Bone::Cranium,
        (0.62, 0.46),
        (0.25, 0.25),
        0.20,
        0.012,
    ),
    (
        "levator_anguli_oris",
        Bone::Cranium,
        (0.30, 0.40),
        (0.25, 0.25),
        0.15,
        0.010,
    ),
    ("risorius", Bone::Cranium, (0.72, 0.26), (0.25, 0.25), 0.18, 0.010),
    ("buccinator", Bone::Cranium, (0.55, 0.20), (0.25, 0.25), 0.15, 0.012),
    (
        "depressor_anguli_oris",
        Bone::Mandible,
        (0.32, 0.04),
        (0.25, 0.25),
        0.18,
        0.010,
    ),
    (
        "depressor_labii_inferioris",
        Bone::Mandible,
        (0.15, 0.04),
        (0.0, 0.20),
        0.15,
        0.012,
    ),
    ("mentalis", Bone::Mandible, (0.06, 0.17), (0.0, 0.05), 0.15, 0.012),
    (
        "orbicularis_oris_upper",
        Bone::Cranium,
        (0.04, 0.27),
        (0.25, 0.25),
        0.15,
        0.008,
    ),
    (
        "orbicularis_oris_lower",
        Bone::Mandible,
        (0.04, 0.18),
        (0.25, 0.25),
        0.15,
        0.008,
    ),
    (
        "incisivus_superior",
        Bone::Cranium,
        (0.10, 0.32),
        (0.25, 0.30),
        0.10,
        0.008,
    ),
    (
        "incisivus_inferior",
        Bone::Mandible,
        (0.10, 0.12),
        (0.25, 0.20),
        0.10,
        0.008,
    ),
    ("platysma", Bone::Cranium, (0.62, -0.05), (0.25, 0.25), 0.15, 0.012),
];

/// (name, u, v) on the epidermis; `_L` names are mirrored to `_R`.
const LANDMARKS: [(&str, f64, f64); 15] = [
    ("brow_inner", 0.125, 0.65),
    ("brow_outer", 0.5, 0.65),
    ("upper_lid", 0.375, 0.60),
    ("lower_lid", 0.375, 0.50),
    ("inner_canthus", 0.25, 0.55),
    ("outer_canthus", 0.5, 0.55),
    ("nose_wing", 0.125, 0.35),
    ("cheek", 0.5, 0.40),
    ("lip_corner", 0.25, 0.25),
    ("nasion", 0.0, 0.55),
    ("nose_tip", 0.0, 0.40),
    ("upper_lip_center", 0.0, 0.25),
    ("lower_lip_center", 0.0, 0.20),
    ("chin", 0.0, 0.05),
    ("forehead", 0.0, 0.90),
];

pub struct GeneratedFace {
    pub obj: String,
    pub map: String,
}

fn side_u(u: f64, side: &str) -> f64 {
    if side == "L" {
        u
    } else {
        -u
    }
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

pub fn canonical_face() -> GeneratedFace {
    let per_layer = COLS * ROWS;
    let mut tissue = Vec::with_capacity(4 * per_layer);
    for depth in LAYER_DEPTHS {
        for row in 0..ROWS {
            for col in 0..COLS {
                tissue.push(sheet_point(u_of(col), v_of(row), depth));
            }
        }
    }
    let pinned = |id: usize| -> Option<Bone> {
        (id / per_layer == 3)
            .then(|| muscle_pin(id % COLS, (id % per_layer) / COLS))
            .flatten()
    };

    let mut groups: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    let mut add = |group: &'static str, a: (usize, usize, usize), b: (usize, usize, usize)| {
        if crosses_mouth((a.1, a.2), (b.1, b.2)) {
            return;
        }
        let (ia, ib) = (node_id(a.0, a.1, a.2), node_id(b.0, b.1, b.2));
        if pinned(ia).is_some() && pinned(ib).is_some() {
            return;
        }
        groups.entry(group).or_default().push((ia, ib));
    };
    for layer in 0..4 {
        for row in 0..ROWS {
            for col in 0..COLS {
                if col + 1 < COLS {
                    add("structural", (layer, col, row), (layer, col + 1, row));
                }
                if row + 1 < ROWS {
                    add("structural", (layer, col, row), (layer, col, row + 1));
                }
                if col + 1 < COLS && row + 1 < ROWS {
                    add("shear", (layer, col, row), (layer, col + 1, row + 1));
                    add("shear", (layer, col + 1, row), (layer, col, row + 1));
                }
                if layer < 3 {
                    add("interlayer", (layer, col, row), (layer + 1, col, row));
                    let neighbors = [
                        (col.wrapping_sub(1), row),
                        (col + 1, row),
                        (col, row.wrapping_sub(1)),
                        (col, row + 1),
                    ];
                    for (c, r) in neighbors {
                        if c < COLS && r < ROWS {
                            add("interlayer_diagonal", (layer, col, row), (layer + 1, c, r));
                        }
                    }
                }
            }
        }
    }

    let mut skull: Vec<Vector3<f64>> = Vec::new();
    let bone_of = |col: usize, row: usize| {
        if mandible_cell(col, row) {
            Bone::Mandible
        } else {
            Bone::Cranium
        }
    };
    // Vertex tables per bone for the front and back faces of the shell.
    let mut ids: BTreeMap<(Bone, bool, usize, usize), usize> = BTreeMap::new();
    let mut vertex = |bone: Bone, back: bool, c: usize, r: usize| -> usize {
        *ids.entry((bone, back, c, r)).or_insert_with(|| {
            let d = if back {
                SKULL_DEPTH + SKULL_THICKNESS
            } else {
                SKULL_DEPTH
            };
            skull.push(sheet_point(u_of(c), v_of(r), d));
            skull.len() - 1
        })
    };
    let mut tris: Vec<([usize; 3], Bone)> = Vec::new();
    let mut surface: Vec<[usize; 3]> = Vec::new();
    for row in 0..ROWS - 1 {
        for col in 0..COLS - 1 {
            let bone = bone_of(col, row);
            let corners = [(col, row), (col + 1, row), (col, row + 1), (col + 1, row + 1)];
            let front = corners.map(|(c, r)| vertex(bone, false, c, r));
            let back = corners.map(|(c, r)| vertex(bone, true, c, r));
            let sheet = [
                node_id(0, col, row),
                node_id(0, col + 1, row),
                node_id(0, col, row + 1),
                node_id(0, col + 1, row + 1),
            ];
            let split = |q: [usize; 4]| -> [[usize; 3]; 2] {
                let [p00, p10, p01, p11] = q;
                if 2 * col + 1 >= COLS - 1 {
                    [[p00, p10, p11], [p00, p11, p01]]
                } else {
                    [[p00, p10, p01], [p10, p11, p01]]
                }
            };
            for t in split(front) {
                tris.push((t, bone));
            }
            for t in split(back) {
                tris.push(([t[0], t[2], t[1]], bone));
            }
            // Side walls where the shell of this bone ends.
            let edges = [
                ((col, row), (col + 1, row), (col, row.wrapping_sub(1))),
                ((col + 1, row), (col + 1, row + 1), (col + 1, row)),
                ((col + 1, row + 1), (col, row + 1), (col, row + 1)),
                ((col, row + 1), (col, row), (col.wrapping_sub(1), row)),
            ];
            for (a, b, (nc, nr)) in edges {
                let open = nc >= COLS - 1 || nr >= ROWS - 1 || bone_of(nc, nr) != bone;
                if open {
                    let (fa, fb) = (vertex(bone, false, a.0, a.1), vertex(bone, false, b.0, b.1));
                    let (ba, bb) = (vertex(bone, true, a.0, a.1), vertex(bone, true, b.0, b.1));
                    // Split so that mirrored walls get mirrored diagonals.
                    let key = |p: (usize, usize)| (p.1, (2 * p.0).abs_diff(COLS - 1));
                    if key(a) < key(b) {
                        tris.push(([fa, bb, fb], bone));
                        tris.push(([fa, ba, bb], bone));
                    } else {
                        tris.push(([fa, ba, fb], bone));
                        tris.push(([fb, ba, bb], bone));
                    }
                }
            }
            surface.extend(split(sheet));
        }
    }

    let mut obj = String::new();
    let _ = writeln!(
        obj,
        "# canonical procedural face: {} tissue nodes in 4 layers",
        tissue.len()
    );
    obj.push_str("o tissue\n");
    for p in &tissue {
        let _ = writeln!(obj, "v {:.9} {:.9} {:.9}", p.x, p.y, p.z);
    }
    obj.push_str("g surface\n");
    for f in &surface {
        let _ = writeln!(obj, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    for (g, list) in &groups {
        let _ = writeln!(obj, "g {g}");
        for (a, b) in list {
            let _ = writeln!(obj, "l {} {}", a + 1, b + 1);
        }
    }
    obj.push_str("o skull\n");
    for p in &skull {
        let _ = writeln!(obj, "v {:.9} {:.9} {:.9}", p.x, p.y, p.z);
    }
    let base = tissue.len() + 1;
    for bone in [Bone::Cranium, Bone::Mandible] {
        let _ = writeln!(
            obj,
            "g {}",
            match bone {
                Bone::Cranium => "cranium",
                Bone::Mandible => "mandible",
            }
        );
        for (t, b) in &tris {
            if *b == bone {
                let _ = writeln!(obj, "f {} {} {}", t[0] + base, t[1] + base, t[2] + base);
            }
        }
    }

    let mut pins = PinsDoc {
        cranium: Vec::new(),
        mandible: Vec::new(),
    };
    for id in 3 * per_layer..4 * per_layer {
        match pinned(id) {
            Some(Bone::Cranium) => pins.cranium.push(id),
            Some(Bone::Mandible) => pins.mandible.push(id),
            None => {}
        }
    }

    let mut landmarks = BTreeMap::new();
    for (name, u, v) in LANDMARKS {
        if u == 0.0 {
            landmarks.insert(name.to_string(), node_id(0, col_of(u), row_of(v)));
        } else {
            for side in ["L", "R"] {
                landmarks.insert(format!("{name}_{side}"), node_id(0, col_of(side_u(u, side)), row_of(v)));
            }
        }
    }

    let mut muscles = Vec::new();
    for (stem, bone, (uo, vo), (ui, vi), peak, width) in MUSCLES {
        for side in ["L", "R"] {
            let o = sheet_point(side_u(uo, side), vo, SKULL_DEPTH);
            muscles.push(MuscleMapEntry {
                name: format!("{stem}_{side}"),
                bone,
                origin: [round9(o.x), round9(o.y), round9(o.z)],
                insertion_node: node_id(2, col_of(side_u(ui, side)), row_of(vi)),
                peak_force: peak,
                width,
            });
        }
    }

    let map = FaceMap {
        node_mass: 1e-4,
        node_damping: 0.03,
        layers: [per_layer; 4],
        pins,
        jaw: JawDoc {
            condyle: [0.0, 0.02, -0.02],
            max_rotation_deg: 25.0,
            slide_range_mm: 5.0,
            twist_range_deg: 5.0,
        },
        landmarks,
        spring_groups: vec![
            SpringGroupDoc {
                name: "interlayer".into(),
                stiffness: 30.0,
                damping: 0.0,
            },
            SpringGroupDoc {
                name: "interlayer_diagonal".into(),
                stiffness: 8.0,
                damping: 0.0,
            },
            SpringGroupDoc {
                name: "shear".into(),
                stiffness: 15.0,
                damping: 0.0,
            },
            SpringGroupDoc {
                name: "structural".into(),
                stiffness: 40.0,
                damping: 0.001,
            },
        ],
        muscles,
    };
    GeneratedFace {
        obj,
        map: crate::bundled::to_toml(&map),
    }
}
