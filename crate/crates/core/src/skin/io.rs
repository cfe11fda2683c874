//! Face mesh (Wavefront OBJ) and sidecar map reading and writing.
//!
//! The mesh file holds two objects:
//!
//! * `o tissue`: every fascia node as a `v` line, layer by layer
//!   (epidermis first). Springs are `l` elements grouped by spring group
//!   (`g structural`, ...). Epidermis triangles sit under `g surface`.
//! * `o skull`: skull vertices and `f` triangles under `g cranium` or
//!   `g mandible`, wound so normals point out of the skull.
//!
//! The sidecar TOML map carries everything else: node mass and damping,
//! layer sizes, pinned node lists, spring group constants, the jaw rig,
//! landmarks and muscle insertions. Node ids in the map are 0-based
//! positions in the tissue vertex list (OBJ indices minus one).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    theta_length, theta_width, Bone, FaceModel, FaceMuscleInsertion, FasciaNode, JawRig, Layer, SkinSpring,
    SkullSurface, NUM_FACE_MUSCLES, REQUIRED_LANDMARKS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceMap {
    /// Mass of every fascia node, kg.
    pub node_mass: f64,
    /// Viscous drag on every node, N·s/m.
    pub node_damping: f64,
    /// Node counts per layer, in vertex order.
    pub layers: [usize; 4],
    pub pins: PinsDoc,
    pub jaw: JawDoc,
    pub landmarks: BTreeMap<String, usize>,
    #[serde(rename = "spring_group")]
    pub spring_groups: Vec<SpringGroupDoc>,
    #[serde(rename = "muscle")]
    pub muscles: Vec<MuscleMapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinsDoc {
    pub cranium: Vec<usize>,
    pub mandible: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JawDoc {
    pub condyle: [f64; 3],
    pub max_rotation_deg: f64,
    pub slide_range_mm: f64,
    pub twist_range_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringGroupDoc {
    pub name: String,
    pub stiffness: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleMapEntry {
    pub name: String,
    pub bone: Bone,
    /// Bony attachment, skull frame, m.
    pub origin: [f64; 3],
    pub insertion_node: usize,
    pub peak_force: f64,
    pub width: f64,
}

#[derive(Default)]
struct ObjData {
    tissue: Vec<Vector3<f64>>,
    skull: Vec<Vector3<f64>>,
    springs: Vec<(String, usize, usize)>,
    surface: Vec<[usize; 3]>,
    skull_tris: Vec<([usize; 3], Bone)>,
}

fn parse_index(tok: &str, line: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    match head.parse::<usize>() {
        Ok(i) if i >= 1 => Ok(i - 1),
        _ => Err(Error::Data(format!("mesh line {line}: bad vertex index {tok:?}"))),
    }
}

fn parse_obj(text: &str) -> Result<ObjData> {
    let mut d = ObjData::default();
    let mut object = String::new();
    let mut group = String::new();
    let mut faces: Vec<(String, String, Vec<usize>, usize)> = Vec::new();
    let mut lines: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let kind = toks.next().unwrap_or("");
        let rest: Vec<&str> = toks.collect();
        match kind {
            "o" => {
                object = rest.join(" ");
                group.clear();
            }
            "g" => group = rest.join(" "),
            "v" => {
                if rest.len() < 3 {
                    return Err(Error::Data(format!("mesh line {line}: vertex needs three coordinates")));
                }
                let mut c = [0.0; 3];
                for (k, t) in rest[..3].iter().enumerate() {
                    c[k] = t
                        .parse()
                        .map_err(|_| Error::Data(format!("mesh line {line}: bad coordinate {t:?}")))?;
                }
                let v = Vector3::new(c[0], c[1], c[2]);
                match object.as_str() {
                    "tissue" => d.tissue.push(v),
                    "skull" => d.skull.push(v),
                    o => return Err(Error::Data(format!("mesh line {line}: vertex in unknown object {o:?}"))),
                }
            }
            "l" => {
                let idx = rest.iter().map(|t| parse_index(t, line)).collect::<Result<Vec<_>>>()?;
                if idx.len() < 2 {
                    return Err(Error::Data(format!(
                        "mesh line {line}: line element needs two vertices"
                    )));
                }
                lines.push((group.clone(), idx, line));
            }
            "f" => {
                let idx = rest.iter().map(|t| parse_index(t, line)).collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(Error::Data(format!("mesh line {line}: only triangles are supported")));
                }
                faces.push((object.clone(), group.clone(), idx, line));
            }
            "s" | "mtllib" | "usemtl" | "vn" | "vt" => {}
            other => return Err(Error::Data(format!("mesh line {line}: unsupported element {other:?}"))),
        }
    }
    let nt = d.tissue.len();
    let ns = d.skull.len();
    for (g, idx, line) in lines {
        for w in idx.windows(2) {
            if w[0] >= nt || w[1] >= nt {
                return Err(Error::Data(format!("mesh line {line}: dangling spring endpoint")));
            }
            d.springs.push((g.clone(), w[0], w[1]));
        }
    }
    for (obj, g, idx, line) in faces {
        match obj.as_str() {
            "tissue" => {
                if idx.iter().any(|&i| i >= nt) {
                    return Err(Error::Data(format!("mesh line {line}: face refers outside the tissue")));
                }
                d.surface.push([idx[0], idx[1], idx[2]]);
            }
            "skull" => {
                let bone = match g.as_str() {
                    "cranium" => Bone::Cranium,
                    "mandible" => Bone::Mandible,
                    _ => {
                        return Err(Error::Data(format!(
                            "mesh line {line}: skull face outside cranium/mandible"
                        )))
                    }
                };
                if idx.iter().any(|&i| i < nt || i >= nt + ns) {
                    return Err(Error::Data(format!(
                        "mesh line {line}: skull face refers outside the skull"
                    )));
                }
                d.skull_tris.push(([idx[0] - nt, idx[1] - nt, idx[2] - nt], bone));
            }
            o => return Err(Error::Data(format!("mesh line {line}: face in unknown object {o:?}"))),
        }
    }
    Ok(d)
}

pub(super) fn build_face(obj: &str, map: &str) -> Result<FaceModel> {
    let mesh = parse_obj(obj)?;
    let map: FaceMap = toml::from_str(map).map_err(|e| Error::Config(format!("face map: {e}")))?;
    let n = mesh.tissue.len();
    if map.layers.iter().sum::<usize>() != n {
        return Err(Error::Config(format!(
            "face map declares {} nodes but the mesh has {n}",
            map.layers.iter().sum::<usize>()
        )));
    }
    if !(map.node_mass > 0.0) || !(map.node_damping >= 0.0) {
        return Err(Error::Config(
            "node mass must be positive and damping non-negative".into(),
        ));
    }
    let mut layer_of = Vec::with_capacity(n);
    for (layer, &count) in Layer::ALL.iter().zip(&map.layers) {
        layer_of.extend(std::iter::repeat(*layer).take(count));
    }
    let mut pinned = vec![None; n];
    for (bone, list) in [(Bone::Cranium, &map.pins.cranium), (Bone::Mandible, &map.pins.mandible)] {
        for &i in list {
            if i >= n {
                return Err(Error::Config(format!("pinned node {i} does not exist")));
            }
            if pinned[i].is_some() {
                return Err(Error::Config(format!("node {i} pinned twice")));
            }
            pinned[i] = Some(bone);
        }
    }
    let nodes: Vec<FasciaNode> = (0..n)
        .map(|i| FasciaNode {
            position: mesh.tissue[i],
            mass: map.node_mass,
            layer: layer_of[i],
            pinned: pinned[i],
        })
        .collect();

    let groups: HashMap<&str, &SpringGroupDoc> = map.spring_groups.iter().map(|g| (g.name.as_str(), g)).collect();
    let mut springs = Vec::with_capacity(mesh.springs.len());
    for (g, i, j) in &mesh.springs {
        let group = groups
            .get(g.as_str())
            .ok_or_else(|| Error::Config(format!("spring group {g:?} has no constants in the face map")))?;
        if !(group.stiffness > 0.0) || !(group.damping >= 0.0) {
            return Err(Error::Config(format!("spring group {g:?}: stiffness must be positive")));
        }
        if i == j {
            return Err(Error::Config(format!("spring joins node {i} to itself")));
        }
        let rest_length = (mesh.tissue[*j] - mesh.tissue[*i]).norm();
        if !(rest_length > 0.0) {
            return Err(Error::Config(format!("spring {i}-{j} has zero rest length")));
        }
        springs.push(SkinSpring {
            i: *i,
            j: *j,
            stiffness: group.stiffness,
            rest_length,
            damping: group.damping,
        });
    }

    for name in REQUIRED_LANDMARKS {
        match map.landmarks.get(name) {
            None => return Err(Error::Config(format!("missing landmark {name:?}"))),
            Some(&i) if i >= n => return Err(Error::Config(format!("landmark {name:?} names absent node {i}"))),
            _ => {}
        }
    }

    let muscles = build_muscles(&map.muscles, &nodes)?;

    let jaw = JawRig {
        condyle: Vector3::from(map.jaw.condyle),
        max_rotation: map.jaw.max_rotation_deg.to_radians(),
        slide_range: map.jaw.slide_range_mm * 1e-3,
        twist_range: map.jaw.twist_range_deg.to_radians(),
    };
    let (triangles, triangle_bone) = mesh.skull_tris.into_iter().unzip();
    let skull = SkullSurface {
        vertices: mesh.skull,
        triangles,
        triangle_bone,
    };
    if skull.triangles.is_empty() {
        return Err(Error::Config("mesh has no skull triangles".into()));
    }
    FaceModel::from_parts(
        nodes,
        springs,
        muscles,
        skull,
        jaw,
        map.landmarks,
        map.node_damping,
        mesh.surface,
    )
}

fn build_muscles(entries: &[MuscleMapEntry], nodes: &[FasciaNode]) -> Result<Vec<FaceMuscleInsertion>> {
    if entries.len() != NUM_FACE_MUSCLES {
        return Err(Error::Config(format!(
            "face map lists {} muscles, expected {NUM_FACE_MUSCLES}",
            entries.len()
        )));
    }
    let names: HashSet<&str> = entries.iter().map(|m| m.name.as_str()).collect();
    if names.len() != entries.len() {
        return Err(Error::Config("duplicate facial muscle name".into()));
    }
    entries
        .iter()
        .map(|m| {
            let partner = match (m.name.strip_suffix("_L"), m.name.strip_suffix("_R")) {
                (Some(stem), _) => format!("{stem}_R"),
                (_, Some(stem)) => format!("{stem}_L"),
                _ => {
                    return Err(Error::Config(format!(
                        "facial muscle {:?} lacks an _L/_R suffix",
                        m.name
                    )))
                }
            };
            if !names.contains(partner.as_str()) {
                return Err(Error::Config(format!(
                    "facial muscle {:?} has no partner {partner:?}",
                    m.name
                )));
            }
            if m.insertion_node >= nodes.len() {
                return Err(Error::Config(format!(
                    "muscle {:?} names absent node {}",
                    m.name, m.insertion_node
                )));
            }
            if !(m.peak_force > 0.0) || !(m.width > 0.0) {
                return Err(Error::Config(format!(
                    "muscle {:?}: peak force and width must be positive",
                    m.name
                )));
            }
            let origin = Vector3::from(m.origin);
            let fiber = nodes[m.insertion_node].position - origin;
            let len2 = fiber.norm_squared();
            if !(len2 > 0.0) {
                return Err(Error::Config(format!("muscle {:?} has zero length", m.name)));
            }
            let mut out = FaceMuscleInsertion {
                name: m.name.clone(),
                bone: m.bone,
                origin,
                insertion_node: m.insertion_node,
                peak_force: m.peak_force,
                width: m.width,
                nodes: Vec::new(),
                epsilon: Vec::new(),
                omega: Vec::new(),
                weight: Vec::new(),
            };
            for (i, nd) in nodes.iter().enumerate() {
                if nd.pinned.is_some() || !matches!(nd.layer, Layer::Fascia | Layer::Muscle) {
                    continue;
                }
                let r = nd.position - origin;
                let eps = r.dot(&fiber) / len2;
                let omega = (r - fiber * eps).norm();
                let w = theta_length(eps) * theta_width(omega, m.width);
                if w > 0.0 {
                    out.nodes.push(i);
                    out.epsilon.push(eps);
                    out.omega.push(omega);
                    out.weight.push(w);
                }
            }
            if out.nodes.is_empty() {
                return Err(Error::Config(format!("muscle {:?} influences no free node", m.name)));
            }
            Ok(out)
        })
        .collect()
}

/// Appends one OBJ object with the given vertices and triangles.
pub fn write_obj(out: &mut String, name: &str, positions: &[Vector3<f64>], faces: &[[usize; 3]]) {
    let _ = writeln!(out, "o {name}");
    for p in positions {
        let _ = writeln!(out, "v {:.9} {:.9} {:.9}", p.x, p.y, p.z);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
}
