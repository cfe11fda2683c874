//! Discrete deformable model of the facial soft tissue.
//!
//! Four layers of fascia nodes (epidermis, dermal-fatty, fascia, muscle)
//! are joined by uniaxial springs. Muscle-layer nodes are mostly pinned to
//! the skull or the mandible; the remaining nodes move under spring forces,
//! muscle forces and viscous drag. A spring `j` between nodes `i` and `k`
//! pulls node `i` with
//!
//! ```text
//! g = c_j (l_j − l_j^r) s_j        s_j = (x_k − x_i) / l_j
//! ```
//!
//! and a facial muscle pushes each node in its influence set toward its
//! bony attachment with magnitude `a · peak · Θ1(ε) · Θ2(ω)`, where `ε` is
//! the node's position along the fiber (0 at the attachment, 1 at the
//! insertion) and `ω` its distance from the fiber line, both measured in
//! the rest pose:
//!
//! ```text
//! Θ1(ε) = ½ (1 − cos πε)  on [0, 1], else 0
//! Θ2(ω) = max(0, 1 − ω/ω_max)
//! ```
//!
//! Within [`ORIGIN_CORE`] of the attachment the pull fades linearly to
//! zero. Free nodes that end a step inside the skull are projected back
//! onto it and lose their inward velocity.
//!
//! Coordinates are in the skull frame: y up, z forward (out of the face),
//! +x toward the subject's left.

pub mod generate;
mod io;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

pub use io::{write_obj, FaceMap, JawDoc, MuscleMapEntry, PinsDoc, SpringGroupDoc};

use crate::error::{Error, Result};

/// Number of facial muscles (26 left/right pairs).
pub const NUM_FACE_MUSCLES: usize = 52;

/// Landmarks the AU oracle and the validators rely on.
pub const REQUIRED_LANDMARKS: [&str; 24] = [
    "brow_inner_L",
    "brow_inner_R",
    "brow_outer_L",
    "brow_outer_R",
    "upper_lid_L",
    "upper_lid_R",
    "lower_lid_L",
    "lower_lid_R",
    "inner_canthus_L",
    "inner_canthus_R",
    "outer_canthus_L",
    "outer_canthus_R",
    "nasion",
    "nose_tip",
    "nose_wing_L",
    "nose_wing_R",
    "cheek_L",
    "cheek_R",
    "lip_corner_L",
    "lip_corner_R",
    "upper_lip_center",
    "lower_lip_center",
    "chin",
    "forehead",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Epidermis,
    DermalFatty,
    Fascia,
    Muscle,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Epidermis, Layer::DermalFatty, Layer::Fascia, Layer::Muscle];
}

/// Rigid support of a node or a muscle attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bone {
    Cranium,
    Mandible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FasciaNode {
    /// Rest position.
    pub position: Vector3<f64>,
    pub mass: f64,
    pub layer: Layer,
    pub pinned: Option<Bone>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinSpring {
    pub i: usize,
    pub j: usize,
    pub stiffness: f64,
    pub rest_length: f64,
    /// Axial damping, N·s/m.
    pub damping: f64,
}

impl SkinSpring {
    /// Elastic force on endpoint `i`; the force on `j` is its negative.
    #[inline]
    pub fn force_on_i(&self, xi: &Vector3<f64>, xj: &Vector3<f64>) -> Vector3<f64> {
        let d = xj - xi;
        let l = d.norm();
        if l == 0.0 {
            return Vector3::zeros();
        }
        d * (self.stiffness * (l - self.rest_length) / l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceMuscleInsertion {
    pub name: String,
    pub bone: Bone,
    /// Bony attachment in the rest pose.
    pub origin: Vector3<f64>,
    pub insertion_node: usize,
    pub peak_force: f64,
    /// Width cutoff `ω_max`, m.
    pub width: f64,
    pub nodes: Vec<usize>,
    /// Rest-pose fiber coordinate `ε` per influenced node.
    pub epsilon: Vec<f64>,
    /// Rest-pose distance from the fiber line `ω` per influenced node.
    pub omega: Vec<f64>,
    /// `Θ1(ε) · Θ2(ω)` per influenced node.
    pub weight: Vec<f64>,
}

pub fn theta_length(eps: f64) -> f64 {
    if (0.0..=1.0).contains(&eps) {
        0.5 * (1.0 - (std::f64::consts::PI * eps).cos())
    } else {
        0.0
    }
}

pub fn theta_width(omega: f64, omega_max: f64) -> f64 {
    (1.0 - omega / omega_max).max(0.0)
}

/// Normalized jaw controls, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JawState {
    pub rotation: f64,
    pub slide: f64,
    pub twist: f64,
}

impl JawState {
    pub const NEUTRAL: JawState = JawState {
        rotation: 0.0,
        slide: 0.5,
        twist: 0.5,
    };

    pub fn new(rotation: f64, slide: f64, twist: f64) -> Result<Self> {
        for (n, v) in [("rotation", rotation), ("slide", slide), ("twist", twist)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("jaw {n} {v} outside [0, 1]")));
            }
        }
        Ok(JawState { rotation, slide, twist })
    }
}

/// Mandible kinematics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JawRig {
    /// Point on the condyle (hinge) axis, which runs along x.
    pub condyle: Vector3<f64>,
    pub max_rotation: f64,
    /// Half range of protrusion, m.
    pub slide_range: f64,
    /// Half range of yaw, rad.
    pub twist_range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl JawRig {
    /// Opening pitch about the condyle axis, then yaw about the vertical
    /// through the condyle, then protrusion along z.
    pub fn transform(&self, jaw: &JawState) -> RigidTransform {
        let pitch = jaw.rotation * self.max_rotation;
        let yaw = (2.0 * jaw.twist - 1.0) * self.twist_range;
        let slide = (2.0 * jaw.slide - 1.0) * self.slide_range;
        let rotation =
            crate::multibody::spatial::axis_rotation(1, yaw) * crate::multibody::spatial::axis_rotation(0, pitch);
        let translation = self.condyle - rotation * self.condyle + Vector3::new(0.0, 0.0, slide);
        RigidTransform { rotation, translation }
    }
}

/// Skull surface as a triangle set with outward winding.
#[derive(Debug, Clone, PartialEq)]
pub struct SkullSurface {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub triangle_bone: Vec<Bone>,
}

/// Closest point on triangle `abc` to `p`.
fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Skull triangles placed for one jaw configuration.
#[derive(Debug, Clone)]
pub struct PlacedSkull {
    corners: Vec<[Vector3<f64>; 3]>,
    normals: Vec<Vector3<f64>>,
    /// Bounding sphere (centroid, radius) of every triangle.
    spheres: Vec<(Vector3<f64>, f64)>,
}

impl PlacedSkull {
    /// Signed distance from `p` to the skull, the closest surface point and
    /// the outward normal there. Only the nearest candidate triangles decide
    /// the sign: `p` is inside when it lies behind one of them and projects
    /// onto its interior. Where two bones meet, coincident walls face
    /// opposite ways, so an inside hit wins ties up to [`SEAM_TOLERANCE`].
    /// Exactly tied hits are combined symmetrically.
    fn query(&self, p: &Vector3<f64>, candidates: &[u32]) -> (f64, Vector3<f64>, Vector3<f64>) {
        let mut inside = Nearest::default();
        let mut outside = Nearest::default();
        for &t in candidates {
            let [a, b, c] = &self.corners[t as usize];
            let n = self.normals[t as usize];
            let side = (p - a).dot(&n);
            let foot = p - n * side;
            if side < 0.0 && in_triangle(&foot, a, b, c, &n) {
                inside.offer(-side, foot, n);
            } else {
                let cp = closest_point_on_triangle(p, a, b, c);
                outside.offer((p - cp).norm(), cp, n);
            }
        }
        if inside.count > 0 && inside.d <= outside.d + SEAM_TOLERANCE {
            let n = inside.normal();
            let cp = if inside.count > 1 {
                // Leave along the mean normal until in front of every tied
                // plane; this keeps mirrored ties exact and clears ridges.
                let cos = inside.tied[..inside.count.min(4)]
                    .iter()
                    .map(|m| m.dot(&n))
                    .fold(1.0f64, f64::min);
                p + n * (inside.d / cos.max(1e-3))
            } else {
                inside.cp
            };
            (-inside.d, cp, n)
        } else {
            (outside.d, outside.cp / outside.count.max(1) as f64, outside.normal())
        }
    }

    /// Triangles that can be nearest to any point within [`CANDIDATE_REFRESH`]
    /// of each node: all those within the node's skull distance plus twice
    /// that radius, nearest first.
    fn candidates(&self, positions: &[Vector3<f64>], nodes: &[usize]) -> Vec<Vec<u32>> {
        let exact = |p: &Vector3<f64>, t: usize| {
            let [a, b, c] = &self.corners[t];
            (p - closest_point_on_triangle(p, a, b, c)).norm()
        };
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        nodes
            .iter()
            .map(|&i| {
                let p = positions[i];
                // The NEAREST_PROBE closest centroids, kept sorted.
                let mut near = [(f64::INFINITY, u32::MAX); NEAREST_PROBE];
                for (t, (m, _)) in self.spheres.iter().enumerate() {
                    let e = ((m - p).norm(), t as u32);
                    if cmp(&e, &near[NEAREST_PROBE - 1]).is_lt() {
                        let at = near.partition_point(|x| cmp(x, &e).is_lt());
                        near.copy_within(at..NEAREST_PROBE - 1, at + 1);
                        near[at] = e;
                    }
                }
                let bound = near
                    .iter()
                    .filter(|&&(_, t)| t != u32::MAX)
                    .map(|&(_, t)| exact(&p, t as usize))
                    .fold(f64::INFINITY, f64::min)
                    + 2.0 * CANDIDATE_REFRESH;
                let mut out: Vec<(f64, u32)> = self
                    .spheres
                    .iter()
                    .enumerate()
                    .filter(|(_, (m, r))| (m - p).norm() - r <= bound)
                    .map(|(t, _)| (exact(&p, t), t as u32))
                    .filter(|e| e.0 <= bound)
                    .collect();
                out.sort_by(cmp);
                out.into_iter().map(|(_, t)| t).collect()
            })
            .collect()
    }
}

/// Per-node spring lists sorted by the partner's mirror-invariant key. On the
/// midline, partners that mirror each other are grouped so their forces
/// cancel exactly before being added.
fn mirror_ordered_incidence(rest: &[Vector3<f64>], springs: &[SkinSpring]) -> (Vec<usize>, Vec<Incident>) {
    let mut lists: Vec<Vec<(usize, u32, bool)>> = vec![Vec::new(); rest.len()];
    for (k, s) in springs.iter().enumerate() {
        lists[s.i].push((s.j, k as u32, false));
        lists[s.j].push((s.i, k as u32, true));
    }
    let mut start = Vec::with_capacity(rest.len() + 1);
    let mut out = Vec::new();
    for (i, list) in lists.iter().enumerate() {
        start.push(out.len());
        let xi = rest[i].x;
        let side = if xi > 0.0 {
            1.0
        } else if xi < 0.0 {
            -1.0
        } else {
            0.0
        };
        let key = |j: usize| {
            let p = rest[j];
            let dx = p.x - xi;
            if side == 0.0 {
                [p.y, p.z, dx.abs(), dx]
            } else {
                [p.y, p.z, side * dx, 0.0]
            }
        };
        let cmp4 = |a: &[f64; 4], b: &[f64; 4]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        let mut sorted: Vec<([f64; 4], u32, bool)> = list.iter().map(|&(j, k, neg)| (key(j), k, neg)).collect();
        sorted.sort_by(|a, b| cmp4(&a.0, &b.0).then(a.1.cmp(&b.1)));
        for (m, &(k, spring, negate)) in sorted.iter().enumerate() {
            let closes = match sorted.get(m + 1) {
                Some(next) if side == 0.0 => next.0[..3] != k[..3],
                _ => true,
            };
            out.push(Incident {
                spring,
                sign: if negate { -1.0 } else { 1.0 },
                closes,
            });
        }
    }
    start.push(out.len());
    (start, out)
}

/// Groups each `_L` muscle with its `_R` partner; unpaired muscles stand alone.
fn pair_muscles(muscles: &[FaceMuscleInsertion]) -> Vec<MuscleGroup> {
    let mut seen = vec![false; muscles.len()];
    let mut groups = Vec::new();
    for (k, m) in muscles.iter().enumerate() {
        if seen[k] {
            continue;
        }
        seen[k] = true;
        let mut members = vec![k];
        let partner = m
            .name
            .strip_suffix("_L")
            .map(|b| format!("{b}_R"))
            .or_else(|| m.name.strip_suffix("_R").map(|b| format!("{b}_L")));
        if let Some(p) = partner.and_then(|p| muscles.iter().position(|o| o.name == p)) {
            if !seen[p] {
                seen[p] = true;
                members.push(p);
            }
        }
        let mut nodes: Vec<usize> = members.iter().flat_map(|&k| muscles[k].nodes.iter().copied()).collect();
        nodes.sort_unstable();
        nodes.dedup();
        groups.push(MuscleGroup { members, nodes });
    }
    groups
}

/// Running nearest hit with exact ties accumulated.
#[derive(Debug, Clone, Copy)]
struct Nearest {
    d: f64,
    cp: Vector3<f64>,
    n: Vector3<f64>,
    count: usize,
    tied: [Vector3<f64>; 4],
}

impl Default for Nearest {
    fn default() -> Self {
        Nearest {
            d: f64::INFINITY,
            cp: Vector3::zeros(),
            n: Vector3::zeros(),
            count: 0,
            tied: [Vector3::zeros(); 4],
        }
    }
}

impl Nearest {
    fn offer(&mut self, d: f64, cp: Vector3<f64>, n: Vector3<f64>) {
        if d < self.d {
            *self = Nearest {
                d,
                cp,
                n,
                count: 1,
                tied: [n; 4],
            };
        } else if d == self.d {
            if self.count < 4 {
                self.tied[self.count] = n;
            }
            self.cp += cp;
            self.n += n;
            self.count += 1;
        }
    }

    fn normal(&self) -> Vector3<f64> {
        if self.count > 1 {
            self.n.normalize()
        } else {
            self.n
        }
    }
}

/// Corner order of each skull triangle that is invariant under the
/// left/right mirror, and the sign that keeps its normal outward.
fn canonical_triangles(skull: &SkullSurface) -> (Vec<[usize; 3]>, Vec<f64>) {
    let key = |i: usize| {
        let v = skull.vertices[i];
        (v.y, v.z, v.x.abs())
    };
    let normal = |t: &[usize; 3]| {
        let [a, b, c] = t.map(|i| skull.vertices[i]);
        (b - a).cross(&(c - a))
    };
    skull
        .triangles
        .iter()
        .map(|t| {
            let mut o = *t;
            o.sort_by(|&a, &b| {
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0)
                    .then(ka.1.total_cmp(&kb.1))
                    .then(ka.2.total_cmp(&kb.2))
                    .then(a.cmp(&b))
            });
            let sign = if normal(&o).dot(&normal(t)) < 0.0 { -1.0 } else { 1.0 };
            (o, sign)
        })
        .unzip()
}

fn place(skull: &SkullSurface, order: &[[usize; 3]], sign: &[f64], jaw_tf: &RigidTransform) -> PlacedSkull {
    let moved: Vec<Vector3<f64>> = skull.vertices.iter().map(|v| jaw_tf.apply(v)).collect();
    let mut corners = Vec::with_capacity(order.len());
    let mut normals = Vec::with_capacity(order.len());
    for ((t, bone), s) in order.iter().zip(&skull.triangle_bone).zip(sign) {
        let pick = |i: usize| match bone {
            Bone::Cranium => skull.vertices[i],
            Bone::Mandible => moved[i],
        };
        let c = [pick(t[0]), pick(t[1]), pick(t[2])];
        normals.push(((c[1] - c[0]).cross(&(c[2] - c[0])) * *s).normalize());
        corners.push(c);
    }
    let spheres = corners
        .iter()
        .map(|c| {
            let m = (c[0] + c[1] + c[2]) / 3.0;
            (m, c.iter().map(|v| (v - m).norm()).fold(0.0, f64::max))
        })
        .collect();
    PlacedSkull {
        corners,
        normals,
        spheres,
    }
}

/// Whether `p`, on the plane of `abc`, lies inside the triangle (either winding).
fn in_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, n: &Vector3<f64>) -> bool {
    let s = [
        (b - a).cross(&(p - a)).dot(n),
        (c - b).cross(&(p - b)).dot(n),
        (a - c).cross(&(p - c)).dot(n),
    ];
    s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0)
}

/// Options for [`FaceModel::settle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleOptions {
    pub dt: f64,
    pub max_time: f64,
    /// Stop once the mean node kinetic energy drops below this, J.
    pub tolerance: f64,
    /// Never stop before this much simulated time.
    pub min_time: f64,
}

impl Default for SettleOptions {
    fn default() -> Self {
        SettleOptions {
            dt: 2.5e-4,
            max_time: 5.0,
            tolerance: 1e-16,
            min_time: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub positions: Vec<Vector3<f64>>,
    pub time: f64,
    pub steps: usize,
    pub mean_kinetic_energy: f64,
}

/// Validated facial soft-tissue model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FaceModel {
    nodes: Vec<FasciaNode>,
    springs: Vec<SkinSpring>,
    muscles: Vec<FaceMuscleInsertion>,
    skull: SkullSurface,
    jaw: JawRig,
    landmarks: BTreeMap<String, usize>,
    node_damping: f64,
    free: Vec<usize>,
    /// Nearby skull triangles per free node, nearest first.
    candidates: Vec<Vec<u32>>,
    surface: Vec<[usize; 3]>,
    tri_order: Vec<[usize; 3]>,
    tri_sign: Vec<f64>,
    /// Springs meeting each node, ordered so that mirrored nodes sum their
    /// forces in mirrored order. Offsets into `incident` by node.
    incident_start: Vec<usize>,
    incident: Vec<Incident>,
    /// Left/right muscle pairs, summed together before reaching the nodes.
    muscle_groups: Vec<MuscleGroup>,
}

#[derive(Debug, Clone, Copy)]
struct Incident {
    spring: u32,
    /// −1 when the node is the `j` end, so the force on `i` is negated.
    sign: f64,
    /// Last member of a group whose partial sum is added to the node.
    closes: bool,
}

#[derive(Debug, Clone)]
struct MuscleGroup {
    members: Vec<usize>,
    nodes: Vec<usize>,
}

/// Slack by which an inside hit beats an equally near outside one.
const SEAM_TOLERANCE: f64 = 1e-12;

/// Triangles measured exactly to bound a node's skull distance.
const NEAREST_PROBE: usize = 4;

/// Distance a node may travel before its candidate triangles are refreshed.
const CANDIDATE_REFRESH: f64 = 2e-3;

/// Radius around a muscle attachment inside which the pull fades linearly.
pub const ORIGIN_CORE: f64 = 1e-3;

impl FaceModel {
    /// Parses and validates a face from its mesh file and muscle/landmark map.
    pub fn from_files(obj: &str, map: &str) -> Result<Self> {
        io::build_face(obj, map)
    }

    /// The shipped procedural face.
    pub fn bundled() -> Self {
        Self::from_files(crate::bundled::FACE_OBJ, crate::bundled::FACE_MAP_TOML).expect("bundled face is valid")
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        nodes: Vec<FasciaNode>,
        springs: Vec<SkinSpring>,
        muscles: Vec<FaceMuscleInsertion>,
        skull: SkullSurface,
        jaw: JawRig,
        landmarks: BTreeMap<String, usize>,
        node_damping: f64,
        surface: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let free: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].pinned.is_none()).collect();
        if free.is_empty() {
            return Err(Error::Config("face has no free nodes".into()));
        }
        check_connected(&nodes, &springs, &free)?;
        let rest: Vec<Vector3<f64>> = nodes.iter().map(|n| n.position).collect();
        let (tri_order, tri_sign) = canonical_triangles(&skull);
        let candidates = place(&skull, &tri_order, &tri_sign, &RigidTransform::identity()).candidates(&rest, &free);
        let (incident_start, incident) = mirror_ordered_incidence(&rest, &springs);
        let muscle_groups = pair_muscles(&muscles);
        Ok(FaceModel {
            nodes,
            springs,
            muscles,
            skull,
            jaw,
            landmarks,
            node_damping,
            free,
            candidates,
            surface,
            tri_order,
            tri_sign,
            incident_start,
            incident,
            muscle_groups,
        })
    }

    pub fn nodes(&self) -> &[FasciaNode] {
        &self.nodes
    }

    pub fn springs(&self) -> &[SkinSpring] {
        &self.springs
    }

    pub fn muscles(&self) -> &[FaceMuscleInsertion] {
        &self.muscles
    }

    pub fn muscle_names(&self) -> Vec<&str> {
        self.muscles.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn muscle_index(&self, name: &str) -> Option<usize> {
        self.muscles.iter().position(|m| m.name == name)
    }

    pub fn skull(&self) -> &SkullSurface {
        &self.skull
    }

    pub fn jaw_rig(&self) -> &JawRig {
        &self.jaw
    }

    pub fn landmarks(&self) -> &BTreeMap<String, usize> {
        &self.landmarks
    }

    pub fn landmark(&self, name: &str) -> Result<usize> {
        self.landmarks
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing landmark {name:?}")))
    }

    /// Epidermis triangles, for export.
    pub fn surface(&self) -> &[[usize; 3]] {
        &self.surface
    }

    pub fn rest_positions(&self) -> Vec<Vector3<f64>> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn apply_jaw(&self, jaw: &JawState) -> RigidTransform {
        self.jaw.transform(jaw)
    }

    /// Skull triangles with the mandible moved by `jaw_tf`.
    pub fn place_skull(&self, jaw_tf: &RigidTransform) -> PlacedSkull {
        place(&self.skull, &self.tri_order, &self.tri_sign, jaw_tf)
    }

    /// Signed distance of every free node to the skull (positive outside),
    /// in the order of [`Self::free_nodes`].
    pub fn skull_clearance(&self, positions: &[Vector3<f64>], jaw: &JawState) -> Vec<f64> {
        let placed = self.place_skull(&self.apply_jaw(jaw));
        let candidates = placed.candidates(positions, &self.free);
        self.free
            .iter()
            .zip(&candidates)
            .map(|(&i, c)| placed.query(&positions[i], c).0)
            .collect()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Elastic spring forces; coincident endpoints contribute nothing.
    pub fn spring_forces(&self, positions: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.nodes.len()];
        for s in &self.springs {
            let g = s.force_on_i(&positions[s.i], &positions[s.j]);
            out[s.i] += g;
            out[s.j] -= g;
        }
        out
    }

    /// Muscle force field for the given activations and jaw placement.
    pub fn muscle_node_forces(
        &self,
        positions: &[Vector3<f64>],
        activations: &[f64],
        jaw_tf: &RigidTransform,
    ) -> Result<Vec<Vector3<f64>>> {
        self.check_activations(activations)?;
        let mut out = vec![Vector3::zeros(); self.nodes.len()];
        let mut scratch = out.clone();
        self.add_muscle_forces(positions, activations, jaw_tf, &mut out, &mut scratch);
        Ok(out)
    }

    fn check_activations(&self, activations: &[f64]) -> Result<()> {
        if activations.len() != self.muscles.len() {
            return Err(Error::Dimension {
                expected: self.muscles.len(),
                got: activations.len(),
            });
        }
        if let Some(a) = activations.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Data(format!("muscle activation {a} outside [0, 1]")));
        }
        Ok(())
    }

    /// Adds the muscle pull to `out`. `tmp` must be all zeros on entry and
    /// is left that way.
    fn add_muscle_forces(
        &self,
        positions: &[Vector3<f64>],
        activations: &[f64],
        jaw_tf: &RigidTransform,
        out: &mut [Vector3<f64>],
        tmp: &mut [Vector3<f64>],
    ) {
        for g in &self.muscle_groups {
            if g.members.iter().all(|&k| activations[k] == 0.0) {
                continue;
            }
            for &k in &g.members {
                let (m, a) = (&self.muscles[k], activations[k]);
                if a == 0.0 {
                    continue;
                }
                let origin = match m.bone {
                    Bone::Cranium => m.origin,
                    Bone::Mandible => jaw_tf.apply(&m.origin),
                };
                let scale = a * m.peak_force;
                for (&n, &w) in m.nodes.iter().zip(&m.weight) {
                    let d = origin - positions[n];
                    tmp[n] += d * (scale * w / d.norm().max(ORIGIN_CORE));
                }
            }
            for &n in &g.nodes {
                out[n] += tmp[n];
                tmp[n] = Vector3::zeros();
            }
        }
    }

    fn pinned_positions(&self, positions: &mut [Vector3<f64>], jaw_tf: &RigidTransform) {
        for (p, n) in positions.iter_mut().zip(&self.nodes) {
            match n.pinned {
                Some(Bone::Cranium) => *p = n.position,
                Some(Bone::Mandible) => *p = jaw_tf.apply(&n.position),
                None => {}
            }
        }
    }

    /// Integrates from the rest pose until the tissue comes to rest. Free
    /// nodes lying over the mandible start out carried by the jaw.
    pub fn settle(&self, activations: &[f64], jaw: &JawState, opts: &SettleOptions) -> Result<Equilibrium> {
        self.settle_from(&self.warm_start(jaw), activations, jaw, opts)
    }

    /// Rest pose with the free nodes lying over the mandible carried by the
    /// jaw.
    pub fn warm_start(&self, jaw: &JawState) -> Vec<Vector3<f64>> {
        let jaw_tf = self.apply_jaw(jaw);
        let mut start = self.rest_positions();
        for (&i, c) in self.free.iter().zip(&self.candidates) {
            if self.skull.triangle_bone[c[0] as usize] == Bone::Mandible {
                start[i] = jaw_tf.apply(&start[i]);
            }
        }
        start
    }

    /// Integrates from `start` (with zero velocity) until the tissue comes
    /// to rest. Pinned nodes are placed on their bones first.
    pub fn settle_from(
        &self,
        start: &[Vector3<f64>],
        activations: &[f64],
        jaw: &JawState,
        opts: &SettleOptions,
    ) -> Result<Equilibrium> {
        if !(opts.dt > 0.0) || !(opts.max_time > 0.0) {
            return Err(Error::Config("settle needs a positive time step and budget".into()));
        }
        let mut sim = FaceSimulation::new(self, start, activations, jaw, opts.dt)?;
        let max_steps = (opts.max_time / opts.dt).ceil() as usize;
        let min_steps = (opts.min_time / opts.dt).ceil() as usize;
        let mut mean_ke = 0.0;
        for step in 1..=max_steps {
            mean_ke = sim.step()?;
            if step >= min_steps && mean_ke < opts.tolerance {
                return Ok(Equilibrium {
                    positions: sim.x,
                    time: step as f64 * opts.dt,
                    steps: step,
                    mean_kinetic_energy: mean_ke,
                });
            }
        }
        Err(Error::Convergence {
            what: format!("face did not settle within {} s", opts.max_time),
            residual: mean_ke,
        })
    }
}

/// Explicit time stepping of the face tissue under fixed activations and
/// jaw placement. [`FaceModel::settle_from`] runs one to rest.
#[derive(Debug, Clone)]
pub struct FaceSimulation<'a> {
    face: &'a FaceModel,
    activations: Vec<f64>,
    jaw_tf: RigidTransform,
    placed: PlacedSkull,
    dt: f64,
    x: Vec<Vector3<f64>>,
    v: Vec<Vector3<f64>>,
    f: Vec<Vector3<f64>>,
    g: Vec<Vector3<f64>>,
    scratch: Vec<Vector3<f64>>,
    inv_mass: Vec<f64>,
    candidates: Vec<Vec<u32>>,
    anchors: Vec<Vector3<f64>>,
    /// Distance each node may still travel before it could reach the skull.
    clearance: Vec<f64>,
}

impl<'a> FaceSimulation<'a> {
    /// Starts at `start` with zero velocity. Pinned nodes are placed on
    /// their bones.
    pub fn new(
        face: &'a FaceModel,
        start: &[Vector3<f64>],
        activations: &[f64],
        jaw: &JawState,
        dt: f64,
    ) -> Result<Self> {
        face.check_activations(activations)?;
        if start.len() != face.nodes.len() {
            return Err(Error::Dimension {
                expected: face.nodes.len(),
                got: start.len(),
            });
        }
        if !(dt > 0.0) {
            return Err(Error::Config("face time step must be positive".into()));
        }
        let jaw_tf = face.apply_jaw(jaw);
        let placed = face.place_skull(&jaw_tf);
        let n = face.nodes.len();
        let mut x = start.to_vec();
        face.pinned_positions(&mut x, &jaw_tf);
        let candidates = placed.candidates(&x, &face.free);
        let anchors = face.free.iter().map(|&i| x[i]).collect();
        Ok(FaceSimulation {
            face,
            activations: activations.to_vec(),
            jaw_tf,
            placed,
            dt,
            x,
            v: vec![Vector3::zeros(); n],
            f: vec![Vector3::zeros(); n],
            g: vec![Vector3::zeros(); face.springs.len()],
            scratch: vec![Vector3::zeros(); n],
            inv_mass: face.nodes.iter().map(|nd| 1.0 / nd.mass).collect(),
            candidates,
            anchors,
            clearance: vec![0.0; face.free.len()],
        })
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.x
    }

    /// Advances one step and returns the mean node kinetic energy, J.
    pub fn step(&mut self) -> Result<f64> {
        let face = self.face;
        let (x, v, f, g) = (&mut self.x, &mut self.v, &mut self.f, &mut self.g);
        for (gs, s) in g.iter_mut().zip(&face.springs) {
            let (i, j) = (s.i, s.j);
            let d = x[j] - x[i];
            let l = d.norm();
            *gs = if l == 0.0 {
                Vector3::zeros()
            } else {
                let dir = d * l.recip();
                dir * (s.stiffness * (l - s.rest_length) + s.damping * dir.dot(&(v[j] - v[i])))
            };
        }
        for &i in &face.free {
            let mut acc = Vector3::zeros();
            let mut part = Vector3::zeros();
            for e in &face.incident[face.incident_start[i]..face.incident_start[i + 1]] {
                part += g[e.spring as usize] * e.sign;
                if e.closes {
                    acc += part;
                    part = Vector3::zeros();
                }
            }
            f[i] = acc;
        }
        face.add_muscle_forces(x, &self.activations, &self.jaw_tf, f, &mut self.scratch);
        let dt = self.dt;
        let mut ke = 0.0;
        for (k, &i) in face.free.iter().enumerate() {
            let acc = (f[i] - v[i] * face.node_damping) * self.inv_mass[i];
            v[i] += acc * dt;
            let dx = v[i] * dt;
            x[i] += dx;
            self.clearance[k] -= dx.norm();
            if (x[i] - self.anchors[k]).norm_squared() > CANDIDATE_REFRESH * CANDIDATE_REFRESH {
                self.candidates[k] = self.placed.candidates(x, &[i]).pop().unwrap_or_default();
                self.anchors[k] = x[i];
                self.clearance[k] = 0.0;
            }
            if self.clearance[k] <= 0.0 {
                let (sd, cp, normal) = self.placed.query(&x[i], &self.candidates[k]);
                self.clearance[k] = sd;
                if sd < 0.0 {
                    self.clearance[k] = 0.0;
                    x[i] = cp;
                    let vn = v[i].dot(&normal);
                    if vn < 0.0 {
                        v[i] -= normal * vn;
                    }
                }
            }
            ke += 0.5 * face.nodes[i].mass * v[i].norm_squared();
        }
        let mean_ke = ke / face.nodes.len() as f64;
        if !mean_ke.is_finite() {
            return Err(Error::Convergence {
                what: "face settle diverged".into(),
                residual: mean_ke,
            });
        }
        Ok(mean_ke)
    }
}

fn check_connected(nodes: &[FasciaNode], springs: &[SkinSpring], free: &[usize]) -> Result<()> {
    let mut adj = vec![Vec::new(); nodes.len()];
    for s in springs {
        if nodes[s.i].pinned.is_none() && nodes[s.j].pinned.is_none() {
            adj[s.i].push(s.j);
            adj[s.j].push(s.i);
        }
    }
    let mut seen = vec![false; nodes.len()];
    let mut stack = vec![free[0]];
    seen[free[0]] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    if count != free.len() {
        return Err(Error::Config(format!(
            "spring network over free nodes is disconnected ({count} of {} reachable)",
            free.len()
        )));
    }
    Ok(())
}
