//! Hill-type muscle actuators.
//!
//! Muscle tension is the sum of a passive exponential spring-damper and an
//! activation-scaled contractile element:
//!
//! ```text
//! f_P = max(0, k_s (exp(k_c e) − 1) + k_d ė)
//! f_C = a · F_l(l) · F_v(l̇)
//! F_l = max(0, k_max (l − l_m))
//! F_v = max(0, 1 + min(l̇, 0) / v_m)
//! ```
//!
//! with strain `e = (l − l_0)/l_0` and strain rate `ė = l̇/l_0`. Paths are
//! straight polylines through via points; there is no wrapping.

use std::collections::HashMap;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibody::{LinkFrame, SpineModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillParams {
    /// Passive stiffness scale, N.
    pub k_s: f64,
    /// Passive exponential shape, dimensionless.
    pub k_c: f64,
    /// Passive damping, N·s.
    pub k_d: f64,
    /// Maximum contractile stiffness, N/m.
    pub k_max: f64,
    /// Force-length threshold length, m. Named "maximum muscle length" in
    /// the classic formulation, but it acts as the length below which the
    /// contractile element produces no force.
    pub l_m: f64,
    /// Maximum contraction velocity, m/s.
    pub v_m: f64,
    /// Resting length, m.
    pub l_0: f64,
}

impl HillParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_s", self.k_s),
            ("k_c", self.k_c),
            ("k_d", self.k_d),
            ("k_max", self.k_max),
            ("v_m", self.v_m),
            ("l_0", self.l_0),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "Hill parameter {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.l_m >= 0.0) || !self.l_m.is_finite() {
            return Err(Error::Config(format!(
                "Hill parameter l_m must be non-negative, got {}",
                self.l_m
            )));
        }
        Ok(())
    }
}

/// One point of a muscle path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attachment {
    /// Fixed point in a bone's frame.
    Link { link: usize, point: Vector3<f64> },
    /// A fascia node; node coordinates are expressed in the skull frame.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MusclePath {
    via_points: Vec<Attachment>,
}

/// Everything needed to place muscle attachments in the world.
#[derive(Debug, Clone, Copy)]
pub struct KinematicPose<'a> {
    pub links: &'a [LinkFrame],
    /// Fascia node positions in the skull (last link) frame.
    pub nodes: &'a [Vector3<f64>],
    pub node_velocities: &'a [Vector3<f64>],
}

impl<'a> KinematicPose<'a> {
    pub fn links_only(links: &'a [LinkFrame]) -> Self {
        KinematicPose {
            links,
            nodes: &[],
            node_velocities: &[],
        }
    }
}

impl MusclePath {
    pub fn new(via_points: Vec<Attachment>) -> Result<Self> {
        if via_points.len() < 2 {
            return Err(Error::Config(format!(
                "muscle path needs at least two via points, got {}",
                via_points.len()
            )));
        }
        Ok(MusclePath { via_points })
    }

    pub fn via_points(&self) -> &[Attachment] {
        &self.via_points
    }

    /// Lowest and highest link the path is attached to, when it has no
    /// node attachments. Node attachments ride on the skull.
    pub fn link_span(&self) -> Option<(usize, usize)> {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for a in &self.via_points {
            let l = match a {
                Attachment::Link { link, .. } => *link,
                Attachment::Node(_) => return None,
            };
            lo = lo.min(l);
            hi = hi.max(l);
        }
        Some((lo, hi))
    }

    fn resolve(&self, a: &Attachment, pose: &KinematicPose) -> Result<(Vector3<f64>, Vector3<f64>)> {
        match *a {
            Attachment::Link { link, point } => {
                let f = pose
                    .links
                    .get(link)
                    .ok_or_else(|| Error::Data(format!("muscle attached to unknown link {link}")))?;
                Ok((f.point_position(&point), f.point_velocity(&point)))
            }
            Attachment::Node(n) => {
                let skull = pose
                    .links
                    .last()
                    .ok_or_else(|| Error::Data("node attachment without a skull frame".into()))?;
                let x = pose
                    .nodes
                    .get(n)
                    .ok_or_else(|| Error::Data(format!("muscle attached to unknown node {n}")))?;
                let v = pose.node_velocities.get(n).copied().unwrap_or_else(Vector3::zeros);
                Ok((skull.point_position(x), skull.point_velocity(x) + skull.rotation * v))
            }
        }
    }

    /// Path length on link attachments only; node attachments are an error.
    pub(crate) fn length_on_links(&self, frames: &[LinkFrame]) -> Result<f64> {
        let at = |a: &Attachment| match *a {
            Attachment::Link { link, point } => frames
                .get(link)
                .map(|f| f.point_position(&point))
                .ok_or_else(|| Error::Data(format!("muscle attached to unknown link {link}"))),
            Attachment::Node(_) => Err(Error::Data("node attachment needs a full kinematic pose".into())),
        };
        let mut l = 0.0;
        let mut xa = at(&self.via_points[0])?;
        for a in &self.via_points[1..] {
            let xb = at(a)?;
            l += (xb - xa).norm();
            xa = xb;
        }
        if !(l > 0.0) {
            return Err(Error::Data("muscle path has zero length".into()));
        }
        Ok(l)
    }
}

/// Path length and lengthening rate in the given pose.
pub fn muscle_geometry(path: &MusclePath, pose: &KinematicPose) -> Result<(f64, f64)> {
    let mut l = 0.0;
    let mut ldot = 0.0;
    let (mut xa, mut va) = path.resolve(&path.via_points[0], pose)?;
    for a in &path.via_points[1..] {
        let (xb, vb) = path.resolve(a, pose)?;
        let d = xb - xa;
        let len = d.norm();
        if len > 0.0 {
            l += len;
            ldot += d.dot(&(vb - va)) / len;
        }
        xa = xb;
        va = vb;
    }
    if !(l > 0.0) {
        return Err(Error::Data("muscle path has zero length".into()));
    }
    Ok((l, ldot))
}

/// Live kinematic state of one muscle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuscleState {
    pub l: f64,
    pub ldot: f64,
    pub e: f64,
    pub edot: f64,
    pub a: f64,
}

impl MuscleState {
    pub fn new(params: &HillParams, l: f64, ldot: f64, a: f64) -> Self {
        MuscleState {
            l,
            ldot,
            e: (l - params.l_0) / params.l_0,
            edot: ldot / params.l_0,
            a: a.clamp(0.0, 1.0),
        }
    }
}

pub fn passive_force(p: &HillParams, s: &MuscleState) -> f64 {
    (p.k_s * ((p.k_c * s.e).exp() - 1.0) + p.k_d * s.edot).max(0.0)
}

pub fn force_length(p: &HillParams, l: f64) -> f64 {
    (p.k_max * (l - p.l_m)).max(0.0)
}

/// Lengthening (`l̇ ≥ 0`) leaves the factor at 1.
pub fn force_velocity(p: &HillParams, ldot: f64) -> f64 {
    (1.0 + ldot.min(0.0) / p.v_m).max(0.0)
}

pub fn contractile_force(p: &HillParams, s: &MuscleState) -> f64 {
    s.a * force_length(p, s.l) * force_velocity(p, s.ldot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HillMuscle {
    pub name: String,
    pub params: HillParams,
    pub path: MusclePath,
}

impl HillMuscle {
    pub fn state(&self, pose: &KinematicPose, a: f64) -> Result<MuscleState> {
        let (l, ldot) = muscle_geometry(&self.path, pose)?;
        Ok(MuscleState::new(&self.params, l, ldot, a))
    }

    pub fn force(&self, s: &MuscleState) -> f64 {
        passive_force(&self.params, s) + contractile_force(&self.params, s)
    }
}

/// Per-muscle tension `f_P + f_C`, in registry order.
pub fn total_forces(muscles: &[HillMuscle], states: &[MuscleState]) -> Result<DVector<f64>> {
    if muscles.len() != states.len() {
        return Err(Error::Dimension {
            expected: muscles.len(),
            got: states.len(),
        });
    }
    Ok(DVector::from_iterator(
        muscles.len(),
        muscles.iter().zip(states).map(|(m, s)| m.force(s)),
    ))
}

/// Muscle definition document.
///
/// ```toml
/// [[muscle]]
/// name = "sternocleidomastoid_L"
/// hill = { k_s = 20.0, k_c = 6.0, k_d = 2.0, k_max = 3000.0, l_m = 0.07, v_m = 0.5, l_0 = 0.14 }
/// attachment = [
///   { link = "base", point = [0.03, 0.0, 0.04] },
///   { link = "skull", point = [0.05, 0.02, -0.03] },
/// ]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleDocument {
    #[serde(rename = "muscle")]
    pub muscles: Vec<MuscleDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleDoc {
    pub name: String,
    pub hill: HillParams,
    #[serde(rename = "attachment")]
    pub attachments: Vec<AttachmentDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttachmentDoc {
    Link { link: String, point: [f64; 3] },
    Node { node: usize },
}

impl MuscleDocument {
    pub fn build(&self, spine: &SpineModel) -> Result<Vec<HillMuscle>> {
        let mut seen = HashMap::new();
        self.muscles
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if seen.insert(m.name.clone(), i).is_some() {
                    return Err(Error::Config(format!("duplicate muscle name {:?}", m.name)));
                }
                m.hill
                    .validate()
                    .map_err(|e| Error::Config(format!("muscle {:?}: {e}", m.name)))?;
                let via = m
                    .attachments
                    .iter()
                    .map(|a| match a {
                        AttachmentDoc::Link { link, point } => spine
                            .link_index(link)
                            .map(|l| Attachment::Link {
                                link: l,
                                point: Vector3::new(point[0], point[1], point[2]),
                            })
                            .ok_or_else(|| Error::Config(format!("muscle {:?}: unknown link {link:?}", m.name))),
                        AttachmentDoc::Node { node } => Ok(Attachment::Node(*node)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let path = MusclePath::new(via).map_err(|e| Error::Config(format!("muscle {:?}: {e}", m.name)))?;
                Ok(HillMuscle {
                    name: m.name.clone(),
                    params: m.hill,
                    path,
                })
            })
            .collect()
    }
}

pub fn muscles_from_toml(text: &str, spine: &SpineModel) -> Result<Vec<HillMuscle>> {
    let doc: MuscleDocument = toml::from_str(text).map_err(|e| Error::Config(format!("muscle document: {e}")))?;
    doc.build(spine)
}

/// The shipped cervical muscle set, matching [`SpineModel::bundled`].
pub fn bundled_neck_muscles(spine: &SpineModel) -> Vec<HillMuscle> {
    muscles_from_toml(crate::bundled::NECK_MUSCLES_TOML, spine).expect("bundled muscle document is valid")
}
