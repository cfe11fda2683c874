//! Spine definition document (TOML).
//!
//! ```toml
//! gravity = [0.0, -9.81, 0.0]
//!
//! [[link]]
//! name = "base"
//! mass = 5.0
//! inertia = [[0.05, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.05]]
//! com = [0.0, 0.0, 0.0]
//!
//! [[link]]
//! name = "C7"
//! parent = "base"
//! joint_origin = [0.0, 0.02, 0.0]
//! mass = 0.4
//! inertia = [[...], [...], [...]]
//! com = [0.0, 0.008, 0.0]
//! spring = { k_s = [100.0, 60.0, 100.0], k_d = [1.0, 1.0, 1.0], q0 = [0.0, 0.0, 0.0] }
//! limits = { lower = [-1.047, -1.047, -1.047], upper = [1.047, 1.047, 1.047] }
//! ```
//!
//! Links must be listed base first, each movable link naming the link
//! directly before it as its parent (a single unbranched chain). Lengths
//! are metres, masses kilograms, angles radians.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{BoneLink, JointLimits, JointSpring, SpineModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineDocument {
    pub gravity: [f64; 3],
    #[serde(rename = "link")]
    pub links: Vec<LinkDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_origin: Option<[f64; 3]>,
    pub mass: f64,
    pub inertia: [[f64; 3]; 3],
    pub com: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spring: Option<SpringDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitsDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringDoc {
    pub k_s: [f64; 3],
    pub k_d: [f64; 3],
    #[serde(default)]
    pub q0: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitsDoc {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn check_inertia(name: &str, m: &Matrix3<f64>) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("link {name}: inertia has non-finite entries")));
    }
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).abs().max() > 1e-12 * scale {
        return Err(Error::Config(format!("link {name}: inertia is not symmetric")));
    }
    if m.cholesky().is_none() {
        return Err(Error::Config(format!("link {name}: inertia is not positive definite")));
    }
    Ok(())
}

pub(super) fn build(doc: &SpineDocument) -> Result<SpineModel> {
    let links = &doc.links;
    if links.len() < 2 {
        return Err(Error::Config(format!(
            "spine needs a base and at least one movable link, got {} links",
            links.len()
        )));
    }
    let mut index = HashMap::new();
    for (i, l) in links.iter().enumerate() {
        if index.insert(l.name.as_str(), i).is_some() {
            return Err(Error::Config(format!("duplicate link name {:?}", l.name)));
        }
    }
    let mut parents = Vec::with_capacity(links.len());
    for l in links {
        let p = match &l.parent {
            None => None,
            Some(pn) => Some(
                *index
                    .get(pn.as_str())
                    .ok_or_else(|| Error::Config(format!("link {}: unknown parent {pn:?}", l.name)))?,
            ),
        };
        parents.push(p);
    }
    // Cycles first, so that a loop is reported as such rather than as an ordering problem.
    for start in 0..links.len() {
        let mut seen = vec![false; links.len()];
        let mut cur = Some(start);
        while let Some(c) = cur {
            if seen[c] {
                return Err(Error::Config(format!(
                    "cyclic parent references through link {:?}",
                    links[c].name
                )));
            }
            seen[c] = true;
            cur = parents[c];
        }
    }
    for (i, l) in links.iter().enumerate() {
        match (i, parents[i]) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Config(format!("base link {:?} must not have a parent", l.name))),
            (_, Some(p)) if p == i - 1 => {}
            _ => {
                return Err(Error::Config(format!(
                    "link {:?} is not in chain order (its parent must be {:?})",
                    l.name,
                    links[i - 1].name
                )))
            }
        }
    }

    let mut out_links = Vec::with_capacity(links.len());
    let mut springs = Vec::new();
    let mut limits = Vec::new();
    for (i, l) in links.iter().enumerate() {
        if !(l.mass > 0.0) || !l.mass.is_finite() {
            return Err(Error::Config(format!(
                "link {:?}: non-positive mass {}",
                l.name, l.mass
            )));
        }
        let inertia = Matrix3::from_fn(|r, c| l.inertia[r][c]);
        check_inertia(&l.name, &inertia)?;
        if i > 0 {
            let spring = l.spring.as_ref().map_or(
                JointSpring {
                    k_s: Vector3::zeros(),
                    k_d: Vector3::zeros(),
                    q0: Vector3::zeros(),
                },
                |s| JointSpring {
                    k_s: v3(s.k_s),
                    k_d: v3(s.k_d),
                    q0: v3(s.q0),
                },
            );
            if spring.k_s.iter().chain(spring.k_d.iter()).any(|k| !(*k >= 0.0)) {
                return Err(Error::Config(format!("link {:?}: negative spring coefficient", l.name)));
            }
            let lim = l.limits.as_ref().map_or_else(JointLimits::default, |d| JointLimits {
                lower: v3(d.lower),
                upper: v3(d.upper),
            });
            for a in 0..3 {
                if !(lim.lower[a] < lim.upper[a]) {
                    return Err(Error::Config(format!(
                        "link {:?}: empty joint range on axis {a}",
                        l.name
                    )));
                }
                if spring.q0[a] < lim.lower[a] || spring.q0[a] > lim.upper[a] {
                    return Err(Error::Config(format!(
                        "link {:?}: rest angle outside joint range",
                        l.name
                    )));
                }
            }
            springs.push(spring);
            limits.push(lim);
        }
        out_links.push(BoneLink {
            name: l.name.clone(),
            mass: l.mass,
            inertia,
            com_offset: v3(l.com),
            parent: parents[i],
            joint_origin: l.joint_origin.map(v3).unwrap_or_else(Vector3::zeros),
        });
    }
    Ok(SpineModel::from_parts(out_links, springs, limits, v3(doc.gravity)))
}
