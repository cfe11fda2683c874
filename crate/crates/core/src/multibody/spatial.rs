//! Minimal 6D spatial algebra (motion/force vectors ordered angular-first).

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

pub(crate) type SVec = Vector6<f64>;

#[inline]
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn ang(v: &SVec) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

#[inline]
fn lin(v: &SVec) -> Vector3<f64> {
    Vector3::new(v[3], v[4], v[5])
}

#[inline]
fn join(a: Vector3<f64>, b: Vector3<f64>) -> SVec {
    SVec::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Plücker coordinate transform from frame A to frame B, stored as the
/// rotation `e` (A coordinates into B coordinates) and the position `r`
/// of B's origin expressed in A.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Xform {
    pub e: Matrix3<f64>,
    pub r: Vector3<f64>,
}

impl Xform {
    pub fn translation(r: Vector3<f64>) -> Self {
        Xform {
            e: Matrix3::identity(),
            r,
        }
    }

    pub fn rotation(e: Matrix3<f64>) -> Self {
        Xform { e, r: Vector3::zeros() }
    }

    /// `self ∘ other`: first `other` (A→B), then `self` (B→C).
    pub fn compose(&self, other: &Xform) -> Xform {
        Xform {
            e: self.e * other.e,
            r: other.r + other.e.transpose() * self.r,
        }
    }

    pub fn apply_motion(&self, m: &SVec) -> SVec {
        let w = ang(m);
        let v = lin(m);
        join(self.e * w, self.e * (v - self.r.cross(&w)))
    }

    /// Force transform `X*` (A coordinates to B coordinates).
    #[cfg(test)]
    pub fn apply_force(&self, f: &SVec) -> SVec {
        let n = ang(f);
        let fl = lin(f);
        join(self.e * (n - self.r.cross(&fl)), self.e * fl)
    }

    /// `Xᵀ f`: carries a force from B coordinates back into A.
    pub fn transpose_force(&self, f: &SVec) -> SVec {
        let et = self.e.transpose();
        let n = et * ang(f);
        let fl = et * lin(f);
        join(n + self.r.cross(&fl), fl)
    }

    pub fn to_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        let erx = -self.e * skew(&self.r);
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 0).copy_from(&erx);
        x
    }
}

/// Spatial cross product for motion vectors, `v ×m`.
pub(crate) fn cross_motion(v: &SVec, m: &SVec) -> SVec {
    let w = ang(v);
    let vl = lin(v);
    let mw = ang(m);
    let ml = lin(m);
    join(w.cross(&mw), w.cross(&ml) + vl.cross(&mw))
}

/// Spatial cross product for force vectors, `v ×f`.
pub(crate) fn cross_force(v: &SVec, f: &SVec) -> SVec {
    let w = ang(v);
    let vl = lin(v);
    let n = ang(f);
    let fl = lin(f);
    join(w.cross(&n) + vl.cross(&fl), w.cross(&fl))
}

/// Spatial inertia of a body with mass `m`, center of mass `c` and
/// rotational inertia `ic` about the center of mass.
pub(crate) fn spatial_inertia(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew(c);
    let mut i = Matrix6::zeros();
    let top_left = ic + m * cx * cx.transpose();
    i.fixed_view_mut::<3, 3>(0, 0).copy_from(&top_left);
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(m * cx));
    i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * cx.transpose()));
    i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(m * Matrix3::identity()));
    i
}

/// Elementary rotation about one coordinate axis: the matrix that maps
/// child-frame coordinates into the parent frame.
#[inline]
pub(crate) fn axis_rotation(axis: usize, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_xform() -> Xform {
        let e = axis_rotation(0, 0.3) * axis_rotation(1, -0.7) * axis_rotation(2, 1.1);
        Xform {
            e,
            r: Vector3::new(0.1, -0.2, 0.05),
        }
    }

    #[test]
    fn compact_forms_match_matrix() {
        let x = sample_xform();
        let m = x.to_matrix();
        let v = SVec::new(0.3, -1.0, 2.0, 0.5, 0.25, -0.75);
        assert!((x.apply_motion(&v) - m * v).norm() < 1e-14);
        let xstar = m.try_inverse().unwrap().transpose();
        assert!((x.apply_force(&v) - xstar * v).norm() < 1e-12);
        assert!((x.transpose_force(&v) - m.transpose() * v).norm() < 1e-14);
    }

    #[test]
    fn compose_matches_matrix_product() {
        let a = sample_xform();
        let b = Xform {
            e: axis_rotation(2, 0.4),
            r: Vector3::new(0.0, 0.3, 0.1),
        };
        let c = b.compose(&a);
        assert!((c.to_matrix() - b.to_matrix() * a.to_matrix()).norm() < 1e-13);
    }

    #[test]
    fn power_is_invariant_under_transform() {
        let x = sample_xform();
        let v = SVec::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let f = SVec::new(-1.0, 0.5, 0.2, 0.3, -0.7, 1.2);
        let p_a = v.dot(&f);
        let p_b = x.apply_motion(&v).dot(&x.apply_force(&f));
        assert!((p_a - p_b).abs() < 1e-13);
    }
}
