//! Quaternion algebra in `(w, x, y, z)` order with hand-written vector-Jacobian
//! products for the handful of maps the renderer and joint models chain through.

use nalgebra::{Matrix3, Vector3, Vector4};

pub type Quat = Vector4<f64>;

pub const IDENTITY: Quat = Vector4::new(1.0, 0.0, 0.0, 0.0);

/// Rotation matrix of a unit quaternion. The polynomial is evaluated as-is, so a
/// non-unit input yields a scaled, non-orthogonal matrix.
pub fn quat_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// dL/dq given dL/dR for `R = quat_to_rotmat(q)`.
pub fn rotmat_vjp(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    Vector4::new(dw, dx, dy, dz)
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Left-multiplication matrix: `quat_mul(a, b) == left_matrix(a) * b`.
fn left_matrix(a: &Quat) -> nalgebra::Matrix4<f64> {
    let (w, x, y, z) = (a[0], a[1], a[2], a[3]);
    nalgebra::Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}

/// Right-multiplication matrix: `quat_mul(a, b) == right_matrix(b) * a`.
fn right_matrix(b: &Quat) -> nalgebra::Matrix4<f64> {
    let (w, x, y, z) = (b[0], b[1], b[2], b[3]);
    nalgebra::Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
}

/// Returns `(dL/da, dL/db)` for `out = a ⊗ b`.
pub fn quat_mul_vjp(a: &Quat, b: &Quat, d_out: &Quat) -> (Quat, Quat) {
    (
        right_matrix(b).transpose() * d_out,
        left_matrix(a).transpose() * d_out,
    )
}

pub fn quat_from_axis_angle(unit_axis: &Vector3<f64>, angle: f64) -> Quat {
    let (s, c) = (0.5 * angle).sin_cos();
    Vector4::new(c, s * unit_axis.x, s * unit_axis.y, s * unit_axis.z)
}

/// Normalized copy, or `None` when the norm is below `min_norm`.
pub fn try_normalize(q: &Quat, min_norm: f64) -> Option<Quat> {
    let n = q.norm();
    (n >= min_norm && n.is_finite()).then(|| q / n)
}

/// dL/dq for `q̂ = q / ‖q‖`, given dL/dq̂.
pub fn normalize_vjp(q: &Quat, d_unit: &Quat) -> Quat {
    let n = q.norm();
    let u = q / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// Same as [`normalize_vjp`] for 3-vectors.
pub fn normalize3_vjp(v: &Vector3<f64>, d_unit: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    let u = v / n;
    (d_unit - u * u.dot(d_unit)) / n
}

/// Axis and angle (radians, in `[0, π]`) of a rotation matrix. The axis is
/// arbitrary (the least-constrained direction) when the angle is ~0.
pub fn rotmat_axis_angle(r: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if skew.norm() > 1e-9 && angle < std::f64::consts::PI - 1e-6 {
        return (skew.normalize(), angle);
    }
    // Near 0 or π: the axis is the eigenvector of the symmetric part with the
    // largest eigenvalue.
    let sym = (r + r.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let (imax, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let axis = eig.eigenvectors.column(imax).into_owned();
    (axis.normalize(), angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        q.normalize()
    }

    #[test]
    fn identity_quaternion_gives_identity() {
        assert_relative_eq!(quat_to_rotmat(&IDENTITY), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = Vector4::new(h.cos(), 0.0, 0.0, h.sin());
        let v = quat_to_rotmat(&q) * Vector3::x();
        assert_relative_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn random_quaternions_are_orthonormal_and_double_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let m = quat_to_rotmat(&q);
            assert_relative_eq!(m.transpose() * m, Matrix3::identity(), epsilon = 1e-9);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(quat_to_rotmat(&(-q)), m, epsilon = 1e-15);
        }
    }

    #[test]
    fn product_composes_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_quat(&mut rng);
            let b = random_quat(&mut rng);
            let lhs = quat_to_rotmat(&quat_mul(&a, &b));
            let rhs = quat_to_rotmat(&a) * quat_to_rotmat(&b);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_quat(&mut rng) * 1.3;
        let b = random_quat(&mut rng);
        let w = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let wq = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let h = 1e-6;
        let f_rot = |q: &Quat| quat_to_rotmat(q).component_mul(&w).sum();
        let f_mul_a = |q: &Quat| quat_mul(q, &b).dot(&wq);
        let f_mul_b = |q: &Quat| quat_mul(&b, q).dot(&wq);
        let f_norm = |q: &Quat| (q / q.norm()).dot(&wq);
        let an_rot = rotmat_vjp(&q, &w);
        let (an_a, _) = quat_mul_vjp(&q, &b, &wq);
        let (_, an_b) = quat_mul_vjp(&b, &q, &wq);
        let an_norm = normalize_vjp(&q, &wq);
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = |f: &dyn Fn(&Quat) -> f64| (f(&qp) - f(&qm)) / (2.0 * h);
            assert_relative_eq!(an_rot[k], fd(&f_rot), epsilon = 1e-7);
            assert_relative_eq!(an_a[k], fd(&f_mul_a), epsilon = 1e-7);
            assert_relative_eq!(an_b[k], fd(&f_mul_b), epsilon = 1e-7);
            assert_relative_eq!(an_norm[k], fd(&f_norm), epsilon = 1e-7);
        }
    }

    #[test]
    fn axis_angle_round_trip() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        for &angle in &[0.3, 1.2, 2.9] {
            let r = quat_to_rotmat(&quat_from_axis_angle(&axis, angle));
            let (a, t) = rotmat_axis_angle(&r);
            assert_relative_eq!(t, angle, epsilon = 1e-9);
            assert_relative_eq!(a, axis, epsilon = 1e-6);
        }
    }
}
