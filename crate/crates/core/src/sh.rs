//! Real spherical-harmonic color basis up to degree 2 (3D-GS sign convention).

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 2;
pub const MAX_COEFFS: usize = (MAX_DEGREE + 1) * (MAX_DEGREE + 1);

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Coefficients per color channel at a given degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Per-channel SH coefficients, `coeffs[k][channel]`. Entries beyond the active
/// degree are ignored and kept at zero.
pub type ShCoeffs = [[f64; 3]; MAX_COEFFS];

/// Basis values `Y_k(dir)` for `k < coeff_count(degree)`.
pub fn basis(degree: usize, dir: &Vector3<f64>) -> [f64; MAX_COEFFS] {
    let mut y = [0.0; MAX_COEFFS];
    y[0] = C0;
    if degree >= 1 {
        let (x, yy, z) = (dir.x, dir.y, dir.z);
        y[1] = -C1 * yy;
        y[2] = C1 * z;
        y[3] = -C1 * x;
        if degree >= 2 {
            y[4] = C2[0] * x * yy;
            y[5] = C2[1] * yy * z;
            y[6] = C2[2] * (2.0 * z * z - x * x - yy * yy);
            y[7] = C2[3] * x * z;
            y[8] = C2[4] * (x * x - yy * yy);
        }
    }
    y
}

/// `∂Y_k/∂dir` for each basis function.
pub fn basis_jacobian(degree: usize, dir: &Vector3<f64>) -> [Vector3<f64>; MAX_COEFFS] {
    let mut j = [Vector3::zeros(); MAX_COEFFS];
    if degree >= 1 {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        j[1] = Vector3::new(0.0, -C1, 0.0);
        j[2] = Vector3::new(0.0, 0.0, C1);
        j[3] = Vector3::new(-C1, 0.0, 0.0);
        if degree >= 2 {
            j[4] = C2[0] * Vector3::new(y, x, 0.0);
            j[5] = C2[1] * Vector3::new(0.0, z, y);
            j[6] = C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
            j[7] = C2[3] * Vector3::new(z, 0.0, x);
            j[8] = C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        }
    }
    j
}

/// Unclamped color `Σ_k sh_k Y_k(dir) + 0.5`. Clamping to `[0, 1]` happens in
/// the rasterizer.
pub fn eval_raw(degree: usize, sh: &ShCoeffs, dir: &Vector3<f64>) -> [f64; 3] {
    let y = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (k, yk) in y.iter().enumerate().take(coeff_count(degree)) {
        for c in 0..3 {
            rgb[c] += sh[k][c] * yk;
        }
    }
    rgb
}

/// Checked evaluation from a flat channel-interleaved coefficient slice
/// (`[k0_r, k0_g, k0_b, k1_r, ...]`), clamped to `[0, 1]`.
pub fn sh_eval(degree: usize, coeffs: &[f64], view_dir: &Vector3<f64>) -> Result<[f64; 3]> {
    if degree > MAX_DEGREE {
        return Err(Error::Config(format!("SH degree {degree} exceeds {MAX_DEGREE}")));
    }
    let want = 3 * coeff_count(degree);
    if coeffs.len() != want {
        return Err(Error::Config(format!(
            "SH degree {degree} needs {want} coefficients, got {}",
            coeffs.len()
        )));
    }
    let mut sh = [[0.0; 3]; MAX_COEFFS];
    for (k, chunk) in coeffs.chunks_exact(3).enumerate() {
        sh[k].copy_from_slice(chunk);
    }
    Ok(eval_raw(degree, &sh, view_dir).map(|v| v.clamp(0.0, 1.0)))
}

/// DC coefficient that reproduces a flat color.
pub fn dc_from_rgb(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / C0)
}
