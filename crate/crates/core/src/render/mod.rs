//! CPU Gaussian rasterizer with analytic reverse-mode gradients.
//!
//! Splats are depth-sorted globally (ties broken by cloud index) and binned
//! into 16×16 tiles purely for speed: a splat contributes to a pixel iff the
//! pixel lies inside its 3σ bounding square and its alpha reaches 1/255, so
//! the tile size never changes the image.

pub mod loss;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{sigmoid, GaussianCloud};
use crate::image::Image;
use crate::rotation::{self, Quat};
use crate::sh::{self, ShCoeffs, MAX_COEFFS};

pub use loss::{loss_app, loss_dssim, loss_l1, ssim, AppearanceLossConfig, LossValue};

/// Screen-space isotropic blur added to every projected covariance (px²).
pub const BLUR: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.2;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;
pub const MAX_CONDITION: f64 = 1e12;
const TILE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Worker threads over pixel rows; 1 is the sequential reference mode.
    pub threads: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            threads: 1,
        }
    }
}

/// Result of projecting one Gaussian through a pinhole camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub visible: bool,
}

struct ProjectionDetail {
    cam_pos: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
    proj: Projection,
}

fn projection_detail(position: &Vector3<f64>, rotation: &Quat, log_scale: &Vector3<f64>, cam: &Camera) -> ProjectionDetail {
    let t = cam.to_camera(position);
    let z = t.z;
    let unit = rotation / rotation.norm();
    let cov3d = crate::gaussian::covariance3d(&unit, log_scale);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * t.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * t.y / (z * z),
    );
    let tm = jacobian * cam.rotation;
    let cov2d = tm * cov3d * tm.transpose() + Matrix2::identity() * BLUR;
    let mean2d = Vector2::new(cam.fx * t.x / z + cam.cx, cam.fy * t.y / z + cam.cy);
    let mut visible = z > NEAR_PLANE;
    if visible {
        let r = radius(&cov2d);
        visible = mean2d.x + r >= 0.0
            && mean2d.x - r <= (cam.width - 1) as f64
            && mean2d.y + r >= 0.0
            && mean2d.y - r <= (cam.height - 1) as f64;
    }
    ProjectionDetail {
        cam_pos: t,
        jacobian,
        cov3d,
        proj: Projection {
            mean2d,
            cov2d,
            depth: z,
            visible,
        },
    }
}

fn eigen_max_min(c: &Matrix2<f64>) -> (f64, f64) {
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    let disc = (mid * mid - det).max(0.0).sqrt();
    (mid + disc, mid - disc)
}

fn radius(cov2d: &Matrix2<f64>) -> f64 {
    3.0 * eigen_max_min(cov2d).0.max(0.0).sqrt()
}

/// EWA projection of a Gaussian: pinhole mean, `J W Σ Wᵀ Jᵀ + blur·I`.
pub fn project_gaussian(g: &crate::gaussian::Gaussian, cam: &Camera) -> Projection {
    projection_detail(&g.position, &g.rotation, &g.log_scale, cam).proj
}

#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    radius: f64,
    opacity: f64,
    color: [f64; 3],
    color_clamped: [bool; 3],
}

/// Counters describing a forward pass. `event_hash` summarizes which
/// (pixel, splat) pairs contributed and whether their alpha was clamped, so a
/// perturbation that crosses a clamp or cutoff boundary can be detected.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub singular_skipped: usize,
    pub contributions: usize,
    pub alpha_clamped: usize,
    pub color_clamped: usize,
    pub event_hash: u64,
}

/// Forward output plus the auxiliary buffers the backward pass replays.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    /// Number of tile-list entries walked by each pixel.
    pub contrib_end: Vec<u32>,
    pub stats: RenderStats,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    background: [f64; 3],
    threads: usize,
    cloud_fingerprint: u64,
    cloud_len: usize,
}

impl RenderedImage {
    /// Sum of compositing weights `Σ αᵢTᵢ + T_final` at a pixel (should be 1).
    pub fn weight_sum(&self, x: usize, y: usize) -> f64 {
        let p = y * self.image.width + x;
        let tile = &self.tiles[(y / TILE) * self.tiles_x + x / TILE];
        let mut t = 1.0;
        let mut sum = 0.0;
        for &s in &tile[..self.contrib_end[p] as usize] {
            if let Some(alpha) = splat_alpha(&self.splats[s as usize], x, y).map(|a| a.0) {
                sum += alpha * t;
                t *= 1.0 - alpha;
            }
        }
        sum + self.final_transmittance[p]
    }
}

/// Alpha and Gaussian falloff of a splat at a pixel, or `None` if it does not
/// contribute. Returns `(alpha, falloff, offset, clamped)`.
#[inline]
fn splat_alpha(s: &Splat, x: usize, y: usize) -> Option<(f64, f64, Vector2<f64>, bool)> {
    let d = Vector2::new(x as f64 - s.mean.x, y as f64 - s.mean.y);
    if d.x.abs() > s.radius || d.y.abs() > s.radius {
        return None;
    }
    let power = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
    if power > 0.0 {
        return None;
    }
    let falloff = power.exp();
    let raw = s.opacity * falloff;
    if raw < ALPHA_MIN {
        return None;
    }
    let clamped = raw > ALPHA_MAX;
    Some((raw.min(ALPHA_MAX), falloff, d, clamped))
}

fn view_dir(position: &Vector3<f64>, cam_center: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let v = position - cam_center;
    let n = v.norm();
    (v / n, n)
}

fn build_splats(cloud: &GaussianCloud, cam: &Camera, stats: &mut RenderStats) -> Vec<Splat> {
    let center = cam.center();
    let mut splats = Vec::with_capacity(cloud.len());
    let mut depths = Vec::with_capacity(cloud.len());
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let det = projection_detail(&g.position, &g.rotation, &g.log_scale, cam);
        if !det.proj.visible {
            continue;
        }
        let cov = det.proj.cov2d;
        let (lmax, lmin) = eigen_max_min(&cov);
        let determinant = cov.determinant();
        if !(determinant > 0.0) || !(lmin > 0.0) || lmax / lmin > MAX_CONDITION || !determinant.is_finite() {
            stats.singular_skipped += 1;
            continue;
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / determinant;
        let (dir, _) = view_dir(&g.position, &center);
        let raw = sh::eval_raw(cloud.sh_degree, &g.sh, &dir);
        let mut color = [0.0; 3];
        let mut color_clamped = [false; 3];
        for c in 0..3 {
            color_clamped[c] = !(0.0..=1.0).contains(&raw[c]);
            color[c] = raw[c].clamp(0.0, 1.0);
        }
        if color_clamped.iter().any(|&b| b) {
            stats.color_clamped += 1;
        }
        depths.push(det.proj.depth);
        splats.push(Splat {
            index,
            mean: det.proj.mean2d,
            conic,
            radius: radius(&cov),
            opacity: sigmoid(g.opacity_logit),
            color,
            color_clamped,
        });
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]).then(splats[a].index.cmp(&splats[b].index)));
    stats.visible = splats.len();
    let mut sorted: Vec<Option<Splat>> = splats.into_iter().map(Some).collect();
    order.into_iter().map(|i| sorted[i].take().expect("permutation")).collect()
}

fn bin_tiles(splats: &[Splat], width: usize, height: usize) -> (Vec<Vec<u32>>, usize) {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = (s.mean.x - s.radius).ceil().max(0.0) as usize;
        let y0 = (s.mean.y - s.radius).ceil().max(0.0) as usize;
        let x1 = (s.mean.x + s.radius).floor().min((width - 1) as f64);
        let y1 = (s.mean.y + s.radius).floor().min((height - 1) as f64);
        if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    (tiles, tiles_x)
}

struct RowsOut {
    pixels: Vec<f64>,
    final_t: Vec<f64>,
    contrib_end: Vec<u32>,
    contributions: usize,
    clamped: usize,
    hash: u64,
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(5)
}

fn forward_rows(
    splats: &[Splat],
    tiles: &[Vec<u32>],
    tiles_x: usize,
    width: usize,
    rows: std::ops::Range<usize>,
    background: [f64; 3],
) -> RowsOut {
    let n = rows.len() * width;
    let mut out = RowsOut {
        pixels: Vec::with_capacity(n * 3),
        final_t: Vec::with_capacity(n),
        contrib_end: Vec::with_capacity(n),
        contributions: 0,
        clamped: 0,
        hash: 0,
    };
    for y in rows {
        for x in 0..width {
            let tile = &tiles[(y / TILE) * tiles_x + x / TILE];
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut end = 0u32;
            for (j, &si) in tile.iter().enumerate() {
                let s = &splats[si as usize];
                let Some((alpha, _, _, clamped)) = splat_alpha(s, x, y) else {
                    continue;
                };
                let next_t = t * (1.0 - alpha);
                if next_t < T_MIN {
                    break;
                }
                for ch in 0..3 {
                    c[ch] += s.color[ch] * alpha * t;
                }
                t = next_t;
                end = (j + 1) as u32;
                out.contributions += 1;
                out.clamped += clamped as usize;
                out.hash = mix(out.hash, ((y * width + x) as u64) << 32 | (s.index as u64) << 1 | clamped as u64);
            }
            for ch in 0..3 {
                out.pixels.push(c[ch] + t * background[ch]);
            }
            out.final_t.push(t);
            out.contrib_end.push(end);
        }
    }
    out
}

fn row_bands(height: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    let threads = threads.clamp(1, height.max(1));
    let per = height.div_ceil(threads);
    (0..threads)
        .map(|k| (k * per).min(height)..((k + 1) * per).min(height))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Renders `cloud` from `cam` by front-to-back alpha compositing.
pub fn rasterize(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions) -> RenderedImage {
    let (w, h) = (cam.width, cam.height);
    let mut stats = RenderStats::default();
    let splats = build_splats(cloud, cam, &mut stats);
    let (tiles, tiles_x) = bin_tiles(&splats, w, h);
    let bands = row_bands(h, opts.threads);
    let outs: Vec<RowsOut> = if bands.len() == 1 {
        vec![forward_rows(&splats, &tiles, tiles_x, w, 0..h, opts.background)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = bands
                .iter()
                .map(|r| {
                    let (splats, tiles, r) = (&splats, &tiles, r.clone());
                    scope.spawn(move || forward_rows(splats, tiles, tiles_x, w, r, opts.background))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
        })
    };
    let mut image = Image::new(w, h);
    image.data.clear();
    let mut final_transmittance = Vec::with_capacity(w * h);
    let mut contrib_end = Vec::with_capacity(w * h);
    for o in outs {
        image.data.extend_from_slice(&o.pixels);
        final_transmittance.extend_from_slice(&o.final_t);
        contrib_end.extend_from_slice(&o.contrib_end);
        stats.contributions += o.contributions;
        stats.alpha_clamped += o.clamped;
        stats.event_hash = mix(stats.event_hash, o.hash);
    }
    stats.event_hash = mix(stats.event_hash, stats.color_clamped as u64);
    RenderedImage {
        image,
        final_transmittance,
        contrib_end,
        stats,
        splats,
        tiles,
        tiles_x,
        background: opts.background,
        threads: opts.threads,
        cloud_fingerprint: cloud.fingerprint(),
        cloud_len: cloud.len(),
    }
}

/// Per-Gaussian partial derivatives of a scalar loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<Quat>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    /// Norm of dL/d(mean2d) in pixels; the densification statistic.
    pub mean2d_norm: Vec<f64>,
    /// Whether the Gaussian was visible (projected) in this view.
    pub visible: Vec<bool>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![Quat::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![[[0.0; 3]; MAX_COEFFS]; n],
            mean2d_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.sh.iter().all(|k| k.iter().flatten().all(|x| x.is_finite()))
    }

    /// Accumulates `other` into `self`, summing every partial.
    pub fn accumulate(&mut self, other: &GaussianGrads) {
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.rotation[i] += other.rotation[i];
            self.log_scale[i] += other.log_scale[i];
            self.opacity_logit[i] += other.opacity_logit[i];
            for k in 0..MAX_COEFFS {
                for c in 0..3 {
                    self.sh[i][k][c] += other.sh[i][k][c];
                }
            }
            self.mean2d_norm[i] += other.mean2d_norm[i];
            self.visible[i] |= other.visible[i];
        }
    }
}

#[derive(Clone, Default)]
struct SplatAccum {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

fn backward_rows(r: &RenderedImage, d_pix: &Image, rows: std::ops::Range<usize>) -> Vec<SplatAccum> {
    let width = r.image.width;
    let mut acc = vec![SplatAccum::default(); r.splats.len()];
    let bg = r.background;
    for y in rows {
        for x in 0..width {
            let p = y * width + x;
            let end = r.contrib_end[p] as usize;
            if end == 0 {
                continue;
            }
            let dc = [d_pix.data[3 * p], d_pix.data[3 * p + 1], d_pix.data[3 * p + 2]];
            if dc == [0.0; 3] {
                continue;
            }
            let t_final = r.final_transmittance[p];
            let bg_dot = bg[0] * dc[0] + bg[1] * dc[1] + bg[2] * dc[2];
            let tile = &r.tiles[(y / TILE) * r.tiles_x + x / TILE];
            let mut t = t_final;
            let mut accum = [0.0; 3];
            let mut last_alpha = 0.0;
            let mut last_color = [0.0; 3];
            for &si in tile[..end].iter().rev() {
                let s = &r.splats[si as usize];
                let Some((alpha, falloff, d, clamped)) = splat_alpha(s, x, y) else {
                    continue;
                };
                t /= 1.0 - alpha;
                let a = &mut acc[si as usize];
                let weight = alpha * t;
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    accum[ch] = last_alpha * last_color[ch] + (1.0 - last_alpha) * accum[ch];
                    d_alpha += (s.color[ch] - accum[ch]) * dc[ch];
                    a.color[ch] += weight * dc[ch];
                }
                d_alpha *= t;
                d_alpha -= t_final / (1.0 - alpha) * bg_dot;
                last_alpha = alpha;
                last_color = s.color;
                if clamped {
                    continue;
                }
                a.opacity += falloff * d_alpha;
                // power = -½ dᵀQd with d = pixel - mean.
                let d_power = alpha * d_alpha;
                let qd = s.conic * d;
                a.mean += qd * d_power;
                a.conic -= (d * d.transpose()) * (0.5 * d_power);
            }
        }
    }
    acc
}

/// Reverse pass of [`rasterize`] for upstream gradient `d_pixels` (dL/dpixel).
pub fn rasterize_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    rendered: &RenderedImage,
    d_pixels: &Image,
) -> Result<GaussianGrads> {
    if rendered.cloud_len != cloud.len() || rendered.cloud_fingerprint != cloud.fingerprint() {
        return Err(Error::ContractViolation(
            "render buffers were produced from a different cloud".into(),
        ));
    }
    rendered.image.same_shape(d_pixels)?;
    if rendered.image.width != cam.width || rendered.image.height != cam.height {
        return Err(Error::ContractViolation("render buffers do not match the camera".into()));
    }
    let bands = row_bands(cam.height, rendered.threads);
    let partials: Vec<Vec<SplatAccum>> = if bands.len() == 1 {
        vec![backward_rows(rendered, d_pixels, 0..cam.height)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = bands
                .iter()
                .map(|b| {
                    let b = b.clone();
                    scope.spawn(move || backward_rows(rendered, d_pixels, b))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
        })
    };
    let mut acc = vec![SplatAccum::default(); rendered.splats.len()];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            a.mean += p.mean;
            a.conic += p.conic;
            a.opacity += p.opacity;
            for ch in 0..3 {
                a.color[ch] += p.color[ch];
            }
        }
    }

    let mut grads = GaussianGrads::zeros(cloud.len());
    let center = cam.center();
    let w = cam.rotation;
    for (s, a) in rendered.splats.iter().zip(&acc) {
        let i = s.index;
        let g = &cloud.gaussians[i];
        grads.visible[i] = true;
        grads.mean2d_norm[i] = a.mean.norm();

        let o = sigmoid(g.opacity_logit);
        grads.opacity_logit[i] = a.opacity * o * (1.0 - o);

        // Color through SH, including the view direction's dependence on x.
        let (dir, dist) = view_dir(&g.position, &center);
        let basis = sh::basis(cloud.sh_degree, &dir);
        let jac = sh::basis_jacobian(cloud.sh_degree, &dir);
        let mut d_dir = Vector3::zeros();
        let mut d_color = a.color;
        for ch in 0..3 {
            if s.color_clamped[ch] {
                d_color[ch] = 0.0;
            }
        }
        for k in 0..sh::coeff_count(cloud.sh_degree) {
            for ch in 0..3 {
                grads.sh[i][k][ch] = basis[k] * d_color[ch];
                d_dir += jac[k] * (g.sh[k][ch] * d_color[ch]);
            }
        }
        let mut d_pos = (d_dir - dir * dir.dot(&d_dir)) / dist;

        let det = projection_detail(&g.position, &g.rotation, &g.log_scale, cam);
        let t = det.cam_pos;
        let z = t.z;
        let q = s.conic;
        let d_cov2d = -(q * a.conic * q);
        let tm = det.jacobian * w;
        let d_cov3d = tm.transpose() * d_cov2d * tm;
        let d_tm = 2.0 * d_cov2d * tm * det.cov3d;
        let d_j = d_tm * w.transpose();

        let unit = g.rotation / g.rotation.norm();
        let rot = rotation::quat_to_rotmat(&unit);
        let scale = g.log_scale.map(f64::exp);
        let m = rot * Matrix3::from_diagonal(&scale);
        let d_m = 2.0 * d_cov3d * m;
        let d_rot = d_m * Matrix3::from_diagonal(&scale);
        for k in 0..3 {
            let ds: f64 = (0..3).map(|j| rot[(j, k)] * d_m[(j, k)]).sum();
            grads.log_scale[i][k] = ds * scale[k];
        }
        grads.rotation[i] = rotation::normalize_vjp(&g.rotation, &rotation::rotmat_vjp(&unit, &d_rot));

        let (fx, fy) = (cam.fx, cam.fy);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut d_t = Vector3::new(
            fx / z * a.mean.x,
            fy / z * a.mean.y,
            -fx * t.x / z2 * a.mean.x - fy * t.y / z2 * a.mean.y,
        );
        d_t.x += d_j[(0, 2)] * (-fx / z2);
        d_t.y += d_j[(1, 2)] * (-fy / z2);
        d_t.z += d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * t.x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * t.y / z3);
        d_pos += w.transpose() * d_t;
        grads.position[i] = d_pos;
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient {
            group: "render".into(),
            what: "gradient",
        });
    }
    Ok(grads)
}

#[cfg(test)]
mod tests;
