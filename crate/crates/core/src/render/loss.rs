//! Image losses with gradients with respect to the first (rendered) image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mixing weight and SSIM window for `(1-λ)·L1 + λ·D-SSIM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceLossConfig {
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub background: [f64; 3],
}

impl Default for AppearanceLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            background: [1.0; 3],
        }
    }
}

impl AppearanceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim_window {} must be odd and >= 3", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar loss and its gradient with respect to the rendered image.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

/// Mean absolute difference over pixels and channels.
pub fn loss_l1(a: &Image, b: &Image) -> Result<LossValue> {
    a.same_shape(b)?;
    let n = a.data.len() as f64;
    let mut grad = Image::new(a.width, a.height);
    let mut sum = 0.0;
    for ((g, &x), &y) in grad.data.iter_mut().zip(&a.data).zip(&b.data) {
        let d = x - y;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossValue { value: sum / n, grad })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable correlation of one plane (`w×h`) with `k`.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let ks = k.len();
    let (ow, oh) = (w + 1 - ks, h + 1 - ks);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + ks]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..ks).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w×h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let ks = k.len();
    let (ow, oh) = (w + 1 - ks, h + 1 - ks);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..ks {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..ks {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over valid window positions and channels, and its gradient with
/// respect to `a`.
fn ssim_with_grad(a: &Image, b: &Image, window: usize, sigma: f64) -> Result<(f64, Image)> {
    a.same_shape(b)?;
    if a.width < window || a.height < window {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} smaller than SSIM window {window}",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel(window, sigma);
    let (w, h) = (a.width, a.height);
    let positions = ((w + 1 - window) * (h + 1 - window)) as f64;
    let norm = 1.0 / (3.0 * positions);
    let mut total = 0.0;
    let mut grad = Image::new(w, h);
    for c in 0..3 {
        let pa = channel(a, c);
        let pb = channel(b, c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let s_aa = filter_valid(&aa, w, h, &k);
        let s_bb = filter_valid(&bb, w, h, &k);
        let s_ab = filter_valid(&ab, w, h, &k);
        let n = mu_a.len();
        let mut g_mu = vec![0.0; n];
        let mut g_aa = vec![0.0; n];
        let mut g_ab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = s_aa[i] - ma * ma;
            let var_b = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = var_a + var_b + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            let dd = d1 * d2;
            // S as a function of (mu_a, E[a²], E[ab]) with mu_b, E[b²] fixed.
            g_mu[i] = norm * ((2.0 * mb * n2 - 2.0 * mb * n1) / dd - s * (2.0 * ma / d1 - 2.0 * ma / d2));
            g_aa[i] = norm * (-s / d2);
            g_ab[i] = norm * (2.0 * n1 / dd);
        }
        let b_mu = filter_valid_adjoint(&g_mu, w, h, &k);
        let b_aa = filter_valid_adjoint(&g_aa, w, h, &k);
        let b_ab = filter_valid_adjoint(&g_ab, w, h, &k);
        for p in 0..w * h {
            grad.data[3 * p + c] = b_mu[p] + 2.0 * pa[p] * b_aa[p] + pb[p] * b_ab[p];
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM with a Gaussian window (valid positions only).
pub fn ssim(a: &Image, b: &Image, window: usize, sigma: f64) -> Result<f64> {
    ssim_with_grad(a, b, window, sigma).map(|(s, _)| s)
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn loss_dssim(a: &Image, b: &Image, cfg: &AppearanceLossConfig) -> Result<LossValue> {
    let (s, mut grad) = ssim_with_grad(a, b, cfg.ssim_window, cfg.ssim_sigma)?;
    grad.data.iter_mut().for_each(|g| *g *= -0.5);
    Ok(LossValue {
        value: (1.0 - s) * 0.5,
        grad,
    })
}

/// `(1-λ)·L1 + λ·D-SSIM`.
pub fn loss_app(a: &Image, b: &Image, cfg: &AppearanceLossConfig) -> Result<LossValue> {
    let lambda = cfg.lambda;
    let l1 = loss_l1(a, b)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let ds = loss_dssim(a, b, cfg)?;
    if lambda == 1.0 {
        return Ok(ds);
    }
    let mut grad = l1.grad;
    for (g, d) in grad.data.iter_mut().zip(&ds.grad.data) {
        *g = (1.0 - lambda) * *g + lambda * d;
    }
    Ok(LossValue {
        value: (1.0 - lambda) * l1.value + lambda * ds.value,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn l1_examples() {
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(loss_l1(&z, &z).unwrap().value, 0.0);
        assert_eq!(loss_l1(&z, &o).unwrap().value, 1.0);
        let a = Image::filled(4, 4, [0.25; 3]);
        let b = Image::filled(4, 4, [0.75; 3]);
        assert_eq!(loss_l1(&a, &b).unwrap().value, 0.5);
        assert!(loss_l1(&a, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn dssim_examples() {
        let cfg = AppearanceLossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 16);
        assert_relative_eq!(loss_dssim(&a, &a, &cfg).unwrap().value, 0.0, epsilon = 1e-12);
        // Constant images: mu_a = 0, mu_b = 1, zero variances, so
        // SSIM = C1 / (1 + C1) and D-SSIM = 1 / (2 (1 + C1)).
        let z = Image::filled(16, 16, [0.0; 3]);
        let o = Image::filled(16, 16, [1.0; 3]);
        let want = 1.0 / (2.0 * (1.0 + SSIM_C1));
        assert_relative_eq!(loss_dssim(&z, &o, &cfg).unwrap().value, want, epsilon = 1e-12);
        assert_relative_eq!(want, 0.499_950_005, epsilon = 1e-9);
        assert!(loss_dssim(&Image::new(8, 8), &Image::new(8, 8), &cfg).is_err());
    }

    #[test]
    fn app_mixes_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let mut cfg = AppearanceLossConfig::default();
        assert_relative_eq!(loss_app(&a, &a, &cfg).unwrap().value, 0.0, epsilon = 1e-12);
        cfg.lambda = 0.0;
        assert_eq!(loss_app(&a, &b, &cfg).unwrap().value, loss_l1(&a, &b).unwrap().value);
        cfg.lambda = 1.0;
        assert_eq!(loss_app(&a, &b, &cfg).unwrap().value, loss_dssim(&a, &b, &cfg).unwrap().value);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AppearanceLossConfig::default();
        cfg.validate().unwrap();
        cfg.ssim_window = 10;
        assert!(cfg.validate().is_err());
        cfg.ssim_window = 11;
        cfg.lambda = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let cfg = AppearanceLossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            let an = loss_dssim(&a, &b, &cfg).unwrap().grad;
            let h = 1e-5;
            for idx in (0..a.data.len()).step_by(7) {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap.data[idx] += h;
                am.data[idx] -= h;
                let fd = (loss_dssim(&ap, &b, &cfg).unwrap().value - loss_dssim(&am, &b, &cfg).unwrap().value) / (2.0 * h);
                let g = an.data[idx];
                let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "idx {idx}: analytic {g} fd {fd}");
            }
        }
    }
}
