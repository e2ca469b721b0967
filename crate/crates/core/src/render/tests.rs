use super::*;
use crate::gaussian::{logit, Gaussian};
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn axis_camera(size: usize, focal: f64) -> Camera {
    Camera {
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        fx: focal,
        fy: focal,
        cx: 32.0,
        cy: 32.0,
        width: size,
        height: size,
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(degree);
    for _ in 0..n {
        let mut g = Gaussian::isotropic(
            Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
            0.1,
            0.5,
            [0.5; 3],
        );
        g.rotation = Quat::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        g.log_scale = Vector3::from_fn(|_, _| rng.random_range(-2.6..-1.6));
        g.opacity_logit = logit(rng.random_range(0.2..0.8));
        for k in 0..sh::coeff_count(degree) {
            for c in 0..3 {
                g.sh[k][c] = if k == 0 { rng.random_range(-1.2..1.2) } else { rng.random_range(-0.2..0.2) };
            }
        }
        cloud.gaussians.push(g);
    }
    cloud
}

fn scene_camera(size: usize) -> Camera {
    Camera::look_at(Vector3::new(0.4, -2.2, 1.0), Vector3::zeros(), Vector3::z(), size, size, size as f64)
}

#[test]
fn projection_examples() {
    let cam = axis_camera(64, 100.0);
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.02, 0.5, [0.5; 3]);
    let p = project_gaussian(&g, &cam);
    assert!(p.visible);
    assert_relative_eq!(p.mean2d, Vector2::new(32.0, 32.0), epsilon = 1e-12);
    // Isotropic sigma at depth z on the axis: (f sigma / z)^2 + blur.
    let z = 2.0;
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.05, 0.5, [0.5; 3]);
    let p = project_gaussian(&g, &cam);
    let want = (100.0 * 0.05 / z).powi(2) + BLUR;
    assert_relative_eq!(p.cov2d, Matrix2::new(want, 0.0, 0.0, want), epsilon = 1e-9);
    let behind = Gaussian::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.05, 0.5, [0.5; 3]);
    assert!(!project_gaussian(&behind, &cam).visible);
}

#[test]
fn off_axis_covariance_matches_direct_jacobian() {
    let cam = scene_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = random_scene(&mut rng, 1, 0);
    let g = &cloud.gaussians[0];
    let p = project_gaussian(g, &cam);
    // Jacobian of the pinhole map by central differences.
    let proj = |x: &Vector3<f64>| {
        let t = cam.to_camera(x);
        Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy)
    };
    let h = 1e-6;
    let mut jac = Matrix2x3::zeros();
    for k in 0..3 {
        let mut xp = g.position;
        let mut xm = g.position;
        xp[k] += h;
        xm[k] -= h;
        jac.set_column(k, &((proj(&xp) - proj(&xm)) / (2.0 * h)));
    }
    let want = jac * g.covariance() * jac.transpose() + Matrix2::identity() * BLUR;
    assert_relative_eq!(p.cov2d, want, epsilon = 1e-6);
    assert_relative_eq!(p.mean2d, proj(&g.position), epsilon = 1e-12);
}

#[test]
fn empty_cloud_renders_background() {
    let cam = scene_camera(16);
    let r = rasterize(&GaussianCloud::new(1), &cam, &RenderOptions::default());
    assert!(r.image.data.iter().all(|&v| v == 1.0));
}

#[test]
fn single_centered_gaussian_shows_its_opacity() {
    let cam = axis_camera(64, 100.0);
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.03, 0.7, [0.2, 0.6, 0.9]);
    let cloud = GaussianCloud {
        sh_degree: 1,
        gaussians: vec![g],
    };
    let opts = RenderOptions {
        background: [0.0; 3],
        threads: 1,
    };
    let r = rasterize(&cloud, &cam, &opts);
    let px = r.image.pixel(32, 32);
    for (v, c) in px.iter().zip([0.2, 0.6, 0.9]) {
        assert_relative_eq!(*v, 0.7 * c, epsilon = 1e-12);
    }
}

#[test]
fn two_splat_compositing_oracle() {
    let cam = axis_camera(64, 100.0);
    let front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.03, 0.5, [1.0, 0.0, 0.0]);
    let back = Gaussian::isotropic(Vector3::new(0.01, 0.0, 3.0), 0.04, 0.6, [0.0, 0.0, 1.0]);
    // Hand-evaluated alpha of the back splat at pixel (32, 32).
    let pb = project_gaussian(&back, &cam);
    let d = Vector2::new(32.0, 32.0) - pb.mean2d;
    let alpha_back = 0.6 * (-0.5 * (d.transpose() * pb.cov2d.try_inverse().unwrap() * d)[(0, 0)]).exp();
    let cloud = GaussianCloud {
        sh_degree: 0,
        // Deliberately back-to-front in storage order.
        gaussians: vec![back, front],
    };
    let bg = [0.3, 0.3, 0.3];
    let r = rasterize(&cloud, &cam, &RenderOptions { background: bg, threads: 1 });
    let px = r.image.pixel(32, 32);
    let want = [
        0.5 * 1.0 + 0.3 * 0.5 * (1.0 - alpha_back),
        0.3 * 0.5 * (1.0 - alpha_back),
        0.5 * alpha_back + 0.3 * 0.5 * (1.0 - alpha_back),
    ];
    for c in 0..3 {
        assert_relative_eq!(px[c], want[c], epsilon = 1e-12);
    }
}

#[test]
fn weights_sum_to_one_and_pixels_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let cloud = random_scene(&mut rng, 10, 1);
        let cam = scene_camera(16);
        let r = rasterize(&cloud, &cam, &RenderOptions::default());
        for y in 0..16 {
            for x in 0..16 {
                assert_relative_eq!(r.weight_sum(x, y), 1.0, epsilon = 1e-9);
            }
        }
        assert!(r.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn threaded_forward_and_backward_match_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cloud = random_scene(&mut rng, 30, 1);
    let cam = scene_camera(40);
    let seq = rasterize(&cloud, &cam, &RenderOptions::default());
    let par = rasterize(&cloud, &cam, &RenderOptions { threads: 3, ..Default::default() });
    assert_eq!(seq.image, par.image);
    let target = Image::filled(40, 40, [0.2, 0.4, 0.6]);
    let d = loss_l1(&seq.image, &target).unwrap().grad;
    let gs = rasterize_backward(&cloud, &cam, &seq, &d).unwrap();
    let gp = rasterize_backward(&cloud, &cam, &par, &d).unwrap();
    let gp2 = rasterize_backward(&cloud, &cam, &par, &d).unwrap();
    assert_eq!(gp, gp2);
    for i in 0..cloud.len() {
        assert_relative_eq!(gs.position[i], gp.position[i], epsilon = 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = random_scene(&mut rng, 5, 1);
    let cam = scene_camera(16);
    let r = rasterize(&cloud, &cam, &RenderOptions::default());
    let g = rasterize_backward(&cloud, &cam, &r, &Image::new(16, 16)).unwrap();
    assert!(g.position.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    assert!(g.opacity_logit.iter().all(|&x| x == 0.0));
    assert!(g.sh.iter().all(|k| k.iter().flatten().all(|&x| x == 0.0)));
}

#[test]
fn single_splat_opacity_gradient_closed_form() {
    let cam = axis_camera(64, 100.0);
    let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.03, 0.4, [0.2, 0.6, 0.9]);
    let cloud = GaussianCloud {
        sh_degree: 0,
        gaussians: vec![g.clone()],
    };
    let opts = RenderOptions {
        background: [0.0; 3],
        threads: 1,
    };
    let r = rasterize(&cloud, &cam, &opts);
    for ch in 0..3 {
        let mut d = Image::new(64, 64);
        d.data[r.image.index(32, 32) + ch] = 1.0;
        let grads = rasterize_backward(&cloud, &cam, &r, &d).unwrap();
        let o = g.opacity();
        assert_relative_eq!(grads.opacity_logit[0], o * (1.0 - o) * [0.2, 0.6, 0.9][ch], epsilon = 1e-12);
    }
}

#[test]
fn mismatched_buffers_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_scene(&mut rng, 5, 1);
    let cam = scene_camera(16);
    let r = rasterize(&cloud, &cam, &RenderOptions::default());
    let mut other = cloud.clone();
    other.gaussians[0].position.x += 0.01;
    let err = rasterize_backward(&other, &cam, &r, &Image::new(16, 16)).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
}

/// Flat view of one Gaussian's parameters for finite differencing.
fn param_count(degree: usize) -> usize {
    11 + 3 * sh::coeff_count(degree)
}

fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3..=6 => &mut g.rotation[k - 3],
        7..=9 => &mut g.log_scale[k - 7],
        10 => &mut g.opacity_logit,
        _ => {
            let j = k - 11;
            &mut g.sh[j / 3][j % 3]
        }
    }
}

fn grad_of(grads: &GaussianGrads, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => grads.position[i][k],
        3..=6 => grads.rotation[i][k - 3],
        7..=9 => grads.log_scale[i][k - 7],
        10 => grads.opacity_logit[i],
        _ => {
            let j = k - 11;
            grads.sh[i][j / 3][j % 3]
        }
    }
}

#[test]
fn backward_matches_finite_differences_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = AppearanceLossConfig {
        background: [1.0; 3],
        ..Default::default()
    };
    let opts = RenderOptions::default();
    let mut checked = 0;
    for _ in 0..3 {
        let cloud = random_scene(&mut rng, 5, 1);
        let cam = scene_camera(16);
        let target = Image {
            width: 16,
            height: 16,
            data: (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let eval = |c: &GaussianCloud| {
            let r = rasterize(c, &cam, &opts);
            (loss_app(&r.image, &target, &cfg).unwrap().value, r.stats.event_hash)
        };
        let r = rasterize(&cloud, &cam, &opts);
        let lv = loss_app(&r.image, &target, &cfg).unwrap();
        let grads = rasterize_backward(&cloud, &cam, &r, &lv.grad).unwrap();
        let h = 1e-5;
        for i in 0..cloud.len() {
            for k in 0..param_count(1) {
                let mut cp = cloud.clone();
                *param_mut(&mut cp.gaussians[i], k) += h;
                let mut cm = cloud.clone();
                *param_mut(&mut cm.gaussians[i], k) -= h;
                let (fp, hp) = eval(&cp);
                let (fm, hm) = eval(&cm);
                if hp != r.stats.event_hash || hm != r.stats.event_hash {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let an = grad_of(&grads, i, k);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "gaussian {i} param {k}: analytic {an:e} fd {fd:e}");
                checked += 1;
            }
        }
    }
    assert!(checked > 200, "only {checked} parameters checked");
}
