use nalgebra::Vector3;

use super::config::{DensifyConfig, LearningRates};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::optim::{adam_step, AdamState};
use crate::render::GaussianGrads;
use crate::rotation;
use crate::sh::coeff_count;

/// One Adam state per Gaussian attribute group, kept row-aligned with the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudOptimizer {
    sh_degree: usize,
    position: AdamState,
    rotation: AdamState,
    log_scale: AdamState,
    opacity: AdamState,
    sh_dc: AdamState,
    sh_rest: AdamState,
}

impl CloudOptimizer {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let rest = coeff_count(cloud.sh_degree) - 1;
        Self {
            sh_degree: cloud.sh_degree,
            position: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            log_scale: AdamState::new(3 * n),
            opacity: AdamState::new(n),
            sh_dc: AdamState::new(3 * n),
            sh_rest: AdamState::new(3 * rest * n),
        }
    }

    fn rest_stride(&self) -> usize {
        3 * (coeff_count(self.sh_degree) - 1)
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    /// Applies one update with the given position rate; other rates come from `lr`.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &GaussianGrads, lr: &LearningRates, lr_position: f64) -> Result<()> {
        let n = cloud.len();
        if grads.len() != n || self.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "optimizer: cloud {n}, grads {}, state {}",
                grads.len(),
                self.len()
            )));
        }
        let rest = coeff_count(cloud.sh_degree) - 1;
        let gs = &mut cloud.gaussians;

        let mut p: Vec<f64> = gs.iter().flat_map(|g| g.position.iter().copied().collect::<Vec<_>>()).collect();
        let d: Vec<f64> = grads.position.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        adam_step(&mut p, &d, &mut self.position, lr_position, "position")?;
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.position = Vector3::new(c[0], c[1], c[2]);
        }

        let mut p: Vec<f64> = gs.iter().flat_map(|g| g.rotation.iter().copied().collect::<Vec<_>>()).collect();
        let d: Vec<f64> = grads.rotation.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        adam_step(&mut p, &d, &mut self.rotation, lr.rotation, "rotation")?;
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(4)) {
            let q = rotation::Quat::new(c[0], c[1], c[2], c[3]);
            g.rotation = rotation::try_normalize(&q, 1e-12).unwrap_or(rotation::IDENTITY);
        }

        let mut p: Vec<f64> = gs.iter().flat_map(|g| g.log_scale.iter().copied().collect::<Vec<_>>()).collect();
        let d: Vec<f64> = grads.log_scale.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
        adam_step(&mut p, &d, &mut self.log_scale, lr.log_scale, "log_scale")?;
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.log_scale = Vector3::new(c[0], c[1], c[2]);
        }

        let mut p: Vec<f64> = gs.iter().map(|g| g.opacity_logit).collect();
        adam_step(&mut p, &grads.opacity_logit, &mut self.opacity, lr.opacity, "opacity")?;
        for (g, v) in gs.iter_mut().zip(p) {
            g.opacity_logit = v;
        }

        let mut p: Vec<f64> = gs.iter().flat_map(|g| g.sh[0]).collect();
        let d: Vec<f64> = grads.sh.iter().flat_map(|s| s[0]).collect();
        adam_step(&mut p, &d, &mut self.sh_dc, lr.sh_dc, "sh_dc")?;
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.sh[0] = [c[0], c[1], c[2]];
        }

        if rest > 0 {
            let mut p: Vec<f64> = gs.iter().flat_map(|g| g.sh[1..=rest].iter().flatten().copied().collect::<Vec<_>>()).collect();
            let d: Vec<f64> = grads.sh.iter().flat_map(|s| s[1..=rest].iter().flatten().copied().collect::<Vec<_>>()).collect();
            adam_step(&mut p, &d, &mut self.sh_rest, lr.sh_rest, "sh_rest")?;
            for (g, c) in gs.iter_mut().zip(p.chunks_exact(3 * rest)) {
                for k in 0..rest {
                    g.sh[k + 1] = [c[3 * k], c[3 * k + 1], c[3 * k + 2]];
                }
            }
        }
        Ok(())
    }

    fn retain(&mut self, keep: &[bool]) {
        let rest = self.rest_stride();
        self.position.retain_rows(3, keep);
        self.rotation.retain_rows(4, keep);
        self.log_scale.retain_rows(3, keep);
        self.opacity.retain_rows(1, keep);
        self.sh_dc.retain_rows(3, keep);
        if rest > 0 {
            self.sh_rest.retain_rows(rest, keep);
        }
    }

    fn push_zero(&mut self, rows: usize) {
        let rest = self.rest_stride();
        self.position.push_zero_rows(3, rows);
        self.rotation.push_zero_rows(4, rows);
        self.log_scale.push_zero_rows(3, rows);
        self.opacity.push_zero_rows(1, rows);
        self.sh_dc.push_zero_rows(3, rows);
        self.sh_rest.push_zero_rows(rest, rows);
    }
}

/// Running mean of the view-space positional gradient per Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one view's gradients; pixel gradients are converted to NDC units.
    pub fn add(&mut self, grads: &GaussianGrads, image_width: usize) {
        let to_ndc = 0.5 * image_width as f64;
        for i in 0..self.count.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.mean2d_norm[i] * to_ndc;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// What one densify/prune pass changed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

const SPLIT_FACTOR: f64 = 1.6;

fn dominant_axis(g: &Gaussian) -> Vector3<f64> {
    let s = g.scale();
    let k = s.imax();
    rotation::quat_to_rotmat(&g.rotation).column(k) * s[k]
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// transparent ones. Survivors keep their order, children are appended, each
/// child copies its parent's mask, and new optimizer rows start at zero.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    optimizer: Option<&mut CloudOptimizer>,
    cfg: &DensifyConfig,
) -> Result<DensifyReport> {
    let n = cloud.len();
    if stats.count.len() != n {
        return Err(Error::DimensionMismatch(format!("densify stats {} vs cloud {n}", stats.count.len())));
    }
    let budget = cfg.max_gaussians.saturating_sub(n);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) >= cfg.grad_threshold).collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    let mut report = DensifyReport::default();
    let mut keep = vec![true; n];
    let mut children = Vec::new();
    let mut grown = 0;
    for &i in &candidates {
        let g = &cloud.gaussians[i];
        let axis = dominant_axis(g);
        if g.scale().max() > cfg.split_scale {
            if grown + 1 > budget {
                continue;
            }
            grown += 1;
            keep[i] = false;
            for sign in [1.0, -1.0] {
                let mut c = g.clone();
                c.position += axis * sign;
                c.log_scale.add_scalar_mut(-SPLIT_FACTOR.ln());
                children.push(c);
            }
            report.split += 1;
        } else {
            if grown + 1 > budget {
                continue;
            }
            grown += 1;
            let mut c = g.clone();
            c.position += axis;
            children.push(c);
            report.cloned += 1;
        }
    }
    let mut survivors = Vec::with_capacity(n + children.len());
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if keep[i] && g.opacity() < cfg.prune_opacity {
            keep[i] = false;
            report.pruned += 1;
        }
        if keep[i] {
            survivors.push(g.clone());
        }
    }
    let before = children.len();
    children.retain(|c| c.opacity() >= cfg.prune_opacity);
    report.pruned += before - children.len();
    survivors.extend(children.iter().cloned());
    if survivors.is_empty() {
        return Err(Error::EmptyCloud("densify_and_prune"));
    }
    if let Some(opt) = optimizer {
        opt.retain(&keep);
        opt.push_zero(children.len());
    }
    cloud.gaussians = survivors;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::GaussianGrads;

    fn cloud(masks: &[u32], sigma: f64) -> GaussianCloud {
        let mut c = GaussianCloud::new(1);
        for (i, &m) in masks.iter().enumerate() {
            let mut g = Gaussian::isotropic(Vector3::new(i as f64 * 0.1, 0.0, 0.0), sigma, 0.5, [0.5; 3]);
            g.log_scale.x += 0.2;
            g.mask = m;
            c.gaussians.push(g);
        }
        c
    }

    fn stats(values: &[f64]) -> DensifyStats {
        DensifyStats {
            grad_sum: values.to_vec(),
            count: vec![1; values.len()],
        }
    }

    #[test]
    fn below_threshold_only_prunes() {
        let mut c = cloud(&[0, 1, 0], 0.01);
        c.gaussians[1].opacity_logit = -8.0;
        let before = c.clone();
        let mut opt = CloudOptimizer::new(&c);
        let r = densify_and_prune(&mut c, &stats(&[0.0; 3]), Some(&mut opt), &DensifyConfig::default()).unwrap();
        assert_eq!(r, DensifyReport { cloned: 0, split: 0, pruned: 1 });
        assert_eq!(c.gaussians, vec![before.gaussians[0].clone(), before.gaussians[2].clone()]);
        assert_eq!(opt.len(), 2);
    }

    #[test]
    fn split_children_inherit_mask() {
        let mut c = cloud(&[0, 1], 0.05);
        let parent = c.gaussians[1].clone();
        let mut opt = CloudOptimizer::new(&c);
        opt.opacity.m = vec![0.3, 0.7];
        let r = densify_and_prune(&mut c, &stats(&[0.0, 1.0]), Some(&mut opt), &DensifyConfig::default()).unwrap();
        assert_eq!(r.split, 1);
        assert_eq!(c.len(), 3);
        assert!(c.gaussians[1..].iter().all(|g| g.mask == 1));
        let sigma = parent.scale().max();
        let offset = (c.gaussians[1].position - parent.position).norm();
        assert!((offset - sigma).abs() < 1e-12);
        assert!((c.gaussians[1].scale().max() - sigma / SPLIT_FACTOR).abs() < 1e-12);
        assert_eq!(opt.opacity.m, vec![0.3, 0.0, 0.0]);
    }

    #[test]
    fn clone_offsets_along_dominant_axis() {
        let mut c = cloud(&[2], 0.01);
        densify_and_prune(&mut c, &stats(&[1.0]), None, &DensifyConfig::default()).unwrap();
        assert_eq!(c.len(), 2);
        let d = c.gaussians[1].position - c.gaussians[0].position;
        assert!((d.x - c.gaussians[0].scale().x).abs() < 1e-12 && d.y == 0.0);
        assert_eq!(c.gaussians[1].mask, 2);
    }

    #[test]
    fn pruning_everything_is_an_error() {
        let mut c = cloud(&[0, 0], 0.01);
        c.gaussians.iter_mut().for_each(|g| g.opacity_logit = -9.0);
        assert!(matches!(
            densify_and_prune(&mut c, &stats(&[0.0; 2]), None, &DensifyConfig::default()),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn zero_gradient_step_keeps_cloud() {
        let mut c = cloud(&[0, 1], 0.02);
        let before = c.clone();
        let mut opt = CloudOptimizer::new(&c);
        opt.step(&mut c, &GaussianGrads::zeros(2), &LearningRates::default(), 1e-3).unwrap();
        for (a, b) in c.gaussians.iter().zip(&before.gaussians) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.sh, b.sh);
        }
    }
}
