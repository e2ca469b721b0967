use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::rotation::{self, Quat};
use crate::spatial;

const MIN_QUAT_NORM: f64 = 1e-8;

/// Frozen neighbor lists and pair weights `exp(-λω‖xj - xi‖²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub fn knn_build(positions: &[Vector3<f64>], k: usize, lambda_omega: f64) -> Result<KnnGraph> {
    if positions.len() < 2 {
        return Err(Error::DegenerateMask {
            count: positions.len(),
            required: 2,
        });
    }
    let lists = spatial::knn(positions, k);
    Ok(KnnGraph {
        neighbors: lists.iter().map(|l| l.iter().map(|&(j, _)| j).collect()).collect(),
        weights: lists
            .iter()
            .map(|l| l.iter().map(|&(_, d2)| (-lambda_omega * d2).exp()).collect())
            .collect(),
    })
}

/// ARAP value with gradients for the deformed positions and the raw
/// (unnormalized) deformed rotations.
#[derive(Clone, Debug)]
pub struct ArapValue {
    pub value: f64,
    pub d_position: Vec<Vector3<f64>>,
    pub d_rotation: Vec<Quat>,
}

/// Mean over sampled nodes `i` and their neighbors `j` of
/// `ω‖(xj - xi) - Ri R̂iᵀ (x̂j - x̂i)‖`.
///
/// `after_rotations` may be unnormalized; they are normalized before use and
/// the gradient flows through the normalization.
pub fn arap_loss_raw(
    before: &GaussianCloud,
    after_positions: &[Vector3<f64>],
    after_rotations: &[Quat],
    graph: &KnnGraph,
    sample: &[usize],
) -> Result<ArapValue> {
    let n = before.len();
    if after_positions.len() != n || after_rotations.len() != n || graph.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "ARAP: cloud {n}, positions {}, rotations {}, graph {}",
            after_positions.len(),
            after_rotations.len(),
            graph.len()
        )));
    }
    let mut d_position = vec![Vector3::zeros(); n];
    let mut d_rotation = vec![Quat::zeros(); n];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for &i in sample {
        let gi = &before.gaussians[i];
        let raw = after_rotations[i];
        let unit = rotation::try_normalize(&raw, MIN_QUAT_NORM).ok_or(Error::DegenerateRotation {
            index: i,
            norm: raw.norm(),
        })?;
        let r0 = rotation::quat_to_rotmat(&gi.rotation);
        let r1 = rotation::quat_to_rotmat(&unit);
        let m = r0 * r1.transpose();
        let mut d_m = Matrix3::zeros();
        for (&j, &w) in graph.neighbors[i].iter().zip(&graph.weights[i]) {
            pairs += 1;
            let rest = before.gaussians[j].position - gi.position;
            let moved = after_positions[j] - after_positions[i];
            let e = rest - m * moved;
            let len = e.norm();
            total += w * len;
            if len > 0.0 {
                let de = e * (w / len);
                let dmoved = -(m.transpose() * de);
                d_position[j] += dmoved;
                d_position[i] -= dmoved;
                d_m -= de * moved.transpose();
            }
        }
        let d_r1 = d_m.transpose() * r0;
        d_rotation[i] += rotation::normalize_vjp(&raw, &rotation::rotmat_vjp(&unit, &d_r1));
    }
    if pairs == 0 {
        return Ok(ArapValue {
            value: 0.0,
            d_position,
            d_rotation,
        });
    }
    let scale = 1.0 / pairs as f64;
    d_position.iter_mut().for_each(|g| *g *= scale);
    d_rotation.iter_mut().for_each(|g| *g *= scale);
    Ok(ArapValue {
        value: total * scale,
        d_position,
        d_rotation,
    })
}

/// ARAP between two clouds with identical ordering.
pub fn arap_loss(before: &GaussianCloud, after: &GaussianCloud, graph: &KnnGraph, sample: &[usize]) -> Result<ArapValue> {
    if before.len() != after.len() {
        return Err(Error::DimensionMismatch(format!("ARAP: {} vs {} Gaussians", before.len(), after.len())));
    }
    let pos = after.positions();
    let rot: Vec<Quat> = after.gaussians.iter().map(|g| g.rotation).collect();
    arap_loss_raw(before, &pos, &rot, graph, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = GaussianCloud::new(0);
        for _ in 0..n {
            let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let mut g = Gaussian::isotropic(p, 0.05, 0.8, [0.5; 3]);
            g.rotation = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            c.gaussians.push(g);
        }
        c
    }

    #[test]
    fn knn_examples() {
        let same = [Vector3::zeros(), Vector3::zeros()];
        assert_eq!(knn_build(&same, 1, 20.0).unwrap().weights[0], vec![1.0]);
        let pair = [Vector3::zeros(), Vector3::new(0.1f64.sqrt(), 0.0, 0.0)];
        assert_relative_eq!(knn_build(&pair, 1, 20.0).unwrap().weights[0][0], 0.135_335_283, epsilon = 1e-9);
        let line = [Vector3::zeros(), Vector3::x(), Vector3::new(3.0, 0.0, 0.0)];
        assert_eq!(knn_build(&line, 1, 20.0).unwrap().neighbors, vec![vec![1], vec![0], vec![1]]);
        let g = knn_build(&line, 20, 20.0).unwrap();
        assert!(g.neighbors.iter().enumerate().all(|(i, l)| l.len() == 2 && !l.contains(&i)));
        assert!(knn_build(&line[..1], 1, 20.0).is_err());
    }

    #[test]
    fn identity_and_single_translation() {
        let c = random_cloud(30, 1);
        let g = knn_build(&c.positions(), 5, 20.0).unwrap();
        let all: Vec<usize> = (0..30).collect();
        assert!(arap_loss(&c, &c, &g, &all).unwrap().value < 1e-12);

        let mut two = GaussianCloud::new(0);
        two.gaussians.push(Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.5; 3]));
        two.gaussians.push(Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.5; 3]));
        let g = knn_build(&two.positions(), 1, 20.0).unwrap();
        let mut moved = two.clone();
        moved.gaussians[1].position = Vector3::new(0.0, 0.003, 0.0);
        let v = arap_loss(&two, &moved, &g, &[0]).unwrap();
        assert_relative_eq!(v.value, 0.003, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = random_cloud(12, 2);
        let g = knn_build(&c.positions(), 4, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<Vector3<f64>> = c
            .positions()
            .iter()
            .map(|p| p + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect();
        let rot: Vec<Quat> = c
            .gaussians
            .iter()
            .map(|g| g.rotation * 1.3 + Quat::new(rng.random_range(-0.2..0.2), 0.1, -0.1, rng.random_range(-0.2..0.2)))
            .collect();
        let sample = [0, 3, 4, 7, 11];
        let v = arap_loss_raw(&c, &pos, &rot, &g, &sample).unwrap();
        let f = |p: &[Vector3<f64>], r: &[Quat]| arap_loss_raw(&c, p, r, &g, &sample).unwrap().value;
        let h = 1e-6;
        for i in 0..c.len() {
            for k in 0..3 {
                let (mut pp, mut pm) = (pos.clone(), pos.clone());
                pp[i][k] += h;
                pm[i][k] -= h;
                assert_relative_eq!(v.d_position[i][k], (f(&pp, &rot) - f(&pm, &rot)) / (2.0 * h), epsilon = 1e-7, max_relative = 1e-4);
            }
            for k in 0..4 {
                let (mut rp, mut rm) = (rot.clone(), rot.clone());
                rp[i][k] += h;
                rm[i][k] -= h;
                assert_relative_eq!(v.d_rotation[i][k], (f(&pos, &rp) - f(&pos, &rm)) / (2.0 * h), epsilon = 1e-7, max_relative = 1e-4);
            }
        }
    }
}
