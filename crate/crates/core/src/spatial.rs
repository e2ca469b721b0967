//! Exact nearest-neighbor queries over small point sets.

use nalgebra::Vector3;

/// Index and squared distance of the nearest point in `points` to each query.
/// Ties go to the lower index.
pub fn nearest(queries: &[Vector3<f64>], points: &[Vector3<f64>]) -> Vec<(usize, f64)> {
    queries
        .iter()
        .map(|q| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, p) in points.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// The `k` nearest other points of every point, sorted by (distance, index).
pub fn knn(points: &[Vector3<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = k.min(points.len().saturating_sub(1));
    points
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, p) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = (p - q).norm_squared();
                if best.len() == k && d >= best[k - 1].1 {
                    continue;
                }
                let at = best.partition_point(|&(_, bd)| bd <= d);
                best.insert(at, (j, d));
                best.truncate(k);
            }
            best
        })
        .collect()
}
