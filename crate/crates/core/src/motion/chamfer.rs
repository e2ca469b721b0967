use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::spatial;

/// Chamfer value with its gradient with respect to the first set.
#[derive(Clone, Debug)]
pub struct ChamferValue {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
}

/// Sum of the two directed mean squared nearest-neighbor distances.
///
/// Nearest-neighbor assignments are held fixed for the gradient.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<ChamferValue> {
    if a.is_empty() {
        return Err(Error::EmptySet("chamfer source"));
    }
    if b.is_empty() {
        return Err(Error::EmptySet("chamfer target"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![Vector3::zeros(); a.len()];
    let mut ab = 0.0;
    for (i, (j, d)) in spatial::nearest(a, b).into_iter().enumerate() {
        ab += d;
        grad[i] += (a[i] - b[j]) * (2.0 / na);
    }
    let mut ba = 0.0;
    for (j, (i, d)) in spatial::nearest(b, a).into_iter().enumerate() {
        ba += d;
        grad[i] += (a[i] - b[j]) * (2.0 / nb);
    }
    Ok(ChamferValue {
        value: ab / na + ba / nb,
        grad,
    })
}
