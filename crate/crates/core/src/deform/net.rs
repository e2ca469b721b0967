//! Pointwise deformation network: shared per-point layers followed by an MLP.

use nalgebra::Vector3;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Quat;

pub const OUTPUT_DIM: usize = 7;

/// Layer widths and positional-encoding bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformArch {
    /// Widths of the per-point layers, starting with the 3 input channels.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the MLP head; the output layer (7) is implicit.
    pub mlp_widths: Vec<usize>,
    pub pe_bands: usize,
}

impl Default for DeformArch {
    fn default() -> Self {
        Self {
            point_widths: vec![3, 64, 64, 64, 64],
            mlp_widths: vec![128, 128, 128],
            pe_bands: 4,
        }
    }
}

impl DeformArch {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.len() < 2 || self.point_widths[0] != 3 {
            return Err(Error::Config("point_widths must start at 3 and have at least one layer".into()));
        }
        if self.point_widths.iter().chain(&self.mlp_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn pe_dim(&self) -> usize {
        6 * self.pe_bands
    }

    /// `(fan_in, fan_out)` of every dense layer in order.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<(usize, usize)> = self.point_widths.windows(2).map(|w| (w[0], w[1])).collect();
        let mut prev = self.point_widths[self.point_widths.len() - 1] + self.pe_dim();
        for &w in self.mlp_widths.iter().chain(std::iter::once(&OUTPUT_DIM)) {
            shapes.push((prev, w));
            prev = w;
        }
        shapes
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), &p[self.offset..self.offset + self.fan_in * self.fan_out])
            .expect("layer shape")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let o = self.offset + self.fan_in * self.fan_out;
        &p[o..o + self.fan_out]
    }
}

/// Network with all weights in one flat buffer (row-major `[out][in]` weights
/// followed by biases, layer by layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformNet {
    pub arch: DeformArch,
    pub params: Vec<f64>,
}

/// Per-Gaussian `(δx, δr)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub dx: Vec<Vector3<f64>>,
    pub dr: Vec<Quat>,
}

impl DeformationField {
    pub fn zeros(n: usize) -> Self {
        Self {
            dx: vec![Vector3::zeros(); n],
            dr: vec![Quat::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }
}

/// Activations retained for [`DeformNet::backward`].
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn field(&self) -> DeformationField {
        let o = &self.output;
        DeformationField {
            dx: o.rows().into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
            dr: o.rows().into_iter().map(|r| Quat::new(r[3], r[4], r[5], r[6])).collect(),
        }
    }
}

fn positional_encoding(x: &Array2<f64>, bands: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((x.nrows(), 6 * bands));
    for (i, row) in x.rows().into_iter().enumerate() {
        for c in 0..3 {
            for k in 0..bands {
                let a = (1u64 << k) as f64 * std::f64::consts::PI * row[c];
                pe[[i, c * 2 * bands + 2 * k]] = a.sin();
                pe[[i, c * 2 * bands + 2 * k + 1]] = a.cos();
            }
        }
    }
    pe
}

impl DeformNet {
    /// Uniform `±1/√fan_in` initialization with a zero output layer, so the
    /// fresh network predicts the identity deformation.
    pub fn new(arch: DeformArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        let total: usize = shapes.iter().map(|(i, o)| i * o + o).sum();
        let mut params = Vec::with_capacity(total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = shapes.len() - 1;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(if l == last { 0.0 } else { rng.random_range(-bound..bound) });
            }
        }
        Ok(Self { arch, params })
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = Layer { fan_in, fan_out, offset };
                offset += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward_cached(&self, positions: &[Vector3<f64>]) -> ForwardCache {
        let n = positions.len();
        let x = Array2::from_shape_fn((n, 3), |(i, c)| positions[i][c]);
        let layers = self.layers();
        let n_point = self.arch.point_widths.len() - 1;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut a = x.clone();
        for (l, layer) in layers.iter().enumerate() {
            if l == n_point {
                a = ndarray::concatenate(Axis(1), &[a.view(), positional_encoding(&x, self.arch.pe_bands).view()])
                    .expect("concat");
            }
            let mut z = a.dot(&layer.weights(&self.params).t());
            z += &ndarray::ArrayView1::from(layer.bias(&self.params));
            inputs.push(a);
            if l + 1 < layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        ForwardCache { inputs, output: a }
    }

    /// Evaluates the field at `positions`. Positions are inputs only.
    pub fn forward(&self, positions: &[Vector3<f64>]) -> DeformationField {
        self.forward_cached(positions).field()
    }

    /// Parameter gradient given dL/dδx and dL/dδr per point.
    pub fn backward(&self, cache: &ForwardCache, d_dx: &[Vector3<f64>], d_dr: &[Quat]) -> Vec<f64> {
        let n = d_dx.len();
        let mut dz = Array2::from_shape_fn((n, OUTPUT_DIM), |(i, c)| if c < 3 { d_dx[i][c] } else { d_dr[i][c - 3] });
        let layers = self.layers();
        let n_point = self.arch.point_widths.len() - 1;
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let a = &cache.inputs[l];
            let dw = dz.t().dot(a);
            let w_len = layer.fan_in * layer.fan_out;
            for (dst, src) in grad[layer.offset..layer.offset + w_len].iter_mut().zip(dw.iter()) {
                *dst = *src;
            }
            let db = dz.sum_axis(Axis(0));
            grad[layer.offset + w_len..layer.offset + w_len + layer.fan_out].copy_from_slice(&db.to_vec());
            if l == 0 {
                break;
            }
            let mut da = dz.dot(&layer.weights(&self.params));
            if l == n_point {
                da = da.slice(s![.., ..self.arch.point_widths[n_point]]).to_owned();
            }
            let prev = &cache.inputs[l];
            let prev = prev.slice(s![.., ..da.ncols()]);
            ndarray::Zip::from(&mut da).and(&prev).for_each(|d, &act| {
                if act <= 0.0 {
                    *d = 0.0;
                }
            });
            dz = da;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn fresh_net_is_identity() {
        let net = DeformNet::new(DeformArch::default(), 1).unwrap();
        let f = net.forward(&points(30, 2));
        assert!(f.dx.iter().all(|v| *v == Vector3::zeros()));
        assert!(f.dr.iter().all(|v| *v == Quat::zeros()));
        let expect: usize = (3 * 64 + 64) + 3 * (64 * 64 + 64) + (88 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 7 + 7);
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn permutation_equivariant() {
        let mut net = DeformNet::new(DeformArch::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in &mut net.params {
            *p += rng.random_range(-0.05..0.05);
        }
        let pts = points(20, 6);
        let mut rev = pts.clone();
        rev.reverse();
        let a = net.forward(&pts);
        let b = net.forward(&rev);
        for i in 0..pts.len() {
            assert_eq!(a.dx[i], b.dx[pts.len() - 1 - i]);
            assert_eq!(a.dr[i], b.dr[pts.len() - 1 - i]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let arch = DeformArch {
            point_widths: vec![3, 8, 8],
            mlp_widths: vec![16, 16],
            pe_bands: 2,
        };
        let mut net = DeformNet::new(arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in &mut net.params {
            *p += rng.random_range(-0.3..0.3);
        }
        let pts = points(50, 9);
        let wx: Vec<Vector3<f64>> = points(50, 10);
        let wr: Vec<Quat> = points(50, 11).iter().map(|v| Quat::new(v.x, v.y, v.z, v.x * v.y)).collect();
        let loss = |net: &DeformNet| {
            let f = net.forward(&pts);
            (0..pts.len()).map(|i| f.dx[i].dot(&wx[i]) + f.dr[i].dot(&wr[i])).sum::<f64>()
        };
        let cache = net.forward_cached(&pts);
        let g = net.backward(&cache, &wx, &wr);
        let h = 1e-6;
        for k in 0..net.params.len() {
            let mut np = net.clone();
            np.params[k] += h;
            let fp = loss(&np);
            np.params[k] -= 2.0 * h;
            let fd = (fp - loss(&np)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
    }
}
