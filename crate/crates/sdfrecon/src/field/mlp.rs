//! Batched dense layers with hand-derived reverse-mode gradients.
//!
//! The SDF trunk propagates, besides per-point values, the spatial Jacobian
//! of every activation with respect to the input point (a "dual" forward).
//! Backward therefore has two adjoint channels: one for values and one for
//! the Jacobian entries, which is what lets parameter gradients flow through
//! terms built on the analytic spatial gradient (Eikonal, normals).
//!
//! Layout: values are (n, d) arrays; Jacobians are (3n, d) arrays made of
//! three stacked n-row blocks, one per input coordinate. A linear layer maps
//! both with the same weight matrix.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Softplus(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match self {
            Activation::Softplus(beta) => {
                let bz = beta * z;
                if bz > 30.0 {
                    z
                } else {
                    bz.exp().ln_1p() / beta
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// First derivative.
    #[inline]
    pub fn d1(&self, z: f64) -> f64 {
        match self {
            Activation::Softplus(beta) => 1.0 / (1.0 + (-beta * z).exp()),
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative, needed when backpropagating through the Jacobian
    /// channel.
    #[inline]
    pub fn d2(&self, z: f64) -> f64 {
        match self {
            Activation::Softplus(beta) => {
                let s = 1.0 / (1.0 + (-beta * z).exp());
                beta * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Identity => 0.0,
        }
    }
}

/// z = a W^T + b with W of shape (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }

    pub fn kaiming<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / out_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| gauss(rng) * std);
        Linear { w, b: Array1::zeros(out_dim) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.w.t());
        z += &self.b;
        z
    }

    /// Jacobian rows transform without the bias.
    pub fn forward_jac(&self, ja: &Array2<f64>) -> Array2<f64> {
        ja.dot(&self.w.t())
    }

    /// Accumulates parameter gradients and returns the input adjoint.
    pub fn backward(
        &self,
        a: &Array2<f64>,
        z_adj: &Array2<f64>,
        grads: &mut LinearGrads,
    ) -> Array2<f64> {
        grads.w += &z_adj.t().dot(a);
        grads.b += &z_adj.sum_axis(Axis(0));
        z_adj.dot(&self.w)
    }

    /// Jacobian-channel contribution: parameter gradients from the Jacobian
    /// adjoint, plus the input-Jacobian adjoint.
    pub fn backward_jac(
        &self,
        ja: &Array2<f64>,
        jz_adj: &Array2<f64>,
        grads: &mut LinearGrads,
    ) -> Array2<f64> {
        grads.w += &jz_adj.t().dot(ja);
        jz_adj.dot(&self.w)
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearGrads {
    pub fn zeros_like(layer: &Linear) -> Self {
        LinearGrads { w: Array2::zeros(layer.w.dim()), b: Array1::zeros(layer.b.dim()) }
    }
}

/// Applies the activation in place to values and rescales the Jacobian
/// channel by the local derivative: Ja' = d1(z) * Jz.
pub fn activate_dual(act: Activation, z: &Array2<f64>, jz: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = z.nrows();
    let a = z.mapv(|v| act.value(v));
    let d1 = z.mapv(|v| act.d1(v));
    let mut ja = jz.clone();
    for k in 0..3 {
        let mut block = ja.slice_mut(s![k * n..(k + 1) * n, ..]);
        block *= &d1;
    }
    (a, ja)
}

/// Backward through the activation of a dual forward.
///
/// Given adjoints of (a, Ja) and the cached pre-activation (z, Jz), returns
/// the adjoints of (z, Jz):
///   z_adj  = d1(z).a_adj + d2(z).sum_k(ja_adj_k . jz_k)
///   jz_adj = d1(z).ja_adj
pub fn activate_dual_backward(
    act: Activation,
    z: &Array2<f64>,
    jz: &Array2<f64>,
    a_adj: &Array2<f64>,
    ja_adj: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n = z.nrows();
    let d1 = z.mapv(|v| act.d1(v));
    let d2 = z.mapv(|v| act.d2(v));
    let mut z_adj = a_adj * &d1;
    for k in 0..3 {
        let jz_k = jz.slice(s![k * n..(k + 1) * n, ..]);
        let ja_adj_k = ja_adj.slice(s![k * n..(k + 1) * n, ..]);
        z_adj += &(&d2 * &(&ja_adj_k * &jz_k));
    }
    let mut jz_adj = ja_adj.clone();
    for k in 0..3 {
        let mut block = jz_adj.slice_mut(s![k * n..(k + 1) * n, ..]);
        block *= &d1;
    }
    (z_adj, jz_adj)
}

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Positional encoding with `bands` octaves plus the identity:
/// [x, sin(w_l x), cos(w_l x)] per coordinate, w_l = 2^l * pi.
pub fn encode_points(points: &Array2<f64>, bands: usize) -> (Array2<f64>, Array2<f64>) {
    let n = points.nrows();
    let dim = encoding_dim(bands);
    let mut val = Array2::zeros((n, dim));
    let mut jac = Array2::zeros((3 * n, dim));
    for i in 0..n {
        for k in 0..3 {
            let x = points[(i, k)];
            val[(i, k)] = x;
            jac[(k * n + i, k)] = 1.0;
            for l in 0..bands {
                let w = (1u64 << l) as f64 * std::f64::consts::PI;
                let col = 3 + 6 * l + 2 * k;
                val[(i, col)] = (w * x).sin();
                val[(i, col + 1)] = (w * x).cos();
                jac[(k * n + i, col)] = w * (w * x).cos();
                jac[(k * n + i, col + 1)] = -w * (w * x).sin();
            }
        }
    }
    (val, jac)
}

/// Value-only positional encoding.
pub fn encode_points_values(points: &Array2<f64>, bands: usize) -> Array2<f64> {
    let n = points.nrows();
    let dim = encoding_dim(bands);
    let mut val = Array2::zeros((n, dim));
    for i in 0..n {
        for k in 0..3 {
            let x = points[(i, k)];
            val[(i, k)] = x;
            for l in 0..bands {
                let w = (1u64 << l) as f64 * std::f64::consts::PI;
                let col = 3 + 6 * l + 2 * k;
                val[(i, col)] = (w * x).sin();
                val[(i, col + 1)] = (w * x).cos();
            }
        }
    }
    val
}

pub fn encoding_dim(bands: usize) -> usize {
    3 + 6 * bands
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn softplus_limits() {
        let act = Activation::Softplus(100.0);
        assert_relative_eq!(act.value(1.0), 1.0, epsilon = 1e-9);
        assert!(act.value(-1.0).abs() < 1e-9);
        assert_relative_eq!(act.d1(1.0), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Softplus(10.0), Activation::Sigmoid, Activation::Identity] {
            for z in [-0.7, -0.05, 0.02, 0.4, 1.3] {
                let h = 1e-6;
                let d1_fd = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                let d2_fd = (act.d1(z + h) - act.d1(z - h)) / (2.0 * h);
                assert_relative_eq!(act.d1(z), d1_fd, epsilon = 1e-6, max_relative = 1e-6);
                assert_relative_eq!(act.d2(z), d2_fd, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn encoding_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let points = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-0.9..0.9));
        let bands = 3;
        let (_, jac) = encode_points(&points, bands);
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = points.clone();
            let mut minus = points.clone();
            for i in 0..5 {
                plus[(i, k)] += h;
                minus[(i, k)] -= h;
            }
            let vp = encode_points_values(&plus, bands);
            let vm = encode_points_values(&minus, bands);
            let fd = (&vp - &vm) / (2.0 * h);
            for i in 0..5 {
                for j in 0..encoding_dim(bands) {
                    assert_relative_eq!(
                        jac[(k * 5 + i, j)],
                        fd[(i, j)],
                        epsilon = 1e-4,
                        max_relative = 1e-5
                    );
                }
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let layer = Linear::kaiming(4, 3, &mut rng);
        let a = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        // scalar loss: sum of squares of outputs
        let z = layer.forward(&a);
        let z_adj = 2.0 * &z;
        let mut grads = LinearGrads::zeros_like(&layer);
        let a_adj = layer.backward(&a, &z_adj, &mut grads);

        let h = 1e-6;
        let loss = |l: &Linear, a: &Array2<f64>| l.forward(a).mapv(|v| v * v).sum();
        for idx in [(0, 0), (2, 1), (3, 2)] {
            let mut lp = layer.clone();
            lp.w[idx] += h;
            let mut lm = layer.clone();
            lm.w[idx] -= h;
            let fd = (loss(&lp, &a) - loss(&lm, &a)) / (2.0 * h);
            assert_relative_eq!(grads.w[idx], fd, epsilon = 1e-4, max_relative = 1e-6);
        }
        for i in 0..4 {
            let mut lp = layer.clone();
            lp.b[i] += h;
            let mut lm = layer.clone();
            lm.b[i] -= h;
            let fd = (loss(&lp, &a) - loss(&lm, &a)) / (2.0 * h);
            assert_relative_eq!(grads.b[i], fd, epsilon = 1e-4, max_relative = 1e-6);
        }
        let mut ap = a.clone();
        ap[(1, 2)] += h;
        let mut am = a.clone();
        am[(1, 2)] -= h;
        let fd = (loss(&layer, &ap) - loss(&layer, &am)) / (2.0 * h);
        assert_relative_eq!(a_adj[(1, 2)], fd, epsilon = 1e-4, max_relative = 1e-6);
    }
}
