//! The differentiable signed-distance field: an SDF trunk with positional
//! encoding and skip connection, a color head, and the learned rendering
//! sharpness scalar `s` (kept in log-space so it stays positive).

pub mod adam;
pub mod mlp;

use mlp::{
    activate_dual, activate_dual_backward, encode_points, encode_points_values, encoding_dim,
    gauss, Activation, Linear, LinearGrads,
};
use nalgebra::Vector3;
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite gradient produced by {source_term}: {detail}")]
    NonFiniteGradient { source_term: String, detail: String },
    #[error("gradient shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Architecture of both networks. The defaults are desk-scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FieldConfig {
    pub sdf_layers: usize,
    pub sdf_width: usize,
    pub point_bands: usize,
    /// Hidden-layer indices whose input re-concatenates the point encoding.
    pub skip: Vec<usize>,
    pub feat_dim: usize,
    pub color_layers: usize,
    pub color_width: usize,
    pub view_bands: usize,
    pub init_radius: f64,
    pub s_init: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            sdf_layers: 4,
            sdf_width: 64,
            point_bands: 6,
            skip: vec![2],
            feat_dim: 32,
            color_layers: 2,
            color_width: 64,
            view_bands: 4,
            init_radius: 0.6,
            // The logistic width 1/s must start well below the object
            // scale; short optimization schedules cannot grow s from a
            // diffuse start fast enough, and a wide logistic smears the
            // rendered surface until other losses destroy the geometry.
            // The residual free-space carving bias also shrinks the
            // surface by roughly the logistic width, so s has to be
            // sharp relative to the target accuracy.
            s_init: 60.0,
        }
    }
}

impl FieldConfig {
    /// Small enough for finite-difference testing (<= ~1k parameters per
    /// network).
    pub fn tiny() -> Self {
        FieldConfig {
            sdf_layers: 2,
            sdf_width: 14,
            point_bands: 2,
            skip: vec![1],
            feat_dim: 6,
            color_layers: 2,
            color_width: 10,
            view_bands: 1,
            init_radius: 0.6,
            s_init: 1.0 / 0.3,
        }
    }
}

const SDF_BETA: f64 = 100.0;
const COLOR_BETA: f64 = 10.0;

/// SDF trunk. Output column 0 is the signed distance, the rest is the
/// latent feature vector passed to the color head.
#[derive(Debug, Clone)]
pub struct SdfNetwork {
    pub layers: Vec<Linear>,
    pub skip: Vec<usize>,
    pub bands: usize,
    pub feat_dim: usize,
}

/// Cache of a dual forward pass, consumed by [`SdfNetwork::backward_dual`].
pub struct TrunkCache {
    enc_val: Array2<f64>,
    /// Input to each layer (post-activation, post-concat).
    inputs: Vec<Array2<f64>>,
    input_jacs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    zs: Vec<Array2<f64>>,
    z_jacs: Vec<Array2<f64>>,
}

impl SdfNetwork {
    pub fn geometric_init(cfg: &FieldConfig, rng: &mut StdRng) -> Self {
        let enc_dim = encoding_dim(cfg.point_bands);
        let w = cfg.sdf_width;
        let mut layers = Vec::new();
        for i in 0..cfg.sdf_layers {
            let in_dim = if i == 0 {
                enc_dim
            } else if cfg.skip.contains(&i) {
                w + enc_dim
            } else {
                w
            };
            let mut layer = Linear::kaiming(w, in_dim, rng);
            // zero the weights on encoding channels beyond raw xyz so the
            // initial field is the smooth near-sphere of the geometric init
            if i == 0 {
                layer.w.slice_mut(s![.., 3..]).fill(0.0);
            } else if cfg.skip.contains(&i) {
                layer.w.slice_mut(s![.., w + 3..]).fill(0.0);
            }
            layers.push(layer);
        }
        let out_in = w;
        let out_dim = 1 + cfg.feat_dim;
        let mut out = Linear::zeros(out_dim, out_in);
        let mean = (std::f64::consts::PI / out_in as f64).sqrt();
        for j in 0..out_in {
            out.w[(0, j)] = mean + gauss(rng) * 1e-4;
        }
        out.b[0] = -cfg.init_radius;
        let feat_std = 0.1 * (2.0 / out_in as f64).sqrt();
        for i in 1..out_dim {
            for j in 0..out_in {
                out.w[(i, j)] = gauss(rng) * feat_std;
            }
        }
        layers.push(out);
        SdfNetwork { layers, skip: cfg.skip.clone(), bands: cfg.point_bands, feat_dim: cfg.feat_dim }
    }

    fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Value-only forward: (sdf, features).
    pub fn forward_values(&self, points: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
        let enc = encode_points_values(points, self.bands);
        let mut a = enc.clone();
        for i in 0..self.hidden_count() {
            if i > 0 && self.skip.contains(&i) {
                a = concatenate![Axis(1), a, enc];
            }
            let z = self.layers[i].forward(&a);
            a = z.mapv(|v| Activation::Softplus(SDF_BETA).value(v));
        }
        let out = self.layers[self.hidden_count()].forward(&a);
        (out.column(0).to_owned(), out.slice(s![.., 1..]).to_owned())
    }

    /// Dual forward: values plus spatial Jacobians of (sdf, features), with
    /// a cache for the backward pass. Jacobian arrays stack three n-row
    /// blocks, one per point coordinate.
    pub fn forward_dual(&self, points: &Array2<f64>) -> (Array2<f64>, Array2<f64>, TrunkCache) {
        let (enc_val, enc_jac) = encode_points(points, self.bands);
        let act = Activation::Softplus(SDF_BETA);
        let mut inputs = Vec::new();
        let mut input_jacs = Vec::new();
        let mut zs = Vec::new();
        let mut z_jacs = Vec::new();
        let mut a = enc_val.clone();
        let mut ja = enc_jac.clone();
        for i in 0..self.hidden_count() {
            if i > 0 && self.skip.contains(&i) {
                a = concatenate![Axis(1), a, enc_val];
                ja = concatenate![Axis(1), ja, enc_jac];
            }
            let z = self.layers[i].forward(&a);
            let jz = self.layers[i].forward_jac(&ja);
            inputs.push(a);
            input_jacs.push(ja);
            let (na, nja) = activate_dual(act, &z, &jz);
            zs.push(z);
            z_jacs.push(jz);
            a = na;
            ja = nja;
        }
        let out = self.layers[self.hidden_count()].forward(&a);
        let jout = self.layers[self.hidden_count()].forward_jac(&ja);
        inputs.push(a);
        input_jacs.push(ja);
        (out, jout, TrunkCache { enc_val, inputs, input_jacs, zs, z_jacs })
    }

    /// Backward through a cached dual forward. `out_adj` is (n, 1+feat),
    /// `jout_adj` is (3n, 1+feat); typically only column 0 of the Jacobian
    /// adjoint is populated (the SDF gradient path).
    pub fn backward_dual(
        &self,
        cache: &TrunkCache,
        out_adj: &Array2<f64>,
        jout_adj: &Array2<f64>,
        grads: &mut NetGrads,
    ) {
        let act = Activation::Softplus(SDF_BETA);
        let h = self.hidden_count();
        let mut a_adj = self.layers[h].backward(&cache.inputs[h], out_adj, &mut grads.layers[h]);
        let mut ja_adj =
            self.layers[h].backward_jac(&cache.input_jacs[h], jout_adj, &mut grads.layers[h]);
        for i in (0..h).rev() {
            let (z_adj, jz_adj) =
                activate_dual_backward(act, &cache.zs[i], &cache.z_jacs[i], &a_adj, &ja_adj);
            a_adj = self.layers[i].backward(&cache.inputs[i], &z_adj, &mut grads.layers[i]);
            ja_adj = self.layers[i].backward_jac(&cache.input_jacs[i], &jz_adj, &mut grads.layers[i]);
            if i > 0 && self.skip.contains(&i) {
                // drop the encoding part of the concatenated adjoint
                let keep = a_adj.ncols() - cache.enc_val.ncols();
                a_adj = a_adj.slice(s![.., ..keep]).to_owned();
                ja_adj = ja_adj.slice(s![.., ..keep]).to_owned();
            }
        }
        // adjoint w.r.t. the encoding is discarded: points are not
        // parameters and input gradients come from the Jacobian channel
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }
}

/// Color head: inputs are the point, encoded view direction, unit normal,
/// and the trunk feature vector; outputs RGB squashed into [0,1].
#[derive(Debug, Clone)]
pub struct ColorNetwork {
    pub layers: Vec<Linear>,
    pub view_bands: usize,
    pub feat_dim: usize,
}

pub struct ColorCache {
    inputs: Vec<Array2<f64>>,
    zs: Vec<Array2<f64>>,
    out_z: Array2<f64>,
}

impl ColorNetwork {
    pub fn init(cfg: &FieldConfig, rng: &mut StdRng) -> Self {
        let in_dim = 3 + encoding_dim(cfg.view_bands) + 3 + cfg.feat_dim;
        let mut layers = Vec::new();
        let mut d = in_dim;
        for _ in 0..cfg.color_layers {
            layers.push(Linear::kaiming(cfg.color_width, d, rng));
            d = cfg.color_width;
        }
        layers.push(Linear::kaiming(3, d, rng));
        ColorNetwork { layers, view_bands: cfg.view_bands, feat_dim: cfg.feat_dim }
    }

    /// Assembles the input matrix from the four blocks.
    pub fn assemble_input(
        &self,
        points: &Array2<f64>,
        view_dirs: &Array2<f64>,
        normals: &Array2<f64>,
        features: &Array2<f64>,
    ) -> Array2<f64> {
        let enc_v = encode_points_values(view_dirs, self.view_bands);
        concatenate![Axis(1), points.clone(), enc_v, normals.clone(), features.clone()]
    }

    pub fn forward(&self, input: &Array2<f64>) -> (Array2<f64>, ColorCache) {
        let act = Activation::Softplus(COLOR_BETA);
        let mut inputs = Vec::new();
        let mut zs = Vec::new();
        let mut a = input.clone();
        let hidden = self.layers.len() - 1;
        for i in 0..hidden {
            let z = self.layers[i].forward(&a);
            inputs.push(a);
            a = z.mapv(|v| act.value(v));
            zs.push(z);
        }
        let out_z = self.layers[hidden].forward(&a);
        inputs.push(a);
        let rgb = out_z.mapv(|v| Activation::Sigmoid.value(v));
        (rgb, ColorCache { inputs, zs, out_z })
    }

    pub fn forward_values(&self, input: &Array2<f64>) -> Array2<f64> {
        self.forward(input).0
    }

    /// Backward; returns the adjoint of the assembled input matrix. The
    /// caller splits it into per-block adjoints (normal and feature blocks
    /// feed back into the trunk).
    pub fn backward(
        &self,
        cache: &ColorCache,
        rgb_adj: &Array2<f64>,
        grads: &mut NetGrads,
    ) -> Array2<f64> {
        let act = Activation::Softplus(COLOR_BETA);
        let hidden = self.layers.len() - 1;
        let sig_d = cache.out_z.mapv(|v| Activation::Sigmoid.d1(v));
        let z_adj = rgb_adj * &sig_d;
        let mut a_adj =
            self.layers[hidden].backward(&cache.inputs[hidden], &z_adj, &mut grads.layers[hidden]);
        for i in (0..hidden).rev() {
            let d1 = cache.zs[i].mapv(|v| act.d1(v));
            let z_adj = &a_adj * &d1;
            a_adj = self.layers[i].backward(&cache.inputs[i], &z_adj, &mut grads.layers[i]);
        }
        a_adj
    }

    /// Offsets of (normal, feature) blocks within the assembled input.
    pub fn block_offsets(&self) -> (usize, usize) {
        let normal_off = 3 + encoding_dim(self.view_bands);
        (normal_off, normal_off + 3)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }
}

/// Per-network parameter gradients, mirroring the layer structure.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LinearGrads>,
}

impl NetGrads {
    pub fn zeros_like(layers: &[Linear]) -> Self {
        NetGrads { layers: layers.iter().map(LinearGrads::zeros_like).collect() }
    }
}

/// Gradients for every parameter of an [`ImplicitField`]. `source_term`
/// names the loss term that produced them, used in diagnostics when a
/// non-finite value is rejected.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub sdf: NetGrads,
    pub color: NetGrads,
    pub log_s: f64,
    pub source_term: String,
}

impl FieldGrads {
    pub fn zeros_like(field: &ImplicitField) -> Self {
        FieldGrads {
            sdf: NetGrads::zeros_like(&field.sdf.layers),
            color: NetGrads::zeros_like(&field.color.layers),
            log_s: 0.0,
            source_term: "total".into(),
        }
    }
}

/// Output of a full field evaluation at one point.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    pub sdf: f64,
    pub gradient: Vector3<f64>,
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
}

/// The optimizable field: SDF trunk, color head, and log of the rendering
/// sharpness scalar.
#[derive(Debug, Clone)]
pub struct ImplicitField {
    pub config: FieldConfig,
    pub sdf: SdfNetwork,
    pub color: ColorNetwork,
    pub log_s: f64,
}

impl ImplicitField {
    pub fn new(config: FieldConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let sdf = SdfNetwork::geometric_init(&config, &mut rng);
        let color = ColorNetwork::init(&config, &mut rng);
        let log_s = config.s_init.ln();
        ImplicitField { config, sdf, color, log_s }
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn eval_sdf(&self, points: &Array2<f64>) -> Array1<f64> {
        self.sdf.forward_values(points).0
    }

    /// Analytic spatial gradients of the SDF at each point.
    pub fn eval_gradient(&self, points: &Array2<f64>) -> Array2<f64> {
        let n = points.nrows();
        let (_, jout, _) = self.sdf.forward_dual(points);
        let mut grads = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                grads[(i, k)] = jout[(k * n + i, 0)];
            }
        }
        grads
    }

    /// Full evaluation at a batch of points with unit view directions.
    pub fn eval(&self, points: &Array2<f64>, view_dirs: &Array2<f64>) -> Vec<FieldOutput> {
        let n = points.nrows();
        let (out, jout, _) = self.sdf.forward_dual(points);
        let feats = out.slice(s![.., 1..]).to_owned();
        let mut normals = Array2::zeros((n, 3));
        for i in 0..n {
            let g = Vector3::new(jout[(i, 0)], jout[(n + i, 0)], jout[(2 * n + i, 0)]);
            let u = g / g.norm().max(1e-12);
            normals[(i, 0)] = u.x;
            normals[(i, 1)] = u.y;
            normals[(i, 2)] = u.z;
        }
        let input = self.color.assemble_input(points, view_dirs, &normals, &feats);
        let rgb = self.color.forward_values(&input);
        (0..n)
            .map(|i| FieldOutput {
                sdf: out[(i, 0)],
                gradient: Vector3::new(jout[(i, 0)], jout[(n + i, 0)], jout[(2 * n + i, 0)]),
                color: Vector3::new(
                    rgb[(i, 0)].clamp(0.0, 1.0),
                    rgb[(i, 1)].clamp(0.0, 1.0),
                    rgb[(i, 2)].clamp(0.0, 1.0),
                ),
                feature: feats.row(i).to_vec(),
            })
            .collect()
    }

    /// Flat little-endian-friendly parameter vector order:
    /// sdf layers (w row-major, then b), color layers, log_s.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in self.sdf.layers.iter().chain(self.color.layers.iter()) {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v.push(self.log_s);
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut i = 0;
        for l in self.sdf.layers.iter_mut().chain(self.color.layers.iter_mut()) {
            for w in l.w.iter_mut() {
                *w = flat[i];
                i += 1;
            }
            for b in l.b.iter_mut() {
                *b = flat[i];
                i += 1;
            }
        }
        self.log_s = flat[i];
        assert_eq!(i + 1, flat.len(), "parameter vector length mismatch");
    }

    pub fn n_params(&self) -> usize {
        self.sdf.n_params() + self.color.n_params() + 1
    }

    pub fn assert_finite(&self) -> Result<(), FieldError> {
        for (li, l) in self.sdf.layers.iter().chain(self.color.layers.iter()).enumerate() {
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(FieldError::NonFiniteGradient {
                    source_term: "parameters".into(),
                    detail: format!("layer {li} contains non-finite values"),
                });
            }
        }
        Ok(())
    }
}

pub fn flatten_grads(field: &ImplicitField, grads: &FieldGrads) -> Vec<f64> {
    let _ = field;
    let mut v = Vec::new();
    for g in grads.sdf.layers.iter().chain(grads.color.layers.iter()) {
        v.extend(g.w.iter());
        v.extend(g.b.iter());
    }
    v.push(grads.log_s);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_field(seed: u64) -> ImplicitField {
        ImplicitField::new(FieldConfig::tiny(), seed)
    }

    #[test]
    fn tiny_config_is_fd_sized() {
        let f = tiny_field(0);
        assert!(f.sdf.n_params() <= 1000, "sdf has {} params", f.sdf.n_params());
        assert!(f.color.n_params() <= 1000, "color has {} params", f.color.n_params());
    }

    #[test]
    fn geometric_init_sign_convention() {
        for seed in 0..4 {
            let f = ImplicitField::new(FieldConfig::default(), seed);
            let r = f.config.init_radius;
            let pts = ndarray::array![
                [0.0, 0.0, 0.0],
                [2.0 * r, 0.0, 0.0],
                [0.0, -2.0 * r, 0.0],
                [0.0, 0.0, 2.0 * r]
            ];
            let sdf = f.eval_sdf(&pts);
            assert!(sdf[0] < 0.0, "seed {seed}: origin not inside ({})", sdf[0]);
            for i in 1..4 {
                assert!(sdf[i] > 0.0, "seed {seed}: point {i} not outside ({})", sdf[i]);
            }
        }
    }

    #[test]
    fn eval_sdf_deterministic() {
        let f = tiny_field(9);
        let pts = ndarray::array![[0.1, -0.2, 0.3], [0.5, 0.5, -0.5]];
        let a = f.eval_sdf(&pts);
        let b = f.eval_sdf(&pts);
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = tiny_field(4);
        let mut rng = StdRng::seed_from_u64(10);
        use rand::Rng;
        let pts = Array2::from_shape_fn((100, 3), |_| rng.gen_range(-0.9..0.9));
        let grads = f.eval_gradient(&pts);
        let h = 1e-4;
        for k in 0..3 {
            let mut plus = pts.clone();
            let mut minus = pts.clone();
            for i in 0..pts.nrows() {
                plus[(i, k)] += h;
                minus[(i, k)] -= h;
            }
            let fp = f.eval_sdf(&plus);
            let fm = f.eval_sdf(&minus);
            for i in 0..pts.nrows() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let denom = fd.abs().max(1e-5);
                assert!(
                    (grads[(i, k)] - fd).abs() / denom < 1e-3,
                    "grad mismatch at point {i} coord {k}: {} vs {fd}",
                    grads[(i, k)]
                );
            }
        }
    }

    #[test]
    fn dual_forward_values_agree_with_plain_forward() {
        let f = tiny_field(12);
        let mut rng = StdRng::seed_from_u64(3);
        use rand::Rng;
        let pts = Array2::from_shape_fn((17, 3), |_| rng.gen_range(-1.0..1.0));
        let (v1, feat1) = f.sdf.forward_values(&pts);
        let (out, _, _) = f.sdf.forward_dual(&pts);
        for i in 0..pts.nrows() {
            assert_relative_eq!(v1[i], out[(i, 0)], epsilon = 1e-12);
            for j in 0..f.sdf.feat_dim {
                assert_relative_eq!(feat1[(i, j)], out[(i, 1 + j)], epsilon = 1e-12);
            }
        }
    }

    /// Parameter gradients of a scalar function of (sdf, grad, feat) match
    /// central finite differences. This exercises the full dual backward.
    #[test]
    fn trunk_parameter_gradients_match_fd() {
        let f = tiny_field(21);
        let mut rng = StdRng::seed_from_u64(8);
        use rand::Rng;
        let pts = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-0.8..0.8));

        // loss = sum((sdf,feat)^2) + sum(grad^2)
        let loss_of = |net: &SdfNetwork| -> f64 {
            let (out, jout, _) = net.forward_dual(&pts);
            out.mapv(|v| v * v).sum() + jout.column(0).mapv(|v| v * v).sum()
        };

        let (out, jout, cache) = f.sdf.forward_dual(&pts);
        let out_adj = 2.0 * &out;
        let mut jout_adj = Array2::zeros(jout.dim());
        for i in 0..jout.nrows() {
            jout_adj[(i, 0)] = 2.0 * jout[(i, 0)];
        }
        let mut grads = NetGrads::zeros_like(&f.sdf.layers);
        f.sdf.backward_dual(&cache, &out_adj, &jout_adj, &mut grads);

        let h = 1e-5;
        let mut checked = 0;
        let mut rng2 = StdRng::seed_from_u64(99);
        for li in 0..f.sdf.layers.len() {
            for _ in 0..6 {
                let r = rng2.gen_range(0..f.sdf.layers[li].w.nrows());
                let c = rng2.gen_range(0..f.sdf.layers[li].w.ncols());
                let mut np = f.sdf.clone();
                np.layers[li].w[(r, c)] += h;
                let mut nm = f.sdf.clone();
                nm.layers[li].w[(r, c)] -= h;
                let fd = (loss_of(&np) - loss_of(&nm)) / (2.0 * h);
                let got = grads.layers[li].w[(r, c)];
                let denom = fd.abs().max(1e-5);
                assert!(
                    (got - fd).abs() / denom < 1e-3,
                    "layer {li} w[{r},{c}]: {got} vs {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 18);
    }

    #[test]
    fn color_head_range_and_determinism() {
        let f = tiny_field(31);
        let mut rng = StdRng::seed_from_u64(14);
        use rand::Rng;
        let n = 9;
        let pts = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let mut dirs = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        for i in 0..n {
            let norm = (0..3).map(|k| dirs[(i, k)] * dirs[(i, k)]).sum::<f64>().sqrt();
            for k in 0..3 {
                dirs[(i, k)] /= norm;
            }
        }
        let normals = dirs.clone();
        let feats = Array2::from_shape_fn((n, f.config.feat_dim), |_| rng.gen_range(-1.0..1.0));
        let input = f.color.assemble_input(&pts, &dirs, &normals, &feats);
        let rgb = f.color.forward_values(&input);
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let rgb2 = f.color.forward_values(&input);
        assert_eq!(rgb, rgb2);
    }

    #[test]
    fn color_parameter_and_input_gradients_match_fd() {
        let f = tiny_field(41);
        let mut rng = StdRng::seed_from_u64(15);
        use rand::Rng;
        let n = 5;
        let input = Array2::from_shape_fn(
            (n, 3 + encoding_dim(f.color.view_bands) + 3 + f.config.feat_dim),
            |_| rng.gen_range(-1.0..1.0),
        );
        let loss_of = |net: &ColorNetwork, input: &Array2<f64>| -> f64 {
            net.forward_values(input).mapv(|v| v * v).sum()
        };
        let (rgb, cache) = f.color.forward(&input);
        let rgb_adj = 2.0 * &rgb;
        let mut grads = NetGrads::zeros_like(&f.color.layers);
        let in_adj = f.color.backward(&cache, &rgb_adj, &mut grads);

        let h = 1e-5;
        let mut rng2 = StdRng::seed_from_u64(7);
        for li in 0..f.color.layers.len() {
            for _ in 0..5 {
                let r = rng2.gen_range(0..f.color.layers[li].w.nrows());
                let c = rng2.gen_range(0..f.color.layers[li].w.ncols());
                let mut np = f.color.clone();
                np.layers[li].w[(r, c)] += h;
                let mut nm = f.color.clone();
                nm.layers[li].w[(r, c)] -= h;
                let fd = (loss_of(&np, &input) - loss_of(&nm, &input)) / (2.0 * h);
                let got = grads.layers[li].w[(r, c)];
                assert!(
                    (got - fd).abs() / fd.abs().max(1e-5) < 1e-3,
                    "layer {li} w[{r},{c}]: {got} vs {fd}"
                );
            }
        }
        for _ in 0..10 {
            let i = rng2.gen_range(0..n);
            let j = rng2.gen_range(0..input.ncols());
            let mut ip = input.clone();
            ip[(i, j)] += h;
            let mut im = input.clone();
            im[(i, j)] -= h;
            let fd = (loss_of(&f.color, &ip) - loss_of(&f.color, &im)) / (2.0 * h);
            assert!(
                (in_adj[(i, j)] - fd).abs() / fd.abs().max(1e-5) < 1e-3,
                "input adj [{i},{j}]: {} vs {fd}",
                in_adj[(i, j)]
            );
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut f = tiny_field(55);
        let flat = f.flatten_params();
        assert_eq!(flat.len(), f.n_params());
        let mut flat2 = flat.clone();
        for v in flat2.iter_mut() {
            *v += 0.125;
        }
        f.set_params(&flat2);
        let got = f.flatten_params();
        for (a, b) in got.iter().zip(flat2.iter()) {
            assert_eq!(a, b);
        }
    }
}
