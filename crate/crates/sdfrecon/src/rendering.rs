//! Ray sampling and volume rendering: SDF-to-alpha conversion through the
//! logistic CDF, transmittance weights, and the accumulated color, depth,
//! and feature-similarity outputs. Backward companions return the exact
//! derivatives the training loop needs.

use crate::geometry::Ray;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sorted sample distances along one ray and the corresponding points.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub distances: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    /// Section lengths between consecutive samples (N-1 entries).
    pub section_lengths: Vec<f64>,
}

impl RaySamples {
    pub fn from_distances(ray: &Ray, distances: Vec<f64>) -> Self {
        debug_assert!(distances.windows(2).all(|w| w[0] < w[1]));
        let points = distances.iter().map(|&t| ray.at(t)).collect();
        let section_lengths = distances.windows(2).map(|w| w[1] - w[0]).collect();
        RaySamples { distances, points, section_lengths }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Per-ray render outputs.
#[derive(Debug, Clone)]
pub struct RenderResult {
    pub weights: Vec<f64>,
    pub rendered_color: Vector3<f64>,
    pub rendered_depth: f64,
    pub weight_sum: f64,
    /// Accumulated weighted similarity per source view.
    pub feature_similarity: Vec<f64>,
}

/// Below this accumulated weight a rendered depth is not meaningful.
pub const WEIGHT_SUM_VALID: f64 = 0.01;

pub const DEPTH_NORM_EPS: f64 = 1e-6;

impl RenderResult {
    pub fn depth_valid(&self) -> bool {
        self.weight_sum > WEIGHT_SUM_VALID && self.rendered_depth.is_finite()
    }
}

/// Stratified coarse distances: one uniform sample per stratum of
/// [near, far].
pub fn stratified_distances(near: f64, far: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(n >= 2, "need at least 2 coarse samples");
    let step = (far - near) / n as f64;
    (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * step).collect()
}

/// Draws `n_importance` distances from the distribution given by per-section
/// coarse weights, uniform within the chosen section.
pub fn importance_distances(
    coarse: &[f64],
    weights: &[f64],
    n_importance: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    debug_assert_eq!(weights.len() + 1, coarse.len());
    let total: f64 = weights.iter().sum();
    if total <= 1e-12 || n_importance == 0 {
        // nothing to refine: fall back to uniform over the full range
        let (near, far) = (coarse[0], *coarse.last().unwrap());
        return (0..n_importance)
            .map(|_| near + rng.gen::<f64>() * (far - near))
            .collect();
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    (0..n_importance)
        .map(|_| {
            let u: f64 = rng.gen();
            let sec = cdf.partition_point(|c| *c < u).min(weights.len() - 1);
            let lo = coarse[sec];
            let hi = coarse[sec + 1];
            lo + rng.gen::<f64>() * (hi - lo)
        })
        .collect()
}

/// Coarse stratified sampling plus importance samples drawn from the coarse
/// weight distribution, merged and sorted. `sdf_at` evaluates the field at
/// the coarse points; `s` is the current sharpness.
pub fn sample_ray<F>(
    ray: &Ray,
    sdf_at: F,
    s: f64,
    n_coarse: usize,
    n_importance: usize,
    rng: &mut ChaCha8Rng,
) -> RaySamples
where
    F: Fn(&[Vector3<f64>]) -> Vec<f64>,
{
    let mut distances = stratified_distances(ray.near, ray.far, n_coarse, rng);
    if n_importance > 0 {
        let points: Vec<_> = distances.iter().map(|&t| ray.at(t)).collect();
        let sdf = sdf_at(&points);
        let alphas = sdf_to_alpha(&sdf, s);
        let weights = compute_weights(&alphas);
        let extra = importance_distances(&distances, &weights, n_importance, rng);
        distances.extend(extra);
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distances.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    }
    RaySamples::from_distances(ray, distances)
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// NeuS opacity: alpha_i = max((Phi_s(f_i) - Phi_s(f_{i+1})) / Phi_s(f_i), 0)
/// with Phi_s the logistic sigmoid of sharpness s. N values give N-1 alphas.
pub fn sdf_to_alpha(sdf: &[f64], s: f64) -> Vec<f64> {
    assert!(s > 0.0);
    assert!(sdf.len() >= 2);
    let phi: Vec<f64> = sdf.iter().map(|f| logistic(s * f)).collect();
    phi.windows(2).map(|w| ((w[0] - w[1]) / w[0].max(1e-300)).max(0.0)).collect()
}

/// Per-section derivatives of the alphas: returns
/// (alphas, d_alpha/d_f_i, d_alpha/d_f_{i+1}, d_alpha/d_s).
/// Clamped sections carry zero derivatives.
pub fn sdf_to_alpha_grad(sdf: &[f64], s: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = sdf.len() - 1;
    let mut alphas = Vec::with_capacity(n);
    let mut d_fi = Vec::with_capacity(n);
    let mut d_fi1 = Vec::with_capacity(n);
    let mut d_s = Vec::with_capacity(n);
    for i in 0..n {
        let (f0, f1) = (sdf[i], sdf[i + 1]);
        let p0 = logistic(s * f0);
        let p1 = logistic(s * f1);
        let raw = (p0 - p1) / p0.max(1e-300);
        if raw <= 0.0 {
            alphas.push(0.0);
            d_fi.push(0.0);
            d_fi1.push(0.0);
            d_s.push(0.0);
            continue;
        }
        // alpha = 1 - p1/p0
        let dp0_df = s * p0 * (1.0 - p0);
        let dp1_df = s * p1 * (1.0 - p1);
        let dp0_ds = f0 * p0 * (1.0 - p0);
        let dp1_ds = f1 * p1 * (1.0 - p1);
        let inv_p0 = 1.0 / p0.max(1e-300);
        alphas.push(raw.min(1.0));
        d_fi.push(p1 * inv_p0 * inv_p0 * dp0_df);
        d_fi1.push(-inv_p0 * dp1_df);
        d_s.push(p1 * inv_p0 * inv_p0 * dp0_ds - inv_p0 * dp1_ds);
    }
    (alphas, d_fi, d_fi1, d_s)
}

/// w_i = alpha_i * prod_{j<i} (1 - alpha_j).
pub fn compute_weights(alphas: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    alphas
        .iter()
        .map(|&a| {
            let w = a * t;
            t *= 1.0 - a;
            w
        })
        .collect()
}

/// Residual transmittance after the last section, prod (1 - alpha_i).
pub fn residual_transmittance(alphas: &[f64]) -> f64 {
    alphas.iter().fold(1.0, |t, a| t * (1.0 - a))
}

/// Adjoint of [`compute_weights`]: given dL/dw, returns dL/dalpha.
pub fn weights_backward(alphas: &[f64], weights: &[f64], w_adj: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    let mut trans = Vec::with_capacity(n);
    let mut t = 1.0;
    for a in alphas {
        trans.push(t);
        t *= 1.0 - a;
    }
    // suffix[j] = sum_{i>j} w_adj_i * w_i
    let mut alpha_adj = vec![0.0; n];
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let one_minus = 1.0 - alphas[j];
        let cross = if one_minus.abs() < 1e-12 { 0.0 } else { -suffix / one_minus };
        alpha_adj[j] = w_adj[j] * trans[j] + cross;
        suffix += w_adj[j] * weights[j];
    }
    alpha_adj
}

/// Accumulates color, normalized expected termination depth, and per-source
/// feature similarity. `weights`, `colors`, `distances`, and each
/// similarity list must have equal length.
pub fn render(
    weights: &[f64],
    colors: &[Vector3<f64>],
    distances: &[f64],
    per_sample_similarities: &[Vec<f64>],
) -> RenderResult {
    assert_eq!(weights.len(), colors.len());
    assert_eq!(weights.len(), distances.len());
    let weight_sum: f64 = weights.iter().sum();
    let mut color = Vector3::zeros();
    let mut depth_num = 0.0;
    for i in 0..weights.len() {
        color += weights[i] * colors[i];
        depth_num += weights[i] * distances[i];
    }
    let rendered_depth = depth_num / weight_sum.max(DEPTH_NORM_EPS);
    let feature_similarity = per_sample_similarities
        .iter()
        .map(|sims| render_feature_similarity(weights, sims))
        .collect();
    RenderResult {
        weights: weights.to_vec(),
        rendered_color: color,
        rendered_depth,
        weight_sum,
        feature_similarity,
    }
}

/// The weighted similarity accumulation: A = sum_i w_i * sim_i.
/// Out-of-view samples must arrive with similarity 0.
pub fn render_feature_similarity(weights: &[f64], per_sample: &[f64]) -> f64 {
    assert_eq!(weights.len(), per_sample.len());
    weights.iter().zip(per_sample).map(|(w, s)| w * s).sum()
}

/// d(depth)/d(w_i) for the normalized expected termination depth.
pub fn depth_backward(weights: &[f64], distances: &[f64], depth: f64, depth_adj: f64) -> Vec<f64> {
    let wsum: f64 = weights.iter().sum();
    let den = wsum.max(DEPTH_NORM_EPS);
    let normalized = wsum > DEPTH_NORM_EPS;
    distances
        .iter()
        .map(|&t| {
            let d = if normalized { (t - depth) / den } else { t / den };
            depth_adj * d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn test_ray() -> Ray {
        Ray {
            origin: Vector3::new(0.0, 0.0, -2.0),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 1.0,
            far: 3.0,
        }
    }

    #[test]
    fn coarse_only_sampling_one_per_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = sample_ray(&test_ray(), |_| vec![], 3.0, 16, 0, &mut rng);
        assert_eq!(samples.len(), 16);
        let step = 2.0 / 16.0;
        for (i, t) in samples.distances.iter().enumerate() {
            assert!(*t >= 1.0 + i as f64 * step && *t < 1.0 + (i + 1) as f64 * step);
        }
        assert!(samples.section_lengths.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn sampling_is_deterministic_given_rng_state() {
        let field = |pts: &[Vector3<f64>]| pts.iter().map(|p| p.norm() - 0.5).collect::<Vec<_>>();
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let a = sample_ray(&test_ray(), field, 10.0, 16, 8, &mut rng1);
        let b = sample_ray(&test_ray(), field, 10.0, 16, 8, &mut rng2);
        assert_eq!(a.distances, b.distances);
    }

    #[test]
    fn importance_sampling_concentrates() {
        // coarse grid over [0,1] with all weight in stratum 7 of 16
        let coarse: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        let mut weights = vec![0.0; 16];
        weights[7] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = importance_distances(&coarse, &weights, 10_000, &mut rng);
        let width = 1.0 / 16.0;
        let lo = 7.0 * width - width;
        let hi = 8.0 * width + width;
        let inside = draws.iter().filter(|t| **t >= lo && **t <= hi).count();
        assert!(inside as f64 >= 0.8 * draws.len() as f64, "only {inside} of 10k inside");
    }

    #[test]
    fn constant_sdf_gives_zero_alphas() {
        let alphas = sdf_to_alpha(&[0.3; 8], 10.0);
        assert!(alphas.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn increasing_sdf_clamps_to_zero() {
        let sdf: Vec<f64> = (0..8).map(|i| -0.2 + 0.1 * i as f64).collect();
        let alphas = sdf_to_alpha(&sdf, 10.0);
        assert!(alphas.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn alpha_matches_logistic_oracle() {
        // f_i = +0.1, f_{i+1} = -0.1, s = 10
        let alphas = sdf_to_alpha(&[0.1, -0.1], 10.0);
        let phi = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = (phi(1.0) - phi(-1.0)) / phi(1.0);
        assert_relative_eq!(alphas[0], want, epsilon = 1e-12);
    }

    #[test]
    fn alpha_gradients_match_fd() {
        let sdf = vec![0.25, 0.1, -0.02, -0.2, -0.05, 0.3];
        let s = 7.0;
        let (_, d_fi, d_fi1, d_s) = sdf_to_alpha_grad(&sdf, s);
        let h = 1e-6;
        for i in 0..sdf.len() - 1 {
            let mut p = sdf.clone();
            p[i] += h;
            let mut m = sdf.clone();
            m[i] -= h;
            let fd = (sdf_to_alpha(&p, s)[i] - sdf_to_alpha(&m, s)[i]) / (2.0 * h);
            assert_relative_eq!(d_fi[i], fd, epsilon = 1e-5, max_relative = 1e-5);

            let mut p = sdf.clone();
            p[i + 1] += h;
            let mut m = sdf.clone();
            m[i + 1] -= h;
            let fd = (sdf_to_alpha(&p, s)[i] - sdf_to_alpha(&m, s)[i]) / (2.0 * h);
            assert_relative_eq!(d_fi1[i], fd, epsilon = 1e-5, max_relative = 1e-5);

            let fd = (sdf_to_alpha(&sdf, s + h)[i] - sdf_to_alpha(&sdf, s - h)[i]) / (2.0 * h);
            assert_relative_eq!(d_s[i], fd, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(compute_weights(&[1.0, 0.7]), vec![1.0, 0.0]);
        assert_eq!(compute_weights(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
        let w = compute_weights(&[0.5, 0.5]);
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn weights_backward_matches_fd() {
        let alphas = vec![0.2, 0.5, 0.1, 0.8, 0.3];
        let w_adj: Vec<f64> = vec![0.7, -0.3, 1.1, 0.2, -0.5];
        let weights = compute_weights(&alphas);
        let alpha_adj = weights_backward(&alphas, &weights, &w_adj);
        let h = 1e-7;
        let loss = |a: &[f64]| -> f64 {
            compute_weights(a).iter().zip(&w_adj).map(|(w, g)| w * g).sum()
        };
        for j in 0..alphas.len() {
            let mut p = alphas.clone();
            p[j] += h;
            let mut m = alphas.clone();
            m[j] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert_relative_eq!(alpha_adj[j], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn render_depth_examples() {
        let colors = vec![Vector3::zeros(); 3];
        let r = render(&[0.0, 1.0, 0.0], &colors, &[1.0, 2.0, 3.0], &[]);
        assert_relative_eq!(r.rendered_depth, 2.0, epsilon = 1e-12);
        assert!(r.depth_valid());

        let r = render(&[0.0, 0.0, 0.0], &colors, &[1.0, 2.0, 3.0], &[]);
        assert!(!r.depth_valid());
    }

    #[test]
    fn single_opaque_section_depth_exact() {
        let alphas = vec![0.0, 1.0, 0.0];
        let w = compute_weights(&alphas);
        let colors = vec![Vector3::new(0.2, 0.4, 0.6); 3];
        let r = render(&w, &colors, &[0.5, 1.25, 2.0], &[]);
        assert_eq!(r.rendered_depth, 1.25 / 1.0f64.max(DEPTH_NORM_EPS));
    }

    #[test]
    fn feature_similarity_examples() {
        let w = vec![0.25, 0.25, 0.5];
        assert_relative_eq!(render_feature_similarity(&w, &[1.0, 1.0, 1.0]), 1.0, epsilon = 1e-12);
        assert_eq!(render_feature_similarity(&[0.0; 3], &[0.4, 0.9, -0.3]), 0.0);
    }

    #[test]
    fn feature_similarity_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..0.2)).collect();
            let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut want = 0.0;
            for i in 0..8 {
                want += w[i] * s[i];
            }
            assert!((render_feature_similarity(&w, &s) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_backward_matches_fd() {
        let weights = vec![0.1, 0.4, 0.2];
        let distances = vec![1.0, 1.5, 2.2];
        let colors = vec![Vector3::zeros(); 3];
        let r = render(&weights, &colors, &distances, &[]);
        let g = depth_backward(&weights, &distances, r.rendered_depth, 1.0);
        let h = 1e-7;
        for i in 0..3 {
            let mut p = weights.clone();
            p[i] += h;
            let mut m = weights.clone();
            m[i] -= h;
            let dp = render(&p, &colors, &distances, &[]).rendered_depth;
            let dm = render(&m, &colors, &distances, &[]).rendered_depth;
            assert_relative_eq!(g[i], (dp - dm) / (2.0 * h), epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    proptest! {
        /// Weight non-negativity, sum bound, and the telescoping identity
        /// for arbitrary alpha vectors.
        #[test]
        fn weight_invariants(alphas in proptest::collection::vec(0.0f64..=1.0, 2..32)) {
            let w = compute_weights(&alphas);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            let sum: f64 = w.iter().sum();
            prop_assert!(sum <= 1.0 + 1e-6);
            let resid = residual_transmittance(&alphas);
            prop_assert!((sum + resid - 1.0).abs() < 1e-9);
            // closed form: sum = 1 - prod(1 - a)
            prop_assert!((sum - (1.0 - resid)).abs() < 1e-9);
        }

        #[test]
        fn alphas_in_unit_interval(
            sdf in proptest::collection::vec(-1.0f64..1.0, 2..16),
            s in 0.5f64..50.0,
        ) {
            let alphas = sdf_to_alpha(&sdf, s);
            prop_assert_eq!(alphas.len(), sdf.len() - 1);
            prop_assert!(alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }
}
