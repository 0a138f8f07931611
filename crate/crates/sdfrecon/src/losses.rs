//! Training objectives: feature consistency (with ablation variants),
//! reprojection depth confidence and the calibrated depth constraint,
//! color pixel/patch warping, the Eikonal regularizer, and the weighted
//! total.
//!
//! Sign conventions: every loss here is non-negative except the `l1`/`l2`
//! feature modes, which return the mean of negated accumulated distances
//! and therefore live in (-inf, 0].

use crate::geometry::{project, Camera, Projection, Ray};
use crate::rendering::RenderResult;
use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
}

/// Counters for soft failures that must not abort a training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossWarnings {
    /// Batches whose occlusion mask removed every ray.
    pub empty_feature_mask: usize,
    /// Patches skipped because a sample fell outside an image.
    pub skipped_patches: usize,
}

/// Reduction variant for the feature consistency objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Weighted similarity accumulated along the ray; loss 1 - A.
    Accumulate,
    /// Keeps the printed 1/N factor, flooring the loss at 1 - 1/N.
    SampleMean,
    /// Accumulated negative L1 distance; loss is -A (non-positive).
    L1,
    /// Accumulated negative L2 distance; loss is -A (non-positive).
    L2,
    /// Similarity evaluated only at the rendered surface point.
    OnSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Uncertainty-weighted squared error against the calibrated prior.
    Uncertainty,
    /// Prior re-fit against rendered depth each batch, then unweighted.
    Mono,
}

/// Per-pixel monocular depth up to an affine ambiguity, plus the fitted
/// calibration mapping it to metric depth: D ~ a * map + b.
#[derive(Debug, Clone)]
pub struct DepthPrior {
    pub map: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub a: f64,
    pub b: f64,
    pub degenerate: bool,
}

impl DepthPrior {
    pub fn new(map: Vec<f32>, width: usize, height: usize) -> Self {
        assert_eq!(map.len(), width * height);
        DepthPrior { map, width, height, a: 1.0, b: 0.0, degenerate: false }
    }

    /// Bilinear sample of the raw prior; None outside the image or when
    /// any contributing pixel is invalid (NaN).
    pub fn sample(&self, uv: &Vector2<f64>) -> Option<f64> {
        bilinear_scalar(&self.map, self.width, self.height, uv)
    }

    /// Calibrated metric depth a * map(uv) + b.
    pub fn calibrated(&self, uv: &Vector2<f64>) -> Option<f64> {
        self.sample(uv).map(|d| self.a * d + self.b)
    }
}

/// Per-view keypoint observations: pixel location and metric depth
/// (distance from the camera center).
#[derive(Debug, Clone, Default)]
pub struct SparseKeypoints {
    pub entries: Vec<(Vector2<f64>, f64)>,
}

/// Scalar components of one training batch plus the per-ray gates.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_feat: f64,
    pub l_depth: f64,
    pub l_color_pixel: f64,
    pub l_color_patch: f64,
    pub l_eik: f64,
    /// Free-space carving term: mean squared accumulated weight on rays
    /// whose depth-prior lookup fails (background / unobserved pixels).
    pub l_free: f64,
    pub total: f64,
    pub confidence: Vec<f64>,
    pub uncertainty: Vec<f64>,
    /// Occlusion mask per (ray, source) pair.
    pub mask: Vec<Vec<bool>>,
}

/// Row-major RGB raster with f32 channels in [0,1].
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(data: Vec<f32>, width: usize, height: usize) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 3;
        Vector3::new(self.data[i] as f64, self.data[i + 1] as f64, self.data[i + 2] as f64)
    }

    /// Bilinear RGB sample; None outside the pixel-center hull.
    pub fn sample(&self, uv: &Vector2<f64>) -> Option<Vector3<f64>> {
        let (x0, y0, fx, fy) = bilinear_setup(self.width, self.height, uv)?;
        let mut out = Vector3::zeros();
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                out += self.pixel(x0 + dx, y0 + dy) * (wx * wy);
            }
        }
        Some(out)
    }

    /// Bilinear grayscale sample (channel mean).
    pub fn sample_gray(&self, uv: &Vector2<f64>) -> Option<f64> {
        self.sample(uv).map(|c| (c.x + c.y + c.z) / 3.0)
    }
}

fn bilinear_setup(
    width: usize,
    height: usize,
    uv: &Vector2<f64>,
) -> Option<(usize, usize, f64, f64)> {
    if !uv.x.is_finite() || !uv.y.is_finite() {
        return None;
    }
    if uv.x < 0.0 || uv.y < 0.0 || uv.x > (width - 1) as f64 || uv.y > (height - 1) as f64 {
        return None;
    }
    let x0 = (uv.x.floor() as usize).min(width - 2);
    let y0 = (uv.y.floor() as usize).min(height - 2);
    Some((x0, y0, uv.x - x0 as f64, uv.y - y0 as f64))
}

fn bilinear_scalar(data: &[f32], width: usize, height: usize, uv: &Vector2<f64>) -> Option<f64> {
    if width < 2 || height < 2 {
        return None;
    }
    let (x0, y0, fx, fy) = bilinear_setup(width, height, uv)?;
    let mut out = 0.0;
    for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
            let v = data[(y0 + dy) * width + (x0 + dx)] as f64;
            if !v.is_finite() {
                return None;
            }
            out += v * wx * wy;
        }
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Feature consistency
// ---------------------------------------------------------------------------

/// Feature consistency over a batch. `renders[r].feature_similarity[s]` is
/// the weight-accumulated per-sample similarity A for ray r against source
/// s, computed upstream with the similarity matching `mode` (cosine for
/// accumulate/sample_mean, negative L1/L2 distance for l1/l2).
/// `surface_sims[r][s]`, required for on_surface, is the similarity at the
/// rendered surface point.
pub fn feature_consistency_loss(
    renders: &[RenderResult],
    surface_sims: Option<&[Vec<f64>]>,
    masks: &[Vec<bool>],
    mode: FeatureMode,
    warnings: &mut LossWarnings,
) -> f64 {
    assert_eq!(renders.len(), masks.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, render) in renders.iter().enumerate() {
        let n = render.weights.len();
        match mode {
            FeatureMode::OnSurface => {
                let sims = surface_sims.expect("on_surface mode needs surface similarities");
                for (si, &sim) in sims[r].iter().enumerate() {
                    if !masks[r][si] {
                        continue;
                    }
                    sum += 1.0 - sim;
                    count += 1;
                }
            }
            _ => {
                for (si, &a) in render.feature_similarity.iter().enumerate() {
                    if !masks[r][si] {
                        continue;
                    }
                    sum += match mode {
                        FeatureMode::Accumulate => 1.0 - a,
                        FeatureMode::SampleMean => 1.0 - a / n as f64,
                        FeatureMode::L1 | FeatureMode::L2 => -a,
                        FeatureMode::OnSurface => unreachable!(),
                    };
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        warnings.empty_feature_mask += 1;
        return 0.0;
    }
    sum / count as f64
}

/// d l_feat / d A for every (ray, source): the coefficient multiplying the
/// accumulated-similarity adjoint during backprop. Zero rows for masked-out
/// rays and for on_surface mode (whose loss does not touch A).
pub fn feature_consistency_coeffs(
    renders: &[RenderResult],
    masks: &[Vec<bool>],
    mode: FeatureMode,
) -> Vec<Vec<f64>> {
    let count: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    renders
        .iter()
        .zip(masks)
        .map(|(render, mask)| {
            let n = render.weights.len();
            render
                .feature_similarity
                .iter()
                .enumerate()
                .map(|(si, _)| {
                    if count == 0 || !mask[si] {
                        return 0.0;
                    }
                    match mode {
                        FeatureMode::Accumulate => -1.0 / count as f64,
                        FeatureMode::SampleMean => -1.0 / (n as f64 * count as f64),
                        FeatureMode::L1 | FeatureMode::L2 => -1.0 / count as f64,
                        FeatureMode::OnSurface => 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Depth confidence (Eq. 4) and the depth constraint
// ---------------------------------------------------------------------------

/// Confidence from the forward-backward reprojection error.
pub fn confidence_from_error(e: f64) -> f64 {
    if e <= 1.0 {
        (-e).exp()
    } else {
        0.0
    }
}

/// Forward-backward reprojection consistency of one rendered depth.
/// `source_depth_fn` renders the along-ray depth at an arbitrary source
/// pixel from the same field snapshot (None when invalid). Any failure along
/// the round trip (out of view, invalid depth) counts as occluded: C_d = 0.
pub fn depth_confidence(
    ray_pixel: &Vector2<f64>,
    rendered_depth: f64,
    cam_ref: &Camera,
    cam_src: &Camera,
    source_depth_fn: &dyn Fn(&Vector2<f64>) -> Option<f64>,
    tau: f64,
) -> (f64, f64, bool) {
    let c = depth_confidence_inner(ray_pixel, rendered_depth, cam_ref, cam_src, source_depth_fn)
        .unwrap_or(0.0);
    (c, 1.0 - c, c > tau)
}

fn depth_confidence_inner(
    ray_pixel: &Vector2<f64>,
    rendered_depth: f64,
    cam_ref: &Camera,
    cam_src: &Camera,
    source_depth_fn: &dyn Fn(&Vector2<f64>) -> Option<f64>,
) -> Option<f64> {
    if !(rendered_depth > 0.0) {
        return None;
    }
    let point = point_at_depth(cam_ref, ray_pixel, rendered_depth);
    let Projection::Pixel(s_uv) = project(&point, cam_src) else {
        return None;
    };
    if !cam_src.contains_pixel(&s_uv) {
        return None;
    }
    let d_s = source_depth_fn(&s_uv)?;
    if !(d_s > 0.0) {
        return None;
    }
    let back = point_at_depth(cam_src, &s_uv, d_s);
    let Projection::Pixel(r_hat) = project(&back, cam_ref) else {
        return None;
    };
    let e = (ray_pixel - r_hat).norm();
    Some(confidence_from_error(e))
}

/// World point at along-ray distance `depth` behind pixel `uv`.
fn point_at_depth(camera: &Camera, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    let dir = (camera.r.transpose()
        * (camera.k.try_inverse().expect("invertible K") * Vector3::new(uv.x, uv.y, 1.0)))
    .normalize();
    camera.center() + dir * depth
}

/// Fitted affine calibration for a depth prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
    pub degenerate: bool,
}

/// Least-squares fit of keypoint depths against the prior:
/// minimize sum_i (a * prior(p_i) + b - depth_i)^2 via the 2x2 normal
/// equations. Fewer than 2 usable points or all-equal prior values fall
/// back to the identity calibration, flagged.
pub fn calibrate_depth(prior: &DepthPrior, keypoints: &SparseKeypoints) -> Calibration {
    let pairs: Vec<(f64, f64)> = keypoints
        .entries
        .iter()
        .filter_map(|(uv, depth)| prior.sample(uv).map(|p| (p, *depth)))
        .collect();
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Calibration { a: 1.0, b: 0.0, degenerate: true };
    }
    let sx: f64 = pairs.iter().map(|p| p.0).sum();
    let sy: f64 = pairs.iter().map(|p| p.1).sum();
    let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    // det = n^2 * variance of prior values; vanishes when all are equal
    if det <= 1e-12 * n * n * (1.0 + sxx / n) {
        return Calibration { a: 1.0, b: 0.0, degenerate: true };
    }
    let a = (n * sxy - sx * sy) / det;
    let b = (sy - a * sx) / n;
    Calibration { a, b, degenerate: false }
}

/// Sum of squared residuals of a calibration on the keypoints it can see.
pub fn calibration_residual(prior: &DepthPrior, keypoints: &SparseKeypoints, a: f64, b: f64) -> f64 {
    keypoints
        .entries
        .iter()
        .filter_map(|(uv, depth)| prior.sample(uv).map(|p| (a * p + b - depth).powi(2)))
        .sum()
}

/// Depth constraint over a batch. `pixels[r]` is the ray's reference pixel,
/// `valid[r]` gates rays whose rendered depth is meaningful. Rays whose
/// prior is invalid are excluded from the mean.
pub fn depth_loss(
    rendered_depths: &[f64],
    valid: &[bool],
    pixels: &[Vector2<f64>],
    prior: &DepthPrior,
    uncertainties: &[f64],
    mode: DepthMode,
) -> f64 {
    depth_loss_terms(rendered_depths, valid, pixels, prior, uncertainties, mode).0
}

/// d l_depth / d rendered_depth per ray.
pub fn depth_loss_backward(
    rendered_depths: &[f64],
    valid: &[bool],
    pixels: &[Vector2<f64>],
    prior: &DepthPrior,
    uncertainties: &[f64],
    mode: DepthMode,
) -> Vec<f64> {
    depth_loss_terms(rendered_depths, valid, pixels, prior, uncertainties, mode).1
}

fn depth_loss_terms(
    rendered_depths: &[f64],
    valid: &[bool],
    pixels: &[Vector2<f64>],
    prior: &DepthPrior,
    uncertainties: &[f64],
    mode: DepthMode,
) -> (f64, Vec<f64>) {
    let n = rendered_depths.len();
    assert!(valid.len() == n && pixels.len() == n && uncertainties.len() == n);
    // usable rays with their raw prior value
    let rays: Vec<(usize, f64)> = (0..n)
        .filter(|&r| valid[r] && rendered_depths[r].is_finite())
        .filter_map(|r| prior.sample(&pixels[r]).map(|p| (r, p)))
        .collect();
    let mut grad = vec![0.0; n];
    if rays.is_empty() {
        return (0.0, grad);
    }
    let (a, b, weights): (f64, f64, Vec<f64>) = match mode {
        DepthMode::Uncertainty => (prior.a, prior.b, rays.iter().map(|&(r, _)| uncertainties[r]).collect()),
        DepthMode::Mono => {
            // re-fit the prior against rendered depth on this batch; the fit
            // itself is treated as a constant for gradient purposes
            let kp = SparseKeypoints {
                entries: rays.iter().map(|&(r, _)| (pixels[r], rendered_depths[r])).collect(),
            };
            let cal = calibrate_depth(prior, &kp);
            (cal.a, cal.b, vec![1.0; rays.len()])
        }
    };
    let count = rays.len() as f64;
    let mut sum = 0.0;
    for (&(r, p), &w) in rays.iter().zip(&weights) {
        let resid = a * p + b - rendered_depths[r];
        sum += w * resid * resid;
        grad[r] = -2.0 * w * resid / count;
    }
    (sum / count, grad)
}

// ---------------------------------------------------------------------------
// Color losses (Eq. 6)
// ---------------------------------------------------------------------------

/// One posed input view: camera plus its RGB image.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// 5x5 patch offsets at half-pixel spacing.
pub const PATCH_OFFSETS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
pub const PATCH_LEN: usize = 25;

/// Plane-induced homography mapping reference pixels to source pixels for
/// the tangent plane at `point` with unit `normal` (world coordinates).
pub fn plane_homography(
    cam_ref: &Camera,
    cam_src: &Camera,
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Option<Matrix3<f64>> {
    let r_rel = cam_src.r * cam_ref.r.transpose();
    let t_rel = cam_src.t - r_rel * cam_ref.t;
    let n_ref = cam_ref.r * normal;
    let x_ref = cam_ref.r * point + cam_ref.t;
    let d = n_ref.dot(&x_ref); // plane {X : n_ref . X = d} in ref camera frame
    if d.abs() < 1e-9 {
        return None;
    }
    let k_r_inv = cam_ref.k.try_inverse()?;
    Some(cam_src.k * (r_rel + t_rel * n_ref.transpose() / d) * k_r_inv)
}

/// Applies a homography to a pixel; None when the mapped point falls on or
/// behind the principal plane.
pub fn apply_homography(h: &Matrix3<f64>, uv: &Vector2<f64>) -> Option<Vector2<f64>> {
    let p = h * Vector3::new(uv.x, uv.y, 1.0);
    if p.z <= 1e-12 {
        return None;
    }
    Some(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Grayscale 5x5 patch around `center` in `image`; None when any sample
/// leaves the image.
pub fn extract_patch(image: &Image, center: &Vector2<f64>) -> Option<[f64; PATCH_LEN]> {
    let mut out = [0.0; PATCH_LEN];
    let mut i = 0;
    for dy in PATCH_OFFSETS {
        for dx in PATCH_OFFSETS {
            out[i] = image.sample_gray(&Vector2::new(center.x + dx, center.y + dy))?;
            i += 1;
        }
    }
    Some(out)
}

/// Patch around `center` in the reference view warped through `h` and
/// sampled from the source image; None when any warped sample leaves it.
pub fn warp_patch(
    source: &Image,
    h: &Matrix3<f64>,
    center: &Vector2<f64>,
) -> Option<[f64; PATCH_LEN]> {
    let mut out = [0.0; PATCH_LEN];
    let mut i = 0;
    for dy in PATCH_OFFSETS {
        for dx in PATCH_OFFSETS {
            let s = apply_homography(h, &Vector2::new(center.x + dx, center.y + dy))?;
            out[i] = source.sample_gray(&s)?;
            i += 1;
        }
    }
    Some(out)
}

/// Pixel L1 and patch (1 - SSIM) warping losses over a batch. `rays[r]`
/// carries the geometry for ray r whose reference pixel is `pixels[r]`;
/// `normals[r]` is the unit surface normal used for the homography and is
/// treated as an external input (held fixed under differentiation).
#[allow(clippy::too_many_arguments)]
pub fn color_loss(
    rays: &[Ray],
    pixels: &[Vector2<f64>],
    renders: &[RenderResult],
    ref_view: &View,
    src_views: &[&View],
    normals: &[Vector3<f64>],
    masks: &[bool],
    patch_enabled: bool,
    warnings: &mut LossWarnings,
) -> (f64, f64) {
    let n = rays.len();
    assert!(pixels.len() == n && renders.len() == n && normals.len() == n && masks.len() == n);
    let mut pixel_sum = 0.0;
    let mut pixel_count = 0usize;
    let mut patch_sum = 0.0;
    let mut patch_count = 0usize;
    for r in 0..n {
        if !masks[r] {
            continue;
        }
        if let Some(gt) = ref_view.image.sample(&pixels[r]) {
            let diff = renders[r].rendered_color - gt;
            pixel_sum += (diff.x.abs() + diff.y.abs() + diff.z.abs()) / 3.0;
            pixel_count += 1;
        }
        if patch_enabled && renders[r].depth_valid() {
            let surface = rays[r].at(renders[r].rendered_depth);
            let Some(p_ref) = extract_patch(&ref_view.image, &pixels[r]) else {
                warnings.skipped_patches += src_views.len();
                continue;
            };
            for src in src_views {
                let warped = plane_homography(&ref_view.camera, &src.camera, &surface, &normals[r])
                    .and_then(|h| warp_patch(&src.image, &h, &pixels[r]));
                match warped {
                    Some(p_warp) => {
                        patch_sum += 1.0 - ssim(&p_ref, &p_warp);
                        patch_count += 1;
                    }
                    None => warnings.skipped_patches += 1,
                }
            }
        }
    }
    let l_pixel = if pixel_count == 0 { 0.0 } else { pixel_sum / pixel_count as f64 };
    let l_patch = if patch_count == 0 { 0.0 } else { patch_sum / patch_count as f64 };
    (l_pixel, l_patch)
}

/// Single-window SSIM over two equally shaped patches, stabilizers
/// C1 = 0.01^2 and C2 = 0.03^2.
pub fn ssim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = a.len() as f64;
    let mu_a: f64 = a.iter().sum::<f64>() / n;
    let mu_b: f64 = b.iter().sum::<f64>() / n;
    let var_a: f64 = a.iter().map(|x| (x - mu_a).powi(2)).sum::<f64>() / n;
    let var_b: f64 = b.iter().map(|x| (x - mu_b).powi(2)).sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
        / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

// ---------------------------------------------------------------------------
// Eikonal and total
// ---------------------------------------------------------------------------

/// Mean of (|g| - 1)^2 over the batch of spatial gradients.
pub fn eikonal_loss(gradients: &[Vector3<f64>]) -> f64 {
    if gradients.is_empty() {
        return 0.0;
    }
    gradients.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / gradients.len() as f64
}

/// d l_eik / d g per gradient vector.
pub fn eikonal_backward(gradients: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = gradients.len() as f64;
    gradients
        .iter()
        .map(|g| {
            let norm = g.norm();
            if norm < 1e-12 {
                Vector3::zeros()
            } else {
                g * (2.0 * (norm - 1.0) / (norm * n))
            }
        })
        .collect()
}

/// Weighted total: l_feat + alpha * l_depth + (l_pixel + l_patch) +
/// beta * l_eik. A non-finite component is a structured error naming it.
pub fn total_loss(
    l_feat: f64,
    l_depth: f64,
    l_pixel: f64,
    l_patch: f64,
    l_eik: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64, LossError> {
    for (component, value) in [
        ("l_feat", l_feat),
        ("l_depth", l_depth),
        ("l_color_pixel", l_pixel),
        ("l_color_patch", l_patch),
        ("l_eik", l_eik),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { component, value });
        }
    }
    Ok(l_feat + alpha * l_depth + (l_pixel + l_patch) + beta * l_eik)
}
