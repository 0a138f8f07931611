//! Analytic ground-truth scenes: exact SDF primitives, sphere-traced
//! reference renders, look-at camera rigs, and synthetic depth priors and
//! keypoints with known calibration ground truth. Everything the training
//! pipeline consumes can be generated here, which is what makes the full
//! system testable without external pretrained assets.

use crate::geometry::{pixel_ray, project, ray_sphere_bounds, Camera, GeometryError, Projection};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("camera rig needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("rig radius {0} places cameras inside the unit scene bound")]
    RadiusInsideBound(f64),
    #[error("need at least 2 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Checker,
    Ramp,
    /// Near-constant albedo, the low-texture stress preset.
    LowTexture,
}

/// How primitives combine: hard min, or a log-sum-exp soft min with the
/// given blend parameter (a bounded approximation of the true union SDF).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Blend {
    Union,
    SmoothUnion { k: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub blend: Blend,
    pub texture: Texture,
}

impl AnalyticScene {
    pub fn sphere(radius: f64) -> Self {
        AnalyticScene {
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius }],
            blend: Blend::Union,
            texture: Texture::Checker,
        }
    }
}

fn primitive_sdf(p: &Primitive, x: &Vector3<f64>) -> f64 {
    match p {
        Primitive::Sphere { center, radius } => {
            (x - Vector3::from_row_slice(center)).norm() - radius
        }
        Primitive::Box { center, half_extents } => {
            let d = x - Vector3::from_row_slice(center);
            let q = Vector3::new(
                d.x.abs() - half_extents[0],
                d.y.abs() - half_extents[1],
                d.z.abs() - half_extents[2],
            );
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            let inside = q.x.max(q.y).max(q.z).min(0.0);
            outside + inside
        }
    }
}

/// Exact signed distance of the scene (exact per primitive; the smooth
/// union is a documented soft-min approximation).
pub fn scene_sdf(scene: &AnalyticScene, x: &Vector3<f64>) -> f64 {
    let ds: Vec<f64> = scene.primitives.iter().map(|p| primitive_sdf(p, x)).collect();
    match scene.blend {
        Blend::Union => ds.iter().copied().fold(f64::INFINITY, f64::min),
        Blend::SmoothUnion { k } => {
            // soft min via log-sum-exp
            let m = ds.iter().copied().fold(f64::INFINITY, f64::min);
            let sum: f64 = ds.iter().map(|d| (-(d - m) / k).exp()).sum();
            m - k * sum.ln()
        }
    }
}

/// Central-difference normal of the analytic SDF.
pub fn scene_normal(scene: &AnalyticScene, x: &Vector3<f64>) -> Vector3<f64> {
    let h = 1e-5;
    let mut n = Vector3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        n[k] = (scene_sdf(scene, &(x + e)) - scene_sdf(scene, &(x - e))) / (2.0 * h);
    }
    let norm = n.norm();
    if norm > 1e-12 {
        n / norm
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Procedural albedo at a surface point.
pub fn albedo(texture: Texture, x: &Vector3<f64>) -> Vector3<f64> {
    match texture {
        Texture::Checker => {
            let f = |v: f64| ((v * 8.0).floor() as i64).rem_euclid(2);
            let c = (f(x.x) + f(x.y) + f(x.z)) % 2;
            if c == 0 {
                Vector3::new(0.9, 0.85, 0.8)
            } else {
                Vector3::new(0.25, 0.3, 0.4)
            }
        }
        Texture::Ramp => Vector3::new(
            0.5 + 0.5 * x.x.clamp(-1.0, 1.0),
            0.5 + 0.5 * x.y.clamp(-1.0, 1.0),
            0.5 + 0.5 * x.z.clamp(-1.0, 1.0),
        ),
        Texture::LowTexture => {
            // near-constant with a faint large-scale ramp
            let v = 0.55 + 0.04 * x.x;
            Vector3::new(v, v, v * 0.98)
        }
    }
}

const SPHERE_TRACE_TOL: f64 = 1e-6;
const SPHERE_TRACE_MAX_STEPS: usize = 256;
const LIGHT_DIR: Vector3<f64> = Vector3::new(0.4, -0.6, -0.8);

/// Sphere-traces one ray against the analytic scene. Returns the hit
/// distance (along the ray, from the origin) or None on a miss.
pub fn trace_ray(
    scene: &AnalyticScene,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_near: f64,
    t_far: f64,
) -> Option<f64> {
    let mut t = t_near;
    for _ in 0..SPHERE_TRACE_MAX_STEPS {
        let d = scene_sdf(scene, &(origin + dir * t));
        if d.abs() < SPHERE_TRACE_TOL {
            return Some(t);
        }
        t += d;
        if t > t_far {
            return None;
        }
    }
    None
}

/// Reference render: Lambertian shading under a fixed directional light,
/// depth map of hit distances with NaN on misses.
pub fn render_ground_truth(scene: &AnalyticScene, camera: &Camera) -> (Vec<f32>, Vec<f32>) {
    camera.validate().expect("valid camera");
    let (w, h) = (camera.width, camera.height);
    let mut image = vec![0f32; w * h * 3];
    let mut depth = vec![f32::NAN; w * h];
    let light = -LIGHT_DIR.normalize();
    for y in 0..h {
        for x in 0..w {
            let ray = pixel_ray(camera, &Vector2::new(x as f64, y as f64), 1e-3, 10.0);
            let bounds = ray_sphere_bounds(&ray.origin, &ray.direction, &Vector3::zeros(), 1.0);
            let Some((t0, t1)) = bounds else { continue };
            let Some(t) = trace_ray(scene, &ray.origin, &ray.direction, t0, t1) else {
                continue;
            };
            let p = ray.at(t);
            let n = scene_normal(scene, &p);
            let lambert = n.dot(&light).max(0.0);
            let shade = 0.15 + 0.85 * lambert;
            let alb = albedo(scene.texture, &p);
            let i = (y * w + x) * 3;
            image[i] = (alb.x * shade) as f32;
            image[i + 1] = (alb.y * shade) as f32;
            image[i + 2] = (alb.z * shade) as f32;
            depth[y * w + x] = t as f32;
        }
    }
    (image, depth)
}

/// Cameras on a sphere of `radius` looking at the origin, adjacent pairs
/// separated by `max_angle_deg` along an arc at fixed elevation.
pub fn make_camera_rig(
    n_views: usize,
    radius: f64,
    max_angle_deg: f64,
    image_size: usize,
    focal: f64,
) -> Result<Vec<Camera>, SynthError> {
    if n_views < 2 {
        return Err(SynthError::TooFewViews(n_views));
    }
    if radius <= 1.0 {
        return Err(SynthError::RadiusInsideBound(radius));
    }
    let half = (n_views as f64 - 1.0) / 2.0;
    let elevation = 0.35f64; // radians above the equator
    (0..n_views)
        .map(|i| {
            let az = (i as f64 - half) * max_angle_deg.to_radians();
            let pos = radius
                * Vector3::new(
                    az.sin() * elevation.cos(),
                    elevation.sin(),
                    -az.cos() * elevation.cos(),
                );
            look_at_camera(&pos, image_size, focal)
        })
        .collect()
}

/// World-to-camera look-at with +z forward toward the origin.
fn look_at_camera(pos: &Vector3<f64>, image_size: usize, focal: f64) -> Result<Camera, SynthError> {
    let forward = (-pos).normalize();
    let up_hint = Vector3::new(0.0, 1.0, 0.0);
    let right = up_hint.cross(&forward).normalize();
    let down = forward.cross(&right).normalize();
    // rows of R are the camera axes expressed in world coordinates
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let t = -r * pos;
    let c = (image_size as f64 - 1.0) / 2.0;
    let k = Matrix3::new(focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0);
    Ok(Camera::new(k, r, t, image_size, image_size)?)
}

/// Per-view monocular-style prior with known inverse-affine ground truth:
/// D_hat = (D_gt - b_true) / a_true + amp * smooth(pixel). NaN (miss)
/// pixels propagate.
pub fn synthesize_depth_prior(
    gt_depth: &[f32],
    width: usize,
    height: usize,
    a_true: f64,
    b_true: f64,
    distortion_amp: f64,
) -> Vec<f32> {
    assert!(a_true > 0.0, "scale must be positive");
    let mut out = vec![f32::NAN; gt_depth.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let d = gt_depth[i];
            if !d.is_finite() {
                continue;
            }
            let s = smooth_field(x as f64 / width as f64, y as f64 / height as f64);
            out[i] = (((d as f64) - b_true) / a_true + distortion_amp * s) as f32;
        }
    }
    out
}

/// Smooth low-frequency distortion field over the unit square, range ~[-1,1].
pub fn smooth_field(u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    0.6 * (2.0 * PI * u).sin() * (2.0 * PI * v).cos() + 0.4 * (PI * (u + v)).sin()
}

/// One keypoint: world position plus the views that see it.
#[derive(Debug, Clone)]
pub struct Keypoint {
    pub position: Vector3<f64>,
    pub visible_views: Vec<usize>,
}

/// Samples `n_points` on the analytic surface and decides visibility per
/// camera by sphere-traced occlusion. The per-view depth of a keypoint is
/// its distance to the camera center.
pub fn synthesize_keypoints(
    scene: &AnalyticScene,
    cameras: &[Camera],
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Keypoint>, SynthError> {
    if n_points < 2 {
        return Err(SynthError::TooFewKeypoints(n_points));
    }
    let mut points = Vec::new();
    let mut attempts = 0;
    while points.len() < n_points && attempts < n_points * 200 {
        attempts += 1;
        // random start in the bound, projected to the surface by Newton steps
        let mut x = Vector3::new(
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
        );
        let mut ok = false;
        for _ in 0..50 {
            let d = scene_sdf(scene, &x);
            if d.abs() < 1e-7 {
                ok = true;
                break;
            }
            let n = scene_normal(scene, &x);
            x -= n * d;
        }
        if !ok || x.norm() >= 1.0 {
            continue;
        }
        let visible_views: Vec<usize> = cameras
            .iter()
            .enumerate()
            .filter(|(_, cam)| is_visible(scene, cam, &x))
            .map(|(i, _)| i)
            .collect();
        if visible_views.is_empty() {
            continue;
        }
        points.push(Keypoint { position: x, visible_views });
    }
    Ok(points)
}

/// A surface point is visible when it projects into the image and the
/// sphere trace from the camera reaches it first.
pub fn is_visible(scene: &AnalyticScene, camera: &Camera, point: &Vector3<f64>) -> bool {
    let Projection::Pixel(_) = project(point, camera) else {
        return false;
    };
    let center = camera.center();
    let to_point = point - center;
    let dist = to_point.norm();
    let dir = to_point / dist;
    // start slightly off the surface-distance budget to avoid self-hit issues
    match trace_ray(scene, &center, &dir, 1e-3, dist + 0.1) {
        Some(t) => (t - dist).abs() < 1e-3,
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn sphere_sdf_examples() {
        let s = AnalyticScene::sphere(0.5);
        assert_relative_eq!(scene_sdf(&s, &Vector3::new(0.5, 0.0, 0.0)), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scene_sdf(&s, &Vector3::zeros()), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn box_sdf_center() {
        let s = AnalyticScene {
            primitives: vec![Primitive::Box { center: [0.0; 3], half_extents: [0.3; 3] }],
            blend: Blend::Union,
            texture: Texture::Checker,
        };
        assert_relative_eq!(scene_sdf(&s, &Vector3::zeros()), -0.3, epsilon = 1e-12);
        assert_relative_eq!(scene_sdf(&s, &Vector3::new(0.6, 0.0, 0.0)), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn union_is_min_of_parts() {
        let a = Primitive::Sphere { center: [-0.3, 0.0, 0.0], radius: 0.25 };
        let b = Primitive::Sphere { center: [0.35, 0.0, 0.0], radius: 0.3 };
        let scene = AnalyticScene {
            primitives: vec![a.clone(), b.clone()],
            blend: Blend::Union,
            texture: Texture::Checker,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let want = primitive_sdf(&a, &x).min(primitive_sdf(&b, &x));
            assert!((scene_sdf(&scene, &x) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sdf_gradient_unit_norm_away_from_medial_axis() {
        let scene = AnalyticScene {
            primitives: vec![
                Primitive::Sphere { center: [-0.3, 0.0, 0.0], radius: 0.25 },
                Primitive::Box { center: [0.35, 0.1, 0.0], half_extents: [0.2, 0.2, 0.2] },
            ],
            blend: Blend::Union,
            texture: Texture::Checker,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 50 {
            let x = Vector3::new(
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.95..0.95),
            );
            // skip near-surface/medial neighborhoods where the finite
            // difference straddles a kink
            let ds: Vec<f64> =
                scene.primitives.iter().map(|p| primitive_sdf(p, &x)).collect();
            if (ds[0] - ds[1]).abs() < 0.05 || ds.iter().any(|d| d.abs() < 0.02) {
                continue;
            }
            let h = 1e-5;
            let mut g = Vector3::zeros();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                g[k] = (scene_sdf(&scene, &(x + e)) - scene_sdf(&scene, &(x - e))) / (2.0 * h);
            }
            assert!((g.norm() - 1.0).abs() < 1e-3, "norm {} at {:?}", g.norm(), x);
            checked += 1;
        }
    }

    #[test]
    fn on_axis_depth_analytical() {
        let scene = AnalyticScene::sphere(0.5);
        let origin = Vector3::new(0.0, 0.0, -2.0);
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let t = trace_ray(&scene, &origin, &dir, 0.01, 5.0).unwrap();
        assert!((t - 1.5).abs() < 1e-5);
    }

    #[test]
    fn miss_gives_none_and_nan_depth() {
        let scene = AnalyticScene::sphere(0.5);
        let origin = Vector3::new(0.0, 0.0, -2.0);
        let dir = Vector3::new(1.0, 0.0, 0.0);
        assert!(trace_ray(&scene, &origin, &dir, 0.01, 5.0).is_none());
    }

    #[test]
    fn box_depth_matches_slab_oracle() {
        let he = [0.3, 0.25, 0.35];
        let scene = AnalyticScene {
            primitives: vec![Primitive::Box { center: [0.0; 3], half_extents: he }],
            blend: Blend::Union,
            texture: Texture::Checker,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 30 {
            let origin = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                -2.0,
            );
            let target = Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let dir = (target - origin).normalize();
            // slab method
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for k in 0..3 {
                let inv = 1.0 / dir[k];
                let mut a = (-he[k] - origin[k]) * inv;
                let mut b = (he[k] - origin[k]) * inv;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 < 0.0 {
                continue;
            }
            let traced = trace_ray(&scene, &origin, &dir, 1e-3, 6.0);
            let t = traced.expect("oracle says hit");
            assert!((t - t0).abs() < 1e-4, "traced {t} slab {t0}");
            checked += 1;
        }
    }

    #[test]
    fn rig_validation_and_geometry() {
        assert!(matches!(make_camera_rig(1, 2.0, 45.0, 64, 60.0), Err(SynthError::TooFewViews(1))));
        assert!(matches!(
            make_camera_rig(3, 0.9, 45.0, 64, 60.0),
            Err(SynthError::RadiusInsideBound(_))
        ));
        let rig = make_camera_rig(3, 2.0, 45.0, 64, 60.0).unwrap();
        assert_eq!(rig.len(), 3);
        // at elevation e with azimuth spacing d the axis angle obeys
        // cos(theta) = sin^2 e + cos^2 e * cos d
        let e = 0.35f64;
        let want = e.sin().powi(2) + e.cos().powi(2) * 45f64.to_radians().cos();
        for pair in rig.windows(2) {
            let cosang = pair[0].optical_axis().dot(&pair[1].optical_axis());
            assert_relative_eq!(cosang, want, epsilon = 1e-9);
        }
        for cam in &rig {
            let pp = project(&Vector3::zeros(), cam).pixel().unwrap();
            assert_relative_eq!(pp.x, cam.k[(0, 2)], epsilon = 1e-6);
            assert_relative_eq!(pp.y, cam.k[(1, 2)], epsilon = 1e-6);
            assert_relative_eq!(cam.center().norm(), 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gt_depth_example() {
        // camera straight down the -z axis at distance 2: on-axis depth 1.5
        let cam = look_at_camera(&Vector3::new(0.0, 0.0, -2.0), 33, 40.0).unwrap();
        let scene = AnalyticScene::sphere(0.5);
        let (_, depth) = render_ground_truth(&scene, &cam);
        let c = 16; // principal pixel of a 33x33 image
        let d = depth[c * 33 + c];
        assert!((d as f64 - 1.5).abs() < 1e-4, "depth {d}");
        // corner rays miss
        assert!(depth[0].is_nan());
    }

    #[test]
    fn prior_inverts_exactly_with_zero_distortion() {
        let gt = vec![1.0f32, 2.0, f32::NAN, 1.5];
        let prior = synthesize_depth_prior(&gt, 2, 2, 2.0, 0.3, 0.0);
        for i in [0usize, 1, 3] {
            let rec = 2.0 * prior[i] as f64 + 0.3;
            assert!((rec - gt[i] as f64).abs() < 1e-6);
        }
        assert!(prior[2].is_nan());
    }

    #[test]
    fn keypoints_on_surface_and_visible() {
        let scene = AnalyticScene::sphere(0.5);
        let rig = make_camera_rig(3, 2.0, 45.0, 64, 60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kps = synthesize_keypoints(&scene, &rig, 30, &mut rng).unwrap();
        assert!(kps.len() >= 20);
        for kp in &kps {
            assert!(scene_sdf(&scene, &kp.position).abs() < 1e-5);
            for &v in &kp.visible_views {
                let cam = &rig[v];
                let depth = (kp.position - cam.center()).norm();
                assert!(depth > 0.0);
                assert!(project(&kp.position, cam).pixel().is_some());
            }
        }
    }

    #[test]
    fn far_side_point_invisible() {
        let scene = AnalyticScene::sphere(0.5);
        let cam = look_at_camera(&Vector3::new(0.0, 0.0, -2.0), 64, 60.0).unwrap();
        // far side of the sphere w.r.t. this camera
        assert!(!is_visible(&scene, &cam, &Vector3::new(0.0, 0.0, 0.5)));
        assert!(is_visible(&scene, &cam, &Vector3::new(0.0, 0.0, -0.5)));
    }

    #[test]
    fn gt_depths_pairwise_consistent() {
        // brute-force forward-backward confidence check on small images
        let scene = AnalyticScene::sphere(0.5);
        let rig = make_camera_rig(2, 2.0, 30.0, 16, 14.0).unwrap();
        let depths: Vec<Vec<f32>> =
            rig.iter().map(|c| render_ground_truth(&scene, c).1).collect();
        let mut consistent = 0;
        for y in 0..16 {
            for x in 0..16 {
                let d = depths[0][y * 16 + x];
                if !d.is_finite() {
                    continue;
                }
                let ray = pixel_ray(&rig[0], &Vector2::new(x as f64, y as f64), 0.1, 5.0);
                let p = ray.at(d as f64);
                let Projection::Pixel(s_uv) = project(&p, &rig[1]) else { continue };
                let sx = s_uv.x.round() as usize;
                let sy = s_uv.y.round() as usize;
                let ds = depths[1][sy * 16 + sx];
                if !ds.is_finite() {
                    continue;
                }
                let sray = pixel_ray(&rig[1], &Vector2::new(sx as f64, sy as f64), 0.1, 5.0);
                let back = project(&sray.at(ds as f64), &rig[0]);
                let Projection::Pixel(r_hat) = back else { continue };
                let e = (r_hat - Vector2::new(x as f64, y as f64)).norm();
                // rounding s_uv to the stored pixel bounds e by ~1 px on a
                // 16x16 image; co-visible front-facing pixels must be
                // consistent
                if e <= 1.0 {
                    consistent += 1;
                }
            }
        }
        assert!(consistent > 20, "only {consistent} consistent pixels");
    }
}
