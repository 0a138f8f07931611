//! Camera models, projection/unprojection, ray generation, and cross-view
//! reprojection.
//!
//! Pixel convention: pixel centers sit at integer coordinates and (0,0) is
//! the top-left pixel center. A pixel is in view when it lies in
//! `[0,width) x [0,height)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("empty pixel list")]
    EmptyPixelList,
}

/// Result of projecting a point that may fall outside the frustum.
/// A value-level signal so batch operations can proceed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(Vector2<f64>),
    OutOfView,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::Pixel(p) => Some(*p),
            Projection::OutOfView => None,
        }
    }
}

/// Pinhole camera: world-to-camera rotation `r`, translation `t`, and
/// intrinsics `k` in pixels.
#[derive(Debug, Clone)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// A ray in world space with unit direction and positive near/far bounds.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { k, r, t, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width < 2 || self.height < 2 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size {}x{} below minimum 2x2",
                self.width, self.height
            )));
        }
        let rtr = self.r.transpose() * self.r;
        if (rtr - Matrix3::identity()).norm() > 1e-6 {
            return Err(GeometryError::InvalidCamera(
                "rotation is not orthonormal".into(),
            ));
        }
        if (self.r.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidCamera(
                "rotation determinant is not +1".into(),
            ));
        }
        if self.k[(0, 0)] <= 0.0 || self.k[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera(
                "focal entries must be positive".into(),
            ));
        }
        if self.k[(1, 0)].abs() > 1e-12 || self.k[(2, 0)].abs() > 1e-12 || self.k[(2, 1)].abs() > 1e-12
        {
            return Err(GeometryError::InvalidCamera(
                "intrinsic matrix must be upper-triangular".into(),
            ));
        }
        Ok(())
    }

    /// Camera center in world coordinates, -R^T t.
    pub fn center(&self) -> Vector3<f64> {
        -self.r.transpose() * self.t
    }

    /// Unit optical-axis direction in world coordinates (third row of R^T
    /// columns, i.e. R^T e_z).
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.r.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Camera-space z of a world point.
    pub fn depth_of(&self, point: &Vector3<f64>) -> f64 {
        (self.r * point + self.t).z
    }

    pub fn contains_pixel(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64
    }
}

/// Projects a world point: p = K(Rx + t), homogeneous-normalized.
/// `OutOfView` when the camera-space depth is non-positive or the pixel
/// falls outside the image.
pub fn project(point: &Vector3<f64>, camera: &Camera) -> Projection {
    let pc = camera.r * point + camera.t;
    if pc.z <= 0.0 {
        return Projection::OutOfView;
    }
    let h = camera.k * pc;
    let pixel = Vector2::new(h.x / h.z, h.y / h.z);
    if camera.contains_pixel(&pixel) {
        Projection::Pixel(pixel)
    } else {
        Projection::OutOfView
    }
}

/// Lifts a pixel to the world point at camera-space depth `depth`.
pub fn unproject(
    pixel: &Vector2<f64>,
    depth: f64,
    camera: &Camera,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let kinv = camera
        .k
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidCamera("singular intrinsics".into()))?;
    let pc = kinv * Vector3::new(pixel.x, pixel.y, 1.0) * depth;
    Ok(camera.r.transpose() * (pc - camera.t))
}

/// Depth-conditioned cross-view map: unproject in the reference camera at
/// `depth`, project into the source camera.
pub fn reproject(
    pixel: &Vector2<f64>,
    depth: f64,
    cam_ref: &Camera,
    cam_src: &Camera,
) -> Result<Projection, GeometryError> {
    let point = unproject(pixel, depth, cam_ref)?;
    Ok(project(&point, cam_src))
}

/// Builds one ray per pixel. The origin is the camera center; the direction
/// is the unit back-projection of the pixel.
pub fn generate_rays(
    camera: &Camera,
    pixels: &[Vector2<f64>],
    near: f64,
    far: f64,
) -> Result<Vec<Ray>, GeometryError> {
    if pixels.is_empty() {
        return Err(GeometryError::EmptyPixelList);
    }
    let origin = camera.center();
    let kinv = camera
        .k
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidCamera("singular intrinsics".into()))?;
    let rt = camera.r.transpose();
    Ok(pixels
        .iter()
        .map(|p| {
            let dir_cam = kinv * Vector3::new(p.x, p.y, 1.0);
            let direction = (rt * dir_cam).normalize();
            Ray { origin, direction, near, far }
        })
        .collect())
}

/// Single-pixel convenience wrapper around [`generate_rays`].
pub fn pixel_ray(camera: &Camera, pixel: &Vector2<f64>, near: f64, far: f64) -> Ray {
    let origin = camera.center();
    let kinv = camera.k.try_inverse().expect("valid camera intrinsics");
    let dir_cam = kinv * Vector3::new(pixel.x, pixel.y, 1.0);
    let direction = (camera.r.transpose() * dir_cam).normalize();
    Ray { origin, direction, near, far }
}

/// Intersection of a ray with the sphere `|x - center| = radius`, clipped to
/// positive distances. Returns `(t_near, t_far)` or `None` on a miss.
pub fn ray_sphere_bounds(
    ray_origin: &Vector3<f64>,
    ray_dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<(f64, f64)> {
    let oc = ray_origin - center;
    let b = oc.dot(ray_dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t1 <= 0.0 {
        return None;
    }
    Some((t0.max(1e-4), t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3x4;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub fn identity_camera() -> Camera {
        Camera::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 100, 100).unwrap()
    }

    pub fn test_camera() -> Camera {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        Camera::new(k, Matrix3::identity(), Vector3::zeros(), 100, 100).unwrap()
    }

    pub fn random_camera(rng: &mut StdRng) -> Camera {
        let k = Matrix3::new(
            rng.gen_range(50.0..200.0),
            0.0,
            rng.gen_range(20.0..80.0),
            0.0,
            rng.gen_range(50.0..200.0),
            rng.gen_range(20.0..80.0),
            0.0,
            0.0,
            1.0,
        );
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-0.8..0.8);
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner();
        let t = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        Camera::new(k, r, t, 120, 100).unwrap()
    }

    /// Independent oracle: multiply M = K[R|t] by the homogeneous point.
    fn project_oracle(point: &Vector3<f64>, cam: &Camera) -> Option<Vector2<f64>> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(cam.k * cam.r));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(cam.k * cam.t));
        let h = m * nalgebra::Vector4::new(point.x, point.y, point.z, 1.0);
        if h.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(h.x / h.z, h.y / h.z))
    }

    #[test]
    fn project_identity_camera_on_axis() {
        let cam = identity_camera();
        let p = project(&Vector3::new(0.0, 0.0, 1.0), &cam).pixel().unwrap();
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn project_principal_point() {
        let cam = test_camera();
        let p = project(&Vector3::new(0.0, 0.0, 2.0), &cam).pixel().unwrap();
        assert_relative_eq!(p.x, 50.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 50 {
            let cam = random_camera(&mut rng);
            let point = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(1.0..4.0),
            );
            let got = project(&point, &cam);
            let want = project_oracle(&point, &cam);
            match (got, want) {
                (Projection::Pixel(p), Some(q)) => {
                    assert_relative_eq!(p.x, q.x, epsilon = 1e-9);
                    assert_relative_eq!(p.y, q.y, epsilon = 1e-9);
                    checked += 1;
                }
                (Projection::OutOfView, _) => {}
                (Projection::Pixel(p), None) => {
                    panic!("engine projected {p:?} where oracle saw negative depth")
                }
            }
        }
    }

    #[test]
    fn project_behind_camera_is_out_of_view() {
        let cam = test_camera();
        assert_eq!(project(&Vector3::new(0.0, 0.0, -1.0), &cam), Projection::OutOfView);
    }

    #[test]
    fn unproject_round_trip_examples() {
        let cam = test_camera();
        let p = unproject(&Vector2::new(50.0, 50.0), 2.0, &cam).unwrap();
        assert_relative_eq!((p - Vector3::new(0.0, 0.0, 2.0)).norm(), 0.0, epsilon = 1e-9);

        let cam = identity_camera();
        let p = unproject(&Vector2::new(0.0, 0.0), 1.0, &cam).unwrap();
        assert_relative_eq!((p - Vector3::new(0.0, 0.0, 1.0)).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let cam = test_camera();
        assert!(unproject(&Vector2::new(1.0, 1.0), 0.0, &cam).is_err());
        assert!(unproject(&Vector2::new(1.0, 1.0), -2.0, &cam).is_err());
    }

    #[test]
    fn project_unproject_identity_random() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(
                rng.gen_range(0.0..cam.width as f64 - 1.0),
                rng.gen_range(0.0..cam.height as f64 - 1.0),
            );
            let depth = rng.gen_range(0.2..5.0);
            let point = unproject(&pixel, depth, &cam).unwrap();
            assert_relative_eq!(cam.depth_of(&point), depth, epsilon = 1e-9);
            let back = project(&point, &cam).pixel().unwrap();
            assert!((back - pixel).norm() < 1e-6, "round trip residual too large");
        }
    }

    #[test]
    fn reproject_identity_when_same_camera() {
        let mut rng = StdRng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        for _ in 0..20 {
            let pixel = Vector2::new(rng.gen_range(5.0..100.0), rng.gen_range(5.0..90.0));
            let depth = rng.gen_range(0.5..4.0);
            let p = reproject(&pixel, depth, &cam, &cam).unwrap().pixel().unwrap();
            assert!((p - pixel).norm() < 1e-7);
        }
    }

    #[test]
    fn reproject_matches_composition() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..50 {
            let cam_a = random_camera(&mut rng);
            let cam_b = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen_range(10.0..100.0), rng.gen_range(10.0..90.0));
            let depth = rng.gen_range(0.5..4.0);
            let via = reproject(&pixel, depth, &cam_a, &cam_b).unwrap();
            let point = unproject(&pixel, depth, &cam_a).unwrap();
            let direct = project(&point, &cam_b);
            match (via, direct) {
                (Projection::Pixel(p), Projection::Pixel(q)) => {
                    assert!((p - q).norm() < 1e-9)
                }
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn translation_pair_keeps_principal_point() {
        let k = Matrix3::new(80.0, 0.0, 40.0, 0.0, 80.0, 40.0, 0.0, 0.0, 1.0);
        let cam_a = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 80, 80).unwrap();
        let cam_b =
            Camera::new(k, Matrix3::identity(), Vector3::new(0.0, 0.0, 0.5), 80, 80).unwrap();
        let p = reproject(&Vector2::new(40.0, 40.0), 2.0, &cam_a, &cam_b)
            .unwrap()
            .pixel()
            .unwrap();
        assert_relative_eq!(p.x, 40.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 40.0, epsilon = 1e-9);
    }

    #[test]
    fn rays_of_identity_camera() {
        let cam = identity_camera();
        let rays = generate_rays(&cam, &[Vector2::new(0.0, 0.0)], 0.1, 5.0).unwrap();
        assert_relative_eq!(rays[0].origin.norm(), 0.0, epsilon = 1e-12);
        assert!((rays[0].direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let mut rng = StdRng::seed_from_u64(23);
        let cam = random_camera(&mut rng);
        let pp = Vector2::new(cam.k[(0, 2)], cam.k[(1, 2)]);
        let rays = generate_rays(&cam, &[pp], 0.1, 5.0).unwrap();
        assert!((rays[0].direction - cam.optical_axis()).norm() < 1e-9);
    }

    #[test]
    fn ray_points_reproject_to_pixel() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..30 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen_range(5.0..100.0), rng.gen_range(5.0..90.0));
            let rays = generate_rays(&cam, &[pixel], 0.5, 4.0).unwrap();
            let ray = rays[0];
            assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-9);
            for s in [ray.near, 0.5 * (ray.near + ray.far), ray.far] {
                let p = project(&ray.at(s), &cam).pixel().unwrap();
                assert!((p - pixel).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn ray_origin_independent_of_pixel() {
        let mut rng = StdRng::seed_from_u64(41);
        let cam = random_camera(&mut rng);
        let pixels = vec![
            Vector2::new(1.0, 2.0),
            Vector2::new(50.0, 60.0),
            Vector2::new(99.0, 10.0),
        ];
        let rays = generate_rays(&cam, &pixels, 0.1, 2.0).unwrap();
        for ray in &rays[1..] {
            assert!((ray.origin - rays[0].origin).norm() < 1e-12);
        }
    }

    #[test]
    fn empty_pixel_list_rejected() {
        let cam = test_camera();
        assert!(matches!(
            generate_rays(&cam, &[], 0.1, 1.0),
            Err(GeometryError::EmptyPixelList)
        ));
    }

    #[test]
    fn invalid_cameras_rejected() {
        let bad_r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(Matrix3::identity(), bad_r, Vector3::zeros(), 10, 10).is_err());
        let bad_k = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(bad_k, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
        assert!(Camera::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros(), 1, 10)
            .is_err());
    }

    #[test]
    fn sphere_bounds_hit_and_miss() {
        let o = Vector3::new(0.0, 0.0, -2.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        let (t0, t1) = ray_sphere_bounds(&o, &d, &Vector3::zeros(), 1.0).unwrap();
        assert_relative_eq!(t0, 1.0, epsilon = 1e-12);
        assert_relative_eq!(t1, 3.0, epsilon = 1e-12);
        let miss = ray_sphere_bounds(&o, &Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), 1.0);
        assert!(miss.is_none());
    }
}
