//! Pinhole cameras, per-pixel ray generation, and stratified ray sampling.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Vec3 = [f32; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f32) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f32 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

/// Pinhole camera with an orthonormal (right, up, forward) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f32,
    pub width: usize,
    pub height: usize,
    pub t_near: f32,
    pub t_far: f32,
}

/// Default ray interval for volumetric scenes in the unit cube.
pub const T_NEAR_DEFAULT: f32 = 0.1;
pub const T_FAR_DEFAULT: f32 = 4.0;

impl Camera {
    /// Build a camera at `position` looking at `target`, with `up_hint`
    /// fixing the roll.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up_hint: Vec3,
        fov_y: f32,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("camera needs nonzero extent".into()));
        }
        if !(fov_y > 0.0 && fov_y < std::f32::consts::PI) {
            return Err(Error::InvalidArgument(format!(
                "field of view {fov_y} outside (0, pi)"
            )));
        }
        let gaze = sub(target, position);
        if norm(gaze) < 1e-8 {
            return Err(Error::InvalidArgument(
                "camera position coincides with its target".into(),
            ));
        }
        let forward = normalize(gaze);
        let side = cross(forward, up_hint);
        if norm(side) < 1e-6 {
            return Err(Error::InvalidArgument(
                "up direction parallel to the view direction".into(),
            ));
        }
        let right = normalize(side);
        let up = cross(right, forward);
        Ok(Camera {
            position,
            right,
            up,
            forward,
            fov_y,
            width,
            height,
            t_near: T_NEAR_DEFAULT,
            t_far: T_FAR_DEFAULT,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let frames = [self.right, self.up, self.forward];
        for (i, f) in frames.iter().enumerate() {
            if (norm(*f) - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "camera frame axis {i} not unit length"
                )));
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                if dot(frames[i], frames[j]).abs() > 1e-4 {
                    return Err(Error::InvalidArgument(
                        "camera frame axes not orthogonal".into(),
                    ));
                }
            }
        }
        if !(self.t_near < self.t_far) {
            return Err(Error::InvalidArgument(format!(
                "ray interval [{}, {}] is empty",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }
}

/// A ray with a unit direction and a sampling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f32,
    pub t_far: f32,
}

impl Ray {
    pub fn at(&self, t: f32) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

/// One ray per pixel center through the pinhole. Pixels outside the image
/// are rejected.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    camera.validate()?;
    let tan_half = (camera.fov_y * 0.5).tan();
    let aspect = camera.width as f32 / camera.height as f32;
    let mut rays = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        if px >= camera.width || py >= camera.height {
            return Err(Error::InvalidArgument(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                camera.width, camera.height
            )));
        }
        // pixel centers; +x right, +y up (top row first in memory)
        let ndc_x = ((px as f32 + 0.5) / camera.width as f32) * 2.0 - 1.0;
        let ndc_y = 1.0 - ((py as f32 + 0.5) / camera.height as f32) * 2.0;
        let u = ndc_x * tan_half * aspect;
        let v = ndc_y * tan_half;
        let dir = normalize(add(
            add(scale(camera.right, u), scale(camera.up, v)),
            camera.forward,
        ));
        rays.push(Ray {
            origin: camera.position,
            dir,
            t_near: camera.t_near,
            t_far: camera.t_far,
        });
    }
    Ok(rays)
}

/// All pixel coordinates of an image, row-major.
pub fn all_pixels(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            v.push((x, y));
        }
    }
    v
}

/// Stratified samples along a ray: one uniform draw per equal stratum of
/// [t_near, t_far]. Spacings run from each sample to the next; the first one
/// also covers the gap back to t_near and the last one reaches t_far, so the
/// spacings tile [t_near, t_far] exactly.
pub fn stratified_samples(ray: &Ray, n: usize, seed: u64) -> Result<(Vec<f32>, Vec<f32>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "stratified sampling needs at least two samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = (ray.t_far - ray.t_near) / n as f32;
    let ts: Vec<f32> = (0..n)
        .map(|i| ray.t_near + (i as f32 + rng.gen_range(0.0..1.0f32)) * h)
        .collect();
    let mut deltas = Vec::with_capacity(n);
    deltas.push(ts[1] - ray.t_near);
    for i in 1..n - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(ray.t_far - ts[n - 1]);
    Ok((ts, deltas))
}

/// Mix a base seed with a stream index into an independent per-pixel seed.
pub fn per_pixel_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = base ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// A ring of cameras orbiting the unit-cube center, all looking inward.
pub fn orbit_cameras(
    count: usize,
    radius: f32,
    elevation: f32,
    fov_y: f32,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    let center = [0.5f32, 0.5, 0.5];
    (0..count)
        .map(|i| {
            let phi = (i as f32 / count as f32) * std::f32::consts::TAU;
            let position = [
                0.5 + radius * phi.cos(),
                0.5 + elevation,
                0.5 + radius * phi.sin(),
            ];
            Camera::look_at(position, center, [0.0, 1.0, 0.0], fov_y, width, height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera(n: usize) -> Camera {
        Camera::look_at(
            [0.5, 0.5, -1.5],
            [0.5, 0.5, 0.5],
            [0.0, 1.0, 0.0],
            std::f32::consts::FRAC_PI_3,
            n,
            n,
        )
        .unwrap()
    }

    #[test]
    fn center_pixel_rides_the_optical_axis() {
        // even size puts the axis between pixels; odd size has a center pixel
        let cam = test_camera(65);
        let rays = generate_rays(&cam, &[(32, 32)]).unwrap();
        let d = rays[0].dir;
        assert!((dot(d, cam.forward) - 1.0).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn all_directions_unit_norm() {
        let cam = test_camera(16);
        let rays = generate_rays(&cam, &all_pixels(16, 16)).unwrap();
        for r in rays {
            assert!((norm(r.dir) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_pixel_angle_matches_pinhole_geometry() {
        let cam = test_camera(64);
        let rays = generate_rays(&cam, &[(0, 0)]).unwrap();
        // corner pixel center sits at tan(fov/2)·(1 - 1/N) on both axes, so
        // its off-axis tangent is that value times sqrt(2)
        let m = (cam.fov_y as f64 * 0.5).tan() * (1.0 - 1.0 / 64.0);
        let expected = (m * std::f64::consts::SQRT_2).atan();
        let cos_angle = dot(rays[0].dir, cam.forward) as f64;
        let angle = cos_angle.clamp(-1.0, 1.0).acos();
        assert!((angle - expected).abs() < 1e-6, "{angle} vs {expected}");
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = test_camera(8);
        assert!(generate_rays(&cam, &[(8, 0)]).is_err());
    }

    #[test]
    fn degenerate_cameras_rejected() {
        let err = Camera::look_at(
            [0.0, 1.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 1.0, 0.0],
            1.0,
            8,
            8,
        );
        assert!(err.is_err(), "up parallel to gaze must be rejected");
    }

    #[test]
    fn strata_partition_and_telescoping() {
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: 1.0,
        };
        let (ts, deltas) = stratified_samples(&ray, 2, 11).unwrap();
        assert!(ts[0] >= 0.0 && ts[0] < 0.5);
        assert!(ts[1] >= 0.5 && ts[1] < 1.0);
        let total: f32 = deltas.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        let (ts2, _) = stratified_samples(&ray, 2, 11).unwrap();
        assert_eq!(ts, ts2, "same seed must reproduce samples");
    }

    #[test]
    fn orbit_cameras_are_valid_and_distinct() {
        let cams = orbit_cameras(6, 1.4, 0.4, 1.0, 32, 32).unwrap();
        assert_eq!(cams.len(), 6);
        for c in &cams {
            c.validate().unwrap();
        }
        assert_ne!(cams[0].position, cams[3].position);
    }
}
