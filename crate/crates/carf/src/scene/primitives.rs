//! Analytic 3D scenes: unions of colored spheres and boxes with constant
//! density, generated deterministically from a complexity knob and a seed.

use crate::error::{Error, Result};
use crate::scene::camera::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f32 },
    Box { center: Vec3, half: Vec3 },
}

impl Shape {
    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let dz = p[2] - center[2];
                dx * dx + dy * dy + dz * dz <= radius * radius
            }
            Shape::Box { center, half } => {
                (p[0] - center[0]).abs() <= half[0]
                    && (p[1] - center[1]).abs() <= half[1]
                    && (p[2] - center[2]).abs() <= half[2]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Constant volumetric density inside the shape (non-negative).
    pub density: f32,
    pub albedo: Vec3,
}

/// A union of analytic primitives inside the unit cube.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VolumeScene {
    pub primitives: Vec<Primitive>,
}

impl VolumeScene {
    pub fn empty() -> Self {
        VolumeScene::default()
    }

    /// One opaque sphere, mostly for analytic occlusion checks.
    pub fn single_sphere(center: Vec3, radius: f32, density: f32, albedo: Vec3) -> Self {
        VolumeScene {
            primitives: vec![Primitive {
                shape: Shape::Sphere { center, radius },
                density,
                albedo,
            }],
        }
    }

    /// `k` random primitives in the central region of the unit cube.
    pub fn generate(k: u32, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "volumetric complexity must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let primitives = (0..k)
            .map(|_| {
                let center = [
                    rng.gen_range(0.3..0.7f32),
                    rng.gen_range(0.3..0.7f32),
                    rng.gen_range(0.3..0.7f32),
                ];
                let albedo = [
                    rng.gen_range(0.1..0.9f32),
                    rng.gen_range(0.1..0.9f32),
                    rng.gen_range(0.1..0.9f32),
                ];
                let density = rng.gen_range(8.0..40.0f32);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Sphere {
                        center,
                        radius: rng.gen_range(0.08..0.18f32),
                    }
                } else {
                    Shape::Box {
                        center,
                        half: [
                            rng.gen_range(0.05..0.15f32),
                            rng.gen_range(0.05..0.15f32),
                            rng.gen_range(0.05..0.15f32),
                        ],
                    }
                };
                Primitive {
                    shape,
                    density,
                    albedo,
                }
            })
            .collect();
        Ok(VolumeScene { primitives })
    }

    /// Total density and density-weighted albedo at a point. Empty space is
    /// (0, black); overlaps blend albedos by density share.
    pub fn density_albedo(&self, p: Vec3) -> (f32, Vec3) {
        let mut total = 0.0f32;
        let mut rgb = [0.0f32; 3];
        for prim in &self.primitives {
            if prim.shape.contains(p) {
                total += prim.density;
                for c in 0..3 {
                    rgb[c] += prim.density * prim.albedo[c];
                }
            }
        }
        if total > 0.0 {
            for c in &mut rgb {
                *c /= total;
            }
        }
        (total, rgb)
    }
}
