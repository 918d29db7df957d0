//! Procedural 2D targets: directional wave textures whose frequency content
//! grows with a complexity knob.

use crate::error::{Error, Result};
use crate::scene::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of k directional sinusoids per channel. Harmonic j has spatial
/// frequency proportional to j, so larger k adds strictly higher-frequency
/// content and raises the average image gradient.
#[derive(Debug, Clone)]
pub struct WaveTexture {
    harmonics: Vec<Harmonic>,
    amplitude: f32,
}

#[derive(Debug, Clone, Copy)]
struct Harmonic {
    /// Wave vector (cycles across the unit square, direction included).
    kx: f32,
    ky: f32,
    /// Per-channel phase offsets.
    phase: [f32; 3],
}

impl WaveTexture {
    /// Deterministic texture with `k` harmonics.
    pub fn new(k: u32, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "texture complexity must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let harmonics = (1..=k)
            .map(|j| {
                let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                let cycles = 1.5 * j as f32;
                Harmonic {
                    kx: cycles * theta.cos(),
                    ky: cycles * theta.sin(),
                    phase: [
                        rng.gen_range(0.0..std::f32::consts::TAU),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                    ],
                }
            })
            .collect();
        // 0.5 ± 0.4 keeps every channel inside [0.1, 0.9]
        Ok(WaveTexture {
            harmonics,
            amplitude: 0.4 / k as f32,
        })
    }

    /// Evaluate at unit-square coordinates.
    pub fn eval(&self, u: f32, v: f32) -> [f32; 3] {
        let mut rgb = [0.5f32; 3];
        for h in &self.harmonics {
            let arg = std::f32::consts::TAU * (h.kx * u + h.ky * v);
            for (c, px) in rgb.iter_mut().enumerate() {
                *px += self.amplitude * (arg + h.phase[c]).sin();
            }
        }
        rgb
    }

    /// Rasterize at pixel centers.
    pub fn render(&self, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, |x, y| {
            self.eval(
                (x as f32 + 0.5) / width as f32,
                (y as f32 + 0.5) / height as f32,
            )
        })
    }
}
