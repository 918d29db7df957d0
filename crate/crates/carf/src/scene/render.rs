//! Reference renders of analytic scenes and model renders of trained fields.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::field::forward::{build_forward, QuantMode};
use crate::field::model::FieldModel;
use crate::field::registry::Registry;
use crate::scene::camera::{all_pixels, generate_rays, per_pixel_seed, stratified_samples, Camera, Ray};
use crate::scene::image::Image;
use crate::scene::primitives::VolumeScene;

/// Uniform integration steps for the analytic reference render.
pub const ORACLE_SAMPLES: usize = 512;

/// Background color composited behind every volumetric render.
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

/// Deterministic reference render: dense midpoint quadrature of the analytic
/// density/albedo fields along each pixel ray, composited over the background.
pub fn oracle_render(scene: &VolumeScene, camera: &Camera) -> Result<Image> {
    let rays = generate_rays(camera, &all_pixels(camera.width, camera.height))?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    for ray in &rays {
        let h = (ray.t_far - ray.t_near) as f64 / ORACLE_SAMPLES as f64;
        let mut transmittance = 1.0f64;
        let mut rgb = [0.0f64; 3];
        for i in 0..ORACLE_SAMPLES {
            let t = ray.t_near as f64 + (i as f64 + 0.5) * h;
            let (sigma, albedo) = scene.density_albedo(ray.at(t as f32));
            if sigma > 0.0 {
                let alpha = 1.0 - (-(sigma as f64) * h).exp();
                let w = transmittance * alpha;
                for c in 0..3 {
                    rgb[c] += w * albedo[c] as f64;
                }
                transmittance *= 1.0 - alpha;
                if transmittance < 1e-9 {
                    break;
                }
            }
        }
        for c in 0..3 {
            data.push((rgb[c] + transmittance * BACKGROUND[c] as f64) as f32);
        }
    }
    Image::new(camera.width, camera.height, data)
}

/// Stratified sample points along a batch of rays, flattened for the field
/// forward pass. Per-ray randomness is derived from `seed` and the ray's
/// index, so the result is independent of any chunking of the ray list.
pub struct RaySamples {
    /// Sample positions, ray-major, [rays * samples, 3].
    pub positions: Vec<f32>,
    /// View direction repeated per sample, [rays * samples, 3].
    pub dirs: Vec<f32>,
    /// Spacing per sample, [rays * samples].
    pub deltas: Vec<f32>,
    pub rays: usize,
    pub samples: usize,
}

pub fn sample_along_rays(
    rays: &[Ray],
    samples: usize,
    seed: u64,
    first_ray_index: u64,
) -> Result<RaySamples> {
    let n = rays.len();
    let mut positions = Vec::with_capacity(n * samples * 3);
    let mut dirs = Vec::with_capacity(n * samples * 3);
    let mut deltas = Vec::with_capacity(n * samples);
    for (i, ray) in rays.iter().enumerate() {
        let ray_seed = per_pixel_seed(seed, first_ray_index + i as u64);
        let (ts, ds) = stratified_samples(ray, samples, ray_seed)?;
        for &t in &ts {
            positions.extend_from_slice(&ray.at(t));
            dirs.extend_from_slice(&ray.dir);
        }
        deltas.extend_from_slice(&ds);
    }
    Ok(RaySamples {
        positions,
        dirs,
        deltas,
        rays: n,
        samples,
    })
}

/// Evaluate a planar field on the pixel-center lattice.
pub fn render_planar(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    width: usize,
    height: usize,
) -> Result<Image> {
    let mut data = Vec::with_capacity(width * height * 3);
    let pixels = all_pixels(width, height);
    for chunk in pixels.chunks(4096) {
        let positions: Vec<f32> = chunk
            .iter()
            .flat_map(|&(x, y)| {
                [
                    (x as f32 + 0.5) / width as f32,
                    (y as f32 + 0.5) / height as f32,
                ]
            })
            .collect();
        let mut tape = Tape::new();
        let h = build_forward(&mut tape, model, registry, mode, &positions, None)?;
        data.extend_from_slice(tape.value(h.rgb).data());
    }
    Image::new(width, height, data)
}

/// Render a volumetric field through a camera: stratified sampling, the
/// quantized forward pass, alpha compositing, and the background blend.
pub fn render_volumetric(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    camera: &Camera,
    samples_per_ray: usize,
    seed: u64,
) -> Result<Image> {
    let rays = generate_rays(camera, &all_pixels(camera.width, camera.height))?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    // keep each tape near 8k sample points
    let chunk_rays = (8192 / samples_per_ray).max(1);
    for (ci, chunk) in rays.chunks(chunk_rays).enumerate() {
        let first = (ci * chunk_rays) as u64;
        let s = sample_along_rays(chunk, samples_per_ray, seed, first)?;
        let mut tape = Tape::new();
        let h = build_forward(&mut tape, model, registry, mode, &s.positions, Some(&s.dirs))?;
        let sigma = tape.reshape(h.sigma.expect("volumetric forward"), vec![s.rays, s.samples])?;
        let rgb = tape.reshape(h.rgb, vec![s.rays, s.samples, 3])?;
        let rendered = tape.volume_render(sigma, rgb, s.deltas)?;
        let composited = tape.composite_background(rendered, BACKGROUND)?;
        data.extend_from_slice(tape.value(composited).data());
    }
    Image::new(camera.width, camera.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::ModelConfig;
    use crate::field::registry::build_registry;
    use crate::tensor::Tensor;

    fn front_camera(n: usize) -> Camera {
        Camera::look_at(
            [0.5, 0.5, -1.0],
            [0.5, 0.5, 0.5],
            [0.0, 1.0, 0.0],
            std::f32::consts::FRAC_PI_3,
            n,
            n,
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_renders_background() {
        let img = oracle_render(&VolumeScene::empty(), &front_camera(9)).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opaque_sphere_shows_its_albedo_at_the_center() {
        let albedo = [0.2, 0.6, 0.4];
        let scene = VolumeScene::single_sphere([0.5, 0.5, 0.5], 0.25, 1e6, albedo);
        let cam = front_camera(9);
        let img = oracle_render(&scene, &cam).unwrap();
        let center = img.pixel(4, 4);
        for c in 0..3 {
            assert!(
                (center[c] - albedo[c]).abs() < 1e-3,
                "channel {c}: {} vs {}",
                center[c],
                albedo[c]
            );
        }
    }

    #[test]
    fn oracle_is_bit_identical_across_runs() {
        let scene = VolumeScene::generate(3, 77).unwrap();
        let cam = front_camera(12);
        let a = oracle_render(&scene, &cam).unwrap();
        let b = oracle_render(&scene, &cam).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn transparent_ray_composites_pure_background() {
        // σ = 0 everywhere → rendered color 0, transmittance 1
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        let color = tape.leaf(Tensor::new(vec![1, 4, 3], vec![0.7; 12]).unwrap());
        let out = tape.volume_render(sigma, color, vec![0.25; 4]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0, 1.0]);
        let comp = tape.composite_background(out, BACKGROUND).unwrap();
        assert_eq!(tape.value(comp).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn opaque_front_sample_blocks_the_rest() {
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 2], vec![1e6, 5.0]).unwrap());
        let color = tape
            .leaf(Tensor::new(vec![1, 2, 3], vec![0.3, 0.5, 0.7, 0.9, 0.9, 0.9]).unwrap());
        let out = tape.volume_render(sigma, color, vec![1.0, 1.0]).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.3).abs() < 1e-6);
        assert!((v[1] - 0.5).abs() < 1e-6);
        assert!((v[2] - 0.7).abs() < 1e-6);
        assert!(v[3].abs() < 1e-6);
    }

    #[test]
    fn two_half_opacity_samples_compose_multiplicatively() {
        // α = 1 − exp(−ln2) = 0.5 for both samples; colors 1 then 0
        let ln2 = std::f32::consts::LN_2;
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 2], vec![ln2, ln2]).unwrap());
        let color =
            tape.leaf(Tensor::new(vec![1, 2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let out = tape.volume_render(sigma, color, vec![1.0, 1.0]).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.5).abs() < 1e-6, "{}", v[0]);
        assert!((v[3] - 0.25).abs() < 1e-6, "residual {}", v[3]);
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let sigmas = vec![0.4, 1.3, 0.05, 2.2, 0.9, 0.6];
        let colors: Vec<f32> = (0..18).map(|i| (i as f32 * 0.37).fract()).collect();
        let deltas = vec![0.3, 0.2, 0.4, 0.25, 0.35, 0.3];
        let loss_of = |s: &[f32]| -> f64 {
            let mut tape = Tape::new();
            let sigma = tape.leaf(Tensor::new(vec![1, 6], s.to_vec()).unwrap());
            let color = tape.leaf(Tensor::new(vec![1, 6, 3], colors.clone()).unwrap());
            let out = tape.volume_render(sigma, color, deltas.clone()).unwrap();
            // weigh channels unevenly so gradients are not symmetric
            let v = tape.value(out).data();
            (v[0] as f64) + 2.0 * (v[1] as f64) + 3.0 * (v[2] as f64)
        };

        let mut tape = Tape::new();
        let sigma = tape.param_leaf(
            Tensor::new(vec![1, 6], sigmas.clone()).unwrap(),
            crate::autodiff::ParamKey::Model(0),
        );
        let color = tape.leaf(Tensor::new(vec![1, 6, 3], colors.clone()).unwrap());
        let out = tape.volume_render(sigma, color, deltas.clone()).unwrap();
        // reduce to the same weighted scalar with a fixed linear layer, then
        // square it via MSE against zero (gradient chain factor 2y)
        let w = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 0.0]).unwrap());
        let y = tape.linear(out, w, None).unwrap();
        let loss = tape.mse(y, Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        let (_, g) = grads.first().expect("sigma gradient");

        // d(mse)/dy = 2y; chain to the weighted sum
        let y0 = loss_of(&sigmas);
        let chain = 2.0 * y0;
        let eps = 1e-3f32;
        for i in 0..6 {
            let mut plus = sigmas.clone();
            plus[i] += eps;
            let mut minus = sigmas.clone();
            minus[i] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps as f64) * chain;
            let rel = (g[i] as f64 - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "sigma {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn untrained_model_renders_finite_images() {
        let model = FieldModel::init(ModelConfig::volumetric_default(4)).unwrap();
        let registry = build_registry(&model.config);
        let cam = {
            let mut c = front_camera(8);
            c.t_far = 3.0;
            c
        };
        let img =
            render_volumetric(&model, &registry, QuantMode::FakeQuant, &cam, 16, 123).unwrap();
        assert!(img.data.iter().all(|v| v.is_finite()));

        let planar = FieldModel::init(ModelConfig::planar_default(4)).unwrap();
        let reg2 = build_registry(&planar.config);
        let img2 = render_planar(&planar, &reg2, QuantMode::FullPrecision, 16, 16).unwrap();
        assert!(img2.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn volumetric_render_is_chunking_independent_and_deterministic() {
        let model = FieldModel::init(ModelConfig::volumetric_default(4)).unwrap();
        let registry = build_registry(&model.config);
        let cam = front_camera(10);
        let a = render_volumetric(&model, &registry, QuantMode::FullPrecision, &cam, 8, 7).unwrap();
        let b = render_volumetric(&model, &registry, QuantMode::FullPrecision, &cam, 8, 7).unwrap();
        assert_eq!(a.data, b.data);
    }
}
