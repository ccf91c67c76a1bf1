//! Procedural sphere/plane scenes and an analytic ground-truth renderer.

pub mod brdf;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, GeometryError, Intrinsics, Pose};
use crate::tensor::TensorError;

pub use render::{
    analytic_flow, material_at, render_sequence, render_view, shading_at, trace, Hit, Primitive,
    ViewBundle, BACKGROUND,
};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Second color of a world-space 3-D checkerboard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub albedo2: [f64; 3],
    pub cell: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub metallic: f64,
    pub roughness: f64,
    /// Diffuse only: the specular lobe is not rendered.
    pub lambertian: bool,
    pub checker: Option<Checker>,
}

impl Material {
    pub fn lambertian(albedo: [f64; 3]) -> Self {
        Self {
            albedo,
            metallic: 0.0,
            roughness: 1.0,
            lambertian: true,
            checker: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub material: Material,
}

/// Horizontal plane `y = height` facing +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub height: f64,
    pub material: Material,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    /// Radiant intensity, linear RGB.
    pub intensity: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One Lambertian sphere, one light, static camera.
    Minimal,
    /// Constant-albedo spheres over a ground plane, orbiting camera.
    #[default]
    Easy,
    /// Like `Easy` with checker textures.
    Textured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub difficulty: Difficulty,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub min_spheres: usize,
    pub max_spheres: usize,
    pub ground_plane: bool,
    /// Azimuth change between consecutive views, degrees.
    pub orbit_step_deg: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    /// Largest diffuse shading value after light rescaling.
    pub max_shading: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            difficulty: Difficulty::Easy,
            views: 8,
            width: 64,
            height: 64,
            min_spheres: 1,
            max_spheres: 3,
            ground_plane: true,
            orbit_step_deg: 8.0,
            focal_scale: 1.0,
            max_shading: 0.9,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        if self.views == 0 || self.width == 0 || self.height == 0 {
            return bad("views, width and height must be positive");
        }
        if self.min_spheres == 0 || self.min_spheres > self.max_spheres {
            return bad("need 1 <= min_spheres <= max_spheres");
        }
        if !(self.focal_scale > 0.0) || !(self.max_shading > 0.0 && self.max_shading <= 1.0) {
            return bad("focal_scale must be positive and max_shading in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub spheres: Vec<Sphere>,
    pub plane: Option<GroundPlane>,
    pub lights: Vec<PointLight>,
    /// Constant incident radiance from every direction, linear RGB.
    pub ambient: [f64; 3],
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.spheres.is_empty() && self.plane.is_none() {
            return bad("scene has no primitive".into());
        }
        if self.lights.is_empty() {
            return bad("scene has no light".into());
        }
        if self.poses.is_empty() {
            return bad("scene has no camera pose".into());
        }
        let mats = self
            .spheres
            .iter()
            .map(|s| s.material)
            .chain(self.plane.map(|p| p.material));
        for (i, m) in mats.enumerate() {
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !m.albedo.iter().all(|&a| unit(a))
                || !unit(m.metallic)
                || !(brdf::MIN_ROUGHNESS..=1.0).contains(&m.roughness)
            {
                return bad(format!("material {i} out of range"));
            }
        }
        if self.spheres.iter().any(|s| !(s.radius > 0.0)) {
            return bad("sphere radius must be positive".into());
        }
        let light_ok = |v: &[f64; 3]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !self.lights.iter().all(|l| light_ok(&l.intensity)) || !light_ok(&self.ambient) {
            return bad("light intensities must be nonnegative".into());
        }
        for p in &self.poses {
            p.validate()?;
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.poses.len()
    }

    /// Camera `index` at `width × height`.
    pub fn camera(&self, index: usize, width: usize, height: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics.resized(width, height),
            pose: self.poses[index],
        }
    }

    /// Multiply every light and the ambient term by `k`.
    pub fn scale_lights(&mut self, k: f64) {
        for l in &mut self.lights {
            l.intensity = l.intensity.map(|v| v * k);
        }
        self.ambient = self.ambient.map(|v| v * k);
    }
}

fn rand_albedo(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(lo..hi))
}

fn rand_material(rng: &mut ChaCha8Rng, textured: bool) -> Material {
    let albedo = rand_albedo(rng, 0.1, 0.9);
    let lambertian = rng.gen_bool(0.3);
    let metallic = if lambertian { 0.0 } else { rng.gen_range(0.0..1.0) };
    let roughness = rng.gen_range(0.25..1.0);
    let checker = (textured && rng.gen_bool(0.5)).then(|| Checker {
        albedo2: rand_albedo(rng, 0.1, 0.9),
        cell: rng.gen_range(0.15..0.35),
    });
    Material {
        albedo,
        metallic,
        roughness,
        lambertian,
        checker,
    }
}

fn light_above(rng: &mut ChaCha8Rng, target: [f64; 3]) -> PointLight {
    let az = rng.gen_range(0.0..std::f64::consts::TAU);
    let el = rng.gen_range(35f64..70.0).to_radians();
    let dist = rng.gen_range(3.5..5.0);
    let tint = rand_albedo(rng, 0.8, 1.0);
    PointLight {
        position: [
            target[0] + dist * el.cos() * az.cos(),
            target[1] + dist * el.sin(),
            target[2] + dist * el.cos() * az.sin(),
        ],
        intensity: tint.map(|t| 10.0 * t),
    }
}

/// Deterministic scene for `seed`. Lights are rescaled so the largest
/// diffuse shading over all views at the configured resolution equals
/// `cfg.max_shading`.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = [0.0, 1.0, 0.0];
    let intrinsics = Intrinsics::centered(cfg.focal_scale * cfg.width as f64, cfg.width, cfg.height);
    let mut scene = match cfg.difficulty {
        Difficulty::Minimal => {
            let radius = rng.gen_range(0.6..1.0);
            let sphere = Sphere {
                center: [0.0, 0.0, 0.0],
                radius,
                material: Material::lambertian(rand_albedo(&mut rng, 0.15, 0.85)),
            };
            let light = light_above(&mut rng, [0.0; 3]);
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(3.0..3.8);
            let eye = [dist * az.cos(), 0.6, dist * az.sin()];
            let pose = Pose::look_at(eye, [0.0; 3], up);
            SceneSpec {
                seed,
                difficulty: cfg.difficulty,
                spheres: vec![sphere],
                plane: None,
                lights: vec![light],
                ambient: [0.3; 3],
                intrinsics,
                poses: vec![pose; cfg.views],
            }
        }
        Difficulty::Easy | Difficulty::Textured => {
            let textured = cfg.difficulty == Difficulty::Textured;
            let count = rng.gen_range(cfg.min_spheres..=cfg.max_spheres);
            let mut spheres: Vec<Sphere> = Vec::with_capacity(count);
            let mut tries = 0;
            while spheres.len() < count && tries < 10_000 {
                tries += 1;
                let radius = rng.gen_range(0.4..0.75);
                let (r, phi) = (rng.gen_range(0.0..1.4f64), rng.gen_range(0.0..std::f64::consts::TAU));
                let lift = rng.gen_range(0.3..0.6);
                let center = [r * phi.cos(), radius + lift, r * phi.sin()];
                // keep a clear gap between surfaces so depth tests separate them
                let clear = spheres.iter().all(|s| {
                    let d = crate::geometry::v3(s.center) - crate::geometry::v3(center);
                    d.norm() >= s.radius + radius + 0.3
                });
                if clear {
                    spheres.push(Sphere {
                        center,
                        radius,
                        material: rand_material(&mut rng, textured),
                    });
                }
            }
            if spheres.len() < cfg.min_spheres {
                return Err(SceneError::Invalid(format!(
                    "could not place {} spheres",
                    cfg.min_spheres
                )));
            }
            let plane = cfg.ground_plane.then(|| GroundPlane {
                height: 0.0,
                material: rand_material(&mut rng, textured),
            });
            let target = [0.0, 0.6, 0.0];
            let n_lights = rng.gen_range(1..=2);
            let lights = (0..n_lights).map(|_| light_above(&mut rng, target)).collect();
            let radius = rng.gen_range(3.4..4.0);
            let height = rng.gen_range(1.2..2.2);
            let start = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let step = dir * cfg.orbit_step_deg.to_radians();
            let poses = (0..cfg.views)
                .map(|i| {
                    let a = start + step * i as f64;
                    Pose::look_at([radius * a.cos(), height, radius * a.sin()], target, up)
                })
                .collect();
            let amb = rng.gen_range(0.2..0.5);
            SceneSpec {
                seed,
                difficulty: cfg.difficulty,
                spheres,
                plane,
                lights,
                ambient: [amb; 3],
                intrinsics,
                poses,
            }
        }
    };
    scene.validate()?;
    let mut peak: f64 = 0.0;
    for i in 0..scene.num_views() {
        let cam = scene.camera(i, cfg.width, cfg.height);
        peak = peak.max(render::max_shading(&scene, &cam));
    }
    if peak > 0.0 {
        scene.scale_lights(cfg.max_shading / peak);
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_scene(3, &cfg).unwrap(), gen_scene(3, &cfg).unwrap());
        assert_ne!(gen_scene(3, &cfg).unwrap(), gen_scene(4, &cfg).unwrap());
    }

    #[test]
    fn sphere_counts_stay_in_bounds() {
        let cfg = SceneConfig {
            min_spheres: 1,
            max_spheres: 3,
            ..Default::default()
        };
        let counts: Vec<usize> = (0..20).map(|s| gen_scene(s, &cfg).unwrap().spheres.len()).collect();
        assert!(counts.iter().all(|c| (1..=3).contains(c)));
        assert!(counts.iter().any(|&c| c != counts[0]));
    }

    #[test]
    fn minimal_contract() {
        let cfg = SceneConfig {
            difficulty: Difficulty::Minimal,
            views: 4,
            ..Default::default()
        };
        let s = gen_scene(9, &cfg).unwrap();
        assert_eq!(s.spheres.len(), 1);
        assert!(s.plane.is_none());
        assert!(s.spheres[0].material.lambertian);
        assert_eq!(s.lights.len(), 1);
        assert!(s.poses.iter().all(|p| *p == s.poses[0]));
    }
}
