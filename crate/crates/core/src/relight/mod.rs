//! Relighting a fused point cloud and editing materials with predicted
//! diffuse shading.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{v3, Camera, CameraView, GeometryError, PointCloudPBR, Vec3};
use crate::model::IntrinsicSet;
use crate::scenegen::brdf::{specular_cos, MIN_ROUGHNESS};
use crate::scenegen::{PointLight, SceneSpec};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum RelightError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RelightError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightRig {
    #[serde(default)]
    pub lights: Vec<PointLight>,
    #[serde(default)]
    pub ambient: [f64; 3],
}

impl LightRig {
    pub fn from_scene(scene: &SceneSpec) -> Self {
        Self {
            lights: scene.lights.clone(),
            ambient: scene.ambient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64; 3]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !self.lights.iter().all(|l| ok(&l.intensity)) || !ok(&self.ambient) {
            return Err(RelightError::Config("light intensities must be finite and nonnegative".into()));
        }
        if self.lights.iter().any(|l| l.position.iter().any(|c| !c.is_finite())) {
            return Err(RelightError::Config("light positions must be finite".into()));
        }
        Ok(())
    }

    /// Every intensity and the ambient term times `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lights: self
                .lights
                .iter()
                .map(|l| PointLight {
                    position: l.position,
                    intensity: l.intensity.map(|v| v * k),
                })
                .collect(),
            ambient: self.ambient.map(|v| v * k),
        }
    }
}

/// Outgoing radiance at world point `p` with unit normal `n` seen from unit
/// direction `view_dir` (surface to eye): Lambertian diffuse weighted by
/// `1 − metallic`, GGX specular and an ambient term. No shadowing.
pub fn shade_point(
    albedo: [f64; 3],
    metallic: f64,
    roughness: f64,
    p: &Vec3,
    n: &Vec3,
    view_dir: &Vec3,
    rig: &LightRig,
) -> [f64; 3] {
    let roughness = roughness.max(MIN_ROUGHNESS);
    let mut out: [f64; 3] = std::array::from_fn(|c| rig.ambient[c] * albedo[c] / PI);
    for l in &rig.lights {
        let to = v3(l.position) - p;
        let d2 = to.norm_squared();
        let ld = to / d2.sqrt();
        let cos = n.dot(&ld);
        if cos <= 0.0 {
            continue;
        }
        let spec = specular_cos(n, view_dir, &ld, albedo, metallic, roughness);
        for c in 0..3 {
            let diffuse = (1.0 - metallic) * albedo[c] / PI * cos;
            out[c] += (diffuse + spec[c]) * l.intensity[c] / d2;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatOptions {
    /// Pixels whose center lies within this distance of a projected point
    /// may show it.
    pub radius: f64,
    pub background: [f64; 3],
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            radius: 1.5,
            background: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelitImage {
    /// Linear radiance before clamping, `[3, H, W]`.
    pub radiance: Tensor,
    /// `radiance` clamped to `[0, 1]`.
    pub image: Tensor,
    /// Pixels showing a point.
    pub covered: Vec<bool>,
}

/// Index of the nearest point covering each pixel. Points are visited in
/// order and only a strictly closer point replaces a pixel's owner.
pub fn splat_owners(cloud: &PointCloudPBR, camera: &Camera, radius: f64) -> Vec<Option<usize>> {
    let (w, h) = (camera.width(), camera.height());
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut owner = vec![None; w * h];
    let projected: Vec<Option<(f64, f64, f64)>> = cloud
        .positions
        .par_iter()
        .map(|p| camera.project(&v3(*p)))
        .collect();
    for (i, proj) in projected.into_iter().enumerate() {
        let Some((x, y, z)) = proj else { continue };
        let lo = |c: f64| (c - radius - 0.5).ceil().max(0.0) as usize;
        let (u0, v0) = (lo(x), lo(y));
        let u1 = ((x + radius - 0.5).floor()).min(w as f64 - 1.0);
        let v1 = ((y + radius - 0.5).floor()).min(h as f64 - 1.0);
        if u1 < 0.0 || v1 < 0.0 {
            continue;
        }
        for v in v0..=v1 as usize {
            for u in u0..=u1 as usize {
                let (dx, dy) = (u as f64 + 0.5 - x, v as f64 + 0.5 - y);
                let k = v * w + u;
                if dx * dx + dy * dy <= radius * radius && z < zbuf[k] {
                    zbuf[k] = z;
                    owner[k] = Some(i);
                }
            }
        }
    }
    owner
}

/// Render the cloud from `camera` under `rig`.
pub fn render_relit(cloud: &PointCloudPBR, camera: &Camera, rig: &LightRig, opts: &SplatOptions) -> Result<RelitImage> {
    if cloud.is_empty() {
        return Err(RelightError::EmptyCloud);
    }
    if !(opts.radius > 0.0) {
        return Err(RelightError::Config("splat radius must be positive".into()));
    }
    rig.validate()?;
    let (w, h) = (camera.width(), camera.height());
    let owner = splat_owners(cloud, camera, opts.radius);
    let eye = v3(camera.pose.translation);
    let colors: Vec<[f64; 3]> = owner
        .par_iter()
        .map(|o| match o {
            None => opts.background,
            Some(i) => {
                let p = v3(cloud.positions[*i]);
                shade_point(
                    cloud.albedo[*i],
                    cloud.metallic[*i],
                    cloud.roughness[*i],
                    &p,
                    &v3(cloud.normals[*i]),
                    &(eye - p).normalize(),
                    rig,
                )
            }
        })
        .collect();
    let plane = w * h;
    let radiance = Tensor::from_fn(&[3, h, w], |i| colors[i[1] * w + i[2]][i[0]]);
    let image = radiance.map(|v| v.clamp(0.0, 1.0));
    debug_assert_eq!(radiance.numel(), 3 * plane);
    Ok(RelitImage {
        radiance,
        image,
        covered: owner.iter().map(Option::is_some).collect(),
    })
}

/// World-space selection of the surface to recolor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditRegion {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Everything within `radius` of any listed point.
    Points { points: Vec<[f64; 3]>, radius: f64 },
}

impl EditRegion {
    /// Region around the given points of a cloud.
    pub fn from_indices(cloud: &PointCloudPBR, indices: &[usize], radius: f64) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                cloud
                    .positions
                    .get(i)
                    .copied()
                    .ok_or_else(|| RelightError::Invalid(format!("point index {i} out of range ({})", cloud.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Points { points, radius })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RelightError::Config(m.into()));
        match self {
            Self::Box { min, max } if (0..3).any(|k| !(min[k] <= max[k])) => bad("box min must not exceed max"),
            Self::Sphere { radius, .. } | Self::Points { radius, .. } if !(*radius > 0.0) => {
                bad("region radius must be positive")
            }
            Self::Points { points, .. } if points.is_empty() => bad("point region needs at least one point"),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Self::Box { min, max } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
            Self::Sphere { center, radius } => (p - v3(*center)).norm() <= *radius,
            Self::Points { points, radius } => points.iter().any(|q| (p - v3(*q)).norm() <= *radius),
        }
    }
}

/// Replacement albedo, evaluated at world positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NewAlbedo {
    Constant { value: [f64; 3] },
    /// World-space 3-D checkerboard.
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

impl NewAlbedo {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: &[f64; 3]| v.iter().all(|x| (0.0..=1.0).contains(x));
        let ok = match self {
            Self::Constant { value } => unit(value),
            Self::Checker { a, b, cell } => unit(a) && unit(b) && *cell > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(RelightError::Config("replacement albedo must lie in [0, 1] with a positive cell".into()))
        }
    }

    pub fn at(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Self::Constant { value } => *value,
            Self::Checker { a, b, cell } => {
                let q = p / *cell;
                let parity = (q.x.floor() + q.y.floor() + q.z.floor()) as i64;
                if parity.rem_euclid(2) == 1 {
                    *b
                } else {
                    *a
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    /// `[N, 3, H, W]`.
    pub images: Tensor,
    /// Edited pixels per view.
    pub footprints: Vec<Vec<bool>>,
    pub warnings: Vec<String>,
}

/// Inside the region's footprint each pixel becomes `new_albedo ⊙ D̂`
/// (clamped to `[0, 1]`); every other pixel is copied unchanged.
pub fn edit_material(
    views: &[CameraView],
    images: &Tensor,
    preds: &IntrinsicSet,
    region: &EditRegion,
    new_albedo: &NewAlbedo,
) -> Result<EditResult> {
    region.validate()?;
    new_albedo.validate()?;
    let n = views.len();
    if n == 0 || preds.num_views() != n {
        return Err(RelightError::Invalid(format!(
            "{n} views but {} prediction sets",
            preds.num_views()
        )));
    }
    let (h, w) = (preds.height(), preds.width());
    if images.shape() != [n, 3, h, w] {
        return Err(RelightError::Invalid(format!(
            "images {:?} do not match {n} views of {h}x{w}",
            images.shape()
        )));
    }
    let plane = h * w;
    let mut out = images.to_vec();
    let mut footprints = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    let shading = preds.shading.data();
    for (vi, view) in views.iter().enumerate() {
        view.validate()?;
        if (view.height(), view.width()) != (h, w) {
            return Err(RelightError::Invalid(format!("view {vi} is not {h}x{w}")));
        }
        let albedo_at: Vec<Option<[f64; 3]>> = (0..plane)
            .into_par_iter()
            .map(|i| {
                let (u, v) = (i % w, i / w);
                if !view.hit(u, v) {
                    return None;
                }
                let p = view.camera.unproject(u, v, view.depth_at(u, v));
                region.contains(&p).then(|| new_albedo.at(&p))
            })
            .collect();
        for (i, a) in albedo_at.iter().enumerate() {
            if let Some(a) = a {
                for c in 0..3 {
                    let k = (vi * 3 + c) * plane + i;
                    out[k] = (a[c] * shading[k]).clamp(0.0, 1.0);
                }
            }
        }
        let fp: Vec<bool> = albedo_at.iter().map(Option::is_some).collect();
        if !fp.iter().any(|&b| b) {
            warnings.push(format!("edit region covers no pixel of view {vi}"));
        }
        footprints.push(fp);
    }
    if footprints.iter().all(|f| !f.iter().any(|&b| b)) {
        log::warn!("edit region projects to no pixel in any view; output unedited");
    }
    Ok(EditResult {
        images: Tensor::new(&[n, 3, h, w], out)?,
        footprints,
        warnings,
    })
}

/// Relighting job file: a light rig plus splat settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelightConfig {
    /// Absent means the scene's own lights.
    pub rig: Option<LightRig>,
    pub splat: SplatOptions,
    /// Voxel edge used when fusing views into a cloud; none keeps every
    /// sample.
    pub voxel: Option<f64>,
}

/// Edit job file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub region: EditRegion,
    pub albedo: NewAlbedo,
}

impl RelightConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RelightError::Config(e.to_string()))?;
        if let Some(rig) = &cfg.rig {
            rig.validate()?;
        }
        Ok(cfg)
    }
}

impl EditConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RelightError::Config(e.to_string()))?;
        cfg.region.validate()?;
        cfg.albedo.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_light(pos: [f64; 3], i: f64) -> LightRig {
        LightRig {
            lights: vec![PointLight {
                position: pos,
                intensity: [i; 3],
            }],
            ambient: [0.0; 3],
        }
    }

    #[test]
    fn black_metal_has_no_diffuse() {
        let rig = one_light([0.0, 0.0, 2.0], 5.0);
        let (p, n) = (Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
        let v = Vec3::new(0.0, 0.6, 0.8);
        let got = shade_point([0.0; 3], 1.0, 0.5, &p, &n, &v, &rig);
        // F0 = 0 and a black albedo leave only the Schlick grazing term
        let spec = specular_cos(&n, &v, &Vec3::new(0.0, 0.0, 1.0), [0.0; 3], 1.0, 0.5);
        for c in 0..3 {
            assert!((got[c] - spec[c] * 5.0 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normal_incidence_lambertian_closed_form() {
        let d = 2.0;
        let rig = one_light([0.0, 0.0, d], 3.0);
        let (p, n) = (Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
        let a = [0.2, 0.5, 0.8];
        let got = shade_point(a, 0.0, 1.0, &p, &n, &n, &rig);
        let spec = specular_cos(&n, &n, &n, a, 0.0, 1.0);
        for c in 0..3 {
            let diffuse = a[c] * 3.0 / (PI * d * d);
            assert!((got[c] - spec[c] * 3.0 / (d * d) - diffuse).abs() < 1e-15);
        }
    }

    /// Straight-line evaluation of the same reflectance model.
    fn reference_shade(a: [f64; 3], m: f64, r: f64, p: [f64; 3], n: [f64; 3], v: [f64; 3], rig: &LightRig) -> [f64; 3] {
        let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
        let unit = |x: [f64; 3]| {
            let l = dot(x, x).sqrt();
            [x[0] / l, x[1] / l, x[2] / l]
        };
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = rig.ambient[c] * a[c] / PI;
        }
        for light in &rig.lights {
            let to = [light.position[0] - p[0], light.position[1] - p[1], light.position[2] - p[2]];
            let d2 = dot(to, to);
            let l = unit(to);
            let nl = dot(n, l);
            let nv = dot(n, v);
            if nl <= 0.0 {
                continue;
            }
            let hv = unit([v[0] + l[0], v[1] + l[1], v[2] + l[2]]);
            let alpha = r.max(0.05) * r.max(0.05);
            let a2 = alpha * alpha;
            let nh = dot(n, hv).max(0.0);
            let ndf = a2 / (PI * (nh * nh * (a2 - 1.0) + 1.0).powi(2));
            let g1 = |x: f64| 2.0 * x / (x + (a2 + (1.0 - a2) * x * x).sqrt());
            for c in 0..3 {
                let f0 = 0.04 * (1.0 - m) + a[c] * m;
                let fr = f0 + (1.0 - f0) * (1.0 - dot(v, hv).clamp(0.0, 1.0)).powi(5);
                let spec = if nv > 0.0 { fr * ndf * g1(nl) * g1(nv) / (4.0 * nl * nv) } else { 0.0 };
                out[c] += ((1.0 - m) * a[c] / PI + spec) * nl * light.intensity[c] / d2;
            }
        }
        out
    }

    #[test]
    fn random_parameters_match_reference_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit3 = |rng: &mut ChaCha8Rng| {
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| c / l)
        };
        for _ in 0..200 {
            let rig = LightRig {
                lights: (0..2)
                    .map(|_| PointLight {
                        position: std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
                        intensity: std::array::from_fn(|_| rng.gen_range(0.0..10.0)),
                    })
                    .collect(),
                ambient: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
            };
            let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let (m, r) = (rng.gen_range(0.0..1.0), rng.gen_range(0.05..1.0));
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
            let n = unit3(&mut rng);
            let v = unit3(&mut rng);
            let got = shade_point(a, m, r, &v3(p), &v3(n), &v3(v), &rig);
            let want = reference_shade(a, m, r, p, n, v, &rig);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() <= 1e-12 * want[c].abs().max(1.0), "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn shading_is_linear_in_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rig = one_light(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)), rng.gen_range(0.1..5.0));
            let n = Vec3::new(0.0, 0.0, 1.0);
            let v = Vec3::new(0.3, 0.0, 1.0).normalize();
            let a = [rng.gen_range(0.0..1.0); 3];
            let k = rng.gen_range(0.5..3.0);
            let one = shade_point(a, 0.3, 0.6, &Vec3::zeros(), &n, &v, &rig);
            let scaled = shade_point(a, 0.3, 0.6, &Vec3::zeros(), &n, &v, &rig.scaled(k));
            for c in 0..3 {
                assert!((scaled[c] - k * one[c]).abs() < 1e-12 * (1.0 + one[c]));
            }
        }
    }

    #[test]
    fn configs_parse_from_toml() {
        let rc = RelightConfig::from_toml(
            "voxel = 0.01\n[rig]\nambient = [0.1, 0.1, 0.1]\n[[rig.lights]]\nposition = [0.0, 3.0, 0.0]\nintensity = [5.0, 5.0, 5.0]\n[splat]\nradius = 2.0\n",
        )
        .unwrap();
        assert_eq!(rc.rig.unwrap().lights.len(), 1);
        assert_eq!(RelightConfig::from_toml("").unwrap().rig, None);
        assert_eq!(rc.splat.radius, 2.0);
        assert_eq!(rc.splat.background, [0.5; 3]);
        let ec = EditConfig::from_toml(
            "[region]\nkind = \"sphere\"\ncenter = [0.0, 0.5, 0.0]\nradius = 0.7\n[albedo]\nkind = \"constant\"\nvalue = [0.9, 0.1, 0.1]\n",
        )
        .unwrap();
        assert!(matches!(ec.region, EditRegion::Sphere { .. }));
        assert!(RelightConfig::from_toml("[rig]\nambient = [-1.0, 0.0, 0.0]\n").is_err());
        assert!(EditConfig::from_toml("[region]\nkind = \"sphere\"\ncenter = [0.0, 0.0, 0.0]\nradius = -1.0\n[albedo]\nkind = \"constant\"\nvalue = [0.5, 0.5, 0.5]\n").is_err());
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let cam = Camera {
            intrinsics: crate::geometry::Intrinsics::centered(8.0, 8, 8),
            pose: crate::geometry::Pose::identity(),
        };
        let r = render_relit(&PointCloudPBR::default(), &cam, &LightRig::default(), &SplatOptions::default());
        assert!(matches!(r, Err(RelightError::EmptyCloud)));
    }
}
