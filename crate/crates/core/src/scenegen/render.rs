use std::f64::consts::PI;

use rayon::prelude::*;

use crate::geometry::{taps_at, v3, Camera, CameraView, Flow, Vec3, OCCLUSION_TOL};
use crate::model::IntrinsicSet;
use crate::tensor::Tensor;

use super::brdf::specular_cos;
use super::{Material, Result, SceneSpec};

/// Color of pixels where no primitive is hit.
pub const BACKGROUND: f64 = 0.5;

/// Self-intersection offset for shadow rays, meters.
const SHADOW_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Sphere(usize),
    Plane,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Ray parameter; z-depth for rays from [`Camera::ray_at`].
    pub t: f64,
    pub prim: Primitive,
    pub point: Vec3,
    pub normal: Vec3,
}

fn sphere_t(o: &Vec3, d: &Vec3, c: &Vec3, r: f64, t_min: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let hb = d.dot(&oc);
    let cc = oc.dot(&oc) - r * r;
    let disc = hb * hb - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-hb - sq) / a;
    if t0 > t_min {
        return Some(t0);
    }
    let t1 = (-hb + sq) / a;
    (t1 > t_min).then_some(t1)
}

fn plane_t(o: &Vec3, d: &Vec3, h: f64, t_min: f64) -> Option<f64> {
    if d.y == 0.0 {
        return None;
    }
    let t = (h - o.y) / d.y;
    // one-sided: only the upper face is visible
    (t > t_min && o.y > h).then_some(t)
}

/// Nearest intersection with parameter above `t_min`.
pub fn trace_from(scene: &SceneSpec, o: &Vec3, d: &Vec3, t_min: f64) -> Option<Hit> {
    let mut best: Option<(f64, Primitive)> = None;
    for (i, s) in scene.spheres.iter().enumerate() {
        if let Some(t) = sphere_t(o, d, &v3(s.center), s.radius, t_min) {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, Primitive::Sphere(i)));
            }
        }
    }
    if let Some(p) = &scene.plane {
        if let Some(t) = plane_t(o, d, p.height, t_min) {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, Primitive::Plane));
            }
        }
    }
    best.map(|(t, prim)| {
        let point = o + d * t;
        let normal = match prim {
            Primitive::Sphere(i) => {
                let s = &scene.spheres[i];
                (point - v3(s.center)) / s.radius
            }
            Primitive::Plane => Vec3::new(0.0, 1.0, 0.0),
        };
        Hit {
            t,
            prim,
            point,
            normal,
        }
    })
}

pub fn trace(scene: &SceneSpec, o: &Vec3, d: &Vec3) -> Option<Hit> {
    trace_from(scene, o, d, 0.0)
}

fn occluded(scene: &SceneSpec, p: &Vec3, n: &Vec3, light: &Vec3) -> bool {
    let o = p + n * SHADOW_EPS;
    let d = light - o;
    let blocks = |t: f64| t < 1.0;
    scene
        .spheres
        .iter()
        .any(|s| sphere_t(&o, &d, &v3(s.center), s.radius, 0.0).is_some_and(blocks))
        || scene
            .plane
            .as_ref()
            .is_some_and(|pl| plane_t(&o, &d, pl.height, 0.0).is_some_and(blocks))
}

/// Albedo, metallic, roughness and lambertian flag at a surface point.
pub fn material_at(scene: &SceneSpec, hit: &Hit) -> Material {
    let mut m = match hit.prim {
        Primitive::Sphere(i) => scene.spheres[i].material,
        Primitive::Plane => scene.plane.expect("plane hit").material,
    };
    if let Some(c) = m.checker {
        let q = hit.point / c.cell;
        let parity = (q.x.floor() + q.y.floor() + q.z.floor()) as i64;
        if parity.rem_euclid(2) == 1 {
            m.albedo = c.albedo2;
        }
    }
    m
}

/// Diffuse shading `Σ vis·I·max(0, n·l)/(π d²) + ambient/π`.
pub fn shading_at(scene: &SceneSpec, p: &Vec3, n: &Vec3) -> [f64; 3] {
    let mut d = scene.ambient.map(|a| a / PI);
    for l in &scene.lights {
        let lp = v3(l.position);
        let to = lp - p;
        let d2 = to.norm_squared();
        let cos = n.dot(&(to / d2.sqrt()));
        if cos <= 0.0 || occluded(scene, p, n, &lp) {
            continue;
        }
        for c in 0..3 {
            d[c] += l.intensity[c] * cos / (PI * d2);
        }
    }
    d
}

fn specular_at(scene: &SceneSpec, p: &Vec3, n: &Vec3, v: &Vec3, m: &Material) -> [f64; 3] {
    let mut s = [0.0; 3];
    if m.lambertian {
        return s;
    }
    for l in &scene.lights {
        let lp = v3(l.position);
        let to = lp - p;
        let d2 = to.norm_squared();
        let ld = to / d2.sqrt();
        if n.dot(&ld) <= 0.0 || occluded(scene, p, n, &lp) {
            continue;
        }
        let f = specular_cos(n, v, &ld, m.albedo, m.metallic, m.roughness);
        for c in 0..3 {
            s[c] += f[c] * l.intensity[c] / d2;
        }
    }
    s
}

/// Largest diffuse shading value seen by `cam`.
pub(crate) fn max_shading(scene: &SceneSpec, cam: &Camera) -> f64 {
    let (w, h) = (cam.width(), cam.height());
    (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .filter_map(|u| {
                    let (o, d) = cam.pixel_ray(u, v);
                    trace(scene, &o, &d).map(|hit| {
                        shading_at(scene, &hit.point, &hit.normal)
                            .into_iter()
                            .fold(0.0, f64::max)
                    })
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Everything rendered for one view. Maps are `[C, H, W]`; `depth` is
/// `[H, W]` z-depth with `+∞` on background pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub rgb: Tensor,
    pub albedo: Tensor,
    pub metallic: Tensor,
    pub roughness: Tensor,
    /// Camera-space unit normals; background pixels hold `(0, 0, -1)`.
    pub normal: Tensor,
    pub shading: Tensor,
    /// Specular radiance before clamping.
    pub specular: Tensor,
    pub depth: Tensor,
    /// Primitive index per pixel (spheres first, then the plane), `-1` on
    /// background.
    pub prim: Vec<i64>,
    pub camera: Camera,
    pub flow_to_next: Option<Flow>,
}

impl ViewBundle {
    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn view(&self) -> CameraView {
        CameraView {
            camera: self.camera,
            depth: self.depth.clone(),
        }
    }

    pub fn hit_mask(&self) -> Vec<bool> {
        self.prim.iter().map(|&p| p >= 0).collect()
    }

    /// Ground-truth maps as a one-view set.
    pub fn intrinsics(&self) -> IntrinsicSet {
        let add = |t: &Tensor| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s).expect("same numel")
        };
        IntrinsicSet {
            albedo: add(&self.albedo),
            metallic: add(&self.metallic),
            roughness: add(&self.roughness),
            normal: add(&self.normal),
            shading: add(&self.shading),
        }
    }
}

fn prim_index(scene: &SceneSpec, p: Primitive) -> i64 {
    match p {
        Primitive::Sphere(i) => i as i64,
        Primitive::Plane => scene.spheres.len() as i64,
    }
}

struct PixelOut {
    rgb: [f64; 3],
    albedo: [f64; 3],
    metallic: f64,
    roughness: f64,
    normal: [f64; 3],
    shading: [f64; 3],
    specular: [f64; 3],
    depth: f64,
    prim: i64,
}

fn render_pixel(scene: &SceneSpec, cam: &Camera, u: usize, v: usize) -> PixelOut {
    let (o, d) = cam.pixel_ray(u, v);
    let Some(hit) = trace(scene, &o, &d) else {
        return PixelOut {
            rgb: [BACKGROUND; 3],
            albedo: [0.0; 3],
            metallic: 0.0,
            roughness: 0.0,
            normal: [0.0, 0.0, -1.0],
            shading: [0.0; 3],
            specular: [0.0; 3],
            depth: f64::INFINITY,
            prim: -1,
        };
    };
    let m = material_at(scene, &hit);
    let n = hit.normal;
    let view_dir = (o - hit.point).normalize();
    let shading = shading_at(scene, &hit.point, &n);
    let specular = specular_at(scene, &hit.point, &n, &view_dir, &m);
    let rgb = std::array::from_fn(|c| (m.albedo[c] * shading[c] + specular[c]).clamp(0.0, 1.0));
    let nc = cam.pose.rot().transpose() * n;
    PixelOut {
        rgb,
        albedo: m.albedo,
        metallic: m.metallic,
        roughness: m.roughness,
        normal: [nc.x, nc.y, nc.z],
        shading,
        specular,
        depth: hit.t,
        prim: prim_index(scene, hit.prim),
    }
}

/// Render view `pose_index` at `width × height`.
pub fn render_view(scene: &SceneSpec, pose_index: usize, height: usize, width: usize) -> Result<ViewBundle> {
    if pose_index >= scene.num_views() {
        return Err(super::SceneError::Invalid(format!(
            "pose {pose_index} out of range ({} poses)",
            scene.num_views()
        )));
    }
    let cam = scene.camera(pose_index, width, height);
    let px: Vec<PixelOut> = (0..height * width)
        .into_par_iter()
        .map(|i| render_pixel(scene, &cam, i % width, i / width))
        .collect();
    let plane = height * width;
    let map3 = |f: &dyn Fn(&PixelOut) -> [f64; 3]| {
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in px.iter().enumerate() {
            let v = f(p);
            for c in 0..3 {
                data[c * plane + i] = v[c];
            }
        }
        Tensor::new(&[3, height, width], data)
    };
    let map1 = |f: &dyn Fn(&PixelOut) -> f64| Tensor::new(&[1, height, width], px.iter().map(f).collect());
    Ok(ViewBundle {
        rgb: map3(&|p| p.rgb)?,
        albedo: map3(&|p| p.albedo)?,
        metallic: map1(&|p| p.metallic)?,
        roughness: map1(&|p| p.roughness)?,
        normal: map3(&|p| p.normal)?,
        shading: map3(&|p| p.shading)?,
        specular: map3(&|p| p.specular)?,
        depth: Tensor::new(&[height, width], px.iter().map(|p| p.depth).collect())?,
        prim: px.iter().map(|p| p.prim).collect(),
        camera: cam,
        flow_to_next: None,
    })
}

/// Every view of the scene, each with its flow to the next view (none on
/// the last).
pub fn render_sequence(scene: &SceneSpec, height: usize, width: usize) -> Result<Vec<ViewBundle>> {
    let mut views = (0..scene.num_views())
        .map(|i| render_view(scene, i, height, width))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..views.len().saturating_sub(1) {
        let next = views[i + 1].camera;
        views[i].flow_to_next = Some(analytic_flow(scene, &views[i].camera, &next, &views[i].depth)?);
    }
    Ok(views)
}

/// Displacement of every pixel of `cam_a` to where its surface point lands
/// in `cam_b`. Valid when the point is a hit in `a`, projects inside `b`,
/// is the first surface along `b`'s ray (depth within 1%), and every
/// bilinear tap around the landing position sees the same primitive.
pub fn analytic_flow(scene: &SceneSpec, cam_a: &Camera, cam_b: &Camera, depth_a: &Tensor) -> Result<Flow> {
    let (w, h) = (cam_a.width(), cam_a.height());
    if depth_a.shape() != [h, w] {
        return Err(super::SceneError::Invalid(format!(
            "depth {:?} does not match a {h}x{w} camera",
            depth_a.shape()
        )));
    }
    let (wb, hb) = (cam_b.width(), cam_b.height());
    let np = w * h;
    let per_px: Vec<(f64, f64, bool)> = (0..np)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i % w, i / w);
            let z = depth_a.data()[i];
            if !z.is_finite() {
                return (0.0, 0.0, false);
            }
            let p = cam_a.unproject(u, v, z);
            let Some((x, y, zb)) = cam_b.project(&p) else {
                return (0.0, 0.0, false);
            };
            let flow = (x - (u as f64 + 0.5), y - (v as f64 + 0.5));
            let Some((idx, wt)) = taps_at(x - 0.5, y - 0.5, wb, hb) else {
                return (flow.0, flow.1, false);
            };
            let (o, d) = cam_b.ray_at(x, y);
            let visible = trace(scene, &o, &d).is_some_and(|hit| (hit.t - zb).abs() / zb < OCCLUSION_TOL);
            let (oa, da) = cam_a.pixel_ray(u, v);
            let own = trace(scene, &oa, &da).map(|hit| hit.prim);
            let same_surface = (0..4).all(|q| {
                wt[q] <= 1e-9 || {
                    let (tu, tv) = (idx[q] % wb, idx[q] / wb);
                    let (ob, db) = cam_b.pixel_ray(tu, tv);
                    trace(scene, &ob, &db).map(|hit| hit.prim) == own
                }
            });
            (flow.0, flow.1, visible && same_surface && own.is_some())
        })
        .collect();
    let mut uv = vec![0.0; 2 * np];
    let mut valid = vec![false; np];
    for (i, (fx, fy, ok)) in per_px.into_iter().enumerate() {
        uv[i] = fx;
        uv[np + i] = fy;
        valid[i] = ok;
    }
    Ok(Flow {
        uv: Tensor::new(&[2, h, w], uv)?,
        valid,
    })
}
