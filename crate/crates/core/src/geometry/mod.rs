//! Projective geometry: back-projection, cross-view reprojection, flow
//! warping and point-cloud fusion.

mod camera;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::IntrinsicSet;
use crate::tensor::{Tensor, TensorError, Var};

pub use camera::{v3, Camera, Intrinsics, Pose, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty point cloud: {0}")]
    EmptyCloud(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Relative depth tolerance of the occlusion test.
pub const OCCLUSION_TOL: f64 = 0.01;

/// Largest second difference of inverse depth across a 2x2 tap footprint,
/// relative to the interpolated inverse depth, still treated as one surface.
pub const PLANARITY_TOL: f64 = 1e-3;

/// Bilinear taps with weight at or below this are ignored by depth tests.
const TAP_EPS: f64 = 1e-9;

/// A camera plus its z-depth map `[H, W]` (`+∞` where nothing was hit).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub depth: Tensor,
}

impl CameraView {
    pub fn new(camera: Camera, depth: Tensor) -> Result<Self> {
        let v = Self { camera, depth };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.pose.validate()?;
        let k = &self.camera.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(GeometryError::Contract("focal lengths must be positive".into()));
        }
        if self.depth.shape() != [k.height, k.width] {
            return Err(GeometryError::Invalid(format!(
                "depth {:?} does not match a {}x{} camera",
                self.depth.shape(),
                k.height,
                k.width
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth.data()[v * self.width() + u]
    }

    pub fn hit(&self, u: usize, v: usize) -> bool {
        let d = self.depth_at(u, v);
        d.is_finite() && d > 0.0
    }

    pub fn hit_mask(&self) -> Vec<bool> {
        self.depth.data().iter().map(|d| d.is_finite() && *d > 0.0).collect()
    }
}

/// World point of every pixel, `None` where depth is not finite.
pub fn backproject(view: &CameraView) -> Result<Vec<Option<Vec3>>> {
    view.validate()?;
    let (w, h) = (view.width(), view.height());
    Ok((0..h * w)
        .map(|i| {
            let (u, v) = (i % w, i / w);
            view.hit(u, v)
                .then(|| view.camera.unproject(u, v, view.depth_at(u, v)))
        })
        .collect())
}

/// Bilinear taps at index-space position `(x, y)`: flat offsets and weights.
/// Positions within `1e-6` outside the pixel-center hull are clamped.
pub(crate) fn taps_at(x: f64, y: f64, w: usize, h: usize) -> Option<([usize; 4], [f64; 4])> {
    const SLACK: f64 = 1e-6;
    let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= -SLACK && x <= xm + SLACK && y >= -SLACK && y <= ym + SLACK) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, xm), y.clamp(0.0, ym));
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some((
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    ))
}

/// A map expressed in the destination view plus the pixels where it is
/// defined.
#[derive(Clone, Debug, PartialEq)]
pub struct Reprojection {
    pub map: Tensor,
    pub overlap: Vec<bool>,
}

impl Reprojection {
    pub fn overlap_count(&self) -> usize {
        self.overlap.iter().filter(|&&b| b).count()
    }
}

/// Express `map` (`[C, H, W]`, pixel-aligned with `src`) in the frame of
/// `dst`. Every destination hit pixel is lifted to 3-D, projected into `src`
/// and bilinearly sampled there. It counts as overlap when the projection
/// lands inside `src` on hit pixels only, the four taps lie on one surface
/// (inverse depth is affine across them, as it is on any plane) and the
/// point is unoccluded there: `|z_src / d̄ − 1| < 1%`, with `1 / d̄` the
/// bilinearly interpolated inverse source depth.
pub fn reproject_map(src: &CameraView, map: &Tensor, dst: &CameraView) -> Result<Reprojection> {
    src.validate()?;
    dst.validate()?;
    let (sw, sh) = (src.width(), src.height());
    let c = match map.shape() {
        &[c, h, w] if (h, w) == (sh, sw) => c,
        s => {
            return Err(GeometryError::Invalid(format!(
                "map {s:?} not aligned with {sh}x{sw} source view"
            )))
        }
    };
    let (dw, dh) = (dst.width(), dst.height());
    let (splane, dplane) = (sw * sh, dw * dh);
    let mut out = vec![0.0; c * dplane];
    let mut overlap = vec![false; dplane];
    let sd = src.depth.data();
    for v in 0..dh {
        for u in 0..dw {
            if !dst.hit(u, v) {
                continue;
            }
            let p = dst.camera.unproject(u, v, dst.depth_at(u, v));
            let Some((x, y, z)) = src.camera.project(&p) else {
                continue;
            };
            let Some((idx, wt)) = taps_at(x - 0.5, y - 0.5, sw, sh) else {
                continue;
            };
            let live: Vec<usize> = (0..4).filter(|&q| wt[q] > TAP_EPS).collect();
            if live.iter().any(|&q| !sd[idx[q]].is_finite()) {
                continue;
            }
            let inv = |q: usize| 1.0 / sd[idx[q]];
            let inv_d: f64 = live.iter().map(|&q| wt[q] * inv(q)).sum();
            if live.len() == 4 && (inv(0) + inv(3) - inv(1) - inv(2)).abs() >= PLANARITY_TOL * inv_d {
                continue;
            }
            if (z * inv_d - 1.0).abs() >= OCCLUSION_TOL {
                continue;
            }
            let i = v * dw + u;
            overlap[i] = true;
            for ch in 0..c {
                let plane = &map.data()[ch * splane..(ch + 1) * splane];
                out[ch * dplane + i] = (0..4).map(|q| plane[idx[q]] * wt[q]).sum();
            }
        }
    }
    Ok(Reprojection {
        map: Tensor::new(&[c, dh, dw], out)?,
        overlap,
    })
}

/// Per-pixel displacement `[2, H, W]` (x then y, pixels) from a frame to the
/// next, with a validity flag per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub uv: Tensor,
    pub valid: Vec<bool>,
}

impl Flow {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            uv: Tensor::zeros(&[2, height, width]),
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.uv.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.uv.shape()[2]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Sample `map_next` (`[C, H, W]` or `[1, C, H, W]`) at `p + flow(p)` for
/// every pixel `p` of the current frame. Pixels whose flow is invalid or
/// whose target falls outside the image produce 0 and are flagged invalid.
/// Differentiable with respect to `map_next`.
pub fn warp_backward<'t>(map_next: Var<'t>, flow: &Flow) -> Result<(Var<'t>, Vec<bool>)> {
    let shape = map_next.shape();
    let (lead, c, h, w) = match shape[..] {
        [c, h, w] => (None, c, h, w),
        [1, c, h, w] => (Some(1), c, h, w),
        _ => {
            return Err(GeometryError::Invalid(format!(
                "warp_backward expects [C,H,W] or [1,C,H,W], got {shape:?}"
            )))
        }
    };
    if flow.uv.shape() != [2, h, w] || flow.valid.len() != h * w {
        return Err(GeometryError::Invalid(format!(
            "flow {:?} does not match map {h}x{w}",
            flow.uv.shape()
        )));
    }
    let np = h * w;
    let f = flow.uv.data();
    let mut coords = vec![0.0; 2 * np];
    let mut valid = vec![false; np];
    for i in 0..np {
        let (x, y) = ((i % w) as f64 + f[i], (i / w) as f64 + f[np + i]);
        if flow.valid[i]
            && x.is_finite()
            && y.is_finite()
            && (0.0..=(w - 1) as f64).contains(&x)
            && (0.0..=(h - 1) as f64).contains(&y)
        {
            coords[i] = x;
            coords[np + i] = y;
            valid[i] = true;
        }
    }
    let coords = Tensor::new(&[2, h, w], coords)?;
    let x = match lead {
        Some(_) => map_next.reshape(&[c, h, w])?,
        None => map_next,
    };
    let mut out = x.sample_bilinear(&coords, &valid)?;
    if lead.is_some() {
        out = out.reshape(&[1, c, h, w])?;
    }
    Ok((out, valid))
}

/// Fused world-space samples carrying material attributes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloudPBR {
    pub positions: Vec<[f64; 3]>,
    pub albedo: Vec<[f64; 3]>,
    pub metallic: Vec<f64>,
    pub roughness: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
    /// `(view, u, v)` each point came from.
    pub source: Vec<(usize, usize, usize)>,
}

impl PointCloudPBR {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (p, n)) in self.positions.iter().zip(&self.normals).enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::Contract(format!("point {i} is not finite")));
            }
            let norm = v3(*n).norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(GeometryError::Contract(format!("normal {i} has norm {norm}")));
            }
        }
        Ok(())
    }
}

/// Back-project every hit pixel of every view with its predicted attributes.
/// With `cell = Some(s)` points sharing a voxel of edge `s` are merged,
/// keeping the one closest to its own camera (earliest on ties).
pub fn fuse_pointcloud(
    views: &[CameraView],
    sets: &IntrinsicSet,
    cell: Option<f64>,
) -> Result<PointCloudPBR> {
    if views.len() != sets.num_views() {
        return Err(GeometryError::Invalid(format!(
            "{} views but {} prediction sets",
            views.len(),
            sets.num_views()
        )));
    }
    if let Some(s) = cell {
        if !(s > 0.0) {
            return Err(GeometryError::Invalid("voxel size must be positive".into()));
        }
    }
    let mut cloud = PointCloudPBR::default();
    let mut depth_of = Vec::new();
    let mut voxels: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for (vi, view) in views.iter().enumerate() {
        let (w, h) = (view.width(), view.height());
        if (sets.height(), sets.width()) != (h, w) {
            return Err(GeometryError::Invalid(format!(
                "view {vi} is {h}x{w}, predictions are {}x{}",
                sets.height(),
                sets.width()
            )));
        }
        let points = backproject(view)?;
        let rot = view.camera.pose.rot();
        let plane = h * w;
        let at = |t: &Tensor, ch: usize, c: usize, i: usize| t.data()[(vi * ch + c) * plane + i];
        for (i, p) in points.iter().enumerate() {
            let Some(p) = p else { continue };
            let n_cam = Vec3::new(
                at(&sets.normal, 3, 0, i),
                at(&sets.normal, 3, 1, i),
                at(&sets.normal, 3, 2, i),
            );
            let n = (rot * n_cam).normalize();
            let depth = view.depth.data()[i];
            let slot = match cell {
                Some(s) => {
                    let key = (
                        (p.x / s).floor() as i64,
                        (p.y / s).floor() as i64,
                        (p.z / s).floor() as i64,
                    );
                    match voxels.get(&key) {
                        Some(&j) if depth_of[j] <= depth => continue,
                        Some(&j) => Some(j),
                        None => {
                            voxels.insert(key, cloud.len());
                            None
                        }
                    }
                }
                None => None,
            };
            let rec = (
                [p.x, p.y, p.z],
                std::array::from_fn(|c| at(&sets.albedo, 3, c, i)),
                at(&sets.metallic, 1, 0, i),
                at(&sets.roughness, 1, 0, i),
                [n.x, n.y, n.z],
                (vi, i % w, i / w),
            );
            match slot {
                Some(j) => {
                    cloud.positions[j] = rec.0;
                    cloud.albedo[j] = rec.1;
                    cloud.metallic[j] = rec.2;
                    cloud.roughness[j] = rec.3;
                    cloud.normals[j] = rec.4;
                    cloud.source[j] = rec.5;
                    depth_of[j] = depth;
                }
                None => {
                    cloud.positions.push(rec.0);
                    cloud.albedo.push(rec.1);
                    cloud.metallic.push(rec.2);
                    cloud.roughness.push(rec.3);
                    cloud.normals.push(rec.4);
                    cloud.source.push(rec.5);
                    depth_of.push(depth);
                }
            }
        }
    }
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud("no view has a finite-depth pixel".into()));
    }
    Ok(cloud)
}
