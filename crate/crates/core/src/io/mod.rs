//! On-disk formats: PFM float maps, PNG previews and the scene archive.
//!
//! An archive directory holds `archive.json` (seed, scene config, scene
//! names) and one directory per scene:
//!
//! ```text
//! scene_0000/
//!   scene.json          full SceneSpec
//!   cameras.txt         one row per view: fx fy cx cy width height r00..r22 tx ty tz
//!   view_000/
//!     rgb.pfm rgb.png   3 channels
//!     albedo.pfm normal.pfm shading.pfm specular.pfm   3 channels
//!     metallic.pfm roughness.pfm depth.pfm prim.pfm    1 channel
//!     flow.pfm          (all but the last view) x, y, validity
//! ```
//!
//! Normals are camera space; depth is z-depth with `inf` on background;
//! `prim` is the primitive index or `-1`.

mod pfm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Flow, Intrinsics, Pose};
use crate::scenegen::{gen_scene, render_sequence, SceneConfig, SceneError, SceneSpec, ViewBundle};
use crate::tensor::{Tensor, TensorError};

pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("empty archive at {0}")]
    EmptyArchive(PathBuf),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::Fs {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

fn read_string(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| IoError::Format(format!("{} is not UTF-8", path.display())))
}

/// 8-bit PNG of a `[3, H, W]` (or `[1, H, W]`) map, values clamped to
/// `[0, 1]`.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(IoError::Format(format!("PNG needs [1|3, H, W], got {s:?}"))),
    };
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = t.data()[(ch % c) * plane + i];
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(out)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_png(t)?)
}

/// Decode an 8-bit PNG into a `[3, H, W]` map in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(&read_file(path)?, image::ImageFormat::Png)
        .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// `cameras.txt` rows.
pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = String::from("# view fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for (i, c) in cams.iter().enumerate() {
        let k = &c.intrinsics;
        let mut row = vec![i.to_string(), k.fx.to_string(), k.fy.to_string(), k.cx.to_string(), k.cy.to_string()];
        row.push(k.width.to_string());
        row.push(k.height.to_string());
        row.extend(c.pose.rotation.iter().flatten().map(|v| v.to_string()));
        row.extend(c.pose.translation.iter().map(|v| v.to_string()));
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 19 {
            return Err(IoError::Format(format!("cameras.txt line {}: {} fields, expected 19", ln + 1, f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| IoError::Format(format!("cameras.txt line {}: bad number {:?}", ln + 1, f[i])))
        };
        let int = |i: usize| {
            f[i].parse::<usize>()
                .map_err(|_| IoError::Format(format!("cameras.txt line {}: bad integer {:?}", ln + 1, f[i])))
        };
        let mut rotation = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r][c] = num(7 + 3 * r + c)?;
            }
        }
        let pose = Pose {
            rotation,
            translation: [num(16)?, num(17)?, num(18)?],
        };
        pose.validate().map_err(|e| IoError::Format(format!("cameras.txt line {}: {e}", ln + 1)))?;
        cams.push(Camera {
            intrinsics: Intrinsics {
                fx: num(1)?,
                fy: num(2)?,
                cx: num(3)?,
                cy: num(4)?,
                width: int(5)?,
                height: int(6)?,
            },
            pose,
        });
    }
    Ok(cams)
}

/// A scene with its rendered views.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub name: String,
    pub spec: SceneSpec,
    pub views: Vec<ViewBundle>,
}

impl SceneRecord {
    pub fn render(name: impl Into<String>, spec: SceneSpec, height: usize, width: usize) -> Result<Self> {
        let views = render_sequence(&spec, height, width)?;
        Ok(Self {
            name: name.into(),
            spec,
            views,
        })
    }
}

fn flow_to_tensor(f: &Flow) -> Tensor {
    let np = f.valid.len();
    let mut data = f.uv.to_vec();
    data.extend(f.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    debug_assert_eq!(data.len(), 3 * np);
    Tensor::new(&[3, f.height(), f.width()], data).expect("flow layout")
}

fn tensor_to_flow(t: &Tensor) -> Result<Flow> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(IoError::Format(format!("flow map must have 3 channels, got {s:?}"))),
    };
    let np = h * w;
    Ok(Flow {
        uv: Tensor::new(&[2, h, w], t.data()[..2 * np].to_vec())?,
        valid: t.data()[2 * np..].iter().map(|&v| v > 0.5).collect(),
    })
}

fn view_dir(scene_dir: &Path, i: usize) -> PathBuf {
    scene_dir.join(format!("view_{i:03}"))
}

pub fn write_scene(dir: &Path, rec: &SceneRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(&rec.spec).map_err(|e| IoError::Format(e.to_string()))?;
    write_file(&dir.join("scene.json"), json.as_bytes())?;
    let cams: Vec<Camera> = rec.views.iter().map(|v| v.camera).collect();
    write_file(&dir.join("cameras.txt"), format_cameras(&cams).as_bytes())?;
    for (i, v) in rec.views.iter().enumerate() {
        let vd = view_dir(dir, i);
        let (h, w) = (v.height(), v.width());
        write_pfm(&vd.join("rgb.pfm"), &v.rgb)?;
        write_png(&vd.join("rgb.png"), &v.rgb)?;
        for (name, t) in [
            ("albedo", &v.albedo),
            ("metallic", &v.metallic),
            ("roughness", &v.roughness),
            ("normal", &v.normal),
            ("shading", &v.shading),
            ("specular", &v.specular),
        ] {
            write_pfm(&vd.join(format!("{name}.pfm")), t)?;
        }
        write_pfm(&vd.join("depth.pfm"), &v.depth.reshape(&[1, h, w])?)?;
        let prim = Tensor::new(&[1, h, w], v.prim.iter().map(|&p| p as f64).collect())?;
        write_pfm(&vd.join("prim.pfm"), &prim)?;
        if let Some(f) = &v.flow_to_next {
            write_pfm(&vd.join("flow.pfm"), &flow_to_tensor(f))?;
        }
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let spec: SceneSpec = serde_json::from_str(&read_string(&dir.join("scene.json"))?)
        .map_err(|e| IoError::Format(format!("{}: {e}", dir.join("scene.json").display())))?;
    let cams = parse_cameras(&read_string(&dir.join("cameras.txt"))?)?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let vd = view_dir(dir, i);
        let (h, w) = (cam.height(), cam.width());
        let load = |name: &str, c: usize| -> Result<Tensor> {
            let t = read_pfm(&vd.join(format!("{name}.pfm")))?;
            if t.shape() != [c, h, w] {
                return Err(IoError::Format(format!(
                    "{}/{name}.pfm has shape {:?}, expected {:?}",
                    vd.display(),
                    t.shape(),
                    [c, h, w]
                )));
            }
            Ok(t)
        };
        let flow_path = vd.join("flow.pfm");
        let flow_to_next = if flow_path.exists() {
            Some(tensor_to_flow(&read_pfm(&flow_path)?)?)
        } else {
            None
        };
        views.push(ViewBundle {
            rgb: load("rgb", 3)?,
            albedo: load("albedo", 3)?,
            metallic: load("metallic", 1)?,
            roughness: load("roughness", 1)?,
            normal: load("normal", 3)?,
            shading: load("shading", 3)?,
            specular: load("specular", 3)?,
            depth: load("depth", 1)?.reshape(&[h, w])?,
            prim: load("prim", 1)?.data().iter().map(|&p| p as i64).collect(),
            camera: *cam,
            flow_to_next,
        });
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SceneRecord { name, spec, views })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub scenes: Vec<String>,
}

/// Seeds of the `count` scenes generated from a master seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Generate and render `count` scenes in memory.
pub fn generate_scenes(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<SceneRecord>> {
    scene_seeds(seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = gen_scene(s, cfg)?;
            SceneRecord::render(format!("scene_{i:04}"), spec, cfg.height, cfg.width)
        })
        .collect()
}

pub fn write_archive(dir: &Path, seed: u64, cfg: &SceneConfig, scenes: &[SceneRecord]) -> Result<()> {
    let manifest = ArchiveManifest {
        seed,
        config: cfg.clone(),
        scenes: scenes.iter().map(|s| s.name.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| IoError::Format(e.to_string()))?;
    write_file(&dir.join("archive.json"), json.as_bytes())?;
    for s in scenes {
        write_scene(&dir.join(&s.name), s)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ArchiveManifest> {
    let path = dir.join("archive.json");
    serde_json::from_str(&read_string(&path)?).map_err(|e| IoError::Format(format!("{}: {e}", path.display())))
}

/// Every scene of an archive; an archive without scenes is an error.
pub fn read_archive(dir: &Path) -> Result<Vec<SceneRecord>> {
    let manifest = read_manifest(dir)?;
    if manifest.scenes.is_empty() {
        return Err(IoError::EmptyArchive(dir.to_path_buf()));
    }
    manifest.scenes.iter().map(|name| read_scene(&dir.join(name))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            views: 3,
            width: 16,
            height: 12,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn cameras_round_trip_exactly() {
        let spec = gen_scene(3, &small_cfg()).unwrap();
        let cams: Vec<Camera> = (0..3).map(|i| spec.camera(i, 16, 12)).collect();
        assert_eq!(parse_cameras(&format_cameras(&cams)).unwrap(), cams);
    }

    #[test]
    fn scene_round_trip_preserves_maps_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let scenes = generate_scenes(11, 1, &cfg).unwrap();
        write_archive(dir.path(), 11, &cfg, &scenes).unwrap();
        let back = read_archive(dir.path()).unwrap();
        let (a, b) = (&scenes[0], &back[0]);
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.views.len(), b.views.len());
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.camera, vb.camera);
            assert_eq!(va.prim, vb.prim);
            assert!(va.albedo.max_abs_diff(&vb.albedo) < 1e-6);
            for (&da, &db) in va.depth.data().iter().zip(vb.depth.data()) {
                assert!(da == db || (da - db).abs() <= 1e-7 * da, "{da} vs {db}");
            }
            assert_eq!(va.flow_to_next.is_some(), vb.flow_to_next.is_some());
            if let (Some(fa), Some(fb)) = (&va.flow_to_next, &vb.flow_to_next) {
                assert_eq!(fa.valid, fb.valid);
                assert!(fa.uv.max_abs_diff(&fb.uv) < 1e-4);
            }
        }
    }

    #[test]
    fn empty_archive_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), 0, &small_cfg(), &[]).unwrap();
        assert!(matches!(read_archive(dir.path()), Err(IoError::EmptyArchive(_))));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i[0] + i[1] + i[2]) as f64 / 10.0);
        let p = dir.path().join("x.png");
        write_png(&p, &t).unwrap();
        let back = read_png(&p).unwrap();
        let clamped = t.map(|v| v.clamp(0.0, 1.0));
        assert!(back.max_abs_diff(&clamped) <= 0.5 / 255.0 + 1e-12);
    }
}
