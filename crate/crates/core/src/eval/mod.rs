//! Metrics: cross-view and temporal consistency, normal angular error,
//! PSNR and SSIM. Every report renders as a text table and as one JSON
//! line.

mod image;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{reproject_map, warp_backward, CameraView, Flow, GeometryError};
use crate::model::IntrinsicSet;
use crate::tensor::{Tape, Tensor, TensorError};

pub use image::{psnr, psnr_ssim, ssim, PSNR_CAP_DB, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Material channels compared across views, with their widths.
const MATERIAL_CHANNELS: [(&str, usize); 3] = [("albedo", 3), ("metallic", 1), ("roughness", 1)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyOptions {
    /// Pairs whose overlap covers less than this fraction of the target
    /// image are skipped.
    pub min_overlap: f64,
    /// Only the first `max_views` views take part.
    pub max_views: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            min_overlap: 0.05,
            max_views: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub src: usize,
    pub dst: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub pairs: usize,
    pub skipped_pairs: usize,
    /// Mean overlap fraction of the reported pairs.
    pub mean_overlap: f64,
    pub pair_overlaps: Vec<PairOverlap>,
}

impl ConsistencyReport {
    pub fn table(&self) -> String {
        format!(
            "multi-view consistency ({} pairs, {} skipped, mean overlap {:.1}%)\n\
             channel    rmse\n\
             albedo     {:.6}\n\
             metallic   {:.6}\n\
             roughness  {:.6}\n",
            self.pairs,
            self.skipped_pairs,
            100.0 * self.mean_overlap,
            self.albedo,
            self.metallic,
            self.roughness
        )
    }
}

fn material_stack(sets: &IntrinsicSet, v: usize) -> Result<Tensor> {
    let one = sets.view(v).map_err(EvalError::Tensor)?;
    let (h, w) = (sets.height(), sets.width());
    let parts = [&one.albedo, &one.metallic, &one.roughness];
    let mut data = Vec::with_capacity(5 * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[5, h, w], data)?)
}

/// Reproject every view's albedo, metallic and roughness into every other
/// view and compare with that view's own prediction on the overlap.
/// Squared errors are pooled over all overlap pixels of all pairs.
pub fn mv_consistency_rmse(
    views: &[CameraView],
    preds: &IntrinsicSet,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyReport> {
    let n = views.len().min(opts.max_views);
    if n < 2 {
        return Err(EvalError::Config(format!("need at least 2 views, got {n}")));
    }
    if preds.num_views() < n {
        return Err(EvalError::Config(format!(
            "{n} views but only {} predictions",
            preds.num_views()
        )));
    }
    if !(0.0..=1.0).contains(&opts.min_overlap) {
        return Err(EvalError::Config("min_overlap must lie in [0, 1]".into()));
    }
    let stacks = (0..n).map(|v| material_stack(preds, v)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d)))
        .collect();
    // per pair: overlap pixels and squared-error sums per material channel
    let per_pair = pairs
        .par_iter()
        .map(|&(s, d)| -> Result<(usize, [f64; 3])> {
            let r = reproject_map(&views[s], &stacks[s], &views[d])?;
            let plane = views[d].width() * views[d].height();
            let count = r.overlap_count();
            let (got, want) = (r.map.data(), stacks[d].data());
            let mut sq = [0.0; 3];
            let mut ch = 0;
            for (k, (_, width)) in MATERIAL_CHANNELS.iter().enumerate() {
                for _ in 0..*width {
                    for i in (0..plane).filter(|&i| r.overlap[i]) {
                        let e = got[ch * plane + i] - want[ch * plane + i];
                        sq[k] += e * e;
                    }
                    ch += 1;
                }
            }
            Ok((count, sq))
        })
        .collect::<Vec<_>>();
    let mut sums = [0.0; 3];
    let mut pixels = 0usize;
    let mut overlaps = Vec::new();
    let mut frac_sum = 0.0;
    let mut skipped = 0;
    for (&(s, d), res) in pairs.iter().zip(per_pair) {
        let (count, sq) = res?;
        let frac = count as f64 / (views[d].width() * views[d].height()) as f64;
        if count == 0 || frac < opts.min_overlap {
            skipped += 1;
            continue;
        }
        pixels += count;
        frac_sum += frac;
        overlaps.push(PairOverlap { src: s, dst: d, pixels: count });
        for k in 0..3 {
            sums[k] += sq[k];
        }
    }
    let rmse = |k: usize| {
        if pixels == 0 {
            0.0
        } else {
            (sums[k] / (pixels * MATERIAL_CHANNELS[k].1) as f64).sqrt()
        }
    };
    if pixels == 0 {
        log::warn!("no view pair reaches the minimum overlap of {}", opts.min_overlap);
    }
    Ok(ConsistencyReport {
        albedo: rmse(0),
        metallic: rmse(1),
        roughness: rmse(2),
        pairs: overlaps.len(),
        skipped_pairs: skipped,
        mean_overlap: if overlaps.is_empty() { 0.0 } else { frac_sum / overlaps.len() as f64 },
        pair_overlaps: overlaps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub shading: f64,
    /// Adjacent frame pairs with at least one valid pixel.
    pub pairs: usize,
}

impl TemporalReport {
    pub fn channels(&self) -> [(&'static str, f64); 4] {
        [
            ("albedo", self.albedo),
            ("metallic", self.metallic),
            ("roughness", self.roughness),
            ("shading", self.shading),
        ]
    }

    pub fn table(&self) -> String {
        let mut s = format!("temporal warp consistency ({} frame pairs)\nchannel    rmse\n", self.pairs);
        for (name, v) in self.channels() {
            s.push_str(&format!("{name:<10} {v:.6}\n"));
        }
        s
    }
}

/// RMSE between frame `t` and frame `t+1` warped back along `flows[t]`,
/// per pair over valid pixels, then averaged over pairs.
pub fn temporal_warp_rmse(frames: &IntrinsicSet, flows: &[Flow]) -> Result<TemporalReport> {
    let n = frames.num_views();
    if n < 2 {
        return Err(EvalError::Config(format!("need at least 2 frames, got {n}")));
    }
    if flows.len() < n - 1 {
        return Err(EvalError::Config(format!("{n} frames need {} flows, got {}", n - 1, flows.len())));
    }
    let tape = Tape::new();
    let mut acc = [0.0; 4];
    let mut pairs = 0;
    for t in 0..n - 1 {
        let (cur, next) = (frames.view(t)?, frames.view(t + 1)?);
        let maps = |s: &IntrinsicSet| [s.albedo.clone(), s.metallic.clone(), s.roughness.clone(), s.shading.clone()];
        let mut rm = [0.0; 4];
        let mut any = false;
        for (k, (a, b)) in maps(&cur).iter().zip(maps(&next)).enumerate() {
            let (warped, valid) = warp_backward(tape.constant(b), &flows[t])?;
            let warped = warped.value();
            let c = a.shape()[1];
            let plane = valid.len();
            let count = valid.iter().filter(|&&v| v).count();
            if count == 0 {
                break;
            }
            any = true;
            let mut sq = 0.0;
            for ch in 0..c {
                for i in (0..plane).filter(|&i| valid[i]) {
                    let e = warped.data()[ch * plane + i] - a.data()[ch * plane + i];
                    sq += e * e;
                }
            }
            rm[k] = (sq / (count * c) as f64).sqrt();
        }
        if any {
            pairs += 1;
            for k in 0..4 {
                acc[k] += rm[k];
            }
        }
    }
    let mean = |k: usize| if pairs == 0 { 0.0 } else { acc[k] / pairs as f64 };
    Ok(TemporalReport {
        albedo: mean(0),
        metallic: mean(1),
        roughness: mean(2),
        shading: mean(3),
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalReport {
    /// Mean angular error, degrees.
    pub mae_deg: f64,
    pub pct_below_11_25: f64,
    pub pct_below_30: f64,
    pub pixels: usize,
}

impl NormalReport {
    pub fn table(&self) -> String {
        format!(
            "normal accuracy ({} pixels)\nmean angular error  {:.4} deg\n< 11.25 deg         {:.2}%\n< 30 deg            {:.2}%\n",
            self.pixels, self.mae_deg, self.pct_below_11_25, self.pct_below_30
        )
    }
}

/// Tolerance on `| |n| − 1 |` for normal inputs.
pub const NORMAL_UNIT_TOL: f64 = 1e-3;

fn normal_layout(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[3, h, w] => Ok((1, h * w)),
        &[n, 3, h, w] => Ok((n, h * w)),
        s => Err(EvalError::Config(format!("normals must be [N,3,H,W] or [3,H,W], got {s:?}"))),
    }
}

/// Angular error statistics between two normal fields over `mask` (one
/// flag per pixel across all views).
pub fn normal_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<NormalReport> {
    let (n, plane) = normal_layout(pred)?;
    if gt.shape() != pred.shape() {
        return Err(EvalError::Config(format!(
            "normal shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if mask.len() != n * plane {
        return Err(EvalError::Config(format!("mask has {} entries, expected {}", mask.len(), n * plane)));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0.0;
    let (mut lo, mut hi, mut count) = (0usize, 0usize, 0usize);
    for v in 0..n {
        for i in 0..plane {
            if !mask[v * plane + i] {
                continue;
            }
            let at = |d: &[f64], c: usize| d[(v * 3 + c) * plane + i];
            let a = [at(p, 0), at(p, 1), at(p, 2)];
            let b = [at(g, 0), at(g, 1), at(g, 2)];
            for (name, x) in [("prediction", a), ("ground truth", b)] {
                let norm = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > NORMAL_UNIT_TOL {
                    return Err(EvalError::Contract(format!(
                        "{name} normal at view {v} pixel {i} has norm {norm}"
                    )));
                }
            }
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let cross = [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            // atan2 stays exact near 0° where arccos of the dot product does not
            let deg = cross.iter().map(|c| c * c).sum::<f64>().sqrt().atan2(dot).to_degrees();
            sum += deg;
            count += 1;
            if deg < 11.25 {
                lo += 1;
            }
            if deg < 30.0 {
                hi += 1;
            }
        }
    }
    if count == 0 {
        return Err(EvalError::Config("mask selects no pixel".into()));
    }
    let pct = |k: usize| 100.0 * k as f64 / count as f64;
    Ok(NormalReport {
        mae_deg: sum / count as f64,
        pct_below_11_25: pct(lo),
        pct_below_30: pct(hi),
        pixels: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// One line of a metrics records file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum MetricRecord {
    Consistency(ConsistencyReport),
    Temporal(TemporalReport),
    Normals(NormalReport),
    Image(ImageReport),
}

impl MetricRecord {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, Intrinsics, Pose};

    fn rot_x(deg: f64) -> [[f64; 3]; 3] {
        let (s, c) = deg.to_radians().sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    fn field(n: usize, h: usize, w: usize, f: impl Fn(usize) -> [f64; 3]) -> Tensor {
        let plane = h * w;
        Tensor::from_fn(&[n, 3, h, w], |i| f(i[0] * plane + i[2] * w + i[3])[i[1]])
    }

    #[test]
    fn identical_normals_are_perfect() {
        let t = field(2, 3, 4, |i| {
            let a = i as f64 * 0.3;
            [a.sin() * 0.6, a.cos() * 0.6, -0.8]
        });
        let r = normal_metrics(&t, &t, &vec![true; 24]).unwrap();
        assert!(r.mae_deg < 1e-6);
        assert_eq!((r.pct_below_11_25, r.pct_below_30), (100.0, 100.0));
    }

    #[test]
    fn uniform_twenty_degree_rotation() {
        // normals in the y-z plane, rotated about x
        let r = rot_x(20.0);
        let gt = field(1, 4, 4, |i| {
            let a = i as f64 * 0.2;
            [0.0, a.sin(), -a.cos()]
        });
        let pred = field(1, 4, 4, |i| {
            let a = i as f64 * 0.2;
            let n = [0.0, a.sin(), -a.cos()];
            std::array::from_fn(|k| (0..3).map(|j| r[k][j] * n[j]).sum())
        });
        let rep = normal_metrics(&pred, &gt, &vec![true; 16]).unwrap();
        assert!((rep.mae_deg - 20.0).abs() < 1e-6, "{}", rep.mae_deg);
        assert_eq!((rep.pct_below_11_25, rep.pct_below_30), (0.0, 100.0));
    }

    #[test]
    fn random_unit_fields_match_arccos_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut units = || -> Vec<[f64; 3]> {
            (0..70)
                .map(|_| {
                    let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    v.map(|c| c / n)
                })
                .collect()
        };
        let (ua, ub) = (units(), units());
        let a = field(2, 5, 7, |i| ua[i]);
        let b = field(2, 5, 7, |i| ub[i]);
        let r = normal_metrics(&a, &b, &vec![true; 70]).unwrap();
        let mut want = 0.0;
        for v in 0..2 {
            for y in 0..5 {
                for x in 0..7 {
                    let d: f64 = (0..3).map(|c| a.get(&[v, c, y, x]) * b.get(&[v, c, y, x])).sum();
                    want += d.clamp(-1.0, 1.0).acos().to_degrees();
                }
            }
        }
        assert!((r.mae_deg - want / 70.0).abs() < 1e-9);
    }

    #[test]
    fn non_unit_normals_are_rejected() {
        let t = Tensor::full(&[1, 3, 1, 1], 1.0);
        assert!(matches!(normal_metrics(&t, &t, &[true]), Err(EvalError::Contract(_))));
    }

    fn constant_set(n: usize, h: usize, w: usize, a: f64) -> IntrinsicSet {
        IntrinsicSet {
            albedo: Tensor::full(&[n, 3, h, w], a),
            metallic: Tensor::full(&[n, 1, h, w], 0.2),
            roughness: Tensor::full(&[n, 1, h, w], 0.7),
            normal: Tensor::from_fn(&[n, 3, h, w], |i| if i[1] == 2 { -1.0 } else { 0.0 }),
            shading: Tensor::full(&[n, 3, h, w], 0.4),
        }
    }

    #[test]
    fn constant_maps_are_consistent() {
        let (h, w) = (12, 16);
        let k = Intrinsics::centered(16.0, w, h);
        let views: Vec<CameraView> = [0.0, 0.1]
            .iter()
            .map(|&tx| {
                let mut pose = Pose::identity();
                pose.translation = [tx, 0.0, 0.0];
                CameraView::new(Camera { intrinsics: k, pose }, Tensor::full(&[h, w], 3.0)).unwrap()
            })
            .collect();
        let r = mv_consistency_rmse(&views, &constant_set(2, h, w, 0.5), &ConsistencyOptions::default()).unwrap();
        assert_eq!(r.pairs, 2);
        assert!(r.albedo < 1e-12 && r.metallic < 1e-12 && r.roughness < 1e-12);
        assert!(r.mean_overlap > 0.5);
    }

    #[test]
    fn one_view_is_a_config_error() {
        let view = CameraView::new(
            Camera {
                intrinsics: Intrinsics::centered(4.0, 4, 4),
                pose: Pose::identity(),
            },
            Tensor::full(&[4, 4], 1.0),
        )
        .unwrap();
        let err = mv_consistency_rmse(&[view], &constant_set(1, 4, 4, 0.5), &ConsistencyOptions::default());
        assert!(matches!(err, Err(EvalError::Config(_))));
    }

    #[test]
    fn static_identical_video_has_zero_temporal_error() {
        let set = constant_set(3, 5, 6, 0.3);
        let flows = vec![Flow::zeros(5, 6); 2];
        let r = temporal_warp_rmse(&set, &flows).unwrap();
        assert_eq!(r.pairs, 2);
        assert!(r.channels().iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn alternating_offset_shows_up_exactly() {
        let mut set = constant_set(4, 5, 6, 0.3);
        let delta = 0.05;
        set.roughness = Tensor::from_fn(&[4, 1, 5, 6], |i| 0.5 + if i[0] % 2 == 1 { delta } else { 0.0 });
        let r = temporal_warp_rmse(&set, &vec![Flow::zeros(5, 6); 3]).unwrap();
        assert!((r.roughness - delta).abs() < 1e-12);
        assert_eq!(r.albedo, 0.0);
    }

    #[test]
    fn records_are_tagged_json_lines() {
        let rec = MetricRecord::Image(ImageReport { psnr_db: 20.0, ssim: 0.5 });
        let line = rec.json_line();
        assert!(line.starts_with("{\"metric\":\"image\""), "{line}");
        assert!(!line.contains('\n'));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
