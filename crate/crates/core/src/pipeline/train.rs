use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{warp_backward, Flow};
use crate::io::SceneRecord;
use crate::losses::{composite_loss, finetune_loss, ValidityMask};
use crate::model::{is_encoder_param, ForwardOptions, IntrinsicSet, IntrinsicVars, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

use super::{adam_step, Checkpoint, PipelineError, Result, Stage, TrainConfig};

/// One progress line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub scene: String,
    pub views: Vec<usize>,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub elapsed_s: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepRecord>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Scene index and view indices drawn for `step`; a pure function of
/// `(cfg.seed, step)`.
pub fn sample_pretrain_batch(scenes: &[SceneRecord], cfg: &TrainConfig, step: usize) -> Result<(usize, Vec<usize>)> {
    if scenes.is_empty() {
        return Err(PipelineError::EmptyArchive);
    }
    let mut rng = step_rng(cfg.seed, step);
    let s = rng.gen_range(0..scenes.len());
    let avail = scenes[s].views.len();
    if avail == 1 && cfg.replicate_single_view {
        let k = rng.gen_range(cfg.min_views..=cfg.max_views);
        return Ok((s, vec![0; k]));
    }
    if avail < cfg.min_views {
        return Err(PipelineError::Invalid(format!(
            "scene {} has {avail} views, fewer than min_views {}",
            scenes[s].name, cfg.min_views
        )));
    }
    let k = rng.gen_range(cfg.min_views..=cfg.max_views.min(avail));
    Ok((s, sample(&mut rng, avail, k).into_vec()))
}

/// Video index and middle frame `t` of the triple `(0, t, t + 1)`.
pub fn sample_triple(videos: &[SceneRecord], seed: u64, step: usize) -> Result<(usize, usize)> {
    if videos.is_empty() {
        return Err(PipelineError::EmptyArchive);
    }
    let mut rng = step_rng(seed, step);
    let v = rng.gen_range(0..videos.len());
    let n = videos[v].views.len();
    if n < 3 {
        return Err(PipelineError::Invalid(format!(
            "video {} has {n} frames; a triple needs 3",
            videos[v].name
        )));
    }
    Ok((v, rng.gen_range(1..=n - 2)))
}

fn check_archive(scenes: &[SceneRecord], m: &ModelConfig) -> Result<()> {
    if scenes.is_empty() {
        return Err(PipelineError::EmptyArchive);
    }
    for s in scenes {
        for v in &s.views {
            if (v.height(), v.width()) != (m.image_height, m.image_width) {
                return Err(PipelineError::Config(format!(
                    "scene {} is {}x{}, model expects {}x{}",
                    s.name,
                    v.height(),
                    v.width(),
                    m.image_height,
                    m.image_width
                )));
            }
        }
    }
    Ok(())
}

fn stack_rgb(rec: &SceneRecord, views: &[usize]) -> Result<Tensor> {
    Ok(Tensor::stack(&views.iter().map(|&i| rec.views[i].rgb.clone()).collect::<Vec<_>>())?)
}

/// Joint prediction over every view of a scene.
pub fn predict_scene(model: &Model, rec: &SceneRecord) -> Result<IntrinsicSet> {
    let all: Vec<usize> = (0..rec.views.len()).collect();
    Ok(model.predict(&stack_rgb(rec, &all)?)?)
}

/// Builds batch `step` for every step of `steps` and hands it to `consume`.
/// Outside deterministic mode a second thread prepares the next batch
/// through a two-slot channel while the current one trains.
fn run_steps<B: Send>(
    deterministic: bool,
    steps: Range<usize>,
    make: &(dyn Fn(usize) -> Result<B> + Sync),
    mut consume: impl FnMut(usize, B) -> Result<()>,
) -> Result<()> {
    if deterministic {
        for step in steps {
            consume(step, make(step)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<B>>(2);
        let producer_steps = steps.clone();
        s.spawn(move || {
            for step in producer_steps {
                let b = make(step);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for step in steps {
            let b = rx
                .recv()
                .map_err(|_| PipelineError::Invalid("batch producer stopped".into()))??;
            consume(step, b)?;
        }
        Ok(())
    })
}

/// Scales every gradient by `max_norm / ‖g‖` when the joint L2 norm
/// exceeds `max_norm`. Non-finite norms are left for `adam_step` to report.
fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * k);
        }
    }
}

fn start_checkpoint(cfg: &TrainConfig, init: &Model, resume: Option<Checkpoint>) -> Result<Checkpoint> {
    let mut ckpt = match resume {
        Some(c) => {
            if c.model != cfg.model_config() {
                return Err(PipelineError::Config(
                    "checkpoint model configuration differs from the training configuration".into(),
                ));
            }
            c
        }
        None => Checkpoint::new(init, cfg.clone()),
    };
    ckpt.train = cfg.clone();
    ckpt.rng_seed = cfg.seed;
    Ok(ckpt)
}

struct PretrainBatch {
    scene: usize,
    views: Vec<usize>,
    images: Tensor,
    gt: IntrinsicSet,
    mask: ValidityMask,
}

/// Supervised pretraining on a scene archive. Starts from fresh weights
/// seeded by `cfg.seed`, or continues `resume` up to `cfg.total_steps()`.
pub fn train_pretrain(
    cfg: &TrainConfig,
    scenes: &[SceneRecord],
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    check_archive(scenes, &mcfg)?;
    let mut ckpt = match resume {
        Some(c) => start_checkpoint(cfg, &c.model()?, Some(c))?,
        None => start_checkpoint(cfg, &Model::new(mcfg, cfg.seed)?, None)?,
    };
    let mut model = ckpt.model()?;
    let (weights, hyper, warm) = (cfg.loss_weights(), cfg.hyper(), cfg.warmup_steps());
    let make = |step: usize| -> Result<PretrainBatch> {
        let (scene, views) = sample_pretrain_batch(scenes, cfg, step)?;
        let rec = &scenes[scene];
        let gt = IntrinsicSet::cat(&views.iter().map(|&i| rec.views[i].intrinsics()).collect::<Vec<_>>())?;
        let hit: Vec<bool> = views.iter().flat_map(|&i| rec.views[i].hit_mask()).collect();
        let base = ValidityMask::new(views.len(), gt.height(), gt.width(), hit);
        Ok(PretrainBatch {
            scene,
            images: stack_rgb(rec, &views)?,
            mask: ValidityMask::from_albedo(&gt, Some(&base)),
            gt,
            views,
        })
    };
    let start = Instant::now();
    let mut curve = Vec::new();
    run_steps(cfg.deterministic, ckpt.step as usize..cfg.total_steps(), &make, |step, b| {
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let pred = model.forward(&p, &b.images, ForwardOptions::default())?;
        let loss = composite_loss(&pred, &b.gt, &weights, &b.mask, step < warm)?;
        for w in &loss.warnings {
            log::warn!("step {step}: {w}");
        }
        tape.backward(loss.total)?;
        let mut grads = p.grads();
        if cfg.freeze_encoder {
            grads.retain(|k, _| !is_encoder_param(k));
        }
        clip_grads(&mut grads, cfg.clip_grad_norm);
        adam_step(model.params_mut(), &grads, &mut ckpt.adam, cfg.lr_at(step), &hyper)?;
        ckpt.step = step as u64 + 1;
        let t = &loss.terms;
        let rec = StepRecord {
            stage: Stage::Pretrain,
            step,
            scene: scenes[b.scene].name.clone(),
            views: b.views,
            loss: loss.total.value().item(),
            terms: BTreeMap::from([
                ("albedo".into(), t.albedo),
                ("metallic".into(), t.metallic),
                ("roughness".into(), t.roughness),
                ("normal".into(), t.normal),
                ("shading".into(), t.shading),
            ]),
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_step(&rec).map_err(PipelineError::Log)?;
        curve.push(rec);
        Ok(())
    })?;
    ckpt.params = model.params().clone();
    Ok(TrainOutcome { checkpoint: ckpt, curve })
}

struct TripleBatch {
    video: usize,
    t: usize,
    images: Tensor,
    flow: Flow,
    m0_pret: IntrinsicSet,
}

/// Consistency finetuning on frame triples `(0, t, t + 1)`. The finetuned
/// copy starts from `pretrained` (or continues `resume`); `pretrained`
/// itself only provides the frame-0 anchor.
pub fn train_finetune(
    cfg: &TrainConfig,
    pretrained: &Model,
    videos: &[SceneRecord],
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pretrained.config() != &cfg.model_config() {
        return Err(PipelineError::Config(
            "pretrained model configuration differs from the training configuration".into(),
        ));
    }
    check_archive(videos, pretrained.config())?;
    let mut ckpt = start_checkpoint(cfg, pretrained, resume)?;
    let mut model = ckpt.model()?;
    let hyper = cfg.hyper();
    let (h, w) = (cfg.image_height, cfg.image_width);
    let anchors: Mutex<HashMap<(usize, usize), IntrinsicSet>> = Mutex::new(HashMap::new());
    let make = |step: usize| -> Result<TripleBatch> {
        let (video, t) = sample_triple(videos, cfg.seed, step)?;
        let rec = &videos[video];
        let flow = rec.views[t].flow_to_next.clone().ok_or_else(|| PipelineError::MissingFlow {
            scene: rec.name.clone(),
            from: t,
            to: t + 1,
        })?;
        let images = stack_rgb(rec, &[0, t, t + 1])?;
        let cached = anchors.lock().expect("anchor cache").get(&(video, t)).cloned();
        let m0_pret = match cached {
            Some(m) => m,
            None => {
                let m = pretrained.predict(&images)?.view(0)?;
                anchors.lock().expect("anchor cache").insert((video, t), m.clone());
                m
            }
        };
        Ok(TripleBatch {
            video,
            t,
            images,
            flow,
            m0_pret,
        })
    };
    let start = Instant::now();
    let mut curve = Vec::new();
    run_steps(cfg.deterministic, ckpt.step as usize..cfg.total_steps(), &make, |step, b| {
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let pred = model.forward(&p, &b.images, ForwardOptions::default())?;
        let m0 = pred.narrow_views(0, 1)?;
        let mt = pred.narrow_views(1, 1)?;
        let next = pred.narrow_views(2, 1)?;
        let (albedo, valid) = warp_backward(next.albedo, &b.flow)?;
        let m_warp = IntrinsicVars {
            albedo,
            metallic: warp_backward(next.metallic, &b.flow)?.0,
            roughness: warp_backward(next.roughness, &b.flow)?.0,
            normal: mt.normal,
            shading: warp_backward(next.shading, &b.flow)?.0,
        };
        let valid = ValidityMask::new(1, h, w, valid);
        let loss = finetune_loss(&m0, &b.m0_pret, &mt, &m_warp, &valid, cfg.lambda_anchor)?;
        for msg in &loss.warnings {
            log::warn!("step {step}: {msg}");
        }
        tape.backward(loss.total)?;
        let mut grads = p.grads();
        if cfg.freeze_encoder {
            grads.retain(|k, _| !is_encoder_param(k));
        }
        clip_grads(&mut grads, cfg.clip_grad_norm);
        adam_step(model.params_mut(), &grads, &mut ckpt.adam, cfg.lr_at(step), &hyper)?;
        ckpt.step = step as u64 + 1;
        let rec = StepRecord {
            stage: Stage::Finetune,
            step,
            scene: videos[b.video].name.clone(),
            views: vec![0, b.t, b.t + 1],
            loss: loss.total.value().item(),
            terms: BTreeMap::from([
                ("anchor".into(), loss.anchor),
                ("consistency".into(), loss.consistency),
            ]),
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_step(&rec).map_err(PipelineError::Log)?;
        curve.push(rec);
        Ok(())
    })?;
    ckpt.params = model.params().clone();
    Ok(TrainOutcome { checkpoint: ckpt, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{gen_scene, Difficulty, SceneConfig};

    fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig {
            epochs: 1,
            steps_per_epoch: 4,
            min_views: 2,
            max_views: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        c.set_model_config(&crate::model::tiny_config());
        c
    }

    fn archive(n: usize, views: usize) -> Vec<SceneRecord> {
        let sc = SceneConfig {
            difficulty: Difficulty::Minimal,
            views,
            ..SceneConfig::default()
        };
        (0..n)
            .map(|i| SceneRecord::render(format!("scene_{i:04}"), gen_scene(i as u64, &sc).unwrap(), 16, 16).unwrap())
            .collect()
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let scenes = archive(3, 4);
        let cfg = tiny_cfg();
        for step in 0..20 {
            let a = sample_pretrain_batch(&scenes, &cfg, step).unwrap();
            assert_eq!(a, sample_pretrain_batch(&scenes, &cfg, step).unwrap());
            assert!((2..=3).contains(&a.1.len()));
            let mut v = a.1.clone();
            v.sort();
            v.dedup();
            assert_eq!(v.len(), a.1.len());
        }
    }

    #[test]
    fn single_view_scenes_need_the_replication_flag() {
        let scenes = archive(1, 1);
        let mut cfg = tiny_cfg();
        assert!(sample_pretrain_batch(&scenes, &cfg, 0).is_err());
        cfg.replicate_single_view = true;
        let (_, v) = sample_pretrain_batch(&scenes, &cfg, 0).unwrap();
        assert!(v.iter().all(|&i| i == 0) && v.len() >= 2);
    }

    #[test]
    fn triple_middle_frame_leaves_room_for_the_next() {
        let videos = archive(2, 5);
        for step in 0..30 {
            let (_, t) = sample_triple(&videos, 3, step).unwrap();
            assert!((1..=3).contains(&t));
        }
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::new(&[2], vec![3.0, 0.0]).unwrap()),
            ("b".to_string(), Tensor::new(&[1], vec![4.0]).unwrap()),
        ]);
        let small = g.clone();
        clip_grads(&mut g, 10.0);
        assert_eq!(g, small);
        clip_grads(&mut g, 1.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
        let mut nan = BTreeMap::from([("a".to_string(), Tensor::new(&[1], vec![f64::NAN]).unwrap())]);
        clip_grads(&mut nan, 1.0);
        assert!(nan["a"].data()[0].is_nan());
    }

    #[test]
    fn empty_archive_is_an_error() {
        let r = train_pretrain(&tiny_cfg(), &[], None, |_| Ok(()));
        assert!(matches!(r, Err(PipelineError::EmptyArchive)));
    }

    #[test]
    fn prefetch_matches_serial_run() {
        let scenes = archive(2, 3);
        let mut cfg = TrainConfig {
            deterministic: true,
            ..tiny_cfg()
        };
        let serial = train_pretrain(&cfg, &scenes, None, |_| Ok(())).unwrap();
        cfg.deterministic = false;
        let overlapped = train_pretrain(&cfg, &scenes, None, |_| Ok(())).unwrap();
        assert_eq!(serial.checkpoint.params, overlapped.checkpoint.params);
        let losses = |c: &[StepRecord]| c.iter().map(|r| r.loss).collect::<Vec<_>>();
        assert_eq!(losses(&serial.curve), losses(&overlapped.curve));
    }

    #[test]
    fn frozen_encoder_keeps_encoder_weights() {
        let scenes = archive(1, 3);
        let cfg = TrainConfig {
            freeze_encoder: true,
            ..tiny_cfg()
        };
        let init = Model::new(cfg.model_config(), cfg.seed).unwrap();
        let out = train_pretrain(&cfg, &scenes, None, |_| Ok(())).unwrap();
        let mut head_moved = false;
        for (k, v) in out.checkpoint.params.iter() {
            let same = init.params().get(k).unwrap() == v;
            if is_encoder_param(k) {
                assert!(same, "{k} moved");
            } else {
                head_moved |= !same;
            }
        }
        assert!(head_moved);
    }
}
