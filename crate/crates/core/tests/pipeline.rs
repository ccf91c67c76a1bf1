use mvinverse::io::SceneRecord;
use mvinverse::model::{Model, ModelConfig};
use mvinverse::pipeline::{train_finetune, train_pretrain, Checkpoint, PipelineError, Stage, TrainConfig};
use mvinverse::scenegen::{gen_scene, Difficulty, SceneConfig};
use mvinverse::tensor::Tensor;
use sha2::{Digest, Sha256};

fn small_model() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        mlp_ratio: 2,
        head_channels: [4, 4, 8, 8],
        image_height: 16,
        image_width: 16,
    }
}

fn cfg(steps: usize) -> TrainConfig {
    let mut c = TrainConfig {
        steps_per_epoch: steps,
        min_views: 2,
        max_views: 3,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    c.set_model_config(&small_model());
    c
}

fn archive(n: usize, views: usize, seed: u64) -> Vec<SceneRecord> {
    let sc = SceneConfig {
        difficulty: Difficulty::Minimal,
        views,
        ..SceneConfig::default()
    };
    (0..n)
        .map(|i| {
            let spec = gen_scene(seed + i as u64, &sc).unwrap();
            SceneRecord::render(format!("scene_{i:04}"), spec, 16, 16).unwrap()
        })
        .collect()
}

fn hash(c: &Checkpoint) -> Vec<u8> {
    Sha256::digest(c.to_bytes()).to_vec()
}

fn images(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 3, 16, 16], |i| ((i[0] * 7 + i[1] * 3 + i[2] + 2 * i[3]) % 11) as f64 / 10.0)
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let out = train_pretrain(&cfg(3), &archive(2, 3, 0), None, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    out.checkpoint.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, out.checkpoint);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn loaded_checkpoint_predicts_bit_identically() {
    let model = Model::new(small_model(), 9).unwrap();
    let ckpt = Checkpoint::new(&model, cfg(1));
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().model().unwrap();
    let x = images(3);
    let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
    for ((_, ta), (_, tb)) in a.maps().iter().zip(b.maps().iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(small_model(), 1).unwrap();
    let bytes = Checkpoint::new(&model, cfg(1)).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut longer = bytes;
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_exact() {
    let c = TrainConfig { lr: 0.0, ..cfg(4) };
    let init = Model::new(c.model_config(), c.seed).unwrap();
    let out = train_pretrain(&c, &archive(2, 3, 0), None, |_| Ok(())).unwrap();
    assert_eq!(&out.checkpoint.params, init.params());
    assert_eq!(out.checkpoint.step, 4);
}

#[test]
fn fixed_seed_reproduces_curve_and_checkpoint() {
    let scenes = archive(3, 3, 0);
    let a = train_pretrain(&cfg(5), &scenes, None, |_| Ok(())).unwrap();
    let b = train_pretrain(&cfg(5), &scenes, None, |_| Ok(())).unwrap();
    let strip = |c: &[mvinverse::pipeline::StepRecord]| {
        c.iter()
            .map(|r| (r.step, r.scene.clone(), r.views.clone(), r.loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.curve), strip(&b.curve));
    assert_eq!(hash(&a.checkpoint), hash(&b.checkpoint));
    let other = train_pretrain(&TrainConfig { seed: 6, ..cfg(5) }, &scenes, None, |_| Ok(())).unwrap();
    assert_ne!(hash(&a.checkpoint), hash(&other.checkpoint));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let scenes = archive(2, 3, 0);
    let full = train_pretrain(&cfg(6), &scenes, None, |_| Ok(())).unwrap();
    let half = train_pretrain(&cfg(3), &scenes, None, |_| Ok(())).unwrap();
    let resumed_from = Checkpoint::from_bytes(&half.checkpoint.to_bytes()).unwrap();
    let rest = train_pretrain(&cfg(6), &scenes, Some(resumed_from), |_| Ok(())).unwrap();
    assert_eq!(rest.curve.len(), 3);
    assert_eq!(hash(&rest.checkpoint), hash(&full.checkpoint));
}

#[test]
fn run_log_records_every_step() {
    let mut lines = Vec::new();
    let out = train_pretrain(&cfg(3), &archive(1, 3, 0), None, |r| {
        lines.push(serde_json::to_string(r).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(v["stage"], "pretrain");
    for k in ["albedo", "metallic", "roughness", "normal", "shading"] {
        assert!(v["terms"][k].as_f64().unwrap().is_finite());
    }
    assert_eq!(out.curve[2].step, 2);
}

fn ft_cfg(steps: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Finetune,
        lambda_anchor: lambda,
        ..cfg(steps)
    }
}

#[test]
fn finetune_starts_with_zero_anchor_and_leaves_reference_untouched() {
    let videos = archive(2, 4, 10);
    let pre = Model::new(small_model(), 3).unwrap();
    let before = Checkpoint::new(&pre, cfg(1)).to_bytes();
    let out = train_finetune(&ft_cfg(4, 0.1), &pre, &videos, None, |_| Ok(())).unwrap();
    assert_eq!(out.curve[0].terms["anchor"], 0.0);
    assert!(out.curve[0].terms["consistency"] > 0.0);
    assert!(out.curve.iter().all(|r| r.views[0] == 0 && r.views[2] == r.views[1] + 1));
    assert_eq!(Checkpoint::new(&pre, cfg(1)).to_bytes(), before);
    assert_ne!(&out.checkpoint.params, pre.params());
}

#[test]
fn zero_rate_finetune_is_a_no_op() {
    let videos = archive(1, 3, 10);
    let pre = Model::new(small_model(), 3).unwrap();
    let out = train_finetune(&TrainConfig { lr: 0.0, ..ft_cfg(3, 0.1) }, &pre, &videos, None, |_| Ok(())).unwrap();
    assert_eq!(&out.checkpoint.params, pre.params());
    assert!(out.curve.iter().all(|r| r.terms["anchor"] == 0.0));
}

#[test]
fn missing_flow_names_the_frame_pair() {
    let mut videos = archive(1, 3, 10);
    videos[0].views[1].flow_to_next = None;
    let pre = Model::new(small_model(), 3).unwrap();
    let err = train_finetune(&ft_cfg(2, 0.1), &pre, &videos, None, |_| Ok(())).err().unwrap();
    match &err {
        PipelineError::MissingFlow { scene, from, to } => {
            assert_eq!((scene.as_str(), *from, *to), ("scene_0000", 1, 2));
        }
        e => panic!("unexpected {e}"),
    }
    assert!(err.to_string().contains("(1, 2)"));
}

#[test]
fn dominant_anchor_pins_frame_zero() {
    let videos = archive(2, 4, 20);
    let pre = Model::new(small_model(), 4).unwrap();
    let c = TrainConfig { lr: 5e-5, ..ft_cfg(100, 1e6) };
    let out = train_finetune(&c, &pre, &videos, None, |_| Ok(())).unwrap();
    let tuned = out.checkpoint.model().unwrap();
    let mut worst: f64 = 0.0;
    for v in &videos {
        let x = Tensor::stack(&[v.views[0].rgb.clone(), v.views[1].rgb.clone(), v.views[2].rgb.clone()]).unwrap();
        let a = pre.predict(&x).unwrap().view(0).unwrap();
        let b = tuned.predict(&x).unwrap().view(0).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst < 1e-3, "{worst}");
}
