use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mvinverse::eval::{
    mv_consistency_rmse, normal_metrics, psnr_ssim, temporal_warp_rmse, ConsistencyOptions, ConsistencyReport,
    ImageReport, MetricRecord, NormalReport, TemporalReport,
};
use mvinverse::geometry::{fuse_pointcloud, CameraView, Flow};
use mvinverse::io::{generate_scenes, read_archive, write_archive, write_png, SceneRecord};
use mvinverse::model::IntrinsicSet;
use mvinverse::pipeline::{predict_scene, train_finetune, train_pretrain, Checkpoint, Stage, StepRecord, TrainConfig};
use mvinverse::relight::{edit_material, render_relit, EditConfig, LightRig, RelightConfig};
use mvinverse::scenegen::SceneConfig;
use mvinverse::tensor::Tensor;

mod error;

use error::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "mvinverse",
    version,
    about = "Multi-view inverse rendering on procedural scenes",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded scene archive
    GenData(Common),
    /// Supervised pretraining on a scene archive
    Train(TrainArgs),
    /// Consistency finetuning of a pretrained checkpoint on videos
    Finetune(FinetuneArgs),
    /// Cross-view RMSE of albedo, metallic and roughness
    EvalConsistency(EvalArgs),
    /// Angular error of predicted normals
    EvalNormals(EvalArgs),
    /// Flow-warped RMSE between adjacent video frames
    EvalTemporal(EvalArgs),
    /// Relight the fused point cloud of one scene
    Relight(SceneJobArgs),
    /// Recolor a world-space region of one scene
    Edit(SceneJobArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::EvalConsistency(_) => "eval-consistency",
            Command::EvalNormals(_) => "eval-normals",
            Command::EvalTemporal(_) => "eval-temporal",
            Command::Relight(_) => "relight",
            Command::Edit(_) => "edit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ViewRange {
    lo: usize,
    hi: usize,
}

fn parse_views(s: &str) -> std::result::Result<ViewRange, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad view count {t:?}"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (num(a)?, num(b)?),
        None => (num(s)?, num(s)?),
    };
    if lo > hi {
        return Err(format!("empty view range {s}"));
    }
    Ok(ViewRange { lo, hi })
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// View count range A..B (or a single N)
    #[arg(long, value_parser = parse_views)]
    views: Option<ViewRange>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Serial data loading
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Scene archive directory
    #[arg(long)]
    data: PathBuf,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Video archive directory
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate this model's predictions instead of the ground-truth maps
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SceneJobArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Scene name; defaults to the first scene of the archive
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    /// Rejects flags that `command` does not use.
    fn only(&self, command: &str, allowed: &[&str]) -> Result<()> {
        let given = [
            ("seed", self.seed.is_some()),
            ("views", self.views.is_some()),
            ("steps", self.steps.is_some()),
            ("lr", self.lr.is_some()),
        ];
        for (flag, set) in given {
            if set && !allowed.contains(&flag) {
                return Err(CliError::Usage(format!("--{flag} does not apply to {command}")));
            }
        }
        Ok(())
    }

    fn config_text(&self) -> Result<String> {
        match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::file(p, e)),
            None => Ok(String::new()),
        }
    }

    fn out_dir(&self, command: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{command} needs --out DIR")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"status": "error", "command": name, "kind": e.kind(), "message": e.to_string()})
            );
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Train(a) => train(&a),
        Command::Finetune(a) => finetune(&a),
        Command::EvalConsistency(a) => eval_consistency(&a),
        Command::EvalNormals(a) => eval_normals(&a),
        Command::EvalTemporal(a) => eval_temporal(&a),
        Command::Relight(a) => relight(&a),
        Command::Edit(a) => edit(&a),
    }
}

fn take_int(table: &mut toml::Table, key: &str, path: &str) -> Result<Option<u64>> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
        Some(v) => Err(CliError::config(path, format!("{key} must be a nonnegative integer, got {v}"))),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    c.only("gen-data", &["seed", "views"])?;
    let out = c.out_dir("gen-data")?;
    let path = config_name(c);
    let mut table: toml::Table = toml::from_str(&c.config_text()?).map_err(|e| CliError::config(&path, e))?;
    let count = take_int(&mut table, "count", &path)?.unwrap_or(16) as usize;
    let seed = c.seed.or(take_int(&mut table, "seed", &path)?).unwrap_or(0);
    let mut scene: SceneConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::config(&path, e))?;
    if let Some(v) = c.views {
        if v.lo != v.hi {
            return Err(CliError::Usage("gen-data takes a single view count".into()));
        }
        scene.views = v.lo;
    }
    if count == 0 {
        return Err(CliError::config(&path, "count must be positive"));
    }
    let scenes = generate_scenes(seed, count, &scene)?;
    write_archive(out, seed, &scene, &scenes)?;
    println!("wrote {count} scenes ({} views each) to {}", scene.views, out.display());
    Ok(())
}

fn config_name(c: &Common) -> String {
    c.config
        .as_ref()
        .map_or("<defaults>".to_string(), |p| p.display().to_string())
}

fn train_config(c: &Common, stage: Stage) -> Result<TrainConfig> {
    let path = config_name(c);
    let mut cfg = TrainConfig::from_toml(&c.config_text()?).map_err(|e| CliError::config(&path, e))?;
    cfg.stage = stage;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = c.views {
        cfg.min_views = v.lo;
        cfg.max_views = v.hi;
    }
    if let Some(n) = c.steps {
        cfg.epochs = 1;
        cfg.steps_per_epoch = n;
    }
    if let Some(lr) = c.lr {
        cfg.lr = lr;
    }
    cfg.deterministic |= c.deterministic;
    Ok(cfg)
}

/// Appends run-log lines and prints progress every tenth of the run.
struct RunLog {
    file: BufWriter<File>,
    total: usize,
}

impl RunLog {
    fn open(path: &Path, append: bool, total: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| CliError::file(path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
            total,
        })
    }

    fn record(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(r).expect("records serialize"))?;
        let every = (self.total / 10).max(1);
        if (r.step + 1) % every == 0 || r.step + 1 == self.total {
            eprintln!("step {}/{} loss {:.6} ({:.1}s)", r.step + 1, self.total, r.loss, r.elapsed_s);
            self.file.flush()?;
        }
        Ok(())
    }
}

fn finish_run(out: &Path, cfg: &TrainConfig, ckpt: &Checkpoint, mut log: RunLog) -> Result<()> {
    log.file.flush().map_err(|e| CliError::file(&out.join("train_log.jsonl"), e))?;
    ckpt.save(&out.join("checkpoint.ckpt"))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    println!("wrote {} after {} steps", out.join("checkpoint.ckpt").display(), ckpt.step);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    c.only("train", &["seed", "views", "steps", "lr"])?;
    let out = c.out_dir("train")?;
    let mut cfg = train_config(c, Stage::Pretrain)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(r) = &resume {
        cfg.set_model_config(&r.model);
    }
    cfg.validate()?;
    let scenes = read_archive(&a.data)?;
    create_dir(out)?;
    let mut log = RunLog::open(&out.join("train_log.jsonl"), resume.is_some(), cfg.total_steps())?;
    let run = train_pretrain(&cfg, &scenes, resume, |r| log.record(r))?;
    finish_run(out, &cfg, &run.checkpoint, log)
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let c = &a.common;
    c.only("finetune", &["seed", "steps", "lr"])?;
    let out = c.out_dir("finetune")?;
    let mut cfg = train_config(c, Stage::Finetune)?;
    let pretrained = Checkpoint::load(&a.pretrained)?;
    cfg.set_model_config(&pretrained.model);
    cfg.validate()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let videos = read_archive(&a.data)?;
    create_dir(out)?;
    let mut log = RunLog::open(&out.join("train_log.jsonl"), resume.is_some(), cfg.total_steps())?;
    let run = train_finetune(&cfg, &pretrained.model()?, &videos, resume, |r| log.record(r))?;
    finish_run(out, &cfg, &run.checkpoint, log)
}

fn gt_set(rec: &SceneRecord) -> Result<IntrinsicSet> {
    Ok(IntrinsicSet::cat(&rec.views.iter().map(|v| v.intrinsics()).collect::<Vec<_>>())?)
}

/// Maps to evaluate for every scene: model predictions when a checkpoint
/// is given, the ground truth otherwise.
fn scene_maps(scenes: &[SceneRecord], checkpoint: Option<&Path>) -> Result<Vec<IntrinsicSet>> {
    match checkpoint {
        None => scenes.iter().map(gt_set).collect(),
        Some(p) => {
            let model = Checkpoint::load(p)?.model()?;
            scenes
                .iter()
                .map(|s| predict_scene(&model, s).map_err(CliError::from))
                .collect()
        }
    }
}

fn cameras(rec: &SceneRecord) -> Vec<CameraView> {
    rec.views.iter().map(|v| v.view()).collect()
}

fn scene_line(scene: &str, rec: &MetricRecord) -> String {
    let mut v = serde_json::to_value(rec).expect("metric records serialize");
    if let Value::Object(m) = &mut v {
        m.insert("scene".into(), Value::String(scene.to_string()));
    }
    v.to_string()
}

/// Prints the per-scene and summary tables and writes `report.txt` and
/// `metrics.jsonl` under `--out` when given.
fn emit_report(out: Option<&Path>, rows: &[(String, String, MetricRecord)]) -> Result<()> {
    let mut text = String::new();
    let mut lines = String::new();
    for (scene, table, rec) in rows {
        text.push_str(&format!("[{scene}]\n{table}\n"));
        lines.push_str(&scene_line(scene, rec));
        lines.push('\n');
    }
    print!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("report.txt"), &text)?;
        write_text(&dir.join("metrics.jsonl"), &lines)?;
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn eval_consistency(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    c.only("eval-consistency", &[])?;
    let path = config_name(c);
    let opts: ConsistencyOptions = toml::from_str(&c.config_text()?).map_err(|e| CliError::config(&path, e))?;
    let scenes = read_archive(&a.data)?;
    let maps = scene_maps(&scenes, a.checkpoint.as_deref())?;
    let mut reports = Vec::new();
    for (rec, m) in scenes.iter().zip(&maps) {
        reports.push((rec.name.clone(), mv_consistency_rmse(&cameras(rec), m, &opts)?));
    }
    let all = ConsistencyReport {
        albedo: mean(reports.iter().map(|r| r.1.albedo)),
        metallic: mean(reports.iter().map(|r| r.1.metallic)),
        roughness: mean(reports.iter().map(|r| r.1.roughness)),
        pairs: reports.iter().map(|r| r.1.pairs).sum(),
        skipped_pairs: reports.iter().map(|r| r.1.skipped_pairs).sum(),
        mean_overlap: mean(reports.iter().map(|r| r.1.mean_overlap)),
        pair_overlaps: Vec::new(),
    };
    reports.push(("all".into(), all));
    let rows: Vec<_> = reports
        .into_iter()
        .map(|(s, r)| (s, r.table(), MetricRecord::Consistency(r)))
        .collect();
    emit_report(c.out.as_deref(), &rows)
}

fn eval_normals(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    c.only("eval-normals", &[])?;
    no_config(c, "eval-normals")?;
    let scenes = read_archive(&a.data)?;
    let maps = scene_maps(&scenes, a.checkpoint.as_deref())?;
    let mut reports = Vec::new();
    for (rec, m) in scenes.iter().zip(&maps) {
        let hit: Vec<bool> = rec.views.iter().flat_map(|v| v.hit_mask()).collect();
        reports.push((rec.name.clone(), normal_metrics(&m.normal, &gt_set(rec)?.normal, &hit)?));
    }
    let pixels: usize = reports.iter().map(|r| r.1.pixels).sum();
    let weighted = |f: fn(&NormalReport) -> f64| {
        reports.iter().map(|r| f(&r.1) * r.1.pixels as f64).sum::<f64>() / pixels.max(1) as f64
    };
    let all = NormalReport {
        mae_deg: weighted(|r| r.mae_deg),
        pct_below_11_25: weighted(|r| r.pct_below_11_25),
        pct_below_30: weighted(|r| r.pct_below_30),
        pixels,
    };
    reports.push(("all".into(), all));
    let rows: Vec<_> = reports
        .into_iter()
        .map(|(s, r)| (s, r.table(), MetricRecord::Normals(r)))
        .collect();
    emit_report(c.out.as_deref(), &rows)
}

fn video_flows(rec: &SceneRecord) -> Result<Vec<Flow>> {
    let n = rec.views.len();
    (0..n.saturating_sub(1))
        .map(|i| {
            rec.views[i].flow_to_next.clone().ok_or_else(|| {
                CliError::Data(format!("scene {}: no flow for frame pair ({i}, {})", rec.name, i + 1))
            })
        })
        .collect()
}

fn eval_temporal(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    c.only("eval-temporal", &[])?;
    no_config(c, "eval-temporal")?;
    let scenes = read_archive(&a.data)?;
    let maps = scene_maps(&scenes, a.checkpoint.as_deref())?;
    let mut reports = Vec::new();
    for (rec, m) in scenes.iter().zip(&maps) {
        reports.push((rec.name.clone(), temporal_warp_rmse(m, &video_flows(rec)?)?));
    }
    let all = TemporalReport {
        albedo: mean(reports.iter().map(|r| r.1.albedo)),
        metallic: mean(reports.iter().map(|r| r.1.metallic)),
        roughness: mean(reports.iter().map(|r| r.1.roughness)),
        shading: mean(reports.iter().map(|r| r.1.shading)),
        pairs: reports.iter().map(|r| r.1.pairs).sum(),
    };
    reports.push(("all".into(), all));
    let rows: Vec<_> = reports
        .into_iter()
        .map(|(s, r)| (s, r.table(), MetricRecord::Temporal(r)))
        .collect();
    emit_report(c.out.as_deref(), &rows)
}

fn no_config(c: &Common, command: &str) -> Result<()> {
    match &c.config {
        Some(_) => Err(CliError::Usage(format!("{command} takes no config file"))),
        None => Ok(()),
    }
}

fn pick_scene(a: &SceneJobArgs) -> Result<SceneRecord> {
    let mut scenes = read_archive(&a.data)?;
    match &a.scene {
        None => Ok(scenes.swap_remove(0)),
        Some(name) => {
            let i = scenes
                .iter()
                .position(|s| &s.name == name)
                .ok_or_else(|| CliError::Data(format!("no scene {name} in {}", a.data.display())))?;
            Ok(scenes.swap_remove(i))
        }
    }
}

fn frame(images: &Tensor, i: usize) -> Result<Tensor> {
    let s = images.shape();
    Ok(images.slice0(i, 1)?.reshape(&s[1..])?)
}

fn relight(a: &SceneJobArgs) -> Result<()> {
    let c = &a.common;
    c.only("relight", &[])?;
    let out = c.out_dir("relight")?;
    let path = config_name(c);
    let cfg = RelightConfig::from_toml(&c.config_text()?).map_err(|e| CliError::config(&path, e))?;
    let rec = pick_scene(a)?;
    let maps = scene_maps(std::slice::from_ref(&rec), a.checkpoint.as_deref())?.remove(0);
    let cloud = fuse_pointcloud(&cameras(&rec), &maps, cfg.voxel)?;
    let rig = cfg.rig.clone().unwrap_or_else(|| LightRig::from_scene(&rec.spec));
    create_dir(out)?;
    let mut rows = Vec::new();
    for (i, v) in rec.views.iter().enumerate() {
        let relit = render_relit(&cloud, &v.camera, &rig, &cfg.splat)?;
        write_png(&out.join(format!("view_{i:03}.png")), &relit.image)?;
        let (psnr_db, ssim) = psnr_ssim(&relit.image, &v.rgb)?;
        let r = ImageReport { psnr_db, ssim };
        let table = format!("psnr {psnr_db:.3} dB  ssim {ssim:.4}  vs input view\n");
        rows.push((format!("{}/view_{i:03}", rec.name), table, MetricRecord::Image(r)));
    }
    println!("relit {} views from {} points", rec.views.len(), cloud.positions.len());
    emit_report(Some(out), &rows)
}

fn edit(a: &SceneJobArgs) -> Result<()> {
    let c = &a.common;
    c.only("edit", &[])?;
    let out = c.out_dir("edit")?;
    let Some(p) = &c.config else {
        return Err(CliError::Usage("edit needs --config with [region] and [albedo]".into()));
    };
    let cfg = EditConfig::from_toml(&c.config_text()?).map_err(|e| CliError::config(&p.display().to_string(), e))?;
    let rec = pick_scene(a)?;
    let maps = scene_maps(std::slice::from_ref(&rec), a.checkpoint.as_deref())?.remove(0);
    let images = Tensor::stack(&rec.views.iter().map(|v| v.rgb.clone()).collect::<Vec<_>>())?;
    let result = edit_material(&cameras(&rec), &images, &maps, &cfg.region, &cfg.albedo)?;
    create_dir(out)?;
    for i in 0..rec.views.len() {
        write_png(&out.join(format!("view_{i:03}.png")), &frame(&result.images, i)?)?;
    }
    for w in &result.warnings {
        log::warn!("{w}");
    }
    let counts: Vec<usize> = result.footprints.iter().map(|f| f.iter().filter(|&&b| b).count()).collect();
    let summary = json!({"scene": rec.name, "edited_pixels": counts, "warnings": result.warnings});
    write_text(&out.join("edit.json"), &format!("{summary}\n"))?;
    println!("edited {} pixels over {} views", counts.iter().sum::<usize>(), counts.len());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::file(path, e))
}
