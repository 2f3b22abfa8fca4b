use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ply::{self, Vertex};
use dvgt::gradcheck::{self, GradcheckConfig};
use dvgt::metrics::{self, MetricPrediction, MetricReport, DEFAULT_CHAMFER_CAP};
use dvgt::model::{attention_cost, AttentionMode, ForwardOptions, Model, ModelConfig};
use dvgt::pseudo_label::{self, FailurePattern, FilterThresholds, CORPUS_NOISE};
use dvgt::scene::{self, SceneSample, SceneSpec};
use dvgt::trainer::{self, Dataset, Precision, TrainConfig, TrainState};
use dvgt::{checkpoint, Error};
use dvgt_tensor::Scalar;

#[derive(Parser, Debug)]
#[command(name = "dvgt", version, about = "Multi-view driving geometry: synthesis, training, evaluation and tooling")]
pub struct Cli {
    /// Seed for every random choice; overrides seeds found in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point width for model computations (f32 or f64).
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Worker threads for parallel stages; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic clips with exact ground truth.
    Synth(SynthArgs),
    /// Train a model on one or more datasets.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval(EvalArgs),
    /// Align stand-in relative depth to range returns and filter the results.
    Align(AlignArgs),
    /// Compare factorized and global attention cost and wall time.
    BenchAttn(BenchArgs),
    /// Write one frame of a clip as a colored ASCII PLY point cloud.
    ExportPly(ExportArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

pub enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidCamera(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let globals = Globals { seed: cli.seed, precision: cli.precision, threads: rayon::current_num_threads() };
    match cli.command {
        Command::Synth(a) => synth(&globals, a),
        Command::Train(a) => train(&globals, a),
        Command::Eval(a) => eval(&globals, a),
        Command::Align(a) => align(&globals, a),
        Command::BenchAttn(a) => bench_attn(&globals, a),
        Command::ExportPly(a) => export_ply(&globals, a),
        Command::Gradcheck(a) => run_gradcheck(&globals, a),
    }
}

struct Globals {
    seed: Option<u64>,
    precision: Option<Precision>,
    threads: usize,
}

/// Prints the fully resolved settings of a run on stderr.
fn announce(cmd: &str, g: &Globals, settings: Value) {
    let line = json!({ "command": cmd, "threads": g.threads, "settings": settings });
    eprintln!("config {line}");
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn scene_names(dir: &Path) -> std::result::Result<Vec<String>, Failure> {
    Ok(scene::read_manifest(dir)?.scenes.into_iter().map(|s| s.name).collect())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Street,
    Ground,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec JSON; clip k uses the spec seed plus k.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in scene family used when no spec file is given.
    #[arg(long, value_enum, default_value = "street")]
    preset: Preset,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    /// Fraction of pixels that receive a simulated range return.
    #[arg(long)]
    lidar_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

fn synth(g: &Globals, a: SynthArgs) -> Outcome {
    let base: Option<SceneSpec> = a.spec.as_deref().map(read_json).transpose()?;
    let seed0 = g.seed.or(base.as_ref().map(|s| s.seed)).unwrap_or(0);
    let specs: Vec<SceneSpec> = (0..a.count as u64)
        .map(|k| {
            let seed = seed0.wrapping_add(k);
            match (&base, a.preset) {
                (Some(s), _) => SceneSpec { seed, ..s.clone() },
                (None, Preset::Street) => SceneSpec::random_street(seed, a.frames, a.views, a.height, a.width),
                (None, Preset::Ground) => SceneSpec::ground_only(seed, a.frames, a.views, a.height, a.width),
            }
        })
        .map(|mut s: SceneSpec| {
            if let Some(f) = a.lidar_fraction {
                s.lidar.fraction = f;
            }
            s
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    announce(
        "synth",
        g,
        json!({
            "spec": a.spec, "preset": if base.is_some() { Value::Null } else { json!(a.preset) },
            "frames": specs.first().map(|s| s.frames), "views": specs.first().map(|s| s.views),
            "height": specs.first().map(|s| s.height), "width": specs.first().map(|s| s.width),
            "lidar_fraction": specs.first().map(|s| s.lidar.fraction),
            "seed": seed0, "count": a.count, "out": a.out,
        }),
    );
    let samples =
        specs.par_iter().map(|s| Ok((scene::synthesize(s)?, Some(s.clone())))).collect::<dvgt::Result<Vec<_>>>()?;
    let manifest = scene::write_dataset(&a.out, &samples)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory, optionally with a sampling weight: `path` or `path:weight`.
    #[arg(long, required = true)]
    data: Vec<String>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Stop after this step, keeping the full schedule; resume later with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Write the per-step JSON log here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_data(spec: &str) -> std::result::Result<(PathBuf, Option<f64>), Failure> {
    if let Some((path, w)) = spec.rsplit_once(':') {
        if let Ok(w) = w.parse::<f64>() {
            return Ok((PathBuf::from(path), Some(w)));
        }
    }
    Ok((PathBuf::from(spec), None))
}

fn load_datasets(specs: &[String], cfg: &mut TrainConfig) -> std::result::Result<Vec<Dataset>, Failure> {
    let parsed = specs.iter().map(|s| parse_data(s)).collect::<std::result::Result<Vec<_>, _>>()?;
    let weighted = parsed.iter().filter(|(_, w)| w.is_some()).count();
    if weighted != 0 && weighted != parsed.len() {
        return Err(Failure::Usage("either every --data entry has a weight or none does".into()));
    }
    let mut datasets = Vec::new();
    for (path, w) in &parsed {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Failure::Usage(format!("cannot name dataset {}", path.display())))?;
        if datasets.iter().any(|d: &Dataset| d.name == name) {
            return Err(Failure::Usage(format!("dataset name {name:?} given twice")));
        }
        if let Some(w) = w {
            cfg.dataset_weights.insert(name.clone(), *w);
        }
        datasets.push(Dataset { name, scenes: scene::read_dataset(path)? });
    }
    if weighted != 0 {
        cfg.dataset_weights.retain(|k, _| datasets.iter().any(|d| &d.name == k));
    }
    Ok(datasets)
}

fn train(g: &Globals, a: TrainArgs) -> Outcome {
    let mut file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    // a resumed run keeps the architecture and schedule it was started with
    let resumed_cfg = if a.resume {
        let header = checkpoint::read_manifest(&a.out.join("trainer"))?.header;
        let saved: TrainConfig = serde_json::from_value(header.get("train").cloned().unwrap_or_default())?;
        let model = checkpoint::read_manifest(&a.out)?.header;
        file.model = serde_json::from_value(model.get("model").cloned().unwrap_or_default())?;
        Some(saved)
    } else {
        None
    };
    let mut cfg = resumed_cfg.clone().unwrap_or(file.train);
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let datasets = load_datasets(&a.data, &mut cfg)?;
    cfg.validate()?;
    file.model.validate()?;
    announce(
        "train",
        g,
        json!({ "model": file.model, "train": cfg, "data": a.data, "out": a.out, "resume": a.resume, "stop_after": a.stop_after, "log": a.log }),
    );
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let step = match cfg.precision {
        Precision::F32 => train_with::<f32>(&file.model, &cfg, &datasets, &a, &mut *log)?,
        Precision::F64 => train_with::<f64>(&file.model, &cfg, &datasets, &a, &mut *log)?,
    };
    log.flush()?;
    eprintln!("trained to step {step}; checkpoint in {}", a.out.display());
    Ok(())
}

fn train_with<F: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    a: &TrainArgs,
    log: &mut dyn Write,
) -> std::result::Result<usize, Failure> {
    let (model, state) = if a.resume {
        let (model, state, _) = trainer::load_checkpoint::<F>(&a.out)?;
        (model, state)
    } else {
        let model = Model::<F>::new(model_cfg.clone(), cfg.seed)?;
        let state = TrainState::new(&model);
        (model, state)
    };
    let stop = a.stop_after.unwrap_or(cfg.steps);
    let out = trainer::fit_until(model, state, datasets, cfg, stop, Some(&a.out), log)?;
    Ok(out.state.step)
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "gt_bypass"])))]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    gt_bypass: bool,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON; an aligned table is written next to it with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
    /// Per-side point cap for the chamfer terms.
    #[arg(long, default_value_t = DEFAULT_CHAMFER_CAP)]
    chamfer_cap: usize,
}

fn checkpoint_precision(dir: &Path) -> std::result::Result<Precision, Failure> {
    match checkpoint::read_manifest(dir)?.dtype.as_str() {
        "f64" => Ok(Precision::F64),
        _ => Ok(Precision::F32),
    }
}

fn load_model<F: Scalar>(dir: &Path) -> std::result::Result<Model<F>, Failure> {
    Ok(match checkpoint_precision(dir)? {
        Precision::F32 => Model::<f32>::load(dir)?.cast(),
        Precision::F64 => Model::<f64>::load(dir)?.cast(),
    })
}

fn predict_scenes<F: Scalar>(
    model: &Model<F>,
    scenes: &[SceneSample],
) -> dvgt::Result<Vec<(dvgt_tensor::Tensor<f64>, Vec<dvgt::geo3d::EgoPose>)>> {
    scenes
        .par_iter()
        .map(|s| {
            let out = model.predict(&s.images.cast(), &ForwardOptions::default())?;
            Ok((out.pointmaps, out.poses))
        })
        .collect()
}

fn eval(g: &Globals, a: EvalArgs) -> Outcome {
    let seed = g.seed.unwrap_or(0);
    let precision = match (&a.ckpt, g.precision) {
        (_, Some(p)) => p,
        (Some(dir), None) => checkpoint_precision(dir)?,
        (None, None) => Precision::F64,
    };
    announce(
        "eval",
        g,
        json!({
            "ckpt": a.ckpt, "gt_bypass": a.gt_bypass, "data": a.data, "out": a.out,
            "chamfer_cap": a.chamfer_cap, "seed": seed, "precision": precision,
        }),
    );
    let names = scene_names(&a.data)?;
    let scenes = scene::read_dataset(&a.data)?;
    if scenes.is_empty() {
        return Err(Failure::Data(format!("{} holds no scenes", a.data.display())));
    }
    let predictions = match &a.ckpt {
        None => scenes.iter().map(|s| (s.pointmaps.clone(), s.poses.clone())).collect(),
        Some(dir) => match precision {
            Precision::F32 => predict_scenes(&load_model::<f32>(dir)?, &scenes)?,
            Precision::F64 => predict_scenes(&load_model::<f64>(dir)?, &scenes)?,
        },
    };
    let reports = scenes
        .par_iter()
        .zip(&predictions)
        .map(|(s, (pm, poses))| metrics::evaluate(&MetricPrediction { pointmaps: pm, poses }, s, a.chamfer_cap, seed))
        .collect::<dvgt::Result<Vec<_>>>()?;
    let total = MetricReport::aggregate(&reports)?;

    let per_scene: Vec<Value> = names
        .iter()
        .zip(&reports)
        .map(|(n, r)| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["scene"] = json!(n);
            v
        })
        .collect();
    let source = match &a.ckpt {
        Some(p) => json!({ "checkpoint": p }),
        None => json!("ground_truth"),
    };
    write_json(&a.out, &json!({ "source": source, "scenes": per_scene, "aggregate": total }))?;

    let mut table = String::new();
    for (i, (n, r)) in names.iter().zip(&reports).enumerate() {
        let t = r.table(n);
        let mut lines = t.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            table.push_str(header);
            table.push('\n');
        }
        table.extend(lines.map(|l| format!("{l}\n")));
    }
    table.extend(total.table("all").lines().skip(1).map(|l| format!("{l}\n")));
    fs::write(a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------- align

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    data: PathBuf,
    /// Filter thresholds JSON; missing fields take the small-image defaults.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Per-image results as JSON lines; the summary goes to `<out stem>.summary.json`.
    #[arg(long)]
    out: PathBuf,
    /// Log-normal noise of the stand-in relative depth.
    #[arg(long, default_value_t = CORPUS_NOISE)]
    noise: f64,
    /// Corrupt every image with a failure pattern (a-e) before alignment.
    #[arg(long)]
    inject: Option<FailurePattern>,
    #[arg(long, default_value_t = 1.0)]
    magnitude: f64,
}

fn align(g: &Globals, a: AlignArgs) -> Outcome {
    let seed = g.seed.unwrap_or(0);
    let th = match &a.thresholds {
        Some(p) => {
            let mut v: Value = read_json(p)?;
            let mut base = serde_json::to_value(FilterThresholds::desk())?;
            if let (Some(over), Some(obj)) = (v.as_object_mut(), base.as_object_mut()) {
                obj.append(over);
            }
            serde_json::from_value(base).map_err(|e| Failure::Usage(format!("thresholds: {e}")))?
        }
        None => FilterThresholds::desk(),
    };
    th.validate()?;
    announce(
        "align",
        g,
        json!({
            "data": a.data, "thresholds": th, "out": a.out, "noise": a.noise, "seed": seed,
            "inject": a.inject.map(|p| p.to_string()), "magnitude": a.magnitude,
        }),
    );
    let names = scene_names(&a.data)?;
    let scenes = scene::read_dataset(&a.data)?;
    let jobs: Vec<(usize, usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.frames).flat_map(move |t| (0..s.views).map(move |n| (i, t, n))))
        .collect();
    let results = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, t, n))| {
            let image_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let mut input = pseudo_label::stand_in_input(&scenes[i], t, n, image_seed, a.noise)?;
            if let Some(p) = a.inject {
                input = pseudo_label::inject_failure(&input, p, image_seed, a.magnitude)?;
            }
            pseudo_label::score_and_filter(&input, &th)
        })
        .collect::<dvgt::Result<Vec<_>>>()?;

    let mut lines = String::new();
    for (&(i, t, n), r) in jobs.iter().zip(&results) {
        let mut v = serde_json::to_value(r)?;
        v["scene"] = json!(names[i]);
        v["frame"] = json!(t);
        v["view"] = json!(n);
        lines.push_str(&serde_json::to_string(&v)?);
        lines.push('\n');
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, lines)?;
    let summary = pseudo_label::summarize(&results);
    write_json(&a.out.with_extension("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------- bench-attn

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Frames.
    #[arg(long = "T", default_value_t = 16)]
    t: usize,
    /// Views.
    #[arg(long = "N", default_value_t = 8)]
    n: usize,
    /// Patch tokens per image (the ego token comes on top).
    #[arg(long = "P", default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
}

/// Most square `rows × cols` factorization of `p`.
fn grid(p: usize) -> (usize, usize) {
    let rows = (1..=p).take_while(|r| r * r <= p).filter(|r| p % r == 0).last().unwrap_or(1);
    (rows, p / rows)
}

fn bench_attn(g: &Globals, a: BenchArgs) -> Outcome {
    if a.t == 0 || a.n == 0 || a.p == 0 || a.repeat == 0 {
        return Err(Failure::Usage("T, N, P and repeat must be positive".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let precision = g.precision.unwrap_or_default();
    let (rows, cols) = grid(a.p);
    let (h, w) = (rows * a.patch, cols * a.patch);
    announce(
        "bench-attn",
        g,
        json!({
            "T": a.t, "N": a.n, "P": a.p, "dim": a.dim, "heads": a.heads, "blocks": a.blocks,
            "patch": a.patch, "image": [h, w], "repeat": a.repeat, "seed": seed, "precision": precision,
        }),
    );
    let spec = SceneSpec { max_pixels: usize::MAX, ..SceneSpec::random_street(seed, a.t, a.n, h, w) };
    let images = scene::synthesize(&spec)?.images;
    let report = match precision {
        Precision::F32 => bench_with::<f32>(&a, &images, seed)?,
        Precision::F64 => bench_with::<f64>(&a, &images, seed)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report["factorized"]["counts_match"] != json!(true) || report["global"]["counts_match"] != json!(true) {
        return Err(Failure::Check("instrumented score counts differ from the analytic formula".into()));
    }
    Ok(())
}

fn bench_with<F: Scalar>(
    a: &BenchArgs,
    images: &dvgt_tensor::Tensor<f32>,
    seed: u64,
) -> std::result::Result<Value, Failure> {
    let (t, n, tok) = (a.t as u64, a.n as u64, a.p as u64 + 1);
    let cost = attention_cost(t, n, tok);
    let blocks = a.blocks as u128;
    let images = images.cast::<F>();
    let mut out = json!({
        "analytic": {
            "tokens_per_image": tok,
            "global": cost.global as f64,
            "factorized": cost.factorized as f64,
            "ratio": cost.ratio,
            "ratio_tn_over_1_plus_n_plus_t": (t * n) as f64 / (1 + n + t) as f64,
        },
    });
    let mut best = [0.0f64; 2];
    for (k, mode) in [AttentionMode::Factorized, AttentionMode::Global].into_iter().enumerate() {
        let cfg = ModelConfig {
            dim: a.dim,
            heads: a.heads,
            blocks: a.blocks,
            patch: a.patch,
            attention_mode: mode,
            max_view_slots: a.n.max(1),
            ..ModelConfig::default()
        };
        let model = Model::<F>::new(cfg, seed)?;
        let mut seconds = Vec::with_capacity(a.repeat);
        let mut stats = None;
        for _ in 0..a.repeat {
            let started = Instant::now();
            let o = model.predict(&images, &ForwardOptions::default())?;
            seconds.push(started.elapsed().as_secs_f64());
            stats = Some(o.stats);
        }
        let s = stats.expect("at least one repeat");
        let local = blocks * (t * n * tok * tok) as u128;
        let matches = match mode {
            AttentionMode::Factorized => {
                (s.local + s.spatial + s.temporal) as u128 == blocks * cost.factorized && s.global == 0
            }
            AttentionMode::Global => s.global as u128 == blocks * cost.global && s.local as u128 == local,
        };
        best[k] = seconds.iter().cloned().fold(f64::INFINITY, f64::min);
        let name = if k == 0 { "factorized" } else { "global" };
        out[name] = json!({ "stats": s, "counts_match": matches, "seconds": seconds, "best_seconds": best[k] });
    }
    out["global_over_factorized_time"] = json!(best[1] / best[0]);
    Ok(out)
}

// ---------------------------------------------------------------- export-ply

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Dataset supplying images, masks and (without --ckpt) the points.
    #[arg(long)]
    data: PathBuf,
    /// Export the model's predicted points instead of the ground truth.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

fn export_ply(g: &Globals, a: ExportArgs) -> Outcome {
    announce(
        "export-ply",
        g,
        json!({ "data": a.data, "ckpt": a.ckpt, "scene": a.scene, "frame": a.frame, "out": a.out }),
    );
    let manifest = scene::read_manifest(&a.data)?;
    let entry = manifest
        .scenes
        .get(a.scene)
        .ok_or_else(|| Failure::Usage(format!("scene {} not in a dataset of {}", a.scene, manifest.scenes.len())))?;
    let sample = scene::read_scene(&a.data, entry)?;
    if a.frame >= sample.frames {
        return Err(Failure::Usage(format!("frame {} not in a clip of {} frames", a.frame, sample.frames)));
    }
    let points = match &a.ckpt {
        None => sample.pointmaps.clone(),
        Some(dir) => {
            let precision = match g.precision {
                Some(p) => p,
                None => checkpoint_precision(dir)?,
            };
            let scenes = std::slice::from_ref(&sample);
            let mut pred = match precision {
                Precision::F32 => predict_scenes(&load_model::<f32>(dir)?, scenes)?,
                Precision::F64 => predict_scenes(&load_model::<f64>(dir)?, scenes)?,
            };
            pred.remove(0).0
        }
    };
    let (h, w) = (sample.height, sample.width);
    let mut vertices = Vec::new();
    for v in 0..sample.views {
        for i in 0..h {
            for j in 0..w {
                if !sample.is_valid(a.frame, v, i, j) {
                    continue;
                }
                let k = sample.pixel_index(a.frame, v, i, j) * 3;
                let p = &points.data()[k..k + 3];
                let c = &sample.images.data()[k..k + 3];
                vertices.push(Vertex {
                    xyz: [p[0], p[1], p[2]],
                    rgb: [ply::color(c[0]), ply::color(c[1]), ply::color(c[2])],
                });
            }
        }
    }
    let text = ply::to_ascii(&vertices, &format!("{} frame {}", entry.name, a.frame));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, text)?;
    println!("wrote {} vertices to {}", vertices.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Suite configuration JSON; missing fields take the tiny defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_gradcheck(g: &Globals, a: GradcheckArgs) -> Outcome {
    let mut cfg: GradcheckConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.precision == Some(Precision::F32) {
        eprintln!("note: finite differences always run in f64");
    }
    announce("gradcheck", g, json!({ "config": cfg, "out": a.out }));
    let report = gradcheck::run(&cfg)?;
    let mut stdout = io::stdout().lock();
    for c in &report.checks {
        let verdict = if c.passed { "ok" } else { "FAIL" };
        writeln!(stdout, "{:<44} {:>7} {:>11.3e} {verdict}", c.name, c.elements, c.rel_error)?;
    }
    writeln!(stdout, "max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if !report.passed {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        return Err(Failure::Check(format!("{failed} of {} gradient checks failed", report.checks.len())));
    }
    Ok(())
}
