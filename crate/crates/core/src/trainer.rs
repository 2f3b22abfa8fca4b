//! Training loop: weighted dataset sampling with view/frame batching under an
//! image budget, warmup + cosine schedule, clipped AdamW, checkpoint/resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, CONFIDENCE_ALPHA, POSE_WEIGHT};
use crate::metrics::{self, MetricPrediction, MetricReport, DEFAULT_CHAMFER_CAP};
use crate::model::{ForwardOptions, Model, Params};
use crate::scene::SceneSample;
use dvgt_tensor::{Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Optional image-only perturbations applied per frame; ground truth is untouched.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    /// Brightness factor drawn from `1 ± color_jitter`.
    pub color_jitter: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl Augment {
    pub fn is_off(&self) -> bool {
        self.color_jitter == 0.0 && self.grayscale_prob == 0.0 && self.blur_prob == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub image_budget: usize,
    /// Sampling weight per dataset name; empty means uniform.
    pub dataset_weights: BTreeMap<String, f64>,
    pub view_range: [usize; 2],
    /// Lower end of the frame-count draw (clipped to what the clip and budget allow).
    pub min_frames: usize,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            grad_clip_norm: 1.0,
            image_budget: 48,
            dataset_weights: BTreeMap::new(),
            view_range: [2, 8],
            min_frames: 2,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
            checkpoint_every: 0,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dataset_weights.values().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad(format!("dataset weights must be positive: {:?}", self.dataset_weights));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.view_range[0] == 0 || self.view_range[0] > self.view_range[1] {
            return bad(format!("view range {:?} must be increasing and start at 1 or more", self.view_range));
        }
        if self.image_budget < self.view_range[0] {
            return bad(format!(
                "image budget {} below the minimum view count {}",
                self.image_budget, self.view_range[0]
            ));
        }
        if self.min_frames == 0 {
            return bad("min_frames must be at least 1".into());
        }
        if !(self.peak_lr >= 0.0 && self.grad_clip_norm > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad(
                "learning rate, clip norm, eps and weight decay must be non-negative (clip and eps positive)".into()
            );
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("moment decay rates ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64).round() as usize).max(1)
    }
}

/// Linear warmup to the peak, then half-cosine decay to zero at `cfg.steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps().min(cfg.steps.max(1));
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let span = cfg.steps.saturating_sub(warm);
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A named collection of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub scenes: Vec<SceneSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dataset: usize,
    pub scene: usize,
    pub start: usize,
    pub views: Vec<usize>,
    pub sample: SceneSample,
}

/// Normalized selection probabilities in dataset order.
pub fn dataset_probabilities(datasets: &[Dataset], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if datasets.is_empty() {
        return Err(Error::Data("no datasets to sample from".into()));
    }
    let weights: Vec<f64> = datasets
        .iter()
        .map(|d| {
            if cfg.dataset_weights.is_empty() {
                Ok(1.0)
            } else {
                cfg.dataset_weights
                    .get(&d.name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("no sampling weight for dataset {:?}", d.name)))
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Draws one training clip: dataset by weight, scene uniformly, a view
/// subset, then the longest window that fits the image budget.
pub fn sample_batch(datasets: &[Dataset], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let probs = dataset_probabilities(datasets, cfg)?;
    let pick = WeightedIndex::new(&probs).map_err(|e| Error::Config(e.to_string()))?;
    let dataset = pick.sample(rng);
    let scenes = &datasets[dataset].scenes;
    if scenes.is_empty() {
        return Err(Error::Data(format!("dataset {:?} has no scenes", datasets[dataset].name)));
    }
    let scene = rng.gen_range(0..scenes.len());
    let clip = &scenes[scene];

    let lo = cfg.view_range[0].min(clip.views);
    let hi = cfg.view_range[1].min(clip.views).min(cfg.image_budget);
    let n = rng.gen_range(lo..=hi.max(lo));
    let mut views = index::sample(rng, clip.views, n).into_vec();
    views.sort_unstable();

    let t_max = (cfg.image_budget / n).min(clip.frames).max(1);
    let t_lo = cfg.min_frames.min(t_max);
    let t = if t_max == 1 { 1 } else { rng.gen_range(t_lo..=t_max) };
    let start = rng.gen_range(0..=clip.frames - t);
    let mut sample = clip.window(start, t, &views)?;
    if !cfg.augment.is_off() {
        augment_images(&mut sample, &cfg.augment, rng);
    }
    Ok(Batch { dataset, scene, start, views, sample })
}

fn augment_images(sample: &mut SceneSample, aug: &Augment, rng: &mut impl Rng) {
    let (h, w) = (sample.height, sample.width);
    let per_image = h * w * 3;
    let frame = sample.views * per_image;
    let data = sample.images.data_mut();
    for t in 0..sample.frames {
        let gain = 1.0 + aug.color_jitter * rng.gen_range(-1.0..=1.0);
        let gray = rng.gen_bool(aug.grayscale_prob.clamp(0.0, 1.0));
        let blur = rng.gen_bool(aug.blur_prob.clamp(0.0, 1.0));
        for n in 0..sample.views {
            let img = &mut data[t * frame + n * per_image..t * frame + (n + 1) * per_image];
            for px in img.chunks_mut(3) {
                if gray {
                    let m = (px[0] + px[1] + px[2]) / 3.0;
                    px.fill(m);
                }
                for c in px.iter_mut() {
                    *c = (*c * gain as f32).clamp(0.0, 1.0);
                }
            }
            if blur {
                let src = img.to_vec();
                for i in 0..h {
                    for j in 0..w {
                        for c in 0..3 {
                            let (mut acc, mut cnt) = (0.0f32, 0.0f32);
                            for di in i.saturating_sub(1)..(i + 2).min(h) {
                                for dj in j.saturating_sub(1)..(j + 2).min(w) {
                                    acc += src[(di * w + dj) * 3 + c];
                                    cnt += 1.0;
                                }
                            }
                            img[(i * w + j) * 3 + c] = acc / cnt;
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive-moment state, one pair of moment tensors per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F: Scalar> {
    /// Completed optimizer updates.
    pub step: usize,
    pub m: Params<F>,
    pub v: Params<F>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: &Model<F>) -> Self {
        let zeros: Params<F> = model.params().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<F: Scalar>(grads: &Params<F>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = F::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * k;
            }
        }
    }
    norm
}

/// Weight matrices are decayed; biases, norm gains, LayerScale and the ego
/// token are not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// One AdamW update with decoupled weight decay at learning rate `lr`.
pub fn adamw_update<F: Scalar>(
    model: &mut Model<F>,
    grads: &Params<F>,
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (ob1, ob2) = (F::lit(1.0 - cfg.beta1), F::lit(1.0 - cfg.beta2));
    let (lr_f, eps) = (F::lit(lr), F::lit(cfg.eps));
    let (ic1, ic2) = (F::lit(1.0 / c1), F::lit(1.0 / c2));
    for (name, p) in model.params_mut().iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        let wd = F::lit(if decays(name) { cfg.weight_decay } else { 0.0 });
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let mhat = *mi * ic1;
            let vhat = *vi * ic2;
            *pi = *pi - lr_f * (mhat / (vhat.sqrt() + eps) + wd * *pi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossReport,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, loss, backward, clip and update on one clip.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    batch: &SceneSample,
    cfg: &TrainConfig,
    state: &mut TrainState<F>,
    lr: f64,
) -> Result<StepReport> {
    let step = state.step;
    let named = |e: Error| match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::NonFinite(format!("output of {op} in the forward pass at step {step}"))
        }
        other => other,
    };
    if !batch.images.is_finite() {
        return Err(Error::NonFinite(format!("input images at step {step}")));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let images: Tensor<F> = batch.images.cast();
    let fwd = model.forward(&mut tape, &bound, &images, &ForwardOptions::default()).map_err(named)?;
    let scaling = model.config().scaling;
    let (loss, report) =
        losses::total_loss(&mut tape, &fwd.prediction, batch, scaling, POSE_WEIGHT, CONFIDENCE_ALPHA).map_err(named)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {} at step {}", report.total, state.step)));
    }
    let mut all = tape.backward(&loss)?;
    let mut grads: Params<F> = BTreeMap::new();
    for (name, var) in &bound {
        let g = all.take(var).unwrap_or_else(|| Tensor::zeros(var.shape()));
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", state.step)));
        }
        grads.insert(name.clone(), g);
    }
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
    adamw_update(model, &grads, state, cfg, lr);
    if let Some((name, _)) = model.params().iter().find(|(_, p)| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {name} after step {}", state.step)));
    }
    Ok(StepReport { step: state.step - 1, loss: report, lr, grad_norm })
}

/// Per-step generator: stream `step` of the run seed, so any step's batch can
/// be regenerated after a resume.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

const TRAINER_DIR: &str = "trainer";

/// Writes the model at the top of `dir` and optimizer state under `dir/trainer`.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    model: &Model<F>,
    state: &TrainState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    model.save(&tmp)?;
    let mut moments = BTreeMap::new();
    for (k, t) in &state.m {
        moments.insert(format!("m.{k}"), t.clone());
    }
    for (k, t) in &state.v {
        moments.insert(format!("v.{k}"), t.clone());
    }
    let header = serde_json::json!({ "step": state.step, "train": cfg });
    checkpoint::write_checkpoint(&tmp.join(TRAINER_DIR), header, &moments)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<(Model<F>, TrainState<F>, TrainConfig)> {
    let model = Model::<F>::load(dir)?;
    let (manifest, tensors) = checkpoint::read_checkpoint::<F>(&dir.join(TRAINER_DIR))?;
    let step = manifest
        .header
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("trainer state has no step".into()))?;
    let cfg: TrainConfig = serde_json::from_value(
        manifest.header.get("train").cloned().ok_or_else(|| Error::Data("trainer state has no config".into()))?,
    )?;
    let mut state = TrainState::new(&model);
    for which in ["m", "v"] {
        let target = if which == "m" { &mut state.m } else { &mut state.v };
        for (name, t) in target.iter_mut() {
            let stored = tensors
                .get(&format!("{which}.{name}"))
                .ok_or_else(|| Error::Data(format!("trainer state lacks {which}.{name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "{which}.{name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
    }
    state.step = step as usize;
    Ok((model, state, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome<F: Scalar> {
    pub model: Model<F>,
    pub state: TrainState<F>,
    pub history: Vec<StepReport>,
}

/// Runs training from `state.step` up to `cfg.steps`, writing one JSON line
/// per step to `log` and checkpoints to `out` (periodically and at the end).
pub fn fit<F: Scalar>(
    model: Model<F>,
    state: TrainState<F>,
    datasets: &[Dataset],
    cfg: &TrainConfig,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<FitOutcome<F>> {
    fit_until(model, state, datasets, cfg, cfg.steps, out, log)
}

/// [`fit`] that stops after step `stop` while keeping the schedule of
/// `cfg.steps`; the final checkpoint can be resumed as if never interrupted.
pub fn fit_until<F: Scalar>(
    mut model: Model<F>,
    mut state: TrainState<F>,
    datasets: &[Dataset],
    cfg: &TrainConfig,
    stop: usize,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<FitOutcome<F>> {
    cfg.validate()?;
    dataset_probabilities(datasets, cfg)?;
    let stop = stop.min(cfg.steps);
    let mut history = Vec::new();
    while state.step < stop {
        let k = state.step;
        let started = Instant::now();
        let mut rng = step_rng(cfg.seed, k);
        let batch = sample_batch(datasets, cfg, &mut rng)?;
        let lr = lr_at(k + 1, cfg);
        let report = train_step(&mut model, &batch.sample, cfg, &mut state, lr)?;
        let line = serde_json::json!({
            "step": report.step,
            "total": report.loss.total,
            "pose_term": report.loss.pose_term,
            "pmap_terms": {
                "error": report.loss.pmap_error_term,
                "grad": report.loss.pmap_grad_term,
                "reg": report.loss.pmap_reg_term,
            },
            "lr": lr,
            "grad_norm": report.grad_norm,
            "frames": batch.sample.frames,
            "views": batch.sample.views,
            "dataset": datasets[batch.dataset].name,
            "s_per_step": started.elapsed().as_secs_f64(),
        });
        writeln!(log, "{line}")?;
        history.push(report);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < stop {
                save_checkpoint(dir, &model, &state, cfg)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(dir, &model, &state, cfg)?;
    }
    Ok(FitOutcome { model, state, history })
}

/// Full-clip metrics of `model` on each scene, plus their aggregate.
pub fn evaluate_scenes<F: Scalar>(
    model: &Model<F>,
    scenes: &[SceneSample],
    seed: u64,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let reports = scenes
        .iter()
        .map(|s| {
            let out = model.predict(&s.images.cast(), &ForwardOptions::default())?;
            metrics::evaluate(
                &MetricPrediction { pointmaps: &out.pointmaps, poses: &out.poses },
                s,
                DEFAULT_CHAMFER_CAP,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total = MetricReport::aggregate(&reports)?;
    Ok((reports, total))
}
