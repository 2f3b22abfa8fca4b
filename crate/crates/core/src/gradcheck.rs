//! Central finite-difference checks of every tape primitive and of the full
//! training loss with respect to every model weight (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{self, CONFIDENCE_ALPHA, POSE_WEIGHT};
use crate::model::{AttentionStats, BoundParams, ForwardOptions, Model, ModelConfig, Stage};
use crate::scene::{self, SceneSample, SceneSpec};
use dvgt_tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: analytic gradients are multiplied by `1 + corrupt`.
    pub corrupt: Option<f64>,
    pub check_ops: bool,
    pub check_model: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { dim: 32, heads: 2, blocks: 2, patch: 8, ..ModelConfig::default() },
            frames: 2,
            views: 2,
            height: 16,
            width: 16,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
            check_ops: true,
            check_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub elements: usize,
    /// ‖fd − analytic‖ / max(‖fd‖, ‖analytic‖, 1e-6).
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn rel_error(fd: &[f64], an: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fd.iter().zip(an).map(|(a, b)| a - b).collect();
    n(&diff) / n(fd).max(n(an)).max(1e-6)
}

fn result(name: String, fd: &[f64], an: &[f64], tol: f64) -> CheckResult {
    let rel = rel_error(fd, an);
    let max_abs_error = fd.iter().zip(an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    CheckResult { name, elements: fd.len(), rel_error: rel, max_abs_error, passed: rel < tol }
}

type OpFn = fn(&mut Tape<f64>, &[Var<f64>]) -> dvgt_tensor::Result<Var<f64>>;

/// Checks `f` against finite differences in every input element. Non-scalar
/// outputs are reduced with fixed random weights.
fn check_op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckResult>> {
    let probe = {
        let mut tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&mut tape, &vars)?.value().clone()
    };
    let weights = Tensor::from_fn(probe.shape(), |_| rng.gen_range(-1.0..1.0));
    let scalar = |tape: &mut Tape<f64>, vars: &[Var<f64>]| -> Result<Var<f64>> {
        let y = f(tape, vars)?;
        let w = tape.constant(weights.clone());
        let yw = tape.mul(&y, &w)?;
        Ok(tape.sum_all(&yw)?)
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalar(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let corrupt = 1.0 + cfg.corrupt.unwrap_or(0.0);
    let mut out = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let an: Vec<f64> = grads.get(&vars[k]).map_or(vec![0.0; input.numel()], |g| g.data().to_vec());
        let an: Vec<f64> = an.iter().map(|g| g * corrupt).collect();
        let mut fd = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let eval = |d: f64| -> Result<f64> {
                let mut moved = inputs.clone();
                moved[k].data_mut()[e] += d;
                let mut t = Tape::no_grad();
                let vs: Vec<_> = moved.into_iter().map(|x| t.constant(x)).collect();
                Ok(scalar(&mut t, &vs)?.value().item())
            };
            fd.push((eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step));
        }
        let label = if inputs.len() > 1 { format!("op:{name}[{k}]") } else { format!("op:{name}") };
        out.push(result(label, &fd, &an, cfg.tolerance));
    }
    Ok(out)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Every differentiable primitive, on small random inputs away from kinks.
pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x09);
    let r = &mut rng;
    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.2..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    };
    let mut out = Vec::new();
    let a23 = rand_t(r, &[2, 3], -2.0, 2.0);
    let b3 = rand_t(r, &[3], -2.0, 2.0);
    let pos = rand_t(r, &[2, 3], 0.3, 3.0);
    out.extend(check_op("add", vec![a23.clone(), b3.clone()], |t, v| t.add(&v[0], &v[1]), cfg, r)?);
    out.extend(check_op("sub", vec![a23.clone(), b3.clone()], |t, v| t.sub(&v[0], &v[1]), cfg, r)?);
    out.extend(check_op("mul", vec![a23.clone(), b3.clone()], |t, v| t.mul(&v[0], &v[1]), cfg, r)?);
    out.extend(check_op("div", vec![a23.clone(), pos.clone()], |t, v| t.div(&v[0], &v[1]), cfg, r)?);
    out.extend(check_op("neg", vec![a23.clone()], |t, v| t.neg(&v[0]), cfg, r)?);
    out.extend(check_op("mul_scalar", vec![a23.clone()], |t, v| t.mul_scalar(&v[0], -1.7), cfg, r)?);
    out.extend(check_op("add_scalar", vec![a23.clone()], |t, v| t.add_scalar(&v[0], 0.4), cfg, r)?);
    let m1 = rand_t(r, &[2, 3, 4], -1.0, 1.0);
    let m2 = rand_t(r, &[4, 5], -1.0, 1.0);
    out.extend(check_op("matmul", vec![m1.clone(), m2], |t, v| t.matmul(&v[0], &v[1]), cfg, r)?);
    let m3 = rand_t(r, &[2, 4, 3], -1.0, 1.0);
    out.extend(check_op("matmul_batched", vec![m1.clone(), m3], |t, v| t.matmul(&v[0], &v[1]), cfg, r)?);
    out.extend(check_op("permute", vec![m1.clone()], |t, v| t.permute(&v[0], &[2, 0, 1]), cfg, r)?);
    out.extend(check_op("transpose", vec![m1.clone()], |t, v| t.transpose(&v[0], 0, 2), cfg, r)?);
    out.extend(check_op("reshape", vec![m1.clone()], |t, v| t.reshape(&v[0], &[6, 4]), cfg, r)?);
    let c2 = rand_t(r, &[2, 1, 4], -1.0, 1.0);
    out.extend(check_op("concat", vec![m1.clone(), c2], |t, v| t.concat(&[v[0].clone(), v[1].clone()], 1), cfg, r)?);
    out.extend(check_op("slice", vec![m1.clone()], |t, v| t.slice(&v[0], 2, 1, 3), cfg, r)?);
    out.extend(check_op("broadcast_to", vec![b3.clone()], |t, v| t.broadcast_to(&v[0], &[4, 3]), cfg, r)?);
    out.extend(check_op("sum", vec![m1.clone()], |t, v| t.sum(&v[0], &[0, 2], false), cfg, r)?);
    out.extend(check_op("sum_all", vec![m1.clone()], |t, v| t.sum_all(&v[0]), cfg, r)?);
    out.extend(check_op("mean", vec![m1.clone()], |t, v| t.mean(&v[0], &[1], true), cfg, r)?);
    out.extend(check_op("exp", vec![a23.clone()], |t, v| t.exp(&v[0]), cfg, r)?);
    out.extend(check_op("log", vec![pos.clone()], |t, v| t.log(&v[0]), cfg, r)?);
    out.extend(check_op("sqrt", vec![pos.clone()], |t, v| t.sqrt(&v[0]), cfg, r)?);
    out.extend(check_op("tanh", vec![a23.clone()], |t, v| t.tanh(&v[0]), cfg, r)?);
    out.extend(check_op("gelu", vec![a23.clone()], |t, v| t.gelu(&v[0]), cfg, r)?);
    let kinked = away(r, &[2, 3]);
    out.extend(check_op("abs", vec![kinked.clone()], |t, v| t.abs(&v[0]), cfg, r)?);
    out.extend(check_op("clamp", vec![kinked], |t, v| t.clamp(&v[0], -1.0, 1.1), cfg, r)?);
    out.extend(check_op("softmax", vec![m1.clone()], |t, v| t.softmax(&v[0], 1), cfg, r)?);
    out.extend(check_op("layer_norm", vec![m1.clone()], |t, v| t.layer_norm(&v[0], 2), cfg, r)?);
    out.extend(check_op("l2_norm", vec![m1.clone()], |t, v| t.l2_norm(&v[0], 2), cfg, r)?);
    let q = rand_t(r, &[2, 5, 3], -1.0, 1.0);
    let k = rand_t(r, &[2, 6, 3], -1.0, 1.0);
    let v = rand_t(r, &[2, 6, 4], -1.0, 1.0);
    out.extend(check_op(
        "attention",
        vec![q.clone(), k.clone(), v.clone()],
        |t, v| t.attention(&v[0], &v[1], &v[2], 0.6, None),
        cfg,
        r,
    )?);
    out.extend(check_op(
        "attention_masked",
        vec![q, k, v],
        |t, v| {
            const MASK: [bool; 12] = [true, false, true, true, false, true, false, true, true, true, true, false];
            t.attention(&v[0], &v[1], &v[2], 0.6, Some(&MASK))
        },
        cfg,
        r,
    )?);
    Ok(out)
}

/// The training target used by the model check.
pub fn target_clip(cfg: &GradcheckConfig) -> Result<SceneSample> {
    let mut spec = SceneSpec::random_street(cfg.seed, cfg.frames, cfg.views, cfg.height, cfg.width);
    spec.trajectory = scene::Trajectory::Arc { speed: 7.0, yaw_rate: 0.2 };
    scene::synthesize(&spec)
}

/// Loss evaluator that caches the token grid entering every attention and
/// MLP sublayer, so a perturbed weight only re-runs what lies downstream.
struct StagedLoss<'a> {
    images: Tensor<f64>,
    target: &'a SceneSample,
    /// (unit prefix, stage, is_mlp) in execution order.
    steps: Vec<(String, Stage, bool)>,
    cache: Vec<Tensor<f64>>,
}

impl<'a> StagedLoss<'a> {
    fn new(model: &Model<f64>, target: &'a SceneSample) -> Result<Self> {
        let images: Tensor<f64> = target.images.cast();
        let cfg = model.config();
        let steps: Vec<(String, Stage, bool)> = (0..cfg.blocks)
            .flat_map(|b| cfg.stages().iter().map(move |&st| (format!("blocks.{b}.{}", st.name()), st)))
            .flat_map(|(prefix, st)| [(prefix.clone(), st, false), (prefix, st, true)])
            .collect();
        let mut me = Self { images, target, steps, cache: Vec::new() };
        let mut tape = Tape::no_grad();
        let p = model.bind(&mut tape);
        let mut x = model.encode(&mut tape, &p, &me.images)?;
        for k in 0..me.steps.len() {
            me.cache.push(x.value().clone());
            x = me.step(model, &mut tape, &p, &x, k)?;
        }
        me.cache.push(x.value().clone());
        Ok(me)
    }

    fn step(
        &self,
        model: &Model<f64>,
        tape: &mut Tape<f64>,
        p: &BoundParams<f64>,
        x: &Var<f64>,
        k: usize,
    ) -> Result<Var<f64>> {
        let (prefix, stage, mlp) = &self.steps[k];
        if *mlp {
            model.mlp_sublayer(tape, p, x, prefix)
        } else {
            let mut stats = AttentionStats::default();
            model.attention_sublayer(tape, p, x, prefix, *stage, &ForwardOptions::default(), &mut stats)
        }
    }

    /// First step whose output depends on `name`; `None` for the embedding.
    fn first_step(&self, name: &str) -> Option<usize> {
        if name.starts_with("embed.") || name == "ego" {
            return None;
        }
        let owner = self.steps.iter().position(|(prefix, _, _)| name.starts_with(&format!("{prefix}.")));
        Some(match owner {
            None => self.steps.len(),
            Some(k) => {
                let suffix = &name[self.steps[k].0.len() + 1..];
                let mlp = ["ln2.", "fc1.", "fc2.", "ls2"].iter().any(|m| suffix.starts_with(m));
                if mlp {
                    k + 1
                } else {
                    k
                }
            }
        })
    }

    fn loss(&self, model: &Model<f64>, from: Option<usize>) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let start = from.unwrap_or(0);
        let needed = |k: &str| {
            from.is_none()
                || !k.starts_with("blocks.")
                || self.steps[start..].iter().any(|(pre, _, _)| k.starts_with(&format!("{pre}.")))
        };
        let p: BoundParams<f64> =
            model.params().iter().filter(|(k, _)| needed(k)).map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        let mut x = match from {
            None => model.encode(&mut tape, &p, &self.images)?,
            Some(k) => tape.constant(self.cache[k].clone()),
        };
        for k in start..self.steps.len() {
            x = self.step(model, &mut tape, &p, &x, k)?;
        }
        let (_, _, h, w, _) = dims5(&self.images);
        let pred = model.decode(&mut tape, &p, &x, h, w)?;
        let scaling = model.config().scaling;
        Ok(losses::total_loss(&mut tape, &pred, self.target, scaling, POSE_WEIGHT, CONFIDENCE_ALPHA)?.1.total)
    }
}

fn dims5(t: &Tensor<f64>) -> (usize, usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3], s[4])
}

/// Full loss versus every weight element, one result per parameter tensor.
pub fn check_model(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut model = Model::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let target = target_clip(cfg)?;
    let staged = StagedLoss::new(&model, &target)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &staged.images, &ForwardOptions::default())?;
    let scaling = model.config().scaling;
    let (loss, _) = losses::total_loss(&mut tape, &fwd.prediction, &target, scaling, POSE_WEIGHT, CONFIDENCE_ALPHA)?;
    let grads = tape.backward(&loss)?;
    let corrupt = 1.0 + cfg.corrupt.unwrap_or(0.0);

    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let an: Vec<f64> = match grads.get(&bound[&name]) {
            Some(g) => g.data().iter().map(|x| x * corrupt).collect(),
            None => vec![0.0; model.params()[&name].numel()],
        };
        let from = staged.first_step(&name);
        let mut fd = Vec::with_capacity(an.len());
        for e in 0..an.len() {
            let orig = model.params()[&name].data()[e];
            let set = |m: &mut Model<f64>, x: f64| m.params_mut().get_mut(&name).expect("known name").data_mut()[e] = x;
            set(&mut model, orig + cfg.step);
            let plus = staged.loss(&model, from)?;
            set(&mut model, orig - cfg.step);
            let minus = staged.loss(&model, from)?;
            set(&mut model, orig);
            fd.push((plus - minus) / (2.0 * cfg.step));
        }
        out.push(result(format!("param:{name}"), &fd, &an, cfg.tolerance));
    }
    Ok(out)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    if cfg.check_ops {
        checks.extend(check_ops(cfg)?);
    }
    if cfg.check_model {
        checks.extend(check_model(cfg)?);
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { tolerance: cfg.tolerance, checks, max_rel_error, passed })
}
