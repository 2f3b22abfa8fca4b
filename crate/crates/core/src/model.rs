//! The geometry transformer: patch tokens plus one ego token per image, a
//! stack of attention blocks, and heads for point maps, per-pixel
//! uncertainty and ego poses.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geo3d::{EgoPose, Quat};
use crate::losses::{Prediction, Scaling};
use dvgt_tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Local, then cross-view, then cross-frame attention in every block.
    Factorized,
    /// Local, then attention over all tokens of the clip.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoTokenMode {
    /// One learned vector for every image.
    Shared,
    /// One learned vector per view index, shared across frames.
    PerViewSlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    pub attention_mode: AttentionMode,
    pub use_temporal_embedding: bool,
    pub ego_token_mode: EgoTokenMode,
    pub max_view_slots: usize,
    pub layer_scale_init: f64,
    pub qk_norm: bool,
    pub uncertainty_clamp: [f64; 2],
    pub mlp_ratio: usize,
    pub scaling: Scaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 2,
            patch: 8,
            attention_mode: AttentionMode::Factorized,
            use_temporal_embedding: true,
            ego_token_mode: EgoTokenMode::Shared,
            max_view_slots: 8,
            layer_scale_init: 0.01,
            qk_norm: true,
            uncertainty_clamp: [1e-3, 1e3],
            mlp_ratio: 4,
            scaling: Scaling::Linear10,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration (24 blocks, width 1024, 16 heads).
    pub fn full_scale() -> Self {
        Self { dim: 1024, heads: 16, blocks: 24, patch: 16, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be divisible by 4 for the 2D position code", self.dim));
        }
        if self.blocks == 0 || self.patch == 0 || self.mlp_ratio == 0 || self.max_view_slots == 0 {
            return bad("blocks, patch, mlp_ratio and max_view_slots must be positive".into());
        }
        let [lo, hi] = self.uncertainty_clamp;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("uncertainty clamp [{lo}, {hi}] must satisfy 0 < lo < hi"));
        }
        if !self.layer_scale_init.is_finite() {
            return bad("layer scale init must be finite".into());
        }
        Ok(())
    }

    pub fn stages(&self) -> &'static [Stage] {
        match self.attention_mode {
            AttentionMode::Factorized => &[Stage::Local, Stage::Spatial, Stage::Temporal],
            AttentionMode::Global => &[Stage::Local, Stage::Global],
        }
    }
}

/// Key set of one attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Tokens of one image.
    Local,
    /// Tokens of all views of one frame.
    Spatial,
    /// Tokens of one view across all frames.
    Temporal,
    /// Every token of the clip.
    Global,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Local => "local",
            Stage::Spatial => "spatial",
            Stage::Temporal => "temporal",
            Stage::Global => "global",
        }
    }
}

/// Score-matrix elements materialized per stage (summed over groups, per head).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub local: u64,
    pub spatial: u64,
    pub temporal: u64,
    pub global: u64,
}

impl AttentionStats {
    fn add(&mut self, stage: Stage, n: u64) {
        match stage {
            Stage::Local => self.local += n,
            Stage::Spatial => self.spatial += n,
            Stage::Temporal => self.temporal += n,
            Stage::Global => self.global += n,
        }
    }

    pub fn total(&self) -> u64 {
        self.local + self.spatial + self.temporal + self.global
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionCost {
    pub global: u128,
    pub factorized: u128,
    pub ratio: f64,
}

/// Score-element counts for one layer of global versus factorized attention
/// with `p_tok` tokens per image.
pub fn attention_cost(t: u64, n: u64, p_tok: u64) -> AttentionCost {
    let (t, n, p) = (t as u128, n as u128, p_tok as u128);
    let global = (t * n * p).pow(2);
    let factorized = t * n * p * p + t * (n * p).pow(2) + n * (t * p).pow(2);
    AttentionCost { global, factorized, ratio: global as f64 / factorized as f64 }
}

/// Extra forward-pass controls.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Per-frame flags; frames marked false are hidden from cross-frame keys.
    pub temporal_frame_mask: Option<Vec<bool>>,
}

/// Training-side forward result: scaled outputs on the tape.
pub struct Forward<F: Scalar> {
    pub prediction: Prediction<F>,
    pub stats: AttentionStats,
}

/// User-facing prediction in metric units.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[T,N,H,W,3]` meters, reference ego frame.
    pub pointmaps: Tensor<f64>,
    /// `[T,N,H,W,1]`.
    pub sigma: Tensor<f64>,
    /// `[T,7]` head output: scaled translation, unit quaternion.
    pub pose_raw: Tensor<f64>,
    /// Metric poses built from `pose_raw`.
    pub poses: Vec<EgoPose>,
    pub stats: AttentionStats,
}

enum Init {
    Zeros,
    Ones,
    Const(f64),
    Values(Vec<f64>),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier(usize, usize),
    Uniform(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let p = cfg.patch;
    let hid = cfg.mlp_ratio * d;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("embed.w".into(), vec![p * p * 3, d], Init::Xavier(p * p * 3, d));
    push("embed.b".into(), vec![d], Init::Zeros);
    let slots = match cfg.ego_token_mode {
        EgoTokenMode::Shared => 1,
        EgoTokenMode::PerViewSlot => cfg.max_view_slots,
    };
    push("ego".into(), vec![slots, d], Init::Uniform(0.02 * 3f64.sqrt()));
    for b in 0..cfg.blocks {
        for stage in cfg.stages() {
            let pre = format!("blocks.{b}.{}.", stage.name());
            push(format!("{pre}ln1.g"), vec![d], Init::Ones);
            push(format!("{pre}ln1.b"), vec![d], Init::Zeros);
            push(format!("{pre}qkv.w"), vec![d, 3 * d], Init::Xavier(d, d));
            push(format!("{pre}qkv.b"), vec![3 * d], Init::Zeros);
            if cfg.qk_norm {
                push(format!("{pre}q_norm.g"), vec![cfg.head_dim()], Init::Ones);
                push(format!("{pre}k_norm.g"), vec![cfg.head_dim()], Init::Ones);
            }
            push(format!("{pre}proj.w"), vec![d, d], Init::Xavier(d, d));
            push(format!("{pre}proj.b"), vec![d], Init::Zeros);
            push(format!("{pre}ls1"), vec![d], Init::Const(cfg.layer_scale_init));
            push(format!("{pre}ln2.g"), vec![d], Init::Ones);
            push(format!("{pre}ln2.b"), vec![d], Init::Zeros);
            push(format!("{pre}fc1.w"), vec![d, hid], Init::Xavier(d, hid));
            push(format!("{pre}fc1.b"), vec![hid], Init::Zeros);
            push(format!("{pre}fc2.w"), vec![hid, d], Init::Xavier(hid, d));
            push(format!("{pre}fc2.b"), vec![d], Init::Zeros);
            push(format!("{pre}ls2"), vec![d], Init::Const(cfg.layer_scale_init));
        }
    }
    push("point.norm.g".into(), vec![d], Init::Ones);
    push("point.norm.b".into(), vec![d], Init::Zeros);
    push("point.w".into(), vec![d, p * p * 4], Init::Xavier(d, p * p * 4));
    push("point.b".into(), vec![p * p * 4], Init::Zeros);
    push("pose.norm.g".into(), vec![d], Init::Ones);
    push("pose.norm.b".into(), vec![d], Init::Zeros);
    push("pose.fc1.w".into(), vec![d, d], Init::Xavier(d, d));
    push("pose.fc1.b".into(), vec![d], Init::Zeros);
    push("pose.fc2.w".into(), vec![d, 7], Init::Xavier(d, 7));
    // start from the identity rotation
    push("pose.fc2.b".into(), vec![7], Init::Values(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
    out
}

/// Sinusoidal code of integer positions: `[len, dim]`, sines in the first
/// half of the channels and cosines in the second.
pub fn sinusoid(len: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            let a = pos as f64 * freq;
            out[pos * dim + i] = a.sin();
            out[pos * dim + half + i] = a.cos();
        }
    }
    out
}

/// 2D position code of a `rows × cols` patch grid: row code in the first
/// half of the channels, column code in the second.
pub fn spatial_embedding(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let h = dim / 2;
    let (rc, cc) = (sinusoid(rows, h), sinusoid(cols, h));
    let mut out = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let o = (r * cols + c) * dim;
            out[o..o + h].copy_from_slice(&rc[r * h..(r + 1) * h]);
            out[o + h..o + dim].copy_from_slice(&cc[c * h..(c + 1) * h]);
        }
    }
    out
}

/// `[T,N,H,W,3]` images → `[T·N·P, p·p·3]` patch rows, patches in raster
/// order and pixels within a patch as (row, col, channel).
pub fn patchify<F: Scalar>(images: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let s = images.shape();
    if s.len() != 5 || s[4] != 3 {
        return Err(Error::Invalid(format!("images must be [T,N,H,W,3], got {s:?}")));
    }
    let (b, h, w) = (s[0] * s[1], s[2], s[3]);
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("image size {h}x{w} is not divisible by patch {p}")));
    }
    let (hp, wp) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for img in 0..b {
        for pr in 0..hp {
            for pc in 0..wp {
                for dy in 0..p {
                    let row = (img * h + pr * p + dy) * w + pc * p;
                    out.extend_from_slice(&src[row * 3..(row + p) * 3]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b * hp * wp, p * p * 3], out)?)
}

pub type Params<F> = BTreeMap<String, Tensor<F>>;
pub type BoundParams<F> = BTreeMap<String, Var<F>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    cfg: ModelConfig,
    params: Params<F>,
}

fn get<'a, F: Scalar>(p: &'a BoundParams<F>, name: &str) -> Result<&'a Var<F>> {
    p.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

fn linear<F: Scalar>(tape: &mut Tape<F>, p: &BoundParams<F>, x: &Var<F>, pre: &str) -> Result<Var<F>> {
    let y = tape.matmul(x, get(p, &format!("{pre}.w"))?)?;
    Ok(tape.add(&y, get(p, &format!("{pre}.b"))?)?)
}

fn norm<F: Scalar>(tape: &mut Tape<F>, p: &BoundParams<F>, x: &Var<F>, pre: &str) -> Result<Var<F>> {
    let y = tape.layer_norm(x, x.shape().len() - 1)?;
    let y = tape.mul(&y, get(p, &format!("{pre}.g"))?)?;
    Ok(tape.add(&y, get(p, &format!("{pre}.b"))?)?)
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in layout(&cfg) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::Values(v) => v,
                Init::Xavier(fi, fo) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
            };
            params.insert(name, Tensor::from_f64(&shape, &values)?);
        }
        Ok(Self { cfg, params })
    }

    /// Wraps existing weights after checking names and shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: Params<F>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Data(format!("{} parameters, configuration needs {}", params.len(), expected.len())));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Data(format!("{name} has shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(Error::Data(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { cfg: self.cfg.clone(), params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every weight on the tape (trainable when the tape records).
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams<F> {
        self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect()
    }

    fn check_images(&self, images: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
        let s = images.shape();
        if s.len() != 5 || s[4] != 3 || s[..4].contains(&0) {
            return Err(Error::Invalid(format!("images must be non-empty [T,N,H,W,3], got {s:?}")));
        }
        let p = self.cfg.patch;
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::Config(format!("image size {}x{} is not divisible by patch {p}", s[2], s[3])));
        }
        if self.cfg.ego_token_mode == EgoTokenMode::PerViewSlot && s[1] > self.cfg.max_view_slots {
            return Err(Error::Config(format!("{} views exceed {} ego token slots", s[1], self.cfg.max_view_slots)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Token grid `[T, N, P+1, dim]`; the ego token is the last of each image.
    pub fn encode(&self, tape: &mut Tape<F>, p: &BoundParams<F>, images: &Tensor<F>) -> Result<Var<F>> {
        let (t, n, h, w) = self.check_images(images)?;
        let (d, ps) = (self.cfg.dim, self.cfg.patch);
        let (hp, wp) = (h / ps, w / ps);
        let np = hp * wp;
        let patches = tape.constant(patchify(images, ps)?);
        let tok = linear(tape, p, &patches, "embed")?;
        let tok = tape.reshape(&tok, &[t, n, np, d])?;
        let pos = tape.constant(Tensor::from_f64(&[np, d], &spatial_embedding(hp, wp, d))?);
        let tok = tape.add(&tok, &pos)?;

        let ego = get(p, "ego")?;
        let ego = match self.cfg.ego_token_mode {
            EgoTokenMode::Shared => tape.reshape(ego, &[1, 1, 1, d])?,
            EgoTokenMode::PerViewSlot => {
                let e = tape.slice(ego, 0, 0, n)?;
                tape.reshape(&e, &[1, n, 1, d])?
            }
        };
        let ego = tape.broadcast_to(&ego, &[t, n, 1, d])?;
        let mut x = tape.concat(&[tok, ego], 2)?;
        if self.cfg.use_temporal_embedding {
            let pe = tape.constant(Tensor::from_f64(&[t, 1, 1, d], &sinusoid(t, d))?);
            x = tape.add(&x, &pe)?;
        }
        Ok(x)
    }

    /// One pre-norm attention sublayer followed by its MLP sublayer, both
    /// with LayerScale residuals. `x` is `[T, N, S, dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_unit(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams<F>,
        x: &Var<F>,
        prefix: &str,
        stage: Stage,
        opts: &ForwardOptions,
        stats: &mut AttentionStats,
    ) -> Result<Var<F>> {
        let x = self.attention_sublayer(tape, p, x, prefix, stage, opts, stats)?;
        self.mlp_sublayer(tape, p, &x, prefix)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention_sublayer(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams<F>,
        x: &Var<F>,
        prefix: &str,
        stage: Stage,
        opts: &ForwardOptions,
        stats: &mut AttentionStats,
    ) -> Result<Var<F>> {
        let (t, n, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let h = norm(tape, p, x, &format!("{prefix}.ln1"))?;
        let (g, l) = match stage {
            Stage::Local => (t * n, s),
            Stage::Spatial => (t, n * s),
            Stage::Temporal => (n, t * s),
            Stage::Global => (1, t * n * s),
        };
        let h = if stage == Stage::Temporal { tape.permute(&h, &[1, 0, 2, 3])? } else { h };
        let h = tape.reshape(&h, &[g, l, d])?;
        let qkv = linear(tape, p, &h, &format!("{prefix}.qkv"))?;
        let mut qkv_heads = Vec::with_capacity(3);
        for k in 0..3 {
            let part = tape.slice(&qkv, 2, k * d, (k + 1) * d)?;
            let part = tape.reshape(&part, &[g, l, heads, dh])?;
            let part = tape.permute(&part, &[0, 2, 1, 3])?;
            qkv_heads.push(tape.reshape(&part, &[g * heads, l, dh])?);
        }
        let (mut q, mut k, v) = (qkv_heads[0].clone(), qkv_heads[1].clone(), qkv_heads[2].clone());
        if self.cfg.qk_norm {
            q = tape.layer_norm(&q, 2)?;
            q = tape.mul(&q, get(p, &format!("{prefix}.q_norm.g"))?)?;
            k = tape.layer_norm(&k, 2)?;
            k = tape.mul(&k, get(p, &format!("{prefix}.k_norm.g"))?)?;
        }
        let mask = match (&opts.temporal_frame_mask, stage) {
            (Some(fm), Stage::Temporal) => {
                if fm.len() != t {
                    return Err(Error::Invalid(format!("frame mask has {} entries for {t} frames", fm.len())));
                }
                let keys: Vec<bool> = (0..l).map(|key| fm[key / s]).collect();
                Some(keys.repeat(g * heads))
            }
            _ => None,
        };
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let o = tape.attention(&q, &k, &v, scale, mask.as_deref())?;
        stats.add(stage, (g * l * l) as u64);
        let o = tape.reshape(&o, &[g, heads, l, dh])?;
        let o = tape.permute(&o, &[0, 2, 1, 3])?;
        let o = tape.reshape(&o, &[g, l, d])?;
        let o = linear(tape, p, &o, &format!("{prefix}.proj"))?;
        let o = tape.mul(&o, get(p, &format!("{prefix}.ls1"))?)?;
        let o = match stage {
            Stage::Temporal => {
                let o = tape.reshape(&o, &[n, t, s, d])?;
                tape.permute(&o, &[1, 0, 2, 3])?
            }
            _ => tape.reshape(&o, &[t, n, s, d])?,
        };
        Ok(tape.add(x, &o)?)
    }

    /// Second half of an attention unit: pre-LN MLP with LayerScale residual.
    pub fn mlp_sublayer(&self, tape: &mut Tape<F>, p: &BoundParams<F>, x: &Var<F>, prefix: &str) -> Result<Var<F>> {
        let m = norm(tape, p, x, &format!("{prefix}.ln2"))?;
        let m = linear(tape, p, &m, &format!("{prefix}.fc1"))?;
        let m = tape.gelu(&m)?;
        let m = linear(tape, p, &m, &format!("{prefix}.fc2"))?;
        let m = tape.mul(&m, get(p, &format!("{prefix}.ls2"))?)?;
        Ok(tape.add(x, &m)?)
    }

    /// Point-map, uncertainty and pose heads on the final token grid.
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams<F>,
        x: &Var<F>,
        h: usize,
        w: usize,
    ) -> Result<Prediction<F>> {
        let (t, n, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ps = self.cfg.patch;
        let (hp, wp) = (h / ps, w / ps);
        let np = s - 1;

        let tok = tape.slice(x, 2, 0, np)?;
        let tok = norm(tape, p, &tok, "point.norm")?;
        let px = linear(tape, p, &tok, "point")?;
        let px = tape.reshape(&px, &[t * n, hp, wp, ps, ps, 4])?;
        let px = tape.permute(&px, &[0, 1, 3, 2, 4, 5])?;
        let px = tape.reshape(&px, &[t, n, h, w, 4])?;
        let points = tape.slice(&px, 4, 0, 3)?;
        let raw = tape.slice(&px, 4, 3, 4)?;
        let raw = tape.reshape(&raw, &[t, n, h, w])?;
        let [lo, hi] = self.cfg.uncertainty_clamp;
        let raw = tape.clamp(&raw, F::lit(lo.ln()), F::lit(hi.ln()))?;
        let sigma = tape.exp(&raw)?;

        let ego = tape.slice(x, 2, np, s)?;
        let ego = norm(tape, p, &ego, "pose.norm")?;
        let agg = tape.sum(&ego, &[1, 2], false)?;
        debug_assert_eq!(agg.shape(), &[t, d]);
        let hdn = linear(tape, p, &agg, "pose.fc1")?;
        let hdn = tape.gelu(&hdn)?;
        let raw7 = linear(tape, p, &hdn, "pose.fc2")?;
        let trans = tape.slice(&raw7, 1, 0, 3)?;
        let quat = tape.slice(&raw7, 1, 3, 7)?;
        let qn = tape.l2_norm(&quat, 1)?;
        let qn = tape.add_scalar(&qn, F::lit(1e-12))?;
        let qn = tape.reshape(&qn, &[t, 1])?;
        let quat = tape.div(&quat, &qn)?;
        let sign: Vec<F> =
            quat.value().data().chunks(4).map(|q| if q[0] < F::zero() { -F::one() } else { F::one() }).collect();
        let sign = tape.constant(Tensor::new(vec![t, 1], sign)?);
        let quat = tape.mul(&quat, &sign)?;
        let pose = tape.concat(&[trans, quat], 1)?;
        Ok(Prediction { points, sigma, pose })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        p: &BoundParams<F>,
        images: &Tensor<F>,
        opts: &ForwardOptions,
    ) -> Result<Forward<F>> {
        let (_, _, h, w) = self.check_images(images)?;
        let mut stats = AttentionStats::default();
        let mut x = self.encode(tape, p, images)?;
        for b in 0..self.cfg.blocks {
            for &stage in self.cfg.stages() {
                x =
                    self.attention_unit(tape, p, &x, &format!("blocks.{b}.{}", stage.name()), stage, opts, &mut stats)?;
            }
        }
        let prediction = self.decode(tape, p, &x, h, w)?;
        Ok(Forward { prediction, stats })
    }

    /// Inference without gradient tracking; outputs in metric units.
    pub fn predict(&self, images: &Tensor<F>, opts: &ForwardOptions) -> Result<ModelOutput> {
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, images, opts)?;
        let scaling = self.cfg.scaling;
        let pred = &fwd.prediction;
        let pointmaps = scaling.inverse_tensor(pred.points.value());
        let mut sigma_shape = pred.sigma.shape().to_vec();
        sigma_shape.push(1);
        let sigma = pred.sigma.value().cast::<f64>().reshaped(&sigma_shape)?;
        let pose_raw = pred.pose.value().cast::<f64>();
        let poses = pose_raw
            .data()
            .chunks(7)
            .map(|r| EgoPose::from_parts(scaling.inverse3([r[0], r[1], r[2]]), Quat::new(r[3], r[4], r[5], r[6])))
            .collect();
        Ok(ModelOutput { pointmaps, sigma, pose_raw, poses, stats: fwd.stats })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_checkpoint(dir, serde_json::json!({ "model": self.cfg }), &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, params) = checkpoint::read_checkpoint::<F>(dir)?;
        let cfg: ModelConfig = serde_json::from_value(
            m.header.get("model").cloned().ok_or_else(|| Error::Data("checkpoint has no model config".into()))?,
        )?;
        Self::from_params(cfg, params)
    }
}
