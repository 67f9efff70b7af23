//! Toy training: AdamW with linear warmup, the scene data stream, the
//! alignment probe and the single-factor ablation runner.

use std::io::Write;
use std::path::Path;

use ditlab_numerics::{Graph, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Family};
use crate::conditioning::{make_edge_batch, make_inpaint_batch, ConditionKind};
use crate::diffusion::{training_loss, DiffusionSchedule, P_UNCOND};
use crate::model::TextToImage;
use crate::text::{TextBatch, Vocab};
use crate::{Error, Result};

pub mod ablation;
pub mod data;
pub mod probe;

pub use ablation::{
    run_ablation, standard_ablation, AblationOptions, AblationPlan, AblationReport, Variant, VariantResult,
    STANDARD_ABLATIONS,
};
pub use data::{mix_datasets, render_batch, scene_vocab, Draw, MixedStream, Placement, Scene, SyntheticDataset};
pub use probe::{
    alignment_probe, chance_level, classify, probe_model, ModelGenerator, NoiseGenerator, OracleGenerator, ProbeConfig,
    ProbeReport, SceneGenerator,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub text_lr: f64,
    pub text_weight_decay: f64,
    pub text_frozen: bool,
    pub seed: u64,
    pub p_uncond: f64,
    pub mixture_weights: Vec<f64>,
    /// `[short, long]` caption probabilities, applied to every source.
    pub caption_probs: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.0,
            text_lr: 1e-3,
            text_weight_decay: 1e-4,
            text_frozen: false,
            seed: 0,
            p_uncond: P_UNCOND,
            mixture_weights: vec![1.0],
            caption_probs: vec![0.5, 0.5],
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive".into());
        }
        if self.warmup > self.steps {
            return bad(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("text_lr", self.text_lr),
            ("text_weight_decay", self.text_weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond {} outside [0, 1]", self.p_uncond));
        }
        Ok(())
    }

    /// `base * k / warmup` at 1-based step `k` before the warmup ends, then `base`.
    pub fn warmed(&self, base: f64, k: usize) -> f64 {
        if k < self.warmup {
            base * k as f64 / self.warmup as f64
        } else {
            base
        }
    }

    pub fn lr_at(&self, k: usize) -> f64 {
        self.warmed(self.lr, k)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the shared step counter; call once before the group updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates parameter `slot` in place. `p -= lr (m̂ / (√v̂ + eps) + wd p)`.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f64, weight_decay: f64) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        if self.m[slot].len() != param.len() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        }
        let t = self.t.max(1);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr32, wd, eps) = (lr as f32, weight_decay as f32, self.eps as f32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] as f64 / c1;
            let vh = v[i] as f64 / c2;
            let step = (mh / (vh.sqrt() + eps as f64)) as f32 + wd * param[i];
            param[i] -= lr32 * step;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Hash of the `(source, index, caption)` sequence fed to the model.
    pub order_hash: u64,
}

pub const LOG_HEADER: [&str; 4] = ["step", "loss", "lr", "grad_norm"];

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = window.clamp(1, self.steps.len().max(1));
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        tail.iter().map(|s| s.loss).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean loss over the first `window` steps.
    pub fn head_mean(&self, window: usize) -> f64 {
        let head = &self.steps[..window.min(self.steps.len())];
        head.iter().map(|s| s.loss).sum::<f64>() / head.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(LOG_HEADER)?;
        for s in &self.steps {
            out.write_record([
                s.step.to_string(),
                format!("{:.9e}", s.loss),
                format!("{:.9e}", s.lr),
                format!("{:.9e}", s.grad_norm),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Everything needed to rerun a training run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub sources: Vec<String>,
    pub model_seed: u64,
    pub order_hash: String,
}

/// Seeds of the independent random streams of one run.
#[derive(Clone, Copy, Debug)]
struct Streams {
    data: u64,
    diffusion: u64,
    mask: u64,
}

impl Streams {
    fn from(seed: u64) -> Self {
        Self {
            data: seed,
            diffusion: seed ^ 0x9e37_79b9_7f4a_7c15,
            mask: seed ^ 0xc2b2_ae3d_27d4_eb4f,
        }
    }
}

/// Backbone sized for the scene data: 8x8 latents, caption-length text, width-32 text vectors.
pub fn toy_arch(family: Family, hidden_dim: usize, depth: usize) -> ArchConfig {
    ArchConfig {
        text_dim: 32,
        text_len: data::CAPTION_LEN,
        resolution: data::SCENE_RESOLUTION,
        ..ArchConfig::with_dims(family, hidden_dim, depth, 4)
    }
}

/// Builds a freshly initialized model over the scene vocabulary.
pub fn toy_model(arch: &ArchConfig, seed: u64) -> Result<TextToImage> {
    let net = crate::backbone::Network::build(arch, seed)?;
    Ok(TextToImage::new(net, scene_vocab().len(), seed.wrapping_add(1)))
}

/// Builds the condition tensor a conditioned network expects for `x0`.
pub fn condition_for(arch: &ArchConfig, x0: &Tensor, rng: &mut ChaCha8Rng) -> Result<Option<Tensor>> {
    match arch.conditioning.as_ref().map(|c| c.kind) {
        None => Ok(None),
        Some(ConditionKind::InpaintImageAndMask) => Ok(Some(make_inpaint_batch(x0, rng)?.condition())),
        Some(ConditionKind::EdgeMap) => Ok(Some(make_edge_batch(x0)?)),
    }
}

/// Trains `model` in place on scenes drawn from `sources`.
pub fn train(model: &mut TextToImage, cfg: &TrainConfig, sources: Vec<SyntheticDataset>) -> Result<TrainLog> {
    cfg.check()?;
    let vocab = scene_vocab();
    let arch = model.net.config().clone();
    let streams = Streams::from(cfg.seed);
    let mut stream = mix_datasets(sources, &cfg.mixture_weights, &cfg.caption_probs, streams.data)?;
    let mut diff_rng = ChaCha8Rng::seed_from_u64(streams.diffusion);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(streams.mask);
    let schedule = DiffusionSchedule::default();
    let mut opt = AdamW::default();
    let mut steps = Vec::with_capacity(cfg.steps);
    let n_net = model.net.params().len();

    for k in 1..=cfg.steps {
        let draws = stream.next_batch(cfg.batch_size);
        let scenes: Vec<Scene> = draws.iter().map(|d| d.scene).collect();
        let x0 = render_batch(&scenes);
        let text = encode_draws(&vocab, &draws, model.embedder.len);
        let cond = condition_for(&arch, &x0, &mut mask_rng)?;

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true, !cfg.text_frozen);
        let cv = cond.map(|c| g.constant(c));
        let draw = training_loss(&mut g, &bound, &x0, &text, cv, &schedule, cfg.p_uncond, &mut diff_rng)?;
        let loss = g.value(draw.loss).data()[0] as f64;
        g.backward(draw.loss)?;

        let net_grads: Vec<Tensor> = bound.net_vars.vars().iter().map(|&v| grad_or_zero(&g, v)).collect();
        let text_grads: Vec<Tensor> = if cfg.text_frozen {
            Vec::new()
        } else {
            bound.text_vars.iter().map(|&v| grad_or_zero(&g, v)).collect()
        };
        drop(bound);
        let net_sq: f64 = net_grads.iter().map(|t| t.squared_norm()).sum();
        let text_sq: f64 = text_grads.iter().map(|t| t.squared_norm()).sum();
        let grad_norm = (net_sq + text_sq).sqrt();
        let lr = cfg.lr_at(k);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: k,
                lr,
                grad_norm: net_sq.sqrt(),
                text_grad_norm: text_sq.sqrt(),
            });
        }

        opt.tick();
        for (i, ((_, p), gr)) in model.net.params_mut().zip(&net_grads).enumerate() {
            opt.update(i, p.data_mut(), gr.data(), lr, cfg.weight_decay);
        }
        let text_lr = cfg.warmed(cfg.text_lr, k);
        for (i, ((_, p), gr)) in model.embedder.params_mut().zip(&text_grads).enumerate() {
            opt.update(n_net + i, p.data_mut(), gr.data(), text_lr, cfg.text_weight_decay);
        }
        steps.push(StepLog {
            step: k,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(TrainLog {
        steps,
        order_hash: stream.order_hash(),
    })
}

fn grad_or_zero(g: &Graph<f32>, v: ditlab_numerics::Var) -> Tensor {
    g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
}

/// Captions of `draws`, short or long as drawn.
pub fn encode_draws(vocab: &Vocab, draws: &[Draw], len: usize) -> TextBatch {
    let caps: Vec<String> = draws.iter().map(|d| d.scene.caption(d.long)).collect();
    let refs: Vec<&str> = caps.iter().map(String::as_str).collect();
    TextBatch::encode(vocab, &refs, len)
}
