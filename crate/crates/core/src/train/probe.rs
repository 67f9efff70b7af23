//! Rule-based alignment probe over generated scene latents.
//!
//! The classifier reads colours by projecting each pixel onto the palette,
//! then locates the foreground by quadrant (one shape) or half (two shapes)
//! and matches shape templates inside it. A sample scores the fraction of
//! its four requested attributes (foreground, background, shape, position)
//! that the classifier recovers.

use ditlab_numerics::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{colour_vector, shape_mask, Placement, Scene, SyntheticDataset, CHANNELS, COLOURS, SHAPES, SIDE};
use super::{condition_for, encode_draws, scene_vocab, Draw};
use crate::diffusion::{ddim_sample, DiffusionSchedule, SamplerConfig};
use crate::model::TextToImage;
use crate::{Error, Result};

/// What the classifier read off one latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reading {
    pub fg: usize,
    pub bg: usize,
    pub shape: usize,
    pub placement: Placement,
}

fn argmax(v: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn dot(x: &[f32], p: usize, c: &[f32; CHANNELS]) -> f64 {
    (0..CHANNELS).map(|ch| x[ch * SIDE * SIDE + p] as f64 * c[ch] as f64).sum()
}

/// Reads a `[CHANNELS, SIDE, SIDE]` latent, given how many shapes the caption asked for.
pub fn classify(x: &[f32], count: usize) -> Reading {
    let hw = SIDE * SIDE;
    let cols: Vec<[f32; CHANNELS]> = (0..COLOURS.len()).map(colour_vector).collect();
    let bg = argmax((0..COLOURS.len()).map(|k| (k, (0..hw).map(|p| dot(x, p, &cols[k])).sum())));
    let fg = argmax((0..COLOURS.len()).filter(|&k| k != bg).map(|k| {
        let s = (0..hw).map(|p| (dot(x, p, &cols[k]) - dot(x, p, &cols[bg])).max(0.0)).sum();
        (k, s)
    }));
    let contrast: [f32; CHANNELS] = std::array::from_fn(|ch| cols[fg][ch] - cols[bg][ch]);
    let f: Vec<f64> = (0..hw).map(|p| dot(x, p, &contrast)).collect();
    let quad_sum = |q: usize| -> f64 {
        let (r0, c0) = ((q / 2) * 4, (q % 2) * 4);
        (0..16).map(|i| f[(r0 + i / 4) * SIDE + c0 + i % 4]).sum()
    };
    let placement = if count >= 2 {
        Placement::Half(argmax((0..2).map(|h| (h, quad_sum(2 * h) + quad_sum(2 * h + 1)))))
    } else {
        Placement::Quadrant(argmax((0..4).map(|q| (q, quad_sum(q)))))
    };
    let quads = placement.quadrants();
    let shape = argmax((0..SHAPES.len()).map(|s| {
        let m = shape_mask(s);
        let mut t = 0.0;
        for &q in &quads {
            let (r0, c0) = ((q / 2) * 4, (q % 2) * 4);
            for i in (0..16).filter(|&i| m[i]) {
                t += f[(r0 + i / 4) * SIDE + c0 + i % 4];
            }
        }
        (s, t)
    }));
    Reading { fg, bg, shape, placement }
}

/// Per-attribute hits of a reading against the requested scene.
pub fn hits(r: &Reading, s: &Scene) -> [bool; 4] {
    [r.fg == s.fg, r.bg == s.bg, r.shape == s.shape, r.placement == s.placement]
}

/// Expected score of a generator whose output ignores the caption and is
/// exchangeable across channels and pixels (pure noise): foreground and
/// background each 1/4, shape 1/3, position 1/4 for one shape and 1/2 for two.
pub fn chance_level(scenes: &[Scene]) -> f64 {
    if scenes.is_empty() {
        return 0.0;
    }
    let per = |s: &Scene| {
        let pos = if s.placement.count() == 1 { 0.25 } else { 0.5 };
        (0.25 + 0.25 + 1.0 / 3.0 + pos) / 4.0
    };
    scenes.iter().map(per).sum::<f64>() / scenes.len() as f64
}

/// Produces one latent per requested scene from its long caption.
pub trait SceneGenerator {
    fn generate(&mut self, scenes: &[Scene]) -> Result<Tensor>;
}

/// Returns the ground-truth latents.
pub struct OracleGenerator;

impl SceneGenerator for OracleGenerator {
    fn generate(&mut self, scenes: &[Scene]) -> Result<Tensor> {
        Ok(super::render_batch(scenes))
    }
}

/// Returns standard normal latents.
pub struct NoiseGenerator {
    pub rng: ChaCha8Rng,
}

impl NoiseGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SceneGenerator for NoiseGenerator {
    fn generate(&mut self, scenes: &[Scene]) -> Result<Tensor> {
        Ok(Tensor::randn(vec![scenes.len(), CHANNELS, SIDE, SIDE], &mut self.rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_samples: 72,
            ddim_steps: 25,
            cfg_scale: 3.0,
            seed: 1234,
        }
    }
}

/// DDIM samples from a trained model. Conditioned models receive the
/// condition built from the requested scene (masks drawn from a fixed seed).
pub struct ModelGenerator<'a> {
    pub model: &'a TextToImage,
    pub config: ProbeConfig,
}

impl SceneGenerator for ModelGenerator<'_> {
    fn generate(&mut self, scenes: &[Scene]) -> Result<Tensor> {
        let vocab = scene_vocab();
        let draws: Vec<Draw> = scenes
            .iter()
            .enumerate()
            .map(|(index, &scene)| Draw {
                source: 0,
                index,
                long: true,
                scene,
            })
            .collect();
        let text = encode_draws(&vocab, &draws, self.model.embedder.len);
        let arch = self.model.net.config();
        let x0 = super::render_batch(scenes);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let cond = condition_for(arch, &x0, &mut mask_rng)?;
        let sampler = SamplerConfig {
            ddim_steps: self.config.ddim_steps,
            cfg_scale: self.config.cfg_scale,
            seed: self.config.seed,
            eta: 0.0,
        };
        let side = arch.latent_side();
        if side != SIDE || arch.latent_channels != CHANNELS {
            return Err(Error::Input(format!(
                "probe needs a {CHANNELS}x{SIDE}x{SIDE} latent, model makes {}x{side}x{side}",
                arch.latent_channels
            )));
        }
        ddim_sample(
            self.model,
            &text,
            cond.as_ref(),
            &sampler,
            &DiffusionSchedule::default(),
            &[scenes.len(), CHANNELS, SIDE, SIDE],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub score: f64,
    /// Hit rates for foreground, background, shape and position.
    pub per_attribute: [f64; 4],
    pub chance: f64,
    pub n_samples: usize,
}

/// Scores `n_samples` generations for the dataset's scenes, cycling through
/// them in order.
pub fn alignment_probe<G: SceneGenerator + ?Sized>(
    generator: &mut G,
    dataset: &SyntheticDataset,
    n_samples: usize,
) -> Result<ProbeReport> {
    if dataset.is_empty() || n_samples == 0 {
        return Err(Error::Input("probe needs scenes and at least one sample".into()));
    }
    let scenes: Vec<Scene> = (0..n_samples).map(|i| dataset.scenes[i % dataset.len()]).collect();
    let out = generator.generate(&scenes)?;
    let per = CHANNELS * SIDE * SIDE;
    if out.numel() != n_samples * per {
        return Err(Error::Input(format!("generator returned shape {:?}", out.shape())));
    }
    let mut counts = [0usize; 4];
    for (i, s) in scenes.iter().enumerate() {
        let r = classify(&out.data()[i * per..(i + 1) * per], s.placement.count());
        for (c, h) in counts.iter_mut().zip(hits(&r, s)) {
            *c += h as usize;
        }
    }
    let per_attribute = counts.map(|c| c as f64 / n_samples as f64);
    Ok(ProbeReport {
        score: per_attribute.iter().sum::<f64>() / 4.0,
        per_attribute,
        chance: chance_level(&scenes),
        n_samples,
    })
}

/// Probes a trained model with DDIM samples.
pub fn probe_model(model: &TextToImage, dataset: &SyntheticDataset, config: &ProbeConfig) -> Result<ProbeReport> {
    let mut gen = ModelGenerator {
        model,
        config: config.clone(),
    };
    alignment_probe(&mut gen, dataset, config.n_samples)
}
