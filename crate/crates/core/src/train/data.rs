//! Procedural shape scenes with ground-truth captions, and caption-source mixing.
//!
//! A scene is an 8x8 four-channel latent: a background colour with one or two
//! foreground shapes, each inside a 4x4 quadrant. Colour `k` is the latent
//! vector `2 e_k - 0.5`.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ditlab_numerics::Tensor;

use crate::text::Vocab;
use crate::{Error, Result};

pub const COLOURS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["bar", "pillar", "checker"];
pub const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
pub const HALVES: [&str; 2] = ["top", "bottom"];
pub const COUNT_WORDS: [&str; 2] = ["one", "two"];

/// Latent side and channels of a scene.
pub const SIDE: usize = 8;
pub const CHANNELS: usize = 4;
/// Pixel resolution that maps to an 8x8 latent with the 8x downsampling VAE.
pub const SCENE_RESOLUTION: usize = 64;
/// Text tokens needed for the longest caption plus BOS.
pub const CAPTION_LEN: usize = 10;

/// Shape membership inside a 4x4 quadrant, row-major.
pub fn shape_mask(shape: usize) -> [bool; 16] {
    let mut m = [false; 16];
    for r in 0..4 {
        for c in 0..4 {
            m[r * 4 + c] = match shape {
                0 => r == 1 || r == 2,
                1 => c == 1 || c == 2,
                _ => (r < 2) == (c < 2),
            };
        }
    }
    m
}

/// Latent vector of palette colour `k`.
pub fn colour_vector(k: usize) -> [f32; CHANNELS] {
    let mut v = [-0.5; CHANNELS];
    v[k] = 1.5;
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    /// One shape in quadrant `0..4` (TL, TR, BL, BR).
    Quadrant(usize),
    /// Two shapes side by side in half `0..2` (top, bottom).
    Half(usize),
}

impl Placement {
    pub fn count(self) -> usize {
        match self {
            Placement::Quadrant(_) => 1,
            Placement::Half(_) => 2,
        }
    }

    pub fn quadrants(self) -> Vec<usize> {
        match self {
            Placement::Quadrant(q) => vec![q],
            Placement::Half(h) => vec![2 * h, 2 * h + 1],
        }
    }

    pub fn words(self) -> &'static str {
        match self {
            Placement::Quadrant(q) => QUADRANTS[q],
            Placement::Half(h) => HALVES[h],
        }
    }

    pub fn all() -> Vec<Placement> {
        (0..4).map(Placement::Quadrant).chain((0..2).map(Placement::Half)).collect()
    }
}

/// Generation parameters of one image; captions derive from them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub fg: usize,
    pub bg: usize,
    pub shape: usize,
    pub placement: Placement,
}

impl Scene {
    /// All 216 valid scenes in a fixed order.
    pub fn all() -> Vec<Scene> {
        let mut v = Vec::new();
        for fg in 0..COLOURS.len() {
            for bg in (0..COLOURS.len()).filter(|&b| b != fg) {
                for shape in 0..SHAPES.len() {
                    for placement in Placement::all() {
                        v.push(Scene { fg, bg, shape, placement });
                    }
                }
            }
        }
        v
    }

    pub fn short_caption(&self) -> String {
        format!("{} {}", COLOURS[self.fg], SHAPES[self.shape])
    }

    pub fn long_caption(&self) -> String {
        format!(
            "{} {} {} {} on {} background",
            COUNT_WORDS[self.placement.count() - 1],
            COLOURS[self.fg],
            SHAPES[self.shape],
            self.placement.words(),
            COLOURS[self.bg]
        )
    }

    pub fn caption(&self, long: bool) -> String {
        if long {
            self.long_caption()
        } else {
            self.short_caption()
        }
    }

    /// `[CHANNELS, SIDE, SIDE]` latent values, channel-major.
    pub fn render(&self) -> Vec<f32> {
        let (fg, bg) = (colour_vector(self.fg), colour_vector(self.bg));
        let tmpl = shape_mask(self.shape);
        let quads = self.placement.quadrants();
        let mut out = vec![0.0; CHANNELS * SIDE * SIDE];
        for r in 0..SIDE {
            for c in 0..SIDE {
                let q = (r / 4) * 2 + c / 4;
                let on = quads.contains(&q) && tmpl[(r % 4) * 4 + c % 4];
                let col = if on { fg } else { bg };
                for (ch, v) in col.iter().enumerate() {
                    out[(ch * SIDE + r) * SIDE + c] = *v;
                }
            }
        }
        out
    }
}

/// Every word the captions use.
pub fn scene_vocab() -> Vocab {
    let mut words: Vec<&str> = Vec::new();
    words.extend(COUNT_WORDS);
    words.extend(COLOURS);
    words.extend(SHAPES);
    for p in QUADRANTS.iter().chain(HALVES.iter()) {
        words.extend(p.split_whitespace());
    }
    words.extend(["on", "background"]);
    Vocab::new(words)
}

/// A named list of scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub name: String,
    pub scenes: Vec<Scene>,
}

/// Scenes whose attribute-index sum is a multiple of this are kept out of training.
pub const HOLDOUT_STRIDE: usize = 6;

fn is_held_out(s: &Scene) -> bool {
    let p = Placement::all().iter().position(|&p| p == s.placement).unwrap_or(0);
    (s.fg + s.bg + s.shape + p) % HOLDOUT_STRIDE == 0
}

impl SyntheticDataset {
    /// Training split of all scenes.
    pub fn train_split() -> Self {
        Self {
            name: "shapes-train".into(),
            scenes: Scene::all().into_iter().filter(|s| !is_held_out(s)).collect(),
        }
    }

    /// Held-out scenes whose captions never appear in training.
    pub fn held_out() -> Self {
        Self {
            name: "shapes-heldout".into(),
            scenes: Scene::all().into_iter().filter(is_held_out).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// One draw from a [`MixedStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Draw {
    pub source: usize,
    pub index: usize,
    pub long: bool,
    pub scene: Scene,
}

/// Source-then-caption sampling over several datasets.
#[derive(Clone, Debug)]
pub struct MixedStream {
    sources: Vec<SyntheticDataset>,
    source_cdf: Vec<f64>,
    last_positive: usize,
    long_prob: f64,
    rng: ChaCha8Rng,
    hasher: DefaultHasher,
    drawn: u64,
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input(format!("{name} must be finite and non-negative: {p:?}")));
    }
    Ok(())
}

/// Draws a source by `weights`, a scene uniformly from it, then the long
/// caption with probability `caption_probs[1]` (`[short, long]`, summing to 1).
pub fn mix_datasets(
    sources: Vec<SyntheticDataset>,
    weights: &[f64],
    caption_probs: &[f64],
    seed: u64,
) -> Result<MixedStream> {
    if sources.is_empty() {
        return Err(Error::Input("no sources to mix".into()));
    }
    if let Some(s) = sources.iter().find(|s| s.is_empty()) {
        return Err(Error::Input(format!("source {:?} is empty", s.name)));
    }
    if weights.len() != sources.len() {
        return Err(Error::Input(format!(
            "{} weights for {} sources",
            weights.len(),
            sources.len()
        )));
    }
    check_probs("mixture weights", weights)?;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Input("mixture weights sum to zero".into()));
    }
    check_probs("caption probabilities", caption_probs)?;
    if caption_probs.len() != 2 || (caption_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "caption probabilities [short, long] must sum to 1: {caption_probs:?}"
        )));
    }
    let mut acc = 0.0;
    let source_cdf = weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect();
    Ok(MixedStream {
        sources,
        source_cdf,
        last_positive: weights.iter().rposition(|&w| w > 0.0).expect("total is positive"),
        long_prob: caption_probs[1],
        rng: ChaCha8Rng::seed_from_u64(seed),
        hasher: DefaultHasher::new(),
        drawn: 0,
    })
}

impl MixedStream {
    pub fn next_draw(&mut self) -> Draw {
        let u: f64 = self.rng.random();
        // a zero-weight source has the same cdf as its predecessor, so it is never first
        let source = self.source_cdf.iter().position(|&c| u < c).unwrap_or(self.last_positive);
        let src = &self.sources[source];
        let index = self.rng.random_range(0..src.len());
        let long = self.rng.random::<f64>() < self.long_prob;
        let d = Draw {
            source,
            index,
            long,
            scene: src.scenes[index],
        };
        (d.source, d.index, d.long).hash(&mut self.hasher);
        self.drawn += 1;
        d
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<Draw> {
        (0..n).map(|_| self.next_draw()).collect()
    }

    /// Hash of every `(source, index, long)` drawn so far.
    pub fn order_hash(&self) -> u64 {
        let mut h = self.hasher.clone();
        self.drawn.hash(&mut h);
        h.finish()
    }

    pub fn sources(&self) -> &[SyntheticDataset] {
        &self.sources
    }
}

/// Stacks rendered scenes into `[n, CHANNELS, SIDE, SIDE]`.
pub fn render_batch(scenes: &[Scene]) -> Tensor {
    let data: Vec<f32> = scenes.iter().flat_map(|s| s.render()).collect();
    Tensor::new(vec![scenes.len(), CHANNELS, SIDE, SIDE], data).expect("rendered sizes are fixed")
}
