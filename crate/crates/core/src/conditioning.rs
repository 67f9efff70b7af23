//! Local conditions (inpainting, edge maps) attached by token or channel concatenation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ditlab_numerics::{init::trunc_normal, Tensor};

use crate::arch::{ArchConfig, Family};
use crate::backbone::{param_rng, Network, INIT_STD};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// Condition patches become extra tokens with their own positional segment.
    TokenConcat,
    /// Condition channels are stacked onto the noisy latent before patchifying.
    ChannelConcat,
}

impl std::str::FromStr for ConditionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "token" | "token_concat" => Ok(Self::TokenConcat),
            "channel" | "channel_concat" => Ok(Self::ChannelConcat),
            _ => Err(format!("unknown condition mode {s:?} (expected token or channel)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Masked latent plus a one-channel mask.
    InpaintImageAndMask,
    /// One-channel binary edge map.
    EdgeMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub mode: ConditionMode,
    pub kind: ConditionKind,
    /// Channels of the condition latent.
    pub channels: usize,
    /// Patch size of the condition embedder (token mode only). Defaults to the
    /// backbone's patch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    /// Pixel resolution of the condition. Defaults to the image resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

impl ConditioningSpec {
    /// Inpainting condition for latents with `latent_channels` channels.
    pub fn inpaint(mode: ConditionMode, latent_channels: usize) -> Self {
        Self {
            mode,
            kind: ConditionKind::InpaintImageAndMask,
            channels: latent_channels + 1,
            patch_size: None,
            resolution: None,
        }
    }

    pub fn edge(mode: ConditionMode) -> Self {
        Self {
            mode,
            kind: ConditionKind::EdgeMap,
            channels: 1,
            patch_size: None,
            resolution: None,
        }
    }

    pub fn patch(&self, config: &ArchConfig) -> usize {
        self.patch_size.unwrap_or(config.patch_size)
    }

    /// Latent side of the condition when the image is `image_resolution` px.
    pub fn latent_side(&self, config: &ArchConfig, image_resolution: usize) -> usize {
        self.resolution.unwrap_or(image_resolution) / config.vae_downsample.max(1)
    }

    /// Condition tokens added to the sequence (zero for channel concatenation).
    pub fn token_count(&self, config: &ArchConfig, image_resolution: usize) -> usize {
        match self.mode {
            ConditionMode::ChannelConcat => 0,
            ConditionMode::TokenConcat => {
                let side = self.latent_side(config, image_resolution) / self.patch(config).max(1);
                side * side
            }
        }
    }

    /// Human-readable violations of this spec against `config`.
    pub fn check(&self, config: &ArchConfig) -> Vec<String> {
        let mut v = Vec::new();
        if self.channels == 0 {
            v.push("condition channels must be positive".to_string());
        }
        match self.mode {
            ConditionMode::TokenConcat => {
                if config.family != Family::UVit {
                    v.push(format!(
                        "token concatenation needs full self-attention; family {} only cross-attends to text",
                        config.family
                    ));
                }
                let q = self.patch(config);
                let res = self.resolution.unwrap_or(config.resolution);
                if q == 0 || config.vae_downsample == 0 || res % config.vae_downsample != 0 {
                    v.push(format!("condition resolution {res} does not give an integral latent"));
                } else if (res / config.vae_downsample) % q != 0 {
                    v.push(format!(
                        "condition patch {q} does not tile the {}-wide condition latent",
                        res / config.vae_downsample
                    ));
                }
            }
            ConditionMode::ChannelConcat => {
                if let Some(r) = self.resolution {
                    if r != config.resolution {
                        v.push(format!(
                            "channel concatenation needs the condition at the image resolution ({r} != {})",
                            config.resolution
                        ));
                    }
                }
                if let Some(q) = self.patch_size {
                    if q != config.patch_size {
                        v.push("channel concatenation shares the image patch size".to_string());
                    }
                }
            }
        }
        v
    }
}

/// Extends `network` to take the condition described by `spec`.
///
/// Token mode adds a condition patch embedder and a positional segment. Channel
/// mode widens the image patch embedder with zero rows, so the conditioned
/// network initially ignores the condition. Existing weights are kept.
pub fn attach_condition(network: &Network, spec: &ConditioningSpec, seed: u64) -> Result<Network> {
    let base = network.config();
    if base.conditioning.is_some() {
        return Err(Error::Unsupported("network already has a condition attached".into()));
    }
    if spec.mode == ConditionMode::TokenConcat && base.family != Family::UVit {
        return Err(Error::Unsupported(format!(
            "token concatenation on family {}: text is the only cross-attention stream",
            base.family
        )));
    }
    let config = ArchConfig {
        conditioning: Some(spec.clone()),
        ..base.clone()
    };
    config.validate().into_result()?;
    let mut out = network.clone();
    out.set_config(config.clone());
    let h = config.hidden_dim;
    match spec.mode {
        ConditionMode::ChannelConcat => {
            let p2 = config.patch_size * config.patch_size;
            let w = out.param("patch_embed.w")?.clone();
            let mut data = w.into_data();
            data.extend(std::iter::repeat_n(0.0, spec.channels * p2 * h));
            let rows = config.input_channels() * p2;
            out.replace_param("patch_embed.w", Tensor::new(vec![rows, h], data)?)?;
        }
        ConditionMode::TokenConcat => {
            let q = spec.patch(&config);
            let tokens = config.condition_tokens();
            out.insert_param(
                "cond_embed.w",
                trunc_normal(vec![spec.channels * q * q, h], INIT_STD, &mut param_rng(seed, "cond_embed.w")),
            )?;
            out.insert_param("cond_embed.b", Tensor::zeros(vec![h]))?;
            out.insert_param(
                "cond_pos_embed",
                trunc_normal(vec![tokens, h], INIT_STD, &mut param_rng(seed, "cond_pos_embed")),
            )?;
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------- inpaint

/// Rectangle mask generator over a `height x width` latent.
///
/// Every rectangle whose area fraction lies in `[min_coverage, max_coverage]`
/// is equally likely as a size; the position is then uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGenerator {
    pub height: usize,
    pub width: usize,
    pub min_coverage: f64,
    pub max_coverage: f64,
    sizes: Vec<(usize, usize)>,
}

impl MaskGenerator {
    pub fn new(height: usize, width: usize, min_coverage: f64, max_coverage: f64) -> Result<Self> {
        let area = (height * width) as f64;
        let mut sizes = Vec::new();
        for rh in 1..=height {
            for rw in 1..=width {
                let f = (rh * rw) as f64 / area;
                if f >= min_coverage - 1e-12 && f <= max_coverage + 1e-12 {
                    sizes.push((rh, rw));
                }
            }
        }
        if sizes.is_empty() {
            return Err(Error::Input(format!(
                "no rectangle on a {height}x{width} grid covers {min_coverage}..{max_coverage}"
            )));
        }
        Ok(Self {
            height,
            width,
            min_coverage,
            max_coverage,
            sizes,
        })
    }

    /// The 10-60% generator used for inpainting.
    pub fn standard(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 0.10, 0.60)
    }

    /// Exact expected coverage fraction.
    pub fn mean_coverage(&self) -> f64 {
        let area = (self.height * self.width) as f64;
        self.sizes.iter().map(|&(a, b)| (a * b) as f64 / area).sum::<f64>() / self.sizes.len() as f64
    }

    /// One `[height * width]` mask with 1 marking the region to fill.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let (rh, rw) = self.sizes[rng.random_range(0..self.sizes.len())];
        let top = rng.random_range(0..=self.height - rh);
        let left = rng.random_range(0..=self.width - rw);
        let mut m = vec![0.0; self.height * self.width];
        for r in top..top + rh {
            m[r * self.width + left..r * self.width + left + rw].fill(1.0);
        }
        m
    }
}

/// An inpainting batch; `mask` is `[B, 1, H, W]` with 1 inside the hole.
#[derive(Clone, Debug)]
pub struct InpaintBatch {
    pub masked_latent: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
}

impl InpaintBatch {
    /// The condition tensor `[B, C + 1, H, W]`: masked latent then mask.
    pub fn condition(&self) -> Tensor {
        concat_channels(&self.masked_latent, &self.mask)
    }
}

/// Applies `mask` (`[B, 1, H, W]`) to `x0` (`[B, C, H, W]`).
pub fn apply_mask(x0: &Tensor, mask: &Tensor) -> Result<InpaintBatch> {
    let s = x0.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::Input(format!(
            "mask shape {:?} does not fit latent {:?}",
            mask.shape(),
            s
        )));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut masked = x0.data().to_vec();
    for bi in 0..b {
        let m = &mask.data()[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for (x, &mv) in masked[off..off + hw].iter_mut().zip(m) {
                *x *= 1.0 - mv;
            }
        }
    }
    Ok(InpaintBatch {
        masked_latent: Tensor::new(s.to_vec(), masked)?,
        mask: mask.clone(),
        target: x0.clone(),
    })
}

/// Random-rectangle inpainting batch for `x0` (`[B, C, H, W]`).
pub fn make_inpaint_batch<R: Rng + ?Sized>(x0: &Tensor, rng: &mut R) -> Result<InpaintBatch> {
    let s = x0.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [B, C, H, W], got {s:?}")));
    }
    let gen = MaskGenerator::standard(s[2], s[3])?;
    let mut data = Vec::with_capacity(s[0] * s[2] * s[3]);
    for _ in 0..s[0] {
        data.extend(gen.sample(rng));
    }
    apply_mask(x0, &Tensor::new(vec![s[0], 1, s[2], s[3]], data)?)
}

// ---------------------------------------------------------------------- edges

/// Default gradient-magnitude threshold of [`make_edge_batch`].
pub const EDGE_THRESHOLD: f32 = 0.5;

/// Binary edge proxy `[B, 1, H, W]`: forward differences summed over channels,
/// thresholded at [`EDGE_THRESHOLD`]. The last row and column have no forward
/// neighbour and contribute zero difference.
pub fn make_edge_batch(x0: &Tensor) -> Result<Tensor> {
    edge_map(x0, EDGE_THRESHOLD)
}

pub fn edge_map(x0: &Tensor, threshold: f32) -> Result<Tensor> {
    let s = x0.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = x0.data();
    let mut out = vec![0.0f32; b * h * w];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut gx = 0.0f32;
                let mut gy = 0.0f32;
                for ci in 0..c {
                    let at = |r: usize, col: usize| d[((bi * c + ci) * h + r) * w + col];
                    if j + 1 < w {
                        gx += (at(i, j + 1) - at(i, j)).abs();
                    }
                    if i + 1 < h {
                        gy += (at(i + 1, j) - at(i, j)).abs();
                    }
                }
                if (gx * gx + gy * gy).sqrt() > threshold {
                    out[(bi * h + i) * w + j] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, 1, h, w], out)?)
}

/// Stacks two `[B, *, H, W]` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..]);
    let hw = sa[2] * sa[3];
    let (ca, cb) = (sa[1], sb[1]);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..sa[0] {
        out.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor::new(vec![sa[0], ca + cb, sa[2], sa[3]], out).expect("shape computed above")
}
