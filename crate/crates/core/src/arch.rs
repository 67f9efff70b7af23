//! Backbone configurations: validation, named presets and token accounting.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionMode, ConditioningSpec};
use crate::{Error, Result};

/// Backbone family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Time, text and image tokens share one self-attention stream with long skips.
    #[serde(rename = "uvit", alias = "u-vit")]
    UVit,
    /// Cross-attention DiT with one shared modulation MLP and per-block offsets
    /// (PixArt-alpha style).
    #[serde(rename = "cross_attn_single", alias = "pixart")]
    CrossAttnSingle,
    /// Cross-attention DiT with a modulation projection in every block
    /// (LargeDiT style).
    #[serde(rename = "cross_attn_per_block", alias = "largedit")]
    CrossAttnPerBlock,
}

impl Family {
    pub fn default_time_conditioning(self) -> TimeConditioning {
        match self {
            Family::UVit => TimeConditioning::TimeToken,
            _ => TimeConditioning::AdaLn,
        }
    }

    pub fn is_cross_attention(self) -> bool {
        !matches!(self, Family::UVit)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::UVit => "uvit",
            Family::CrossAttnSingle => "cross_attn_single",
            Family::CrossAttnPerBlock => "cross_attn_per_block",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConditioning {
    /// One prepended token built from the timestep embedding.
    TimeToken,
    /// Shift/scale/gate modulation of the layer norms.
    AdaLn,
}

/// Width of the sinusoidal timestep features fed to the DiT time MLP.
pub const DIT_FREQ_DIM: usize = 256;

/// Upper bound on the DiT per-block modulation input width.
pub const PER_BLOCK_TIME_WIDTH_CAP: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub text_dim: usize,
    pub text_len: usize,
    pub latent_channels: usize,
    pub vae_downsample: usize,
    /// U-ViT long skips; ignored by the cross-attention families.
    pub use_skip: bool,
    pub time_conditioning: TimeConditioning,
    /// Image resolution in pixels the positional table is sized for.
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<ConditioningSpec>,
}

impl ArchConfig {
    /// A family's defaults at toy width: h=32, d=4, n=4, c=64, 77 text tokens.
    pub fn new(family: Family) -> Self {
        Self {
            family,
            hidden_dim: 32,
            depth: 4,
            num_heads: 4,
            patch_size: 2,
            text_dim: 64,
            text_len: 77,
            latent_channels: 4,
            vae_downsample: 8,
            use_skip: true,
            time_conditioning: family.default_time_conditioning(),
            resolution: 256,
            conditioning: None,
        }
    }

    pub fn with_dims(family: Family, hidden_dim: usize, depth: usize, num_heads: usize) -> Self {
        Self {
            hidden_dim,
            depth,
            num_heads,
            ..Self::new(family)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / self.vae_downsample.max(1)
    }

    pub fn image_tokens(&self) -> usize {
        let side = self.latent_side() / self.patch_size.max(1);
        side * side
    }

    /// Width of the timestep embedding that drives modulation or the time token.
    pub fn time_width(&self) -> usize {
        match self.family {
            Family::UVit | Family::CrossAttnSingle => self.hidden_dim,
            Family::CrossAttnPerBlock => self.hidden_dim.min(PER_BLOCK_TIME_WIDTH_CAP),
        }
    }

    /// Input channels of the image patch embedder (grows under channel concatenation).
    pub fn input_channels(&self) -> usize {
        match &self.conditioning {
            Some(c) if c.mode == ConditionMode::ChannelConcat => self.latent_channels + c.channels,
            _ => self.latent_channels,
        }
    }

    pub fn condition_tokens(&self) -> usize {
        match &self.conditioning {
            Some(c) => c.token_count(self, self.resolution),
            None => 0,
        }
    }

    pub fn validate(&self) -> ValidationResult {
        validate(self)
    }

    /// Loads a JSON config: either a full config or `{"preset": ..., overrides...}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let overrides: ArchOverrides = serde_json::from_str(&text)?;
        overrides.resolve()
    }
}

/// Partial configuration, applied on top of a preset or a family default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae_downsample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_skip: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_conditioning: Option<TimeConditioning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<ConditioningSpec>,
}

impl ArchOverrides {
    /// Resolves against the named preset, or the family default when no preset is given.
    pub fn resolve(&self) -> Result<ArchConfig> {
        let base = match &self.preset {
            Some(name) => preset(name)?,
            None => ArchConfig::new(self.family.unwrap_or(Family::UVit)),
        };
        Ok(self.apply(&base))
    }

    /// Applies every set field to `base`. Changing the family without naming a
    /// time conditioning switches to the new family's default.
    pub fn apply(&self, base: &ArchConfig) -> ArchConfig {
        let mut c = base.clone();
        if let Some(f) = self.family {
            if f != c.family && self.time_conditioning.is_none() {
                c.time_conditioning = f.default_time_conditioning();
            }
            c.family = f;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { c.$field = v; }
            )*};
        }
        set!(
            hidden_dim,
            depth,
            num_heads,
            patch_size,
            text_dim,
            text_len,
            latent_channels,
            vae_downsample,
            use_skip,
            time_conditioning,
            resolution
        );
        if let Some(cond) = &self.conditioning {
            c.conditioning = Some(cond.clone());
        }
        c
    }
}

// ------------------------------------------------------------------ validation

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Violation {
    NonPositive(&'static str),
    HeadsDoNotDivide { hidden_dim: usize, num_heads: usize },
    ResolutionNotDivisible { resolution: usize, vae_downsample: usize },
    PatchDoesNotTile { latent_side: usize, patch_size: usize },
    TimeConditioning { family: Family, time: TimeConditioning },
    Conditioning(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositive(field) => write!(f, "{field} must be positive"),
            Violation::HeadsDoNotDivide {
                hidden_dim,
                num_heads,
            } => write!(f, "h mod n != 0 (h={hidden_dim}, n={num_heads})"),
            Violation::ResolutionNotDivisible {
                resolution,
                vae_downsample,
            } => write!(
                f,
                "resolution {resolution} is not a multiple of the vae downsample {vae_downsample}"
            ),
            Violation::PatchDoesNotTile {
                latent_side,
                patch_size,
            } => write!(
                f,
                "patch does not tile latent ({latent_side} mod {patch_size} != 0)"
            ),
            Violation::TimeConditioning { family, time } => {
                write!(f, "family {family} does not support time conditioning {time:?}")
            }
            Violation::Conditioning(msg) => write!(f, "conditioning: {msg}"),
        }
    }
}

/// Outcome of [`validate`]: empty means the config is usable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(self))
        }
    }
}

impl fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate(config: &ArchConfig) -> ValidationResult {
    let mut v = Vec::new();
    let positive = [
        ("hidden_dim", config.hidden_dim),
        ("depth", config.depth),
        ("num_heads", config.num_heads),
        ("patch_size", config.patch_size),
        ("text_dim", config.text_dim),
        ("text_len", config.text_len),
        ("latent_channels", config.latent_channels),
        ("vae_downsample", config.vae_downsample),
        ("resolution", config.resolution),
    ];
    for (name, value) in positive {
        if value == 0 {
            v.push(Violation::NonPositive(name));
        }
    }
    if config.num_heads > 0 && config.hidden_dim % config.num_heads != 0 {
        v.push(Violation::HeadsDoNotDivide {
            hidden_dim: config.hidden_dim,
            num_heads: config.num_heads,
        });
    }
    if config.vae_downsample > 0 && config.resolution % config.vae_downsample != 0 {
        v.push(Violation::ResolutionNotDivisible {
            resolution: config.resolution,
            vae_downsample: config.vae_downsample,
        });
    } else if config.patch_size > 0 && config.latent_side() % config.patch_size != 0 {
        v.push(Violation::PatchDoesNotTile {
            latent_side: config.latent_side(),
            patch_size: config.patch_size,
        });
    }
    if config.time_conditioning != config.family.default_time_conditioning() {
        v.push(Violation::TimeConditioning {
            family: config.family,
            time: config.time_conditioning,
        });
    }
    if let Some(cond) = &config.conditioning {
        v.extend(cond.check(config).into_iter().map(Violation::Conditioning));
    }
    ValidationResult { violations: v }
}

// --------------------------------------------------------------------- presets

/// Table-scale preset names, in table order.
pub const PRESET_NAMES: [&str; 13] = [
    "pixart-0.6b",
    "largedit-5b",
    "largedit-7b",
    "uvit-large",
    "uvit-huge",
    "uvit-1.3b",
    "uvit-1.8b",
    "uvit-2.3b",
    "uvit-3.6b",
    "uvit-4.0b",
    "uvit-5.3b",
    "uvit-6.0b",
    "uvit-8.0b",
];

/// The eight scaled U-ViT rows.
pub const SCALED_UVIT_PRESETS: [&str; 8] = [
    "uvit-1.3b",
    "uvit-1.8b",
    "uvit-2.3b",
    "uvit-3.6b",
    "uvit-4.0b",
    "uvit-5.3b",
    "uvit-6.0b",
    "uvit-8.0b",
];

/// Text width of the OpenCLIP-H encoder used for table-scale counting.
pub const PRESET_TEXT_DIM: usize = 1024;

/// Table-scale configuration by name. All presets use patch size 2, text width
/// 1024, 77 text tokens and a 256 px positional table.
pub fn preset(name: &str) -> Result<ArchConfig> {
    let (family, h, d, n) = match name {
        "pixart-0.6b" => (Family::CrossAttnSingle, 1152, 28, 16),
        "largedit-5b" => (Family::CrossAttnPerBlock, 3072, 32, 32),
        "largedit-7b" => (Family::CrossAttnPerBlock, 4096, 32, 32),
        "uvit-large" => (Family::UVit, 1024, 20, 16),
        "uvit-huge" => (Family::UVit, 1152, 28, 16),
        "uvit-1.3b" => (Family::UVit, 1536, 42, 16),
        "uvit-1.8b" => (Family::UVit, 2048, 32, 16),
        "uvit-2.3b" => (Family::UVit, 2048, 42, 16),
        "uvit-3.6b" => (Family::UVit, 2048, 64, 16),
        "uvit-4.0b" => (Family::UVit, 3072, 32, 32),
        "uvit-5.3b" => (Family::UVit, 3072, 42, 32),
        "uvit-6.0b" => (Family::UVit, 3072, 48, 32),
        "uvit-8.0b" => (Family::UVit, 3072, 64, 32),
        _ => {
            return Err(Error::UnknownPreset {
                name: name.to_string(),
                available: PRESET_NAMES.join(", "),
            })
        }
    };
    Ok(ArchConfig {
        text_dim: PRESET_TEXT_DIM,
        ..ArchConfig::with_dims(family, h, d, n)
    })
}

// ---------------------------------------------------------------- token counts

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TokenBreakdown {
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub time_tokens: usize,
    pub condition_tokens: usize,
    /// Sequence length of every self-attention layer.
    pub self_attention_tokens: usize,
}

/// Token counts of `config` at `image_resolution` pixels.
pub fn token_counts(config: &ArchConfig, image_resolution: usize) -> Result<TokenBreakdown> {
    let unit = config.vae_downsample * config.patch_size;
    if unit == 0 || image_resolution == 0 || image_resolution % unit != 0 {
        return Err(Error::Resolution {
            resolution: image_resolution,
            reason: format!("must be a positive multiple of vae_downsample * patch_size = {unit}"),
        });
    }
    let side = image_resolution / unit;
    let image_tokens = side * side;
    let condition_tokens = config
        .conditioning
        .as_ref()
        .map_or(0, |c| c.token_count(config, image_resolution));
    Ok(match config.family {
        Family::UVit => {
            let time_tokens = usize::from(config.time_conditioning == TimeConditioning::TimeToken);
            TokenBreakdown {
                image_tokens,
                text_tokens: config.text_len,
                time_tokens,
                condition_tokens,
                self_attention_tokens: image_tokens + config.text_len + time_tokens + condition_tokens,
            }
        }
        _ => TokenBreakdown {
            image_tokens,
            text_tokens: config.text_len,
            time_tokens: 0,
            condition_tokens,
            self_attention_tokens: image_tokens,
        },
    })
}
