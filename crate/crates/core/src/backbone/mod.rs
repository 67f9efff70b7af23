//! Denoiser networks: U-ViT and the two cross-attention DiT variants.

mod dit;
pub mod layers;
mod uvit;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ditlab_numerics::{init::trunc_normal, io, numel, Graph, Scalar, Tensor, Var};

use crate::arch::{ArchConfig, Family, DIT_FREQ_DIM};
use crate::conditioning::ConditionMode;
use crate::{Error, Result};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// MLP hidden width multiplier.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One parameter tensor in a network layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn def(out: &mut Vec<ParamDef>, name: impl Into<String>, shape: Vec<usize>, init: Init) {
    out.push(ParamDef {
        name: name.into(),
        shape,
        init,
    });
}

fn linear_def(out: &mut Vec<ParamDef>, prefix: &str, din: usize, dout: usize) {
    def(out, format!("{prefix}.w"), vec![din, dout], Init::Normal);
    def(out, format!("{prefix}.b"), vec![dout], Init::Zeros);
}

fn norm_def(out: &mut Vec<ParamDef>, prefix: &str, h: usize) {
    def(out, format!("{prefix}.g"), vec![h], Init::Ones);
    def(out, format!("{prefix}.b"), vec![h], Init::Zeros);
}

/// `(source, target)` block pairs joined by long skips: the output of block
/// `i` is fused into the input of block `d - 1 - i`.
pub fn skip_pairing(depth: usize) -> Result<Vec<(usize, usize)>> {
    if depth < 2 {
        return Err(Error::Input(format!("skip pairing needs depth >= 2, got {depth}")));
    }
    Ok((0..depth / 2).map(|i| (i, depth - 1 - i)).collect())
}

/// Every parameter of the network `config` describes, in a fixed order.
pub fn layout(config: &ArchConfig) -> Vec<ParamDef> {
    let h = config.hidden_dim;
    let c = config.text_dim;
    let p2 = config.patch_size * config.patch_size;
    let out_dim = p2 * config.latent_channels;
    let image = config.image_tokens();
    let mut v = Vec::new();
    linear_def(&mut v, "patch_embed", p2 * config.input_channels(), h);
    if let Some(spec) = &config.conditioning {
        if spec.mode == ConditionMode::TokenConcat {
            let q = spec.patch(config);
            linear_def(&mut v, "cond_embed", spec.channels * q * q, h);
            def(&mut v, "cond_pos_embed", vec![config.condition_tokens(), h], Init::Normal);
        }
    }
    match config.family {
        Family::UVit => {
            linear_def(&mut v, "text_proj", c, h);
            linear_def(&mut v, "time_embed.fc1", h, MLP_RATIO * h);
            linear_def(&mut v, "time_embed.fc2", MLP_RATIO * h, h);
            def(&mut v, "pos_embed", vec![1 + config.text_len + image, h], Init::Normal);
            let targets: Vec<usize> = if config.use_skip && config.depth >= 2 {
                skip_pairing(config.depth)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(_, t)| t)
                    .collect()
            } else {
                Vec::new()
            };
            for i in 0..config.depth {
                if targets.contains(&i) {
                    linear_def(&mut v, &format!("skips.{i}"), 2 * h, h);
                }
                let b = format!("blocks.{i}");
                norm_def(&mut v, &format!("{b}.norm1"), h);
                linear_def(&mut v, &format!("{b}.attn.qkv"), h, 3 * h);
                linear_def(&mut v, &format!("{b}.attn.proj"), h, h);
                norm_def(&mut v, &format!("{b}.norm2"), h);
                linear_def(&mut v, &format!("{b}.mlp.fc1"), h, MLP_RATIO * h);
                linear_def(&mut v, &format!("{b}.mlp.fc2"), MLP_RATIO * h, h);
            }
            norm_def(&mut v, "final_norm", h);
        }
        Family::CrossAttnSingle | Family::CrossAttnPerBlock => {
            let per_block = config.family == Family::CrossAttnPerBlock;
            let tw = config.time_width();
            def(&mut v, "pos_embed", vec![image, h], Init::Normal);
            linear_def(&mut v, "time_embed.fc1", DIT_FREQ_DIM, tw);
            linear_def(&mut v, "time_embed.fc2", tw, tw);
            if !per_block {
                linear_def(&mut v, "time_block", h, 6 * h);
            }
            for i in 0..config.depth {
                let b = format!("blocks.{i}");
                linear_def(&mut v, &format!("{b}.attn.qkv"), h, 3 * h);
                linear_def(&mut v, &format!("{b}.attn.proj"), h, h);
                if !per_block {
                    linear_def(&mut v, &format!("{b}.cross.q"), h, h);
                }
                linear_def(&mut v, &format!("{b}.cross.kv"), c, 2 * h);
                if !per_block {
                    linear_def(&mut v, &format!("{b}.cross.proj"), h, h);
                }
                linear_def(&mut v, &format!("{b}.mlp.fc1"), h, MLP_RATIO * h);
                linear_def(&mut v, &format!("{b}.mlp.fc2"), MLP_RATIO * h, h);
                if per_block {
                    linear_def(&mut v, &format!("{b}.adaln"), tw, 6 * h);
                } else {
                    def(&mut v, format!("{b}.mod_offset"), vec![6, h], Init::Normal);
                }
            }
            if per_block {
                linear_def(&mut v, "final_adaln", tw, 2 * h);
            } else {
                def(&mut v, "final_mod_offset", vec![2, h], Init::Normal);
            }
        }
    }
    def(&mut v, "head.w", vec![h, out_dim], Init::Zeros);
    def(&mut v, "head.b", vec![out_dim], Init::Zeros);
    v
}

/// A denoiser's configuration and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    config: ArchConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Graph handles of a network's parameters, aligned with [`Network::params`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps vars created elsewhere, one per parameter in order (as in gradient checks).
    pub fn from_vars<T: Scalar>(net: &Network<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != net.params.len() {
            return Err(Error::Input(format!(
                "{} vars for {} parameters",
                vars.len(),
                net.params.len()
            )));
        }
        Ok(Self { vars: vars.to_vec() })
    }

    pub fn get<T: Scalar>(&self, net: &Network<T>, name: &str) -> Result<Var> {
        net.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Inputs of one denoiser evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInputs<'a> {
    /// Noisy latent `[B, latent_channels, S, S]`.
    pub x: Var,
    /// One timestep per batch row.
    pub timesteps: &'a [f64],
    /// Text embeddings `[B, L, text_dim]`.
    pub text: Var,
    /// `B * L` flags; `false` hides a padding position.
    pub text_mask: Option<&'a [bool]>,
    /// Extra condition `[B, channels, S', S']` for conditioned networks.
    pub condition: Option<Var>,
}

/// Each parameter draws from its own stream keyed by name, so networks that
/// differ by a few layers share the initial values of the rest.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a, stable across platforms and toolchains
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes the network for a valid `config`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate().into_result()?;
        let params = layout(config)
            .into_iter()
            .map(|d| {
                let mut rng = param_rng(seed, &d.name);
                let t = match d.init {
                    Init::Normal => trunc_normal(d.shape, INIT_STD, &mut rng),
                    Init::Zeros => Tensor::zeros(d.shape),
                    Init::Ones => Tensor::ones(d.shape),
                };
                (d.name, t)
            })
            .collect();
        Ok(Self::from_params(config.clone(), params))
    }

    fn from_params(config: ArchConfig, params: Vec<(String, Tensor<T>)>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self {
            config,
            params,
            index,
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub(crate) fn set_config(&mut self, config: ArchConfig) {
        self.config = config;
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].1)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].1),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    pub(crate) fn replace_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        *self.param_mut(name)? = value;
        Ok(())
    }

    pub(crate) fn insert_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Input(format!("parameter {name} already exists")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), value));
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Registers every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// ε-prediction with the noisy latent's shape.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ParamVars, inputs: ForwardInputs<'_>) -> Result<Var> {
        if vars.vars.len() != self.params.len() {
            return Err(Error::Input("parameter vars belong to a different network".into()));
        }
        self.check_inputs(g, &inputs)?;
        let ctx = layers::Ctx { net: self, vars };
        match self.config.family {
            Family::UVit => uvit::forward(&ctx, g, inputs),
            Family::CrossAttnSingle | Family::CrossAttnPerBlock => dit::forward(&ctx, g, inputs),
        }
    }

    /// Evaluates the network on plain tensors with a throwaway graph.
    pub fn predict(
        &self,
        x: &Tensor<T>,
        timesteps: &[f64],
        text: &Tensor<T>,
        text_mask: Option<&[bool]>,
        condition: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let inputs = ForwardInputs {
            x: g.constant(x.clone()),
            timesteps,
            text: g.constant(text.clone()),
            text_mask,
            condition: condition.map(|c| g.constant(c.clone())),
        };
        let out = self.forward(&mut g, &vars, inputs)?;
        Ok(g.value(out).clone())
    }

    fn check_inputs(&self, g: &Graph<T>, inputs: &ForwardInputs<'_>) -> Result<()> {
        let c = &self.config;
        let side = c.latent_side();
        let xs = g.shape(inputs.x);
        if xs.len() != 4 || xs[1] != c.latent_channels || xs[2] != side || xs[3] != side {
            return Err(Error::Input(format!(
                "noisy latent {xs:?} does not match [B, {}, {side}, {side}] (positional table built for {} px)",
                c.latent_channels, c.resolution
            )));
        }
        let b = xs[0];
        if inputs.timesteps.len() != b {
            return Err(Error::Input(format!(
                "{} timesteps for batch {b}",
                inputs.timesteps.len()
            )));
        }
        let ts = g.shape(inputs.text);
        if ts.len() != 3 || ts[0] != b || ts[2] != c.text_dim {
            return Err(Error::Input(format!(
                "text embeddings {ts:?} do not match [{b}, L, {}]",
                c.text_dim
            )));
        }
        if c.family == Family::UVit && ts[1] != c.text_len {
            return Err(Error::Input(format!(
                "U-ViT positional table holds {} text tokens, got {}",
                c.text_len, ts[1]
            )));
        }
        if let Some(m) = inputs.text_mask {
            if m.len() != b * ts[1] {
                return Err(Error::Input(format!(
                    "text mask has {} entries, expected {}",
                    m.len(),
                    b * ts[1]
                )));
            }
        }
        match (&c.conditioning, inputs.condition) {
            (None, None) => {}
            (None, Some(_)) => return Err(Error::Input("network takes no extra condition".into())),
            (Some(_), None) => return Err(Error::Input("conditioned network needs a condition".into())),
            (Some(spec), Some(cv)) => {
                let cs = spec.latent_side(c, c.resolution);
                let want = [b, spec.channels, cs, cs];
                if g.shape(cv) != want {
                    return Err(Error::Input(format!(
                        "condition {:?} does not match {want:?}",
                        g.shape(cv)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same network in another float precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network::from_params(
            self.config.clone(),
            self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        )
    }
}

// ----------------------------------------------------------------- checkpoint

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ArchConfig,
    pub params: Vec<ParamEntry>,
}

impl Network<f32> {
    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
        for (_, t) in &self.params {
            io::write_tensor(&mut w, t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        manifest.config.validate().into_result()?;
        let tensors = io::read_tensors(&mut BufReader::new(File::open(dir.join(PARAMS_FILE))?))?;
        if tensors.len() != manifest.params.len() {
            return Err(Error::Data(format!(
                "manifest lists {} tensors, file holds {}",
                manifest.params.len(),
                tensors.len()
            )));
        }
        let expected = layout(&manifest.config);
        let mut params = Vec::with_capacity(tensors.len());
        for (entry, t) in manifest.params.into_iter().zip(tensors) {
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{}: manifest shape {:?}, stored {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            params.push((entry.name, t));
        }
        let mut names: Vec<(&str, usize)> = params.iter().map(|(n, t)| (n.as_str(), t.numel())).collect();
        let mut want: Vec<(&str, usize)> = expected.iter().map(|d| (d.name.as_str(), numel(&d.shape))).collect();
        names.sort_unstable();
        want.sort_unstable();
        if names != want {
            return Err(Error::Data("checkpoint parameters do not match the config layout".into()));
        }
        Ok(Self::from_params(manifest.config, params))
    }
}
