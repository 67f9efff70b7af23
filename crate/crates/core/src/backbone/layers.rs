//! Shared building blocks: patchify, timestep features, attention and MLP sublayers.

use ditlab_numerics::{Graph, Scalar, Tensor, Var};

use super::{Network, ParamVars};
use crate::{Error, Result};

/// Base of the sinusoidal timestep frequencies.
pub const MAX_PERIOD: f64 = 10_000.0;

/// `[B, dim]` features `[cos(t f_0..), sin(t f_0..)]` with `f_i = MAX_PERIOD^(-i/half)`.
/// An odd `dim` leaves the last column zero.
pub fn timestep_features<T: Scalar>(timesteps: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; timesteps.len() * dim];
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
            let arg = t * freq;
            out[b * dim + i] = T::from_f64(arg.cos());
            out[b * dim + half + i] = T::from_f64(arg.sin());
        }
    }
    Tensor::new(vec![timesteps.len(), dim], out).expect("length matches shape")
}

/// `[B, C, H, W]` to `[B, (H/p)(W/p), C p p]`, each patch vector channel-major.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::Input(format!("cannot cut {s:?} into {p}x{p} patches")));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    let x = g.reshape(x, vec![b, c, gh, p, gw, p])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    Ok(g.reshape(x, vec![b, gh * gw, c * p * p])?)
}

/// Inverse of [`patchify`] for a square `side x side` latent with `c` channels.
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, c: usize, side: usize) -> Result<Var> {
    let b = g.shape(x)[0];
    let gs = side / p;
    let x = g.reshape(x, vec![b, gs, gs, c, p, p])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    Ok(g.reshape(x, vec![b, c, side, side])?)
}

/// Parameter-lookup context for one forward pass.
pub(crate) struct Ctx<'a, T: Scalar> {
    pub net: &'a Network<T>,
    pub vars: &'a ParamVars,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn p(&self, name: &str) -> Result<Var> {
        self.vars.get(self.net, name)
    }

    /// `prefix.w` and `prefix.b`.
    pub fn linear(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    pub fn layer_norm(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        Ok(g.layer_norm(x, Some(gamma), Some(beta))?)
    }

    /// fc1, GELU, fc2.
    pub fn mlp(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let hdn = self.linear(g, &format!("{prefix}.fc1"), x)?;
        let hdn = g.gelu(hdn);
        self.linear(g, &format!("{prefix}.fc2"), hdn)
    }

    /// `time_embed.fc1`, SiLU, `time_embed.fc2`.
    pub fn time_mlp(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let hdn = self.linear(g, "time_embed.fc1", features)?;
        let hdn = g.silu(hdn);
        self.linear(g, "time_embed.fc2", hdn)
    }

    /// Fused-qkv self-attention returning the heads before the output projection.
    pub fn self_attention_heads(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        heads: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<(Var, Var)> {
        let h = *g.shape(x).last().unwrap();
        let qkv = self.linear(g, &format!("{prefix}.qkv"), x)?;
        let parts = g.split(qkv, 2, &[h, h, h])?;
        let out = g.attention(parts[0], parts[1], parts[2], heads, mask)?;
        Ok((parts[0], out))
    }
}

/// `x * (1 + scale) + shift` with `shift`, `scale` of shape `[B, h]` broadcast over tokens.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let tokens = g.shape(x)[1];
    let scale = g.add_scalar(scale, 1.0);
    let scale = g.expand(scale, 1, tokens)?;
    let shift = g.expand(shift, 1, tokens)?;
    let y = g.mul(x, scale)?;
    Ok(g.add(y, shift)?)
}

/// `x + gate * y` with `gate` of shape `[B, h]`.
pub fn gated_residual<T: Scalar>(g: &mut Graph<T>, x: Var, gate: Var, y: Var) -> Result<Var> {
    let tokens = g.shape(x)[1];
    let gate = g.expand(gate, 1, tokens)?;
    let y = g.mul(gate, y)?;
    Ok(g.add(x, y)?)
}

/// Splits `[B, k * h]` into `k` vars of shape `[B, h]`.
pub fn chunks<T: Scalar>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    let h = s[1] / k;
    Ok(g.split(x, 1, &vec![h; k])?)
}

/// Adds a `[T, h]` table to every batch row of `x` (`[B, T, h]`).
pub fn add_positions<T: Scalar>(g: &mut Graph<T>, x: Var, table: Var) -> Result<Var> {
    let (xs, ts) = (g.shape(x).to_vec(), g.shape(table).to_vec());
    if xs.len() != 3 || ts != xs[1..] {
        return Err(Error::Input(format!(
            "positional table {ts:?} does not match token sequence {xs:?}"
        )));
    }
    let pos = g.expand(table, 0, xs[0])?;
    Ok(g.add(x, pos)?)
}
