//! Cross-attention DiT blocks with adaLN-single or per-block modulation.
//!
//! Self-attention runs over image tokens only; text embeddings enter every
//! block as cross-attention keys and values and are never updated.

use ditlab_numerics::{Graph, Scalar, Var};

use super::layers::{add_positions, chunks, gated_residual, modulate, patchify, timestep_features, unpatchify, Ctx};
use super::ForwardInputs;
use crate::arch::{Family, DIT_FREQ_DIM};
use crate::conditioning::ConditionMode;
use crate::{Error, Result};

pub(super) fn forward<T: Scalar>(ctx: &Ctx<'_, T>, g: &mut Graph<T>, inp: ForwardInputs<'_>) -> Result<Var> {
    let c = ctx.net.config();
    let (h, p, heads) = (c.hidden_dim, c.patch_size, c.num_heads);
    let b = g.shape(inp.x)[0];
    let per_block = c.family == Family::CrossAttnPerBlock;

    let mut x = inp.x;
    if let (Some(spec), Some(cv)) = (&c.conditioning, inp.condition) {
        if spec.mode != ConditionMode::ChannelConcat {
            return Err(Error::Unsupported("cross-attention families take channel conditions only".into()));
        }
        x = g.concat(&[x, cv], 1)?;
    }
    let patches = patchify(g, x, p)?;
    let x = ctx.linear(g, "patch_embed", patches)?;
    let mut x = add_positions(g, x, ctx.p("pos_embed")?)?;

    let tfeat = g.constant(timestep_features(inp.timesteps, DIT_FREQ_DIM));
    let temb = ctx.time_mlp(g, tfeat)?;
    let tact = g.silu(temb);
    let shared = if per_block {
        None
    } else {
        Some(ctx.linear(g, "time_block", tact)?)
    };

    let text_mask: Option<Vec<bool>> = inp.text_mask.map(<[bool]>::to_vec);
    for i in 0..c.depth {
        let pre = format!("blocks.{i}");
        let m = match shared {
            Some(t0) => {
                let t0 = g.reshape(t0, vec![b, 6, h])?;
                let off = g.expand(ctx.p(&format!("{pre}.mod_offset"))?, 0, b)?;
                let m = g.add(t0, off)?;
                g.reshape(m, vec![b, 6 * h])?
            }
            None => ctx.linear(g, &format!("{pre}.adaln"), tact)?,
        };
        let m = chunks(g, m, 6)?;
        let (shift_msa, scale_msa, gate_msa) = (m[0], m[1], m[2]);
        let (shift_mlp, scale_mlp, gate_mlp) = (m[3], m[4], m[5]);

        let xn = g.layer_norm(x, None, None)?;
        let xn = modulate(g, xn, shift_msa, scale_msa)?;
        let (q, attn) = ctx.self_attention_heads(g, &format!("{pre}.attn"), xn, heads, None)?;
        if per_block {
            // Shared query and output projection; text k/v join the self-attention output.
            let kv = ctx.linear(g, &format!("{pre}.cross.kv"), inp.text)?;
            let kv = g.split(kv, 2, &[h, h])?;
            let cross = g.attention(q, kv[0], kv[1], heads, text_mask.clone())?;
            let both = g.add(attn, cross)?;
            let out = ctx.linear(g, &format!("{pre}.attn.proj"), both)?;
            x = gated_residual(g, x, gate_msa, out)?;
        } else {
            let out = ctx.linear(g, &format!("{pre}.attn.proj"), attn)?;
            x = gated_residual(g, x, gate_msa, out)?;
            let q = ctx.linear(g, &format!("{pre}.cross.q"), x)?;
            let kv = ctx.linear(g, &format!("{pre}.cross.kv"), inp.text)?;
            let kv = g.split(kv, 2, &[h, h])?;
            let cross = g.attention(q, kv[0], kv[1], heads, text_mask.clone())?;
            let cross = ctx.linear(g, &format!("{pre}.cross.proj"), cross)?;
            x = g.add(x, cross)?;
        }

        let xn = g.layer_norm(x, None, None)?;
        let xn = modulate(g, xn, shift_mlp, scale_mlp)?;
        let y = ctx.mlp(g, &format!("{pre}.mlp"), xn)?;
        x = gated_residual(g, x, gate_mlp, y)?;
    }

    let fm = if per_block {
        ctx.linear(g, "final_adaln", tact)?
    } else {
        let t = g.expand(temb, 1, 2)?;
        let off = g.expand(ctx.p("final_mod_offset")?, 0, b)?;
        let fm = g.add(t, off)?;
        g.reshape(fm, vec![b, 2 * h])?
    };
    let fm = chunks(g, fm, 2)?;
    let x = g.layer_norm(x, None, None)?;
    let x = modulate(g, x, fm[0], fm[1])?;
    let out = ctx.linear(g, "head", x)?;
    unpatchify(g, out, p, c.latent_channels, c.latent_side())
}
