//! U-ViT: one token stream `[time, text, condition, image]` with long skips.

use ditlab_numerics::{Graph, Scalar, Var};

use super::layers::{add_positions, patchify, timestep_features, unpatchify, Ctx};
use super::{skip_pairing, ForwardInputs};
use crate::conditioning::ConditionMode;
use crate::Result;

pub(super) fn forward<T: Scalar>(ctx: &Ctx<'_, T>, g: &mut Graph<T>, inp: ForwardInputs<'_>) -> Result<Var> {
    let c = ctx.net.config();
    let (h, p) = (c.hidden_dim, c.patch_size);
    let b = g.shape(inp.x)[0];
    let l = c.text_len;
    let side = c.latent_side();

    let mut x = inp.x;
    let mut cond_tokens = None;
    if let (Some(spec), Some(cv)) = (&c.conditioning, inp.condition) {
        match spec.mode {
            ConditionMode::ChannelConcat => x = g.concat(&[x, cv], 1)?,
            ConditionMode::TokenConcat => {
                let patches = patchify(g, cv, spec.patch(c))?;
                let emb = ctx.linear(g, "cond_embed", patches)?;
                cond_tokens = Some(add_positions(g, emb, ctx.p("cond_pos_embed")?)?);
            }
        }
    }
    let patches = patchify(g, x, p)?;
    let img = ctx.linear(g, "patch_embed", patches)?;
    let image_tokens = g.shape(img)[1];
    let txt = ctx.linear(g, "text_proj", inp.text)?;

    let tfeat = g.constant(timestep_features(inp.timesteps, h));
    let temb = ctx.time_mlp(g, tfeat)?;
    let temb = g.reshape(temb, vec![b, 1, h])?;

    let pos = ctx.p("pos_embed")?;
    let front = g.concat(&[temb, txt], 1)?;
    let front = {
        let table = g.narrow(pos, 0, 0, 1 + l)?;
        add_positions(g, front, table)?
    };
    let img = {
        let table = g.narrow(pos, 0, 1 + l, image_tokens)?;
        add_positions(g, img, table)?
    };
    let mut seq = vec![front];
    seq.extend(cond_tokens);
    seq.push(img);
    let mut x = g.concat(&seq, 1)?;
    let total = g.shape(x)[1];
    let n_cond = total - 1 - l - image_tokens;

    let mask = inp.text_mask.map(|m| {
        let mut full = Vec::with_capacity(b * total);
        for bi in 0..b {
            full.push(true);
            full.extend_from_slice(&m[bi * l..(bi + 1) * l]);
            full.extend(std::iter::repeat_n(true, n_cond + image_tokens));
        }
        full
    });

    let pairs = if c.use_skip && c.depth >= 2 {
        skip_pairing(c.depth)?
    } else {
        Vec::new()
    };
    let mut saved: Vec<Option<Var>> = vec![None; c.depth];
    for i in 0..c.depth {
        if let Some(&(src, _)) = pairs.iter().find(|&&(_, t)| t == i) {
            let skip = saved[src].expect("source block runs first");
            let fused = g.concat(&[x, skip], 2)?;
            x = ctx.linear(g, &format!("skips.{i}"), fused)?;
        }
        x = block(ctx, g, i, x, c.num_heads, mask.clone())?;
        if pairs.iter().any(|&(s, _)| s == i) {
            saved[i] = Some(x);
        }
    }

    let x = ctx.layer_norm(g, "final_norm", x)?;
    let x = g.narrow(x, 1, total - image_tokens, image_tokens)?;
    let out = ctx.linear(g, "head", x)?;
    unpatchify(g, out, p, c.latent_channels, side)
}

fn block<T: Scalar>(
    ctx: &Ctx<'_, T>,
    g: &mut Graph<T>,
    i: usize,
    x: Var,
    heads: usize,
    mask: Option<Vec<bool>>,
) -> Result<Var> {
    let pre = format!("blocks.{i}");
    let xn = ctx.layer_norm(g, &format!("{pre}.norm1"), x)?;
    let (_, attn) = ctx.self_attention_heads(g, &format!("{pre}.attn"), xn, heads, mask)?;
    let attn = ctx.linear(g, &format!("{pre}.attn.proj"), attn)?;
    let x = g.add(x, attn)?;
    let xn = ctx.layer_norm(g, &format!("{pre}.norm2"), x)?;
    let m = ctx.mlp(g, &format!("{pre}.mlp"), xn)?;
    Ok(g.add(x, m)?)
}
