//! Stacked self-attention over the station axis.

use numcore::{Graph, Var};

use crate::model::{BlockKind, Bound, Init, ModelConfig, ModelError};

/// Kernel of the conformer depthwise convolution over stations.
pub const DEPTHWISE_KERNEL: usize = 7;

fn init_attention(init: &mut Init<'_>, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{part}"), d, d, 3.0);
    }
}

fn init_ffn(init: &mut Init<'_>, prefix: &str, d: usize, hidden: usize) {
    init.linear(&format!("{prefix}.1"), d, hidden, 6.0);
    init.linear(&format!("{prefix}.2"), hidden, d, 3.0);
}

pub(crate) fn init_blending(cfg: &ModelConfig, init: &mut Init<'_>) {
    let d = cfg.d_model;
    for i in 0..cfg.n_blocks {
        let b = format!("blend.{i}");
        match cfg.block_kind {
            BlockKind::Transformer => {
                init.layer_norm(&format!("{b}.ln1"), d);
                init_attention(init, &format!("{b}.attn"), d);
                init.layer_norm(&format!("{b}.ln2"), d);
                init_ffn(init, &format!("{b}.ffn"), d, cfg.ffn_hidden);
            }
            BlockKind::Conformer => {
                init.layer_norm(&format!("{b}.ffn1.ln"), d);
                init_ffn(init, &format!("{b}.ffn1"), d, cfg.ffn_hidden);
                init.layer_norm(&format!("{b}.attn.ln"), d);
                init_attention(init, &format!("{b}.attn"), d);
                init.layer_norm(&format!("{b}.conv.ln"), d);
                init.linear(&format!("{b}.conv.pw1"), d, 2 * d, 3.0);
                init.uniform(format!("{b}.conv.dw.w"), &[DEPTHWISE_KERNEL, d], DEPTHWISE_KERNEL, 3.0);
                init.constant(format!("{b}.conv.dw.b"), &[d], 0.0);
                init.layer_norm(&format!("{b}.conv.norm"), d);
                init.linear(&format!("{b}.conv.pw2"), d, d, 3.0);
                init.layer_norm(&format!("{b}.ffn2.ln"), d);
                init_ffn(init, &format!("{b}.ffn2"), d, cfg.ffn_hidden);
                init.layer_norm(&format!("{b}.out.ln"), d);
            }
        }
    }
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(g.linear(x, w, b)?)
}

fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Multi-head scaled dot-product attention over the rows of `h: [N, d]`.
/// Also returns each head's `[N, N]` attention matrix.
pub fn mhsa_with_weights(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    h: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), ModelError> {
    let d = g.shape(h)[1];
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(ModelError::Config(format!(
            "width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(g, p, &format!("{prefix}.q"), h)?;
    let k = linear(g, p, &format!("{prefix}.k"), h)?;
    let v = linear(g, p, &format!("{prefix}.v"), h)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qi = g.narrow(q, i * dh, dh)?;
        let ki = g.narrow(k, i * dh, dh)?;
        let vi = g.narrow(v, i * dh, dh)?;
        let kt = g.transpose(ki)?;
        let scores = g.matmul(qi, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vi)?);
        weights.push(attn);
    }
    let joined = g.concat(&heads)?;
    Ok((linear(g, p, &format!("{prefix}.o"), joined)?, weights))
}

pub fn mhsa(g: &mut Graph, p: &Bound, prefix: &str, h: Var, n_heads: usize) -> Result<Var, ModelError> {
    Ok(mhsa_with_weights(g, p, prefix, h, n_heads)?.0)
}

fn ffn(g: &mut Graph, p: &Bound, prefix: &str, x: Var, act: fn(&mut Graph, Var) -> Var) -> Result<Var, ModelError> {
    let hidden = linear(g, p, &format!("{prefix}.1"), x)?;
    let hidden = act(g, hidden);
    linear(g, p, &format!("{prefix}.2"), hidden)
}

/// Pre-norm block: `x + mhsa(LN x)`, then `+ FFN(LN x)` with a relu FFN.
pub fn transformer_block(g: &mut Graph, p: &Bound, prefix: &str, h: Var, n_heads: usize) -> Result<Var, ModelError> {
    let n = layer_norm(g, p, &format!("{prefix}.ln1"), h)?;
    let a = mhsa(g, p, &format!("{prefix}.attn"), n, n_heads)?;
    let h = g.add(h, a)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln2"), h)?;
    let f = ffn(g, p, &format!("{prefix}.ffn"), n, Graph::relu)?;
    Ok(g.add(h, f)?)
}

/// Half-step FFN, attention, convolution module, half-step FFN, final norm.
pub fn conformer_block(g: &mut Graph, p: &Bound, prefix: &str, h: Var, n_heads: usize) -> Result<Var, ModelError> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(ModelError::Input(format!(
            "conformer block needs at least one station, got {shape:?}"
        )));
    }
    let d = shape[1];
    let half_ffn = |g: &mut Graph, name: &str, h: Var| -> Result<Var, ModelError> {
        let n = layer_norm(g, p, &format!("{prefix}.{name}.ln"), h)?;
        let f = ffn(g, p, &format!("{prefix}.{name}"), n, Graph::swish)?;
        let f = g.scale(f, 0.5);
        Ok(g.add(h, f)?)
    };
    let h = half_ffn(g, "ffn1", h)?;

    let n = layer_norm(g, p, &format!("{prefix}.attn.ln"), h)?;
    let a = mhsa(g, p, &format!("{prefix}.attn"), n, n_heads)?;
    let h = g.add(h, a)?;

    let n = layer_norm(g, p, &format!("{prefix}.conv.ln"), h)?;
    let wide = linear(g, p, &format!("{prefix}.conv.pw1"), n)?;
    let value = g.narrow(wide, 0, d)?;
    let gate = g.narrow(wide, d, d)?;
    let gate = g.sigmoid(gate);
    let glu = g.mul(value, gate)?;
    let dw = g.depthwise_conv_rows(
        glu,
        p.get(&format!("{prefix}.conv.dw.w"))?,
        p.get(&format!("{prefix}.conv.dw.b"))?,
    )?;
    let dw = layer_norm(g, p, &format!("{prefix}.conv.norm"), dw)?;
    let dw = g.swish(dw);
    let c = linear(g, p, &format!("{prefix}.conv.pw2"), dw)?;
    let h = g.add(h, c)?;

    let h = half_ffn(g, "ffn2", h)?;
    layer_norm(g, p, &format!("{prefix}.out.ln"), h)
}

/// Applies the configured stack of blocks to `h1: [N, d_model]`.
pub fn feature_blending(g: &mut Graph, p: &Bound, cfg: &ModelConfig, h1: Var) -> Result<Var, ModelError> {
    if cfg.n_blocks == 0 {
        return Err(ModelError::Config("n_blocks must be at least 1".into()));
    }
    let mut h = h1;
    for i in 0..cfg.n_blocks {
        let prefix = format!("blend.{i}");
        h = match cfg.block_kind {
            BlockKind::Transformer => transformer_block(g, p, &prefix, h, cfg.n_heads)?,
            BlockKind::Conformer => conformer_block(g, p, &prefix, h, cfg.n_heads)?,
        };
    }
    Ok(h)
}
