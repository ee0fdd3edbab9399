//! Layers shared by the base model and InfuseNet.
//!
//! Activations are batched as `[batch·tokens × width]` matrices in
//! sample-major order, so a sample's tokens are contiguous rows.

use infu_tensor::{Graph, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::params::{Binder, Init};

/// Argument scale of the timestep sinusoid (t ∈ [0,1] maps onto 0..1000).
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Flattens `[C×H×W]` into `[(H/p)·(W/p) × C·p·p]` patches, patches in
/// row-major grid order and each patch vector ordered `(c, dy, dx)`.
pub fn patches(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let [c, h, w] = cfg.image_shape();
    if image.shape() != [c, h, w] {
        return Err(invalid(format!(
            "patchify expects image shape {:?}, got {:?}",
            [c, h, w],
            image.shape()
        )));
    }
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(image.len());
    let src = image.data();
    for py in 0..grid {
        for px in 0..grid {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new([grid * grid, cfg.patch_dim()], out)?)
}

/// Inverse of [`patches`].
pub fn unpatch(tokens: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let [c, h, w] = cfg.image_shape();
    let (p, grid) = (cfg.patch_size, cfg.grid());
    if tokens.shape() != [grid * grid, cfg.patch_dim()] {
        return Err(invalid(format!(
            "unpatchify expects [{} × {}], got {:?}",
            grid * grid,
            cfg.patch_dim(),
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; c * h * w];
    let mut src = tokens.data().chunks_exact(p);
    for py in 0..grid {
        for px in 0..grid {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + py * p + dy) * w + px * p;
                    out[row..row + p].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Ok(Tensor::new([c, h, w], out)?)
}

/// Stacks per-sample `[rows × cols]` tensors into `[batch·rows × cols]`.
pub fn stack_rows(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| invalid("empty batch"))?;
    let (r, c) = first
        .dims2()
        .ok_or_else(|| invalid(format!("expected rank-2 items, got {:?}", first.shape())))?;
    let mut data = Vec::with_capacity(items.len() * r * c);
    for t in items {
        if t.shape() != first.shape() {
            return Err(invalid(format!(
                "batch shape {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new([items.len() * r, c], data)?)
}

/// Splits `[batch·rows × cols]` back into per-sample tensors.
pub fn unstack_rows(t: &Tensor, batch: usize) -> Vec<Tensor> {
    let (r, c) = t.dims2().expect("rank-2 batch");
    let rows = r / batch;
    t.data()
        .chunks_exact(rows * c)
        .map(|chunk| Tensor::new([rows, c], chunk.to_vec()).unwrap())
        .collect()
}

fn sinusoid_into(out: &mut [f64], pos: f64) {
    // pairs of (sin, cos) over log-spaced frequencies
    let pairs = out.len().div_ceil(2);
    for (j, v) in out.iter_mut().enumerate() {
        let k = j / 2;
        let freq = (-(MAX_PERIOD.ln()) * k as f64 / pairs as f64).exp();
        *v = if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
    }
}

/// Fixed 2-D sinusoidal encoding `[tokens × dim]`: the first half of each
/// row encodes the patch row, the second half the patch column.
pub fn position_encoding(cfg: &ModelConfig) -> Tensor {
    let (grid, d) = (cfg.grid(), cfg.token_dim);
    let half = d / 2;
    let mut out = Tensor::zeros([grid * grid, d]);
    for (i, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let (py, px) = (i / grid, i % grid);
        sinusoid_into(&mut row[..half], py as f64);
        sinusoid_into(&mut row[half..], px as f64);
    }
    out
}

/// Raw timestep sinusoid: `dim/2` sines followed by `dim/2` cosines of
/// `1000·t` over log-spaced frequencies.
pub fn timestep_sinusoid(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        out[k] = (TIME_SCALE * t * freq).sin();
        out[half + k] = (TIME_SCALE * t * freq).cos();
    }
    Ok(out)
}

pub fn init_timestep_mlp<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.token_dim;
    init.linear(&format!("{prefix}.mlp1"), d, d, 1.0);
    init.linear(&format!("{prefix}.mlp2"), d, d, 1.0);
}

/// Timestep embedding `[batch × dim]`: sinusoid followed by a 2-layer MLP.
pub fn timestep_embed(
    g: &mut Graph,
    b: &mut Binder<'_>,
    prefix: &str,
    ts: &[f64],
    cfg: &ModelConfig,
) -> Result<Var> {
    let d = cfg.token_dim;
    let mut raw = Vec::with_capacity(ts.len() * d);
    for &t in ts {
        raw.extend(timestep_sinusoid(t, d)?);
    }
    let x = g.constant(Tensor::new([ts.len(), d], raw)?);
    let h = linear(g, b, &format!("{prefix}.mlp1"), x)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{prefix}.mlp2"), h)
}

/// `x·W + b` with `prefix.w`, `prefix.b`.
pub fn linear(g: &mut Graph, b: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let bias = b.var(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, bias)?)
}

/// `x·(1 + scale) + shift`, per-sample rows of `shift`/`scale` broadcast
/// over that sample's `tokens` rows of `x`.
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var, tokens: usize) -> Result<Var> {
    let s1 = g.add_scalar(scale, 1.0);
    let y = g.group_mul(x, s1, tokens)?;
    Ok(g.group_add(y, shift, tokens)?)
}

/// A sequence of tokens of one modality for every sample in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Image,
    Text,
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[batch·count × token_dim]`.
    pub tokens: Var,
    /// Tokens per sample.
    pub count: usize,
    pub kind: TokenKind,
}

/// Parameter layout of one joint-attention block. The conditioning stream
/// of a final block only contributes keys and values, so it carries no
/// output projection or MLP.
pub fn init_joint_block<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    cond: &str,
    cfg: &ModelConfig,
    last: bool,
) {
    let (d, hidden) = (cfg.token_dim, cfg.mlp_hidden());
    for (stream, full) in [("img", true), (cond, !last)] {
        let p = format!("{prefix}.{stream}");
        init.linear(
            &format!("{p}.mod"),
            d,
            if full { 6 * d } else { 2 * d },
            0.0,
        );
        init.constant(format!("{p}.norm1"), &[d], 1.0);
        init.linear(&format!("{p}.qkv"), d, 3 * d, 1.0);
        if full {
            init.linear(&format!("{p}.out"), d, d, 1.0);
            init.constant(format!("{p}.norm2"), &[d], 1.0);
            init.linear(&format!("{p}.mlp1"), d, hidden, 1.0);
            init.linear(&format!("{p}.mlp2"), hidden, d, 1.0);
        }
    }
}

struct StreamPre {
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    modulation: Var,
}

fn stream_pre(
    g: &mut Graph,
    b: &mut Binder<'_>,
    p: &str,
    x: Var,
    temb_act: Var,
    tokens: usize,
    d: usize,
) -> Result<StreamPre> {
    let modulation = linear(g, b, &format!("{p}.mod"), temb_act)?;
    let shift = g.slice_cols(modulation, 0, d)?;
    let scale = g.slice_cols(modulation, d, d)?;
    let gain = b.var(g, &format!("{p}.norm1"))?;
    let h = g.rms_norm(x, gain)?;
    let h = modulate(g, h, shift, scale, tokens)?;
    let qkv = linear(g, b, &format!("{p}.qkv"), h)?;
    Ok(StreamPre {
        x,
        q: g.slice_cols(qkv, 0, d)?,
        k: g.slice_cols(qkv, d, d)?,
        v: g.slice_cols(qkv, 2 * d, d)?,
        modulation,
    })
}

fn stream_post(
    g: &mut Graph,
    b: &mut Binder<'_>,
    p: &str,
    pre: &StreamPre,
    attn: Var,
    tokens: usize,
    d: usize,
) -> Result<Var> {
    let gate1 = g.slice_cols(pre.modulation, 2 * d, d)?;
    let shift2 = g.slice_cols(pre.modulation, 3 * d, d)?;
    let scale2 = g.slice_cols(pre.modulation, 4 * d, d)?;
    let gate2 = g.slice_cols(pre.modulation, 5 * d, d)?;

    let o = linear(g, b, &format!("{p}.out"), attn)?;
    let o = g.group_mul(o, gate1, tokens)?;
    let x = g.add(pre.x, o)?;

    let gain = b.var(g, &format!("{p}.norm2"))?;
    let h = g.rms_norm(x, gain)?;
    let h = modulate(g, h, shift2, scale2, tokens)?;
    let h = linear(g, b, &format!("{p}.mlp1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{p}.mlp2"), h)?;
    let h = g.group_mul(h, gate2, tokens)?;
    Ok(g.add(x, h)?)
}

/// One MMDiT-style block: each stream is modulated by the timestep
/// embedding and projected to Q/K/V with its own weights, attention runs
/// over the per-sample concatenation `[img; cond]`, and the outputs are
/// split back into per-stream gated residual updates and MLPs.
///
/// Returns the updated image stream and, unless `last`, the updated
/// conditioning stream.
#[allow(clippy::too_many_arguments)]
pub fn joint_block(
    g: &mut Graph,
    b: &mut Binder<'_>,
    prefix: &str,
    cond_name: &str,
    cfg: &ModelConfig,
    img: TokenSequence,
    cond: TokenSequence,
    temb_act: Var,
    batch: usize,
    last: bool,
) -> Result<(TokenSequence, Option<TokenSequence>)> {
    let d = cfg.token_dim;
    for seq in [&img, &cond] {
        if g.value(seq.tokens).shape() != [batch * seq.count, d] {
            return Err(invalid(format!(
                "{prefix}: {:?} stream has shape {:?}, expected [{} × {d}]",
                seq.kind,
                g.value(seq.tokens).shape(),
                batch * seq.count
            )));
        }
    }
    let ip = format!("{prefix}.img");
    let cp = format!("{prefix}.{cond_name}");
    let pi = stream_pre(g, b, &ip, img.tokens, temb_act, img.count, d)?;
    let pc = stream_pre(g, b, &cp, cond.tokens, temb_act, cond.count, d)?;

    let q = g.concat_seq(pi.q, pc.q, batch)?;
    let k = g.concat_seq(pi.k, pc.k, batch)?;
    let v = g.concat_seq(pi.v, pc.v, batch)?;
    let attn = g.attention(q, k, v, batch, cfg.heads)?;
    let attn_img = g.slice_seq(attn, batch, 0, img.count)?;

    let img_out = TokenSequence {
        tokens: stream_post(g, b, &ip, &pi, attn_img, img.count, d)?,
        ..img
    };
    if last {
        return Ok((img_out, None));
    }
    let attn_cond = g.slice_seq(attn, batch, img.count, cond.count)?;
    let cond_out = TokenSequence {
        tokens: stream_post(g, b, &cp, &pc, attn_cond, cond.count, d)?,
        ..cond
    };
    Ok((img_out, Some(cond_out)))
}
