//! The toy diffusion-transformer base: patch tokens and prompt tokens mixed
//! by joint-attention blocks, predicting the rectified-flow velocity.
//!
//! Parameters live under `base.`:
//! `base.patch`, `base.time`, `base.text.{table,slot}`,
//! `base.blocks.{k}.{img,text}.*` and `base.final.*`.

use infu_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::infusenet::ResidualSet;
use crate::nn::{
    init_joint_block, init_timestep_mlp, joint_block, linear, modulate, patches, position_encoding,
    stack_rows, timestep_embed, unpatch, unstack_rows, TokenKind, TokenSequence,
};
use crate::params::{Binder, Init, ParamStore};
use crate::toyworld::{Prompt, NUM_HUES, NUM_POSITIONS, NUM_SCALES};

/// Table rows for attribute values: hues, then positions, then scales.
pub const ATTRIBUTE_ROWS: usize = (NUM_HUES + NUM_POSITIONS + NUM_SCALES) as usize;

/// Table row of every text token; `None` selects the learned null prompt.
pub fn text_indices(prompt: Option<Prompt>, cfg: &ModelConfig) -> Vec<usize> {
    let (h, p) = (NUM_HUES as usize, NUM_POSITIONS as usize);
    (0..cfg.text_tokens)
        .map(|k| match prompt {
            None => ATTRIBUTE_ROWS + k,
            Some(pr) => match k % 3 {
                0 => pr.bg_hue as usize,
                1 => h + pr.position as usize,
                _ => h + p + pr.scale as usize,
            },
        })
        .collect()
}

/// Model space maps pixel values `[0, 1]` onto `[-1, 1]`.
pub fn to_model_space(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

pub fn to_image_space(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * (v + 1.0))
}

/// Parameter layout of the base model under `prefix`.
pub fn init_base_params(seed: u64, cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.token_dim;
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    init.linear("base.patch", cfg.patch_dim(), d, 1.0);
    init_timestep_mlp(&mut init, "base.time", cfg);
    init.normal(
        "base.text.table",
        &[ATTRIBUTE_ROWS + cfg.text_tokens, d],
        1.0,
    );
    init.normal("base.text.slot", &[cfg.text_tokens, d], 0.5);
    for k in 0..cfg.base_blocks {
        init_joint_block(
            &mut init,
            &format!("base.blocks.{k}"),
            "text",
            cfg,
            k + 1 == cfg.base_blocks,
        );
    }
    init.linear("base.final.mod", d, 2 * d, 0.0);
    init.constant("base.final.norm", &[d], 1.0);
    init.linear("base.final.out", d, cfg.patch_dim(), 0.0);
    store.round_to_f32();
    Ok(store)
}

/// Same names and shapes as a fresh layout for `cfg`.
pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    for (name, t) in expected.iter() {
        let other = got
            .get(name)
            .map_err(|_| invalid(format!("{what} is missing tensor {name}")))?;
        if other.shape() != t.shape() {
            return Err(invalid(format!(
                "{what} tensor {name} has shape {:?}, config expects {:?}",
                other.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = got.names().find(|n| !expected.contains(n)) {
        return Err(invalid(format!("{what} has unexpected tensor {extra}")));
    }
    Ok(())
}

/// Learned prompt embedding: attribute (or null) row plus a per-slot offset.
pub fn text_tokens(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    prompts: &[Option<Prompt>],
) -> Result<TokenSequence> {
    let table = b.var(g, "base.text.table")?;
    let slot = b.var(g, "base.text.slot")?;
    let idx: Vec<usize> = prompts.iter().flat_map(|p| text_indices(*p, cfg)).collect();
    let slots: Vec<usize> = prompts.iter().flat_map(|_| 0..cfg.text_tokens).collect();
    let rows = g.gather_rows(table, &idx)?;
    let offsets = g.gather_rows(slot, &slots)?;
    Ok(TokenSequence {
        tokens: g.add(rows, offsets)?,
        count: cfg.text_tokens,
        kind: TokenKind::Text,
    })
}

/// Patch tokens: linear patch embedding plus the fixed positional encoding.
pub fn embed_patches(
    g: &mut Graph,
    b: &mut Binder<'_>,
    prefix: &str,
    cfg: &ModelConfig,
    patch_rows: Var,
    batch: usize,
) -> Result<TokenSequence> {
    let x = linear(g, b, prefix, patch_rows)?;
    let pos = position_encoding(cfg);
    let pos = stack_rows(&vec![pos; batch])?;
    let pos = g.constant(pos);
    Ok(TokenSequence {
        tokens: g.add(x, pos)?,
        count: cfg.image_tokens(),
        kind: TokenKind::Image,
    })
}

/// Base velocity in patch space `[batch·tokens × patch_dim]` for noisy
/// patches `z_patches` of the same shape. `residuals`, when given, holds one
/// `[batch·tokens × token_dim]` tensor per block, added to the image stream
/// after that block.
pub fn base_graph(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    z_patches: Var,
    ts: &[f64],
    prompts: &[Option<Prompt>],
    residuals: Option<&[Var]>,
) -> Result<Var> {
    let batch = ts.len();
    if prompts.len() != batch {
        return Err(invalid(format!(
            "{} timesteps but {} prompts",
            batch,
            prompts.len()
        )));
    }
    if let Some(r) = residuals {
        if r.len() != cfg.base_blocks {
            return Err(invalid(format!(
                "residual set has {} entries, base has {} blocks",
                r.len(),
                cfg.base_blocks
            )));
        }
    }
    let d = cfg.token_dim;
    let mut img = embed_patches(g, b, "base.patch", cfg, z_patches, batch)?;
    let mut text = text_tokens(g, b, cfg, prompts)?;
    let temb = timestep_embed(g, b, "base.time", ts, cfg)?;
    let temb_act = g.gelu(temb);

    for k in 0..cfg.base_blocks {
        let last = k + 1 == cfg.base_blocks;
        let (next_img, next_text) = joint_block(
            g,
            b,
            &format!("base.blocks.{k}"),
            "text",
            cfg,
            img,
            text,
            temb_act,
            batch,
            last,
        )?;
        img = next_img;
        if let Some(t) = next_text {
            text = t;
        }
        if let Some(r) = residuals {
            let shape = g.value(r[k]).shape();
            if shape != [batch * cfg.image_tokens(), d] {
                return Err(invalid(format!(
                    "residual {} has shape {:?}, image stream is [{} × {d}]",
                    k + 1,
                    shape,
                    batch * cfg.image_tokens()
                )));
            }
            let add = if cfg.residual_scale == 1.0 {
                r[k]
            } else {
                g.scale(r[k], cfg.residual_scale)
            };
            img.tokens = g.add(img.tokens, add)?;
        }
    }

    let modulation = linear(g, b, "base.final.mod", temb_act)?;
    let shift = g.slice_cols(modulation, 0, d)?;
    let scale = g.slice_cols(modulation, d, d)?;
    let gain = b.var(g, "base.final.norm")?;
    let h = g.rms_norm(img.tokens, gain)?;
    let h = modulate(g, h, shift, scale, img.count)?;
    linear(g, b, "base.final.out", h)
}

/// Frozen base model: configuration plus its `base.*` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    cfg: ModelConfig,
    params: ParamStore,
}

pub fn init_base(seed: u64, cfg: &ModelConfig) -> Result<BaseModel> {
    Ok(BaseModel {
        cfg: cfg.clone(),
        params: init_base_params(seed, cfg)?,
    })
}

impl BaseModel {
    /// Wraps loaded tensors after checking them against the config's layout.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let expected = init_base_params(0, cfg)?;
        check_layout(&expected, &params, "base checkpoint")?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Velocity for a batch of `[C×H×W]` states; `residuals` holds one
    /// set per sample.
    pub fn forward_batch(
        &self,
        z: &[Tensor],
        ts: &[f64],
        prompts: &[Option<Prompt>],
        residuals: Option<&[ResidualSet]>,
    ) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let rows: Vec<Tensor> = z
            .iter()
            .map(|x| patches(x, &self.cfg))
            .collect::<Result<_>>()?;
        if rows.len() != ts.len() {
            return Err(invalid(format!(
                "{} states but {} timesteps",
                rows.len(),
                ts.len()
            )));
        }
        let zp = g.constant(stack_rows(&rows)?);
        let res_vars = match residuals {
            None => None,
            Some(sets) => Some(residual_vars(&mut g, sets, &self.cfg, z.len())?),
        };
        let out = base_graph(
            &mut g,
            &mut b,
            &self.cfg,
            zp,
            ts,
            prompts,
            res_vars.as_deref(),
        )?;
        unstack_rows(g.value(out), z.len())
            .iter()
            .map(|p| unpatch(p, &self.cfg))
            .collect()
    }

    /// Single-sample velocity `v(z_t, t | prompt)`.
    pub fn velocity(
        &self,
        z: &Tensor,
        t: f64,
        prompt: Option<Prompt>,
        residuals: Option<&ResidualSet>,
    ) -> Result<Tensor> {
        let res = residuals.map(std::slice::from_ref);
        Ok(self
            .forward_batch(std::slice::from_ref(z), &[t], &[prompt], res)?
            .remove(0))
    }
}

/// Stacks per-sample residual sets into one graph constant per block.
pub(crate) fn residual_vars(
    g: &mut Graph,
    sets: &[ResidualSet],
    cfg: &ModelConfig,
    batch: usize,
) -> Result<Vec<Var>> {
    if sets.len() != batch {
        return Err(invalid(format!(
            "{} residual sets for a batch of {batch}",
            sets.len()
        )));
    }
    for s in sets {
        if s.residuals.len() != cfg.base_blocks {
            return Err(invalid(format!(
                "residual set has {} entries, base has {} blocks",
                s.residuals.len(),
                cfg.base_blocks
            )));
        }
    }
    (0..cfg.base_blocks)
        .map(|k| {
            let per_sample: Vec<Tensor> = sets.iter().map(|s| s.residuals[k].clone()).collect();
            Ok(g.constant(stack_rows(&per_sample)?))
        })
        .collect()
}
