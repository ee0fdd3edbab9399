//! The trainable identity branch.
//!
//! A projection network turns an identity embedding into identity tokens.
//! InfuseNet runs `N` joint-attention blocks over the noisy image tokens
//! (plus an embedding of the control image) and the identity tokens, and
//! each block emits `i` residuals through zero-initialized heads, one for
//! each base block it serves. Parameters live under `infusenet.` and `proj.`.

use infu_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dit::{base_graph, check_layout, embed_patches, BaseModel};
use crate::error::{invalid, Result};
use crate::nn::{
    init_joint_block, init_timestep_mlp, joint_block, linear, patches, stack_rows, timestep_embed,
    unpatch, unstack_rows, TokenKind, TokenSequence,
};
use crate::params::{Binder, Init, ParamStore};
use crate::toyworld::{ControlImage, Prompt};

/// Base blocks (1-based) fed by InfuseNet block `j` (1-based) of
/// `n_blocks`, each serving `factor` consecutive base blocks.
pub fn residual_map(j: usize, factor: usize, n_blocks: usize) -> Result<Vec<usize>> {
    if factor == 0 {
        return Err(invalid("factor must be at least 1"));
    }
    if j == 0 || j > n_blocks {
        return Err(invalid(format!(
            "InfuseNet block {j} outside 1..={n_blocks}"
        )));
    }
    Ok(((j - 1) * factor + 1..=j * factor).collect())
}

/// InfuseNet block (1-based) producing the residual of base block `k` (1-based).
pub fn producer_of(k: usize, factor: usize) -> usize {
    k.div_ceil(factor)
}

/// One residual per base block for a single sample, each `[tokens × token_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<Tensor>,
    /// 1-based InfuseNet block that produced each entry.
    pub producers: Vec<usize>,
}

impl ResidualSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            residuals: vec![Tensor::zeros([cfg.image_tokens(), cfg.token_dim]); cfg.base_blocks],
            producers: (1..=cfg.base_blocks)
                .map(|k| producer_of(k, cfg.factor))
                .collect(),
        }
    }

    pub fn all_zero(&self) -> bool {
        self.residuals
            .iter()
            .all(|r| r.data().iter().all(|&v| v == 0.0))
    }
}

fn head_name(cfg: &ModelConfig, j: usize, h: usize) -> String {
    if cfg.shared_residual_heads {
        format!("infusenet.heads.{j}")
    } else {
        format!("infusenet.heads.{j}.{h}")
    }
}

fn proj_hidden(cfg: &ModelConfig) -> usize {
    cfg.token_dim * cfg.mlp_ratio
}

/// Fresh branch parameters. With a base, the patch embedding, timestep MLP
/// and each block's image stream start as copies of the base's (block `j`
/// copies base block `j·factor`); identity streams, the control embedding,
/// the projection network and the zero heads are always fresh.
pub fn init_branch_params(
    seed: u64,
    cfg: &ModelConfig,
    base: Option<&ParamStore>,
) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.token_dim;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    init.linear("infusenet.patch", cfg.patch_dim(), d, 1.0);
    init.linear("infusenet.control", cfg.patch_dim(), d, 1.0);
    init_timestep_mlp(&mut init, "infusenet.time", cfg);
    for j in 0..cfg.infuse_blocks {
        init_joint_block(
            &mut init,
            &format!("infusenet.blocks.{j}"),
            "id",
            cfg,
            j + 1 == cfg.infuse_blocks,
        );
        let heads = if cfg.shared_residual_heads {
            1
        } else {
            cfg.factor
        };
        for h in 0..heads {
            init.linear(&head_name(cfg, j, h), d, d, 0.0);
        }
    }
    init.linear("proj.mlp1", cfg.id_dim, proj_hidden(cfg), 1.0);
    init.linear("proj.mlp2", proj_hidden(cfg), cfg.id_tokens * d, 1.0);

    if let Some(base) = base {
        let mut copies: Vec<(String, String)> = Vec::new();
        for stem in ["patch", "time"] {
            let src_prefix = format!("base.{stem}.");
            for name in base.names().filter(|n| n.starts_with(&src_prefix)) {
                copies.push((name.clone(), name.replacen("base.", "infusenet.", 1)));
            }
        }
        for j in 0..cfg.infuse_blocks {
            let src_prefix = format!("base.blocks.{}.img.", j * cfg.factor);
            for name in base.names().filter(|n| n.starts_with(&src_prefix)) {
                copies.push((
                    name.clone(),
                    name.replacen(&src_prefix, &format!("infusenet.blocks.{j}.img."), 1),
                ));
            }
        }
        for (src, dst) in copies {
            let t = base.get(&src)?.clone();
            let slot = store.get_mut(&dst)?;
            if slot.shape() != t.shape() {
                return Err(invalid(format!(
                    "cannot copy {src} {:?} into {dst} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    store.round_to_f32();
    Ok(store)
}

/// Identity tokens `[batch·id_tokens × token_dim]` from embeddings `[batch × id_dim]`.
pub fn project_identity_graph(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    emb: Var,
) -> Result<TokenSequence> {
    let shape = g.value(emb).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.id_dim {
        return Err(invalid(format!(
            "identity embedding shape {shape:?}, expected [batch × {}]",
            cfg.id_dim
        )));
    }
    let batch = shape[0];
    let h = linear(g, b, "proj.mlp1", emb)?;
    let h = g.gelu(h);
    let out = linear(g, b, "proj.mlp2", h)?;
    Ok(TokenSequence {
        tokens: g.reshape(out, [batch * cfg.id_tokens, cfg.token_dim])?,
        count: cfg.id_tokens,
        kind: TokenKind::Identity,
    })
}

/// The `base_blocks` residuals, each `[batch·tokens × token_dim]`.
pub fn infusenet_graph(
    g: &mut Graph,
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    z_patches: Var,
    control_patches: Var,
    ts: &[f64],
    mut ids: TokenSequence,
) -> Result<Vec<Var>> {
    let batch = ts.len();
    let mut img = embed_patches(g, b, "infusenet.patch", cfg, z_patches, batch)?;
    let ctrl = linear(g, b, "infusenet.control", control_patches)?;
    img.tokens = g.add(img.tokens, ctrl)?;
    let temb = timestep_embed(g, b, "infusenet.time", ts, cfg)?;
    let temb_act = g.gelu(temb);

    let mut out = Vec::with_capacity(cfg.base_blocks);
    for j in 0..cfg.infuse_blocks {
        let last = j + 1 == cfg.infuse_blocks;
        let (next_img, next_ids) = joint_block(
            g,
            b,
            &format!("infusenet.blocks.{j}"),
            "id",
            cfg,
            img,
            ids,
            temb_act,
            batch,
            last,
        )?;
        img = next_img;
        if let Some(s) = next_ids {
            ids = s;
        }
        if cfg.shared_residual_heads {
            let r = linear(g, b, &head_name(cfg, j, 0), img.tokens)?;
            out.extend(std::iter::repeat(r).take(cfg.factor));
        } else {
            for h in 0..cfg.factor {
                out.push(linear(g, b, &head_name(cfg, j, h), img.tokens)?);
            }
        }
    }
    Ok(out)
}

/// Per-sample conditioning for a batched InfU forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub ts: &'a [f64],
    pub prompts: &'a [Option<Prompt>],
    /// Control images `[C×H×W]` in `[0, 1]`.
    pub controls: &'a [Tensor],
    /// Identity embeddings of length `id_dim`.
    pub id_embeddings: &'a [Tensor],
}

impl Conditioning<'_> {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.ts.len();
        if self.prompts.len() != n || self.controls.len() != n || self.id_embeddings.len() != n {
            return Err(invalid(format!(
                "conditioning lengths differ: {} timesteps, {} prompts, {} controls, {} embeddings",
                n,
                self.prompts.len(),
                self.controls.len(),
                self.id_embeddings.len()
            )));
        }
        if let Some(e) = self.id_embeddings.iter().find(|e| e.len() != cfg.id_dim) {
            return Err(invalid(format!(
                "identity embedding has length {}, expected {}",
                e.len(),
                cfg.id_dim
            )));
        }
        Ok(())
    }
}

/// Branch inputs bound as graph constants.
pub(crate) struct BranchInputs {
    pub control_patches: Var,
    pub embeddings: Var,
}

pub(crate) fn bind_branch_inputs(
    g: &mut Graph,
    cfg: &ModelConfig,
    cond: &Conditioning<'_>,
) -> Result<BranchInputs> {
    cond.check(cfg)?;
    let ctrl: Vec<Tensor> = cond
        .controls
        .iter()
        .map(|c| patches(c, cfg))
        .collect::<Result<_>>()?;
    let control_patches = g.constant(stack_rows(&ctrl)?);
    let mut emb = Vec::with_capacity(cond.len() * cfg.id_dim);
    for e in cond.id_embeddings {
        emb.extend_from_slice(e.data());
    }
    let embeddings = g.constant(Tensor::new([cond.len(), cfg.id_dim], emb)?);
    Ok(BranchInputs {
        control_patches,
        embeddings,
    })
}

/// Full InfU velocity in patch space: the whole branch runs first, then the
/// base consumes its residuals.
pub fn infu_graph(
    g: &mut Graph,
    base: &mut Binder<'_>,
    branch: &mut Binder<'_>,
    cfg: &ModelConfig,
    z_patches: Var,
    cond: &Conditioning<'_>,
) -> Result<Var> {
    let inputs = bind_branch_inputs(g, cfg, cond)?;
    let ids = project_identity_graph(g, branch, cfg, inputs.embeddings)?;
    let residuals = infusenet_graph(
        g,
        branch,
        cfg,
        z_patches,
        inputs.control_patches,
        cond.ts,
        ids,
    )?;
    base_graph(
        g,
        base,
        cfg,
        z_patches,
        cond.ts,
        cond.prompts,
        Some(&residuals),
    )
}

/// Trainable branch: InfuseNet plus the identity projection network.
#[derive(Clone, Debug, PartialEq)]
pub struct InfuseNet {
    cfg: ModelConfig,
    params: ParamStore,
}

impl InfuseNet {
    pub fn init(seed: u64, cfg: &ModelConfig, base: Option<&BaseModel>) -> Result<Self> {
        if let Some(b) = base {
            if b.cfg() != cfg {
                return Err(invalid("InfuseNet and base configs differ"));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            params: init_branch_params(seed, cfg, base.map(BaseModel::params))?,
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let expected = init_branch_params(0, cfg, None)?;
        check_layout(&expected, &params, "InfuseNet checkpoint")?;
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

    /// `[id_tokens × token_dim]` identity tokens for one embedding.
    pub fn project_identity(&self, embedding: &Tensor) -> Result<Tensor> {
        if embedding.len() != self.cfg.id_dim {
            return Err(invalid(format!(
                "identity embedding has length {}, expected {}",
                embedding.len(),
                self.cfg.id_dim
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let e = g.constant(Tensor::new(
            [1, self.cfg.id_dim],
            embedding.data().to_vec(),
        )?);
        let ids = project_identity_graph(&mut g, &mut b, &self.cfg, e)?;
        Ok(g.value(ids.tokens).clone())
    }

    /// Residual sets for a batch of states.
    pub fn residuals_batch(
        &self,
        z: &[Tensor],
        cond: &Conditioning<'_>,
    ) -> Result<Vec<ResidualSet>> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let rows: Vec<Tensor> = z.iter().map(|x| patches(x, cfg)).collect::<Result<_>>()?;
        if rows.len() != cond.len() {
            return Err(invalid(format!(
                "{} states but {} conditioning entries",
                rows.len(),
                cond.len()
            )));
        }
        let zp = g.constant(stack_rows(&rows)?);
        let inputs = bind_branch_inputs(&mut g, cfg, cond)?;
        let ids = project_identity_graph(&mut g, &mut b, cfg, inputs.embeddings)?;
        let vars = infusenet_graph(
            &mut g,
            &mut b,
            cfg,
            zp,
            inputs.control_patches,
            cond.ts,
            ids,
        )?;
        let per_block: Vec<Vec<Tensor>> = vars
            .iter()
            .map(|&v| unstack_rows(g.value(v), z.len()))
            .collect();
        let producers: Vec<usize> = (1..=cfg.base_blocks)
            .map(|k| producer_of(k, cfg.factor))
            .collect();
        Ok((0..z.len())
            .map(|s| ResidualSet {
                residuals: per_block.iter().map(|blk| blk[s].clone()).collect(),
                producers: producers.clone(),
            })
            .collect())
    }

    pub fn residuals(
        &self,
        z: &Tensor,
        t: f64,
        control: &ControlImage,
        id_embedding: &Tensor,
    ) -> Result<ResidualSet> {
        let cond = Conditioning {
            ts: &[t],
            prompts: &[None],
            controls: std::slice::from_ref(&control.pixels),
            id_embeddings: std::slice::from_ref(id_embedding),
        };
        Ok(self
            .residuals_batch(std::slice::from_ref(z), &cond)?
            .remove(0))
    }
}

/// Batched InfU velocity in one graph.
pub fn infu_velocity_batch(
    base: &BaseModel,
    net: &InfuseNet,
    z: &[Tensor],
    cond: &Conditioning<'_>,
) -> Result<Vec<Tensor>> {
    let cfg = base.cfg();
    if net.cfg() != cfg {
        return Err(invalid("InfuseNet and base configs differ"));
    }
    let mut g = Graph::new();
    let mut bb = Binder::new(base.params(), false);
    let mut nb = Binder::new(net.params(), false);
    let rows: Vec<Tensor> = z.iter().map(|x| patches(x, cfg)).collect::<Result<_>>()?;
    if rows.len() != cond.len() {
        return Err(invalid(format!(
            "{} states but {} conditioning entries",
            rows.len(),
            cond.len()
        )));
    }
    let zp = g.constant(stack_rows(&rows)?);
    let out = infu_graph(&mut g, &mut bb, &mut nb, cfg, zp, cond)?;
    unstack_rows(g.value(out), z.len())
        .iter()
        .map(|p| unpatch(p, cfg))
        .collect()
}

/// Single-sample InfU velocity.
pub fn infu_velocity(
    base: &BaseModel,
    net: &InfuseNet,
    z: &Tensor,
    t: f64,
    prompt: Option<Prompt>,
    control: &ControlImage,
    id_embedding: &Tensor,
) -> Result<Tensor> {
    let cond = Conditioning {
        ts: &[t],
        prompts: &[prompt],
        controls: std::slice::from_ref(&control.pixels),
        id_embeddings: std::slice::from_ref(id_embedding),
    };
    Ok(infu_velocity_batch(base, net, std::slice::from_ref(z), &cond)?.remove(0))
}
