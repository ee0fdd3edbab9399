//! Training: the base phase, stage-1 SPSS pretraining of the branch, SPMS
//! synthesis and stage-2 fine-tuning.

pub mod optimizer;
pub mod spms;

use std::fmt;
use std::str::FromStr;

use infu_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dit::{base_graph, init_base, to_model_space, BaseModel};
use crate::error::{invalid, InfuError, Result};
use crate::flow::{cfm_target, forward_interpolate, sample_timestep, standard_normal};
use crate::infusenet::{infu_graph, Conditioning, InfuseNet};
use crate::nn::{patches, stack_rows};
use crate::params::{Binder, ParamStore};
use crate::toyworld::{ControlImage, Prompt, ToyWorld};

pub use optimizer::{clip_global_norm, global_norm, AdamW, Gradients};
pub use spms::{synthesize_spms, SpmsRecord, SpmsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Base,
    Spss,
    Sft,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Spss => "spss",
            Stage::Sft => "sft",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = InfuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "spss" => Ok(Stage::Spss),
            "sft" => Ok(Stage::Sft),
            other => Err(InfuError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing a record's prompt with the null prompt.
    pub prompt_dropout: f64,
    /// Probability of replacing a record's control image with black.
    pub control_dropout: f64,
    pub grad_clip: f64,
    /// Largest evaluation ID loss accepted for a synthetic record.
    pub spms_filter_tau: f64,
    /// Blend weight of the ideal render in an enhanced synthetic target.
    pub spms_blend_gamma: f64,
    /// Skip stage 2: the stage-1 branch is returned unchanged.
    pub no_sft: bool,
    /// Stage 2 conditions on the synthetic target itself instead of the
    /// real source image.
    pub spss_synthetic_sft: bool,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (steps, lr) = match stage {
            Stage::Base => (20_000, 2e-4),
            Stage::Spss => (20_000, 2e-4),
            Stage::Sft => (5_000, 1e-4),
        };
        Self {
            stage,
            steps,
            batch_size: 32,
            lr,
            seed: 0,
            prompt_dropout: 0.1,
            control_dropout: 0.1,
            grad_clip: 1.0,
            spms_filter_tau: 0.3,
            spms_blend_gamma: 0.5,
            no_sft: false,
            spss_synthetic_sft: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(InfuError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        for (name, p) in [
            ("prompt_dropout", self.prompt_dropout),
            ("control_dropout", self.control_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.spms_filter_tau) {
            return fail(format!(
                "spms_filter_tau {} outside [0, 2]",
                self.spms_filter_tau
            ));
        }
        if !(0.0..=1.0).contains(&self.spms_blend_gamma) {
            return fail(format!(
                "spms_blend_gamma {} outside [0, 1]",
                self.spms_blend_gamma
            ));
        }
        Ok(())
    }
}

/// Conditioned training examples in model space.
#[derive(Clone, Debug, Default)]
pub struct TrainingBatch {
    pub x0: Vec<Tensor>,
    pub prompts: Vec<Option<Prompt>>,
    pub controls: Vec<Tensor>,
    pub id_embeddings: Vec<Tensor>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn push<R: Rng>(
        &mut self,
        target: &Tensor,
        prompt: Prompt,
        control: &ControlImage,
        id_embedding: Tensor,
        cfg: &StageConfig,
        rng: &mut R,
    ) {
        self.x0.push(to_model_space(target));
        let drop_prompt = rng.gen_bool(cfg.prompt_dropout);
        self.prompts
            .push(if drop_prompt { None } else { Some(prompt) });
        let drop_control = rng.gen_bool(cfg.control_dropout);
        self.controls.push(if drop_control {
            ControlImage::black().pixels
        } else {
            control.pixels.clone()
        });
        self.id_embeddings.push(id_embedding);
    }
}

/// Prompt-conditioned renders of random training identities.
pub fn sample_base_batch<R: Rng>(
    world: &ToyWorld,
    cfg: &StageConfig,
    rng: &mut R,
) -> TrainingBatch {
    let mut batch = TrainingBatch::default();
    let black = ControlImage::black();
    let id_dim = world.config().id_dim;
    for _ in 0..cfg.batch_size {
        let id = world.sample_identity(rng);
        let prompt = Prompt::sample(rng);
        let target = world.render(&id, prompt);
        batch.push(&target, prompt, &black, Tensor::zeros([id_dim]), cfg, rng);
    }
    batch
}

/// Fresh single-person-single-sample records.
pub fn sample_spss_batch<R: Rng>(
    world: &ToyWorld,
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let mut batch = TrainingBatch::default();
    for _ in 0..cfg.batch_size {
        let id = world.sample_identity(rng);
        let prompt = Prompt::sample(rng);
        let rec = world.spss_record(&id, prompt)?;
        batch.push(
            &rec.target,
            prompt,
            &rec.control,
            rec.id_embedding,
            cfg,
            rng,
        );
    }
    Ok(batch)
}

/// Records drawn with replacement from a synthetic SPMS dataset.
pub fn sample_sft_batch<R: Rng>(
    world: &ToyWorld,
    records: &[SpmsRecord],
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    if records.is_empty() {
        return Err(invalid("SPMS dataset is empty"));
    }
    let mut batch = TrainingBatch::default();
    for _ in 0..cfg.batch_size {
        let rec = &records[rng.gen_range(0..records.len())];
        let (control, kp) = world.make_control(rec.prompt_b, true);
        let embedding = if cfg.spss_synthetic_sft {
            world.encode_identity_cond(&rec.target_image, &kp)?
        } else {
            rec.id_embedding.clone()
        };
        batch.push(
            &rec.target_image,
            rec.prompt_b,
            &control,
            embedding,
            cfg,
            rng,
        );
    }
    Ok(batch)
}

/// Noisy inputs and velocity targets in patch space.
struct FlowInputs {
    z_patches: Tensor,
    target: Tensor,
    ts: Vec<f64>,
}

fn draw_flow_inputs<R: Rng>(
    batch: &TrainingBatch,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<FlowInputs> {
    let mut z = Vec::with_capacity(batch.len());
    let mut u = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for x0 in &batch.x0 {
        let eps = standard_normal(x0.shape(), rng);
        let t = sample_timestep(rng);
        z.push(patches(&forward_interpolate(x0, &eps, t)?, cfg)?);
        u.push(patches(&cfm_target(x0, &eps)?, cfg)?);
        ts.push(t);
    }
    Ok(FlowInputs {
        z_patches: stack_rows(&z)?,
        target: stack_rows(&u)?,
        ts,
    })
}

fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

fn apply_update(
    params: &mut ParamStore,
    mut grads: Gradients,
    opt: &mut AdamW,
    loss: f64,
    step: usize,
    cfg: &StageConfig,
) -> Result<StepOutcome> {
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(InfuError::NonFinite {
            step,
            lr: opt.lr,
            seed: cfg.seed,
        });
    }
    opt.step(params, &grads)?;
    params.round_to_f32();
    Ok(StepOutcome { loss, grad_norm })
}

/// One CFM step on the base alone (prompt conditioning only).
pub fn train_step_base<R: Rng>(
    base: &mut BaseModel,
    opt: &mut AdamW,
    batch: &TrainingBatch,
    rng: &mut R,
    step: usize,
    cfg: &StageConfig,
) -> Result<StepOutcome> {
    let mcfg = base.cfg().clone();
    let inputs = draw_flow_inputs(batch, &mcfg, rng)?;
    let (loss, grads) = {
        let mut g = Graph::new();
        let mut b = Binder::new(base.params(), true);
        let zp = g.constant(inputs.z_patches);
        let target = g.constant(inputs.target);
        let v = base_graph(&mut g, &mut b, &mcfg, zp, &inputs.ts, &batch.prompts, None)?;
        let loss = mse(&mut g, v, target)?;
        g.backward(loss)?;
        (g.value(loss).data()[0], b.gradients(&g))
    };
    apply_update(base.params_mut(), grads, opt, loss, step, cfg)
}

/// CFM loss of the full InfU model and gradients for the branch only.
pub fn infu_loss_and_grads<R: Rng>(
    base: &BaseModel,
    net: &InfuseNet,
    batch: &TrainingBatch,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let mcfg = base.cfg();
    let inputs = draw_flow_inputs(batch, mcfg, rng)?;
    let mut g = Graph::new();
    let mut bb = Binder::new(base.params(), false);
    let mut nb = Binder::new(net.params(), true);
    let zp = g.constant(inputs.z_patches);
    let target = g.constant(inputs.target);
    let cond = Conditioning {
        ts: &inputs.ts,
        prompts: &batch.prompts,
        controls: &batch.controls,
        id_embeddings: &batch.id_embeddings,
    };
    let v = infu_graph(&mut g, &mut bb, &mut nb, mcfg, zp, &cond)?;
    let loss = mse(&mut g, v, target)?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], nb.gradients(&g)))
}

/// One CFM step on the branch; the base is only read.
pub fn train_step_infu<R: Rng>(
    base: &BaseModel,
    net: &mut InfuseNet,
    opt: &mut AdamW,
    batch: &TrainingBatch,
    rng: &mut R,
    step: usize,
    cfg: &StageConfig,
) -> Result<StepOutcome> {
    let (loss, grads) = infu_loss_and_grads(base, net, batch, rng)?;
    apply_update(net.params_mut(), grads, opt, loss, step, cfg)
}

/// Per-step losses of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn median(&self, range: std::ops::Range<usize>) -> f64 {
        let mut v: Vec<f64> = self.losses[range].to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Called after every step with `(step, loss)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

fn check_stage(cfg: &StageConfig, expected: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != expected {
        return Err(InfuError::Config(format!(
            "stage config is {}, expected {expected}",
            cfg.stage
        )));
    }
    Ok(())
}

/// Pretrains a fresh base from `init_seed` on prompt-conditioned renders.
pub fn pretrain_base(
    world: &ToyWorld,
    model: &ModelConfig,
    init_seed: u64,
    cfg: &StageConfig,
    progress: Progress<'_>,
) -> Result<(BaseModel, TrainLog)> {
    check_stage(cfg, Stage::Base)?;
    let mut base = init_base(init_seed, model)?;
    let mut opt = AdamW::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_base_batch(world, cfg, &mut rng);
        let out = train_step_base(&mut base, &mut opt, &batch, &mut rng, step, cfg)?;
        log.losses.push(out.loss);
        progress(step, out.loss);
    }
    Ok((base, log))
}

/// Stage 1: trains `net` on fresh SPSS records against the frozen base.
pub fn pretrain_spss(
    world: &ToyWorld,
    base: &BaseModel,
    mut net: InfuseNet,
    cfg: &StageConfig,
    progress: Progress<'_>,
) -> Result<(InfuseNet, TrainLog)> {
    check_stage(cfg, Stage::Spss)?;
    let mut opt = AdamW::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_spss_batch(world, cfg, &mut rng)?;
        let out = train_step_infu(base, &mut net, &mut opt, &batch, &mut rng, step, cfg)?;
        log.losses.push(out.loss);
        progress(step, out.loss);
    }
    Ok((net, log))
}

/// Stage 2: continues training the stage-1 branch on SPMS records with a
/// fresh optimizer.
pub fn sft_spms(
    world: &ToyWorld,
    base: &BaseModel,
    stage1: InfuseNet,
    records: &[SpmsRecord],
    cfg: &StageConfig,
    progress: Progress<'_>,
) -> Result<(InfuseNet, TrainLog)> {
    check_stage(cfg, Stage::Sft)?;
    if records.is_empty() {
        return Err(invalid("SPMS dataset is empty"));
    }
    if cfg.no_sft {
        return Ok((stage1, TrainLog::default()));
    }
    let mut net = stage1;
    let mut opt = AdamW::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_sft_batch(world, records, cfg, &mut rng)?;
        let out = train_step_infu(base, &mut net, &mut opt, &batch, &mut rng, step, cfg)?;
        log.losses.push(out.loss);
        progress(step, out.loss);
    }
    Ok((net, log))
}
