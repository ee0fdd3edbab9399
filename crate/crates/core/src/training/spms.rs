//! Single-person-multiple-sample synthesis: the stage-1 model generates a
//! target under a new prompt from an ideal source image of the same
//! identity; targets are enhanced by blending toward the ideal render and
//! filtered on identity and attributes.

use infu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dit::BaseModel;
use crate::error::{InfuError, Result};
use crate::eval::id_loss;
use crate::infusenet::InfuseNet;
use crate::sampling::{generate_parallel, GenRequest};
use crate::toyworld::{Prompt, ToyWorld};

use super::StageConfig;

/// Candidates generated per round.
const ROUND: usize = 96;
/// Give up after this many attempts per requested pair.
const MAX_ATTEMPTS_PER_PAIR: usize = 20;
const MIN_ACCEPTANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SpmsRecord {
    pub record_id: usize,
    pub id_seed: u64,
    pub prompt_a: Prompt,
    pub prompt_b: Prompt,
    /// Ideal render of the identity under `prompt_a`.
    pub source_image: Tensor,
    /// Conditioning embedding of the source image.
    pub id_embedding: Tensor,
    /// Enhanced synthetic image for `prompt_b`.
    pub target_image: Tensor,
    pub accepted_id_loss: f64,
    pub enhancement_gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpmsReport {
    pub attempts: usize,
    pub accepted: usize,
    pub mean_id_loss: f64,
}

impl SpmsReport {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.attempts.max(1) as f64
    }
}

struct Attempt {
    id_seed: u64,
    prompt_a: Prompt,
    prompt_b: Prompt,
}

/// Synthesizes `n_pairs` accepted records. Candidates are drawn and scored
/// in fixed rounds, so the result does not depend on the thread count.
pub fn synthesize_spms(
    world: &ToyWorld,
    base: &BaseModel,
    stage1: &InfuseNet,
    n_pairs: usize,
    sampler_steps: usize,
    cfg: &StageConfig,
) -> Result<(Vec<SpmsRecord>, SpmsReport)> {
    cfg.validate()?;
    if n_pairs == 0 {
        return Err(InfuError::Config("n_pairs must be at least 1".into()));
    }
    let gamma = cfg.spms_blend_gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_attempts = MAX_ATTEMPTS_PER_PAIR * n_pairs;
    let mut records: Vec<SpmsRecord> = Vec::new();
    let mut attempts = 0;

    while records.len() < n_pairs && attempts < max_attempts {
        let round = ROUND.min(max_attempts - attempts);
        let mut plan = Vec::with_capacity(round);
        let mut reqs = Vec::with_capacity(round);
        for _ in 0..round {
            let id = world.sample_identity(&mut rng);
            let prompt_a = Prompt::sample(&mut rng);
            let prompt_b = loop {
                let p = Prompt::sample(&mut rng);
                if p != prompt_a {
                    break p;
                }
            };
            let source = world.render(&id, prompt_a);
            let emb = world.encode_identity_cond(&source, &prompt_a.face_box().keypoints())?;
            let (control, _) = world.make_control(prompt_b, true);
            reqs.push(GenRequest {
                prompt: Some(prompt_b),
                control: control.pixels,
                id_embedding: emb,
                noise_seed: rng.gen(),
            });
            plan.push(Attempt {
                id_seed: id.seed,
                prompt_a,
                prompt_b,
            });
        }
        let candidates = generate_parallel(base, Some(stage1), &reqs, sampler_steps)?;
        for ((att, req), cand) in plan.into_iter().zip(reqs).zip(candidates) {
            if records.len() == n_pairs {
                break;
            }
            attempts += 1;
            let id = world.identity(att.id_seed);
            let ideal = world.render(&id, att.prompt_b);
            let target = Tensor::new(
                cand.shape().to_vec(),
                cand.data()
                    .iter()
                    .zip(ideal.data())
                    .map(|(c, r)| (1.0 - gamma) * c + gamma * r)
                    .collect(),
            )?;
            let source = world.render(&id, att.prompt_a);
            let kp_a = att.prompt_a.face_box().keypoints();
            let kp_b = att.prompt_b.face_box().keypoints();
            let reference = world.encode_identity_eval(&source, &kp_a)?;
            let Ok(loss) = id_loss(world, &target, &kp_b, &reference) else {
                continue;
            };
            if loss > cfg.spms_filter_tau || world.classify_attributes(&target) != att.prompt_b {
                continue;
            }
            records.push(SpmsRecord {
                record_id: records.len(),
                id_seed: att.id_seed,
                prompt_a: att.prompt_a,
                prompt_b: att.prompt_b,
                source_image: source,
                id_embedding: req.id_embedding,
                target_image: target,
                accepted_id_loss: loss,
                enhancement_gamma: gamma,
            });
        }
    }
    let report = SpmsReport {
        attempts,
        accepted: records.len(),
        mean_id_loss: records.iter().map(|r| r.accepted_id_loss).sum::<f64>()
            / records.len().max(1) as f64,
    };
    if records.len() < n_pairs {
        return Err(InfuError::Synthesis(format!(
            "accepted {} of {} attempts ({:.2}% < {:.0}%), wanted {n_pairs}",
            report.accepted,
            report.attempts,
            100.0 * report.acceptance_rate(),
            100.0 * MIN_ACCEPTANCE
        )));
    }
    Ok((records, report))
}
