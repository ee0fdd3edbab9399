//! Image generation with the Euler sampler, batched over requests.

use infu_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::dit::{to_image_space, BaseModel};
use crate::error::{invalid, Result};
use crate::flow::{euler_sample, standard_normal};
use crate::infusenet::{infu_velocity_batch, Conditioning, InfuseNet};
use crate::toyworld::Prompt;

/// Requests per graph when generating in parallel.
pub const GENERATION_CHUNK: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub prompt: Option<Prompt>,
    /// Control image `[C×H×W]` in `[0, 1]`.
    pub control: Tensor,
    pub id_embedding: Tensor,
    pub noise_seed: u64,
}

/// Starting noise `z_1` for a seed.
pub fn initial_noise(seed: u64, cfg: &ModelConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&cfg.image_shape(), &mut rng)
}

/// Samples one image per request in a single batched graph per Euler
/// step. Without a branch only prompts and noise seeds matter. Outputs are
/// in pixel space, clamped to `[0, 1]`.
pub fn generate(
    base: &BaseModel,
    net: Option<&InfuseNet>,
    reqs: &[GenRequest],
    steps: usize,
) -> Result<Vec<Tensor>> {
    let cfg = base.cfg();
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let n = reqs.len();
    let img_len = cfg.image_len();
    let mut z1 = Vec::with_capacity(n * img_len);
    for r in reqs {
        z1.extend(initial_noise(r.noise_seed, cfg).into_data());
    }
    let z1 = Tensor::new([n, img_len], z1)?;
    let prompts: Vec<Option<Prompt>> = reqs.iter().map(|r| r.prompt).collect();
    let controls: Vec<Tensor> = reqs.iter().map(|r| r.control.clone()).collect();
    let embeddings: Vec<Tensor> = reqs.iter().map(|r| r.id_embedding.clone()).collect();
    let split = |z: &Tensor| -> Result<Vec<Tensor>> {
        z.data()
            .chunks_exact(img_len)
            .map(|c| Ok(Tensor::new(cfg.image_shape(), c.to_vec())?))
            .collect()
    };
    let out = euler_sample(
        |z, t| {
            let states = split(z)?;
            let ts = vec![t; n];
            let v = match net {
                None => base.forward_batch(&states, &ts, &prompts, None)?,
                Some(net) => {
                    let cond = Conditioning {
                        ts: &ts,
                        prompts: &prompts,
                        controls: &controls,
                        id_embeddings: &embeddings,
                    };
                    infu_velocity_batch(base, net, &states, &cond)?
                }
            };
            let data: Vec<f64> = v.into_iter().flat_map(Tensor::into_data).collect();
            Ok(Tensor::new([n, img_len], data)?)
        },
        z1,
        steps,
    )?;
    split(&out)?
        .iter()
        .map(|x| Ok(to_image_space(x).map(|v| v.clamp(0.0, 1.0))))
        .collect()
}

/// [`generate`] over fixed-size chunks on the rayon pool. Chunking is
/// independent of the thread count, so results are too.
pub fn generate_parallel(
    base: &BaseModel,
    net: Option<&InfuseNet>,
    reqs: &[GenRequest],
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(invalid("sampler needs at least one step"));
    }
    let chunks: Vec<Result<Vec<Tensor>>> = reqs
        .par_chunks(GENERATION_CHUNK)
        .map(|c| generate(base, net, c, steps))
        .collect();
    let mut out = Vec::with_capacity(reqs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
