//! Built-in consistency checks run by `infu selftest`: finite-difference
//! gradient checks, the Gaussian velocity closed form against numerical
//! integration, residual-map coverage and zero-init identity.

use infu_tensor::gradcheck::{check_gradients, GradCheckOptions};
use infu_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::dit::{init_base, BaseModel};
use crate::error::Result;
use crate::flow::gaussian_marginal_velocity_1d;
use crate::infusenet::{infu_graph, infu_velocity, residual_map, Conditioning, InfuseNet};
use crate::nn::{patches, stack_rows};
use crate::params::{Binder, ParamStore};
use crate::toyworld::{ControlImage, Prompt};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// A model small enough to finite-difference every parameter.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        channels: 3,
        patch_size: 2,
        token_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        base_blocks: 2,
        text_tokens: 2,
        infuse_blocks: 1,
        factor: 2,
        id_tokens: 2,
        id_dim: 4,
        ..ModelConfig::default()
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Adds N(0, std²) noise to every tensor so zero-initialized heads and
/// output layers carry gradient signal.
pub fn perturb(store: &ParamStore, std: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Finite-difference check of the full base + branch velocity loss with
/// respect to every parameter, on [`tiny_config`] with perturbed weights.
pub fn composed_gradcheck(seed: u64) -> Result<f64> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_base(seed, &cfg)?;
    let net = InfuseNet::init(seed + 1, &cfg, Some(&base))?;
    let base_params = perturb(base.params(), 0.3, &mut rng);
    let net_params = perturb(net.params(), 0.3, &mut rng);

    let batch = 2;
    let ts = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
    let prompts = [
        Some(Prompt::from_index(rng.gen_range(0..Prompt::COUNT))),
        None,
    ];
    let controls: Vec<Tensor> = (0..batch)
        .map(|_| Tensor::from_fn(cfg.image_shape().to_vec(), |_| rng.gen_range(0.0..1.0)))
        .collect();
    let ids: Vec<Tensor> = (0..batch)
        .map(|_| normal(&mut rng, &[cfg.id_dim], 1.0))
        .collect();
    let z: Vec<Tensor> = (0..batch)
        .map(|_| patches(&normal(&mut rng, &cfg.image_shape(), 1.0), &cfg))
        .collect::<Result<_>>()?;
    let z = stack_rows(&z)?;
    let target = normal(&mut rng, z.shape(), 1.0);

    let base_names: Vec<String> = base_params.names().cloned().collect();
    let net_names: Vec<String> = net_params.names().cloned().collect();
    let inputs: Vec<Tensor> = base_params
        .iter()
        .chain(net_params.iter())
        .map(|(_, t)| t.clone())
        .collect();
    let report = check_gradients(
        &inputs,
        GradCheckOptions::default(),
        |g: &mut Graph, vars: &[Var]| {
            let (bv, nv) = vars.split_at(base_names.len());
            let mut bb = Binder::with_bound(
                &base_params,
                true,
                base_names.iter().cloned().zip(bv.iter().copied()),
            );
            let mut nb = Binder::with_bound(
                &net_params,
                true,
                net_names.iter().cloned().zip(nv.iter().copied()),
            );
            let zp = g.constant(z.clone());
            let tv = g.constant(target.clone());
            let cond = Conditioning {
                ts: &ts,
                prompts: &prompts,
                controls: &controls,
                id_embeddings: &ids,
            };
            let v = infu_graph(g, &mut bb, &mut nb, &cfg, zp, &cond).map_err(to_tensor_error)?;
            let d = g.sub(v, tv)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq))
        },
    )?;
    Ok(report.max_rel_err)
}

fn to_tensor_error(e: crate::InfuError) -> infu_tensor::TensorError {
    match e {
        crate::InfuError::Tensor(t) => t,
        other => infu_tensor::TensorError::OutOfRange {
            op: "model",
            detail: other.to_string(),
        },
    }
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Graph, &[Var]) -> infu_tensor::Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("add", vec![vec![3, 2], vec![3, 2]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub", vec![vec![3, 2], vec![3, 2]], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul", vec![vec![3, 2], vec![3, 2]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![5]], |g, v| {
            Ok(g.add_scalar(v[0], 0.3))
        }),
        ("add_bias", vec![vec![4, 3], vec![3]], |g, v| {
            g.add_bias(v[0], v[1])
        }),
        ("group_mul", vec![vec![6, 3], vec![2, 3]], |g, v| {
            g.group_mul(v[0], v[1], 3)
        }),
        ("group_add", vec![vec![6, 3], vec![2, 3]], |g, v| {
            g.group_add(v[0], v[1], 3)
        }),
        ("softmax_rows", vec![vec![3, 5]], |g, v| {
            Ok(g.softmax_rows(v[0]))
        }),
        ("rms_norm", vec![vec![3, 4], vec![4]], |g, v| {
            g.rms_norm(v[0], v[1])
        }),
        ("gelu", vec![vec![7]], |g, v| Ok(g.gelu(v[0]))),
        (
            "attention",
            vec![vec![6, 4], vec![8, 4], vec![8, 4]],
            |g, v| g.attention(v[0], v[1], v[2], 2, 2),
        ),
        ("concat_seq", vec![vec![4, 3], vec![6, 3]], |g, v| {
            g.concat_seq(v[0], v[1], 2)
        }),
        ("slice_seq", vec![vec![8, 3]], |g, v| {
            g.slice_seq(v[0], 2, 1, 2)
        }),
        ("slice_cols", vec![vec![4, 6]], |g, v| {
            g.slice_cols(v[0], 2, 3)
        }),
        ("gather_rows", vec![vec![5, 3]], |g, v| {
            g.gather_rows(v[0], &[4, 0, 4, 2])
        }),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], [3, 4])),
        ("mean", vec![vec![2, 6]], |g, v| Ok(g.mean(v[0]))),
    ]
}

/// Worst relative error per op over `seeds` random draws. Each output is
/// contracted against a fixed random weighting before the check.
pub fn op_gradchecks(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::from_fn(s.clone(), |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let report = check_gradients(&inputs, GradCheckOptions::default(), |g, v| {
                let y = f(g, v)?;
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let w = Tensor::from_fn(g.value(y).shape().to_vec(), |_| wr.gen_range(-1.0..1.0));
                let w = g.constant(w);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            })?;
            worst = worst.max(report.max_rel_err);
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// E[ε − x0 | z_t = z] for x0 ~ N(μ, σ²) by trapezoidal integration over x0.
pub fn gaussian_velocity_by_quadrature(z: f64, t: f64, mu: f64, sigma: f64) -> f64 {
    let n = 8000;
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let x0 = lo + k as f64 * h;
        let eps = (z - (1.0 - t) * x0) / t;
        let w = (-0.5 * ((x0 - mu) / sigma).powi(2) - 0.5 * eps * eps).exp();
        let w = if k == 0 || k == n { 0.5 * w } else { w };
        num += w * (eps - x0);
        den += w;
    }
    num / den
}

fn gaussian_check() -> Result<Check> {
    let (mu, sigma) = (0.5, 0.8);
    let mut sq = 0.0;
    let mut count = 0;
    for ti in 0..10 {
        let t = 0.05 + 0.1 * ti as f64;
        for zi in 0..25 {
            let z = -3.0 * sigma + 6.0 * sigma * zi as f64 / 24.0;
            let d = gaussian_marginal_velocity_1d(z, t, mu, sigma)?
                - gaussian_velocity_by_quadrature(z, t, mu, sigma);
            sq += d * d;
            count += 1;
        }
    }
    let rmse = (sq / count as f64).sqrt();
    Ok(Check::new(
        "gaussian-oracle",
        rmse < 1e-6,
        format!("rmse {rmse:.2e}"),
    ))
}

fn residual_map_check() -> Check {
    for factor in 1..=64 {
        for n in 1..=64 / factor {
            let m = n * factor;
            let mut seen = vec![0usize; m + 1];
            for j in 1..=n {
                match residual_map(j, factor, m) {
                    Ok(ks) => ks.iter().for_each(|&k| seen[k] += 1),
                    Err(e) => {
                        return Check::new("residual-map", false, format!("N={n} i={factor}: {e}"))
                    }
                }
            }
            if seen[0] != 0 || seen[1..].iter().any(|&c| c != 1) {
                return Check::new(
                    "residual-map",
                    false,
                    format!("N={n} i={factor} is not a partition"),
                );
            }
        }
    }
    Check::new("residual-map", true, "all (N, i) with N*i <= 64")
}

fn zero_init_check(trials: usize) -> Result<Check> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let fresh = init_base(3, &cfg)?;
    // A fresh base predicts zero velocity; perturb it so the comparison is
    // not vacuous.
    let base = BaseModel::from_params(&cfg, perturb(fresh.params(), 0.2, &mut rng))?;
    let net = InfuseNet::init(4, &cfg, Some(&base))?;
    for trial in 0..trials {
        let z = normal(&mut rng, &cfg.image_shape(), 1.0);
        let t = rng.gen_range(0.0..1.0);
        let prompt = Some(Prompt::from_index(rng.gen_range(0..Prompt::COUNT)));
        let control = ControlImage {
            pixels: Tensor::from_fn(cfg.image_shape().to_vec(), |_| rng.gen_range(0.0..1.0)),
        };
        let id = normal(&mut rng, &[cfg.id_dim], 1.0);
        let with = infu_velocity(&base, &net, &z, t, prompt, &control, &id)?;
        let without = base.velocity(&z, t, prompt, None)?;
        if !with.bit_eq(&without) {
            return Ok(Check::new(
                "zero-init",
                false,
                format!("trial {trial} differs"),
            ));
        }
    }
    Ok(Check::new(
        "zero-init",
        true,
        format!("{trials} trials bit-identical"),
    ))
}

/// Runs every suite. Errors inside a suite are reported as failed checks.
pub fn run_all(seeds: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    match op_gradchecks(seeds) {
        Ok(ops) => {
            for (name, err) in ops {
                checks.push(Check::new(
                    format!("gradcheck-op/{name}"),
                    err < OP_TOLERANCE,
                    format!("max rel err {err:.2e}"),
                ));
            }
        }
        Err(e) => checks.push(Check::new("gradcheck-op", false, e.to_string())),
    }
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..seeds {
        match composed_gradcheck(seed) {
            Ok(err) => worst = worst.max(err),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    checks.push(match failure {
        Some(e) => Check::new("gradcheck-composed", false, e),
        None => Check::new(
            "gradcheck-composed",
            worst < COMPOSED_TOLERANCE,
            format!("max rel err {worst:.2e}"),
        ),
    });
    checks.push(
        gaussian_check().unwrap_or_else(|e| Check::new("gaussian-oracle", false, e.to_string())),
    );
    checks.push(residual_map_check());
    checks.push(
        zero_init_check(20).unwrap_or_else(|e| Check::new("zero-init", false, e.to_string())),
    );
    checks
}
