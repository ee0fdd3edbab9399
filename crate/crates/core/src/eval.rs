//! Metrics and the held-out benchmark.
//!
//! - ID loss: `1 − cos` between evaluation-encoder embeddings.
//! - `align_proxy`: fraction of prompt attributes recovered by the exact
//!   attribute classifier.
//! - `psnr_proxy`: PSNR against the ideal render of the same identity and
//!   prompt, clamped to `[0, 60]` dB.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use infu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dit::BaseModel;
use crate::error::{invalid, InfuError, Result};
use crate::infusenet::InfuseNet;
use crate::sampling::{generate_parallel, GenRequest};
use crate::toyworld::{cosine, ControlKeypoints, Identity, Prompt, ToyWorld, HELDOUT_SEED_BASE};

pub const PSNR_MAX: f64 = 60.0;
const MSE_FLOOR: f64 = 1e-6;

pub fn id_loss_between(a: &Tensor, b: &Tensor) -> f64 {
    (1.0 - cosine(a, b)).clamp(0.0, 2.0)
}

/// ID loss of a generated image against a reference evaluation embedding.
pub fn id_loss(
    world: &ToyWorld,
    gen: &Tensor,
    keypoints: &ControlKeypoints,
    ref_embedding: &Tensor,
) -> Result<f64> {
    let e = world.encode_identity_eval(gen, keypoints)?;
    if e.len() != ref_embedding.len() {
        return Err(invalid(format!(
            "reference embedding has length {}, expected {}",
            ref_embedding.len(),
            e.len()
        )));
    }
    Ok(id_loss_between(&e, ref_embedding))
}

/// Matched attributes out of three.
pub fn alignment_score(world: &ToyWorld, gen: &Tensor, prompt: Prompt) -> f64 {
    world.classify_attributes(gen).matches(&prompt) as f64 / 3.0
}

pub fn psnr_quality(gen: &Tensor, ideal: &Tensor) -> Result<f64> {
    if gen.shape() != ideal.shape() {
        return Err(invalid(format!(
            "psnr: shapes {:?} and {:?} differ",
            gen.shape(),
            ideal.shape()
        )));
    }
    let mse = gen
        .data()
        .iter()
        .zip(ideal.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gen.len() as f64;
    Ok((10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()).clamp(0.0, PSNR_MAX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id_seed: u64,
    pub prompt: Prompt,
    pub sample: usize,
    /// `None` when the face crop could not be encoded.
    pub id_loss: Option<f64>,
    pub hue_ok: bool,
    pub position_ok: bool,
    pub scale_ok: bool,
    pub psnr: f64,
}

impl MetricsRow {
    pub fn align(&self) -> f64 {
        (u8::from(self.hue_ok) + u8::from(self.position_ok) + u8::from(self.scale_ok)) as f64 / 3.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregates {
    pub mean_id_loss: f64,
    /// Mean `align_proxy` in percent.
    pub alignment_accuracy: f64,
    pub mean_psnr: f64,
    pub invalid: usize,
}

impl Aggregates {
    pub fn from_rows(rows: &[MetricsRow]) -> Self {
        let valid: Vec<f64> = rows.iter().filter_map(|r| r.id_loss).collect();
        let n = rows.len().max(1) as f64;
        Self {
            mean_id_loss: if valid.is_empty() {
                f64::NAN
            } else {
                valid.iter().sum::<f64>() / valid.len() as f64
            },
            alignment_accuracy: 100.0 * rows.iter().map(MetricsRow::align).sum::<f64>() / n,
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            invalid: rows.len() - valid.len(),
        }
    }

    fn matches(&self, other: &Self) -> bool {
        let close =
            |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-9 * (1.0 + a.abs());
        close(self.mean_id_loss, other.mean_id_loss)
            && close(self.alignment_accuracy, other.alignment_accuracy)
            && close(self.mean_psnr, other.mean_psnr)
            && self.invalid == other.invalid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Aggregates,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

pub const REPORT_HEADER: [&str; 12] = [
    "id_seed",
    "bg_hue",
    "position",
    "scale",
    "sample",
    "valid",
    "id_loss",
    "hue_ok",
    "position_ok",
    "scale_ok",
    "align_proxy",
    "psnr_proxy",
];

impl MetricsReport {
    pub fn new(
        rows: Vec<MetricsRow>,
        config_fingerprint: String,
        checkpoint_fingerprint: String,
    ) -> Self {
        let aggregates = Aggregates::from_rows(&rows);
        Self {
            rows,
            aggregates,
            config_fingerprint,
            checkpoint_fingerprint,
        }
    }

    /// Writes `report.csv` (one row per sample) and `summary.txt`
    /// (fingerprints and aggregates) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let flag = |b: bool| if b { "1" } else { "0" }.to_string();
            w.write_record([
                r.id_seed.to_string(),
                r.prompt.bg_hue.to_string(),
                r.prompt.position.to_string(),
                r.prompt.scale.to_string(),
                r.sample.to_string(),
                flag(r.id_loss.is_some()),
                r.id_loss.map_or_else(String::new, |v| v.to_string()),
                flag(r.hue_ok),
                flag(r.position_ok),
                flag(r.scale_ok),
                r.align().to_string(),
                r.psnr.to_string(),
            ])?;
        }
        w.flush()?;
        let a = &self.aggregates;
        let mut s = File::create(dir.join("summary.txt"))?;
        writeln!(s, "config_fingerprint={}", self.config_fingerprint)?;
        writeln!(s, "checkpoint_fingerprint={}", self.checkpoint_fingerprint)?;
        writeln!(s, "rows={}", self.rows.len())?;
        writeln!(s, "invalid={}", a.invalid)?;
        writeln!(s, "mean_id_loss={}", a.mean_id_loss)?;
        writeln!(s, "align_proxy={}", a.alignment_accuracy)?;
        writeln!(s, "psnr_proxy={}", a.mean_psnr)?;
        Ok(())
    }

    /// Reads a report written by [`write`](Self::write) and checks the
    /// stored aggregates against the rows.
    pub fn read(dir: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(dir.join("report.csv"))?;
        if rd.headers()?.iter().collect::<Vec<_>>() != REPORT_HEADER {
            return Err(invalid("report.csv header does not match"));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| invalid(format!("report field {what} = {s:?}")))
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| invalid(format!("report field {what} = {s:?}")))
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let prompt = Prompt::new(
                int(f(1), "bg_hue")? as u8,
                int(f(2), "position")? as u8,
                int(f(3), "scale")? as u8,
            )?;
            let valid = f(5) == "1";
            let row = MetricsRow {
                id_seed: int(f(0), "id_seed")?,
                prompt,
                sample: int(f(4), "sample")? as usize,
                id_loss: if valid {
                    Some(num(f(6), "id_loss")?)
                } else {
                    None
                },
                hue_ok: f(7) == "1",
                position_ok: f(8) == "1",
                scale_ok: f(9) == "1",
                psnr: num(f(11), "psnr_proxy")?,
            };
            if (row.align() - num(f(10), "align_proxy")?).abs() > 1e-12 {
                return Err(invalid("align_proxy column disagrees with attribute flags"));
            }
            rows.push(row);
        }
        let summary = std::fs::read_to_string(dir.join("summary.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for line in BufReader::new(summary.as_bytes()).lines() {
            let line = line?;
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| invalid(format!("summary is missing {k}")))
        };
        let stored = Aggregates {
            mean_id_loss: num(&get("mean_id_loss")?, "mean_id_loss")?,
            alignment_accuracy: num(&get("align_proxy")?, "align_proxy")?,
            mean_psnr: num(&get("psnr_proxy")?, "psnr_proxy")?,
            invalid: int(&get("invalid")?, "invalid")? as usize,
        };
        if int(&get("rows")?, "rows")? as usize != rows.len() {
            return Err(invalid("summary row count disagrees with report.csv"));
        }
        let report = Self::new(
            rows,
            get("config_fingerprint")?,
            get("checkpoint_fingerprint")?,
        );
        if !report.aggregates.matches(&stored) {
            return Err(invalid("summary aggregates disagree with report rows"));
        }
        Ok(report)
    }

    /// Fixed-format summary table.
    pub fn summary_table(&self) -> String {
        let a = &self.aggregates;
        format!(
            "{:<14}{:>10}\n{:<14}{:>10}\n{:<14}{:>10.4}\n{:<14}{:>10.2}\n{:<14}{:>10.2}\n",
            "rows",
            self.rows.len(),
            "invalid",
            a.invalid,
            "id_loss",
            a.mean_id_loss,
            "align_proxy",
            a.alignment_accuracy,
            "psnr_proxy",
            a.mean_psnr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub identities: usize,
    pub samples_per_cell: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            identities: 15,
            samples_per_cell: 2,
            sampler_steps: 32,
            seed: 0,
        }
    }
}

/// One benchmark identity: held-out seed and a fixed source image whose
/// conditioning embedding drives generation for every prompt.
#[derive(Clone, Debug)]
pub struct BenchIdentity {
    pub identity: Identity,
    pub source_prompt: Prompt,
    pub cond_embedding: Tensor,
    pub eval_embedding: Tensor,
}

pub fn benchmark_identities(world: &ToyWorld, n: usize, seed: u64) -> Result<Vec<BenchIdentity>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64);
    (0..n)
        .map(|_| {
            let identity = world.sample_heldout_identity(&mut rng);
            let source_prompt = Prompt::sample(&mut rng);
            let source = world.render(&identity, source_prompt);
            let kp = source_prompt.face_box().keypoints();
            Ok(BenchIdentity {
                cond_embedding: world.encode_identity_cond(&source, &kp)?,
                eval_embedding: world.encode_identity_eval(&source, &kp)?,
                identity,
                source_prompt,
            })
        })
        .collect()
}

/// Generates every (identity, prompt, sample) cell with keypoint control and
/// scores it. `net = None` benchmarks the base alone.
pub fn run_benchmark(
    world: &ToyWorld,
    base: &BaseModel,
    net: Option<&InfuseNet>,
    bench: &BenchmarkConfig,
    config_fingerprint: String,
    checkpoint_fingerprint: String,
) -> Result<MetricsReport> {
    if let Some(n) = net {
        if n.cfg() != base.cfg() {
            return Err(InfuError::Config(
                "checkpoint config does not match the base".into(),
            ));
        }
    }
    if base.cfg().id_dim != world.config().id_dim {
        return Err(InfuError::Config(format!(
            "model id_dim {} differs from world id_dim {}",
            base.cfg().id_dim,
            world.config().id_dim
        )));
    }
    let ids = benchmark_identities(world, bench.identities, bench.seed)?;
    if ids.iter().any(|b| b.identity.seed < HELDOUT_SEED_BASE) {
        return Err(invalid("benchmark identity drawn from the training range"));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(bench.seed);
    let mut cells = Vec::new();
    let mut reqs = Vec::new();
    for (k, b) in ids.iter().enumerate() {
        for prompt in Prompt::grid() {
            let (control, kp) = world.make_control(prompt, true);
            for s in 0..bench.samples_per_cell {
                cells.push((k, prompt, s, kp));
                reqs.push(GenRequest {
                    prompt: Some(prompt),
                    control: control.pixels.clone(),
                    id_embedding: b.cond_embedding.clone(),
                    noise_seed: noise.gen(),
                });
            }
        }
    }
    let images = generate_parallel(base, net, &reqs, bench.sampler_steps)?;
    let mut rows = Vec::with_capacity(images.len());
    for ((k, prompt, sample, kp), gen) in cells.into_iter().zip(&images) {
        let b = &ids[k];
        let predicted = world.classify_attributes(gen);
        let ideal = world.render(&b.identity, prompt);
        rows.push(MetricsRow {
            id_seed: b.identity.seed,
            prompt,
            sample,
            id_loss: id_loss(world, gen, &kp, &b.eval_embedding).ok(),
            hue_ok: predicted.bg_hue == prompt.bg_hue,
            position_ok: predicted.position == prompt.position,
            scale_ok: predicted.scale == prompt.scale,
            psnr: psnr_quality(gen, &ideal)?,
        });
    }
    Ok(MetricsReport::new(
        rows,
        config_fingerprint,
        checkpoint_fingerprint,
    ))
}
