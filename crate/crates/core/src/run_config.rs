//! Run configuration: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Every key has a default; unknown sections and keys
//! are rejected. [`RunConfig::to_text`] writes the fully resolved config,
//! which parses back to the same value.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{InfuError, Result};
use crate::eval::BenchmarkConfig;
use crate::toyworld::WorldConfig;
use crate::training::{Stage, StageConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub n_pairs: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub spms_filter_tau: f64,
    pub spms_blend_gamma: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_pairs: 512,
            sampler_steps: 32,
            seed: 0,
            spms_filter_tau: 0.3,
            spms_blend_gamma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    /// Seed of the fresh base and branch parameters.
    pub init_seed: u64,
    pub base: StageConfig,
    pub spss: StageConfig,
    pub synthesis: SynthesisConfig,
    pub sft: StageConfig,
    pub eval: BenchmarkConfig,
    pub output_dir: PathBuf,
    /// Single-threaded, bit-reproducible execution.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            init_seed: 0,
            base: StageConfig::defaults(Stage::Base),
            spss: StageConfig::defaults(Stage::Spss),
            synthesis: SynthesisConfig::default(),
            sft: StageConfig::defaults(Stage::Sft),
            eval: BenchmarkConfig::default(),
            output_dir: PathBuf::from("out"),
            deterministic: true,
        }
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| InfuError::Config(format!("[{section}] {key} = {value:?} is malformed")))
}

fn set_stage(cfg: &mut StageConfig, section: &str, key: &str, v: &str) -> Result<bool> {
    match key {
        "steps" => cfg.steps = parse_value(section, key, v)?,
        "batch_size" => cfg.batch_size = parse_value(section, key, v)?,
        "lr" => cfg.lr = parse_value(section, key, v)?,
        "seed" => cfg.seed = parse_value(section, key, v)?,
        "prompt_dropout" => cfg.prompt_dropout = parse_value(section, key, v)?,
        "control_dropout" => cfg.control_dropout = parse_value(section, key, v)?,
        "grad_clip" => cfg.grad_clip = parse_value(section, key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_stage(out: &mut String, name: &str, s: &StageConfig) {
    let _ = writeln!(out, "\n[{name}]");
    let _ = writeln!(out, "steps = {}", s.steps);
    let _ = writeln!(out, "batch_size = {}", s.batch_size);
    let _ = writeln!(out, "lr = {}", s.lr);
    let _ = writeln!(out, "seed = {}", s.seed);
    let _ = writeln!(out, "prompt_dropout = {}", s.prompt_dropout);
    let _ = writeln!(out, "control_dropout = {}", s.control_dropout);
    let _ = writeln!(out, "grad_clip = {}", s.grad_clip);
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| InfuError::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if ![
                    "world",
                    "model",
                    "base",
                    "spss",
                    "synthesis",
                    "sft",
                    "eval",
                    "run",
                ]
                .contains(&section.as_str())
                {
                    return Err(at(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(at(format!("key {key} outside any section")));
            }
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(at(format!("[{section}] {key} set twice")));
            }
            let s = section.as_str();
            let known = match s {
                "world" => {
                    let w = &mut cfg.world;
                    match key {
                        "id_dim" => w.id_dim = parse_value(s, key, v)?,
                        "eval_dim" => w.eval_dim = parse_value(s, key, v)?,
                        "glyph_seed" => w.glyph_seed = parse_value(s, key, v)?,
                        "cond_encoder_seed" => w.cond_encoder_seed = parse_value(s, key, v)?,
                        "eval_encoder_seed" => w.eval_encoder_seed = parse_value(s, key, v)?,
                        _ => return Err(at(format!("unknown key {key} in [world]"))),
                    }
                    true
                }
                "model" => {
                    let m = &mut cfg.model;
                    match key {
                        "image_size" => m.image_size = parse_value(s, key, v)?,
                        "channels" => m.channels = parse_value(s, key, v)?,
                        "patch_size" => m.patch_size = parse_value(s, key, v)?,
                        "token_dim" => m.token_dim = parse_value(s, key, v)?,
                        "heads" => m.heads = parse_value(s, key, v)?,
                        "mlp_ratio" => m.mlp_ratio = parse_value(s, key, v)?,
                        "base_blocks" => m.base_blocks = parse_value(s, key, v)?,
                        "text_tokens" => m.text_tokens = parse_value(s, key, v)?,
                        "infuse_blocks" => m.infuse_blocks = parse_value(s, key, v)?,
                        "factor" => m.factor = parse_value(s, key, v)?,
                        "id_tokens" => m.id_tokens = parse_value(s, key, v)?,
                        "id_dim" => m.id_dim = parse_value(s, key, v)?,
                        "shared_residual_heads" => {
                            m.shared_residual_heads = parse_value(s, key, v)?
                        }
                        "residual_scale" => m.residual_scale = parse_value(s, key, v)?,
                        "init_seed" => cfg.init_seed = parse_value(s, key, v)?,
                        _ => return Err(at(format!("unknown key {key} in [model]"))),
                    }
                    true
                }
                "base" => set_stage(&mut cfg.base, s, key, v)?,
                "spss" => set_stage(&mut cfg.spss, s, key, v)?,
                "sft" => match key {
                    "no_sft" => {
                        cfg.sft.no_sft = parse_value(s, key, v)?;
                        true
                    }
                    "spss_synthetic_sft" => {
                        cfg.sft.spss_synthetic_sft = parse_value(s, key, v)?;
                        true
                    }
                    _ => set_stage(&mut cfg.sft, s, key, v)?,
                },
                "synthesis" => {
                    let y = &mut cfg.synthesis;
                    match key {
                        "n_pairs" => y.n_pairs = parse_value(s, key, v)?,
                        "sampler_steps" => y.sampler_steps = parse_value(s, key, v)?,
                        "seed" => y.seed = parse_value(s, key, v)?,
                        "spms_filter_tau" => y.spms_filter_tau = parse_value(s, key, v)?,
                        "spms_blend_gamma" => y.spms_blend_gamma = parse_value(s, key, v)?,
                        _ => return Err(at(format!("unknown key {key} in [synthesis]"))),
                    }
                    true
                }
                "eval" => {
                    let e = &mut cfg.eval;
                    match key {
                        "identities" => e.identities = parse_value(s, key, v)?,
                        "samples_per_cell" => e.samples_per_cell = parse_value(s, key, v)?,
                        "sampler_steps" => e.sampler_steps = parse_value(s, key, v)?,
                        "seed" => e.seed = parse_value(s, key, v)?,
                        _ => return Err(at(format!("unknown key {key} in [eval]"))),
                    }
                    true
                }
                "run" => {
                    match key {
                        "output_dir" => cfg.output_dir = PathBuf::from(v),
                        "deterministic" => cfg.deterministic = parse_value(s, key, v)?,
                        _ => return Err(at(format!("unknown key {key} in [run]"))),
                    }
                    true
                }
                _ => unreachable!(),
            };
            if !known {
                return Err(at(format!("unknown key {key} in [{section}]")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        if self.model.id_dim != self.world.id_dim {
            return Err(InfuError::Config(format!(
                "model id_dim {} differs from world id_dim {}",
                self.model.id_dim, self.world.id_dim
            )));
        }
        if self.model.image_size != crate::toyworld::IMAGE_SIZE
            || self.model.channels != crate::toyworld::CHANNELS
        {
            return Err(InfuError::Config(
                "the toy world renders 3×16×16 images".into(),
            ));
        }
        self.base.validate()?;
        self.spss.validate()?;
        self.sft.validate()?;
        self.synthesis_stage().validate()?;
        let y = &self.synthesis;
        if y.n_pairs == 0 || y.sampler_steps == 0 {
            return Err(InfuError::Config(
                "synthesis n_pairs and sampler_steps must be positive".into(),
            ));
        }
        let e = &self.eval;
        if e.identities == 0 || e.samples_per_cell == 0 || e.sampler_steps == 0 {
            return Err(InfuError::Config(
                "eval identities, samples_per_cell and sampler_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stage settings used by SPMS synthesis (filter and blend).
    pub fn synthesis_stage(&self) -> StageConfig {
        StageConfig {
            seed: self.synthesis.seed,
            spms_filter_tau: self.synthesis.spms_filter_tau,
            spms_blend_gamma: self.synthesis.spms_blend_gamma,
            ..self.sft.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &self.world;
        let _ = writeln!(out, "[world]");
        let _ = writeln!(out, "id_dim = {}", w.id_dim);
        let _ = writeln!(out, "eval_dim = {}", w.eval_dim);
        let _ = writeln!(out, "glyph_seed = {}", w.glyph_seed);
        let _ = writeln!(out, "cond_encoder_seed = {}", w.cond_encoder_seed);
        let _ = writeln!(out, "eval_encoder_seed = {}", w.eval_encoder_seed);
        let m = &self.model;
        let _ = writeln!(out, "\n[model]");
        for (k, v) in [
            ("image_size", m.image_size),
            ("channels", m.channels),
            ("patch_size", m.patch_size),
            ("token_dim", m.token_dim),
            ("heads", m.heads),
            ("mlp_ratio", m.mlp_ratio),
            ("base_blocks", m.base_blocks),
            ("text_tokens", m.text_tokens),
            ("infuse_blocks", m.infuse_blocks),
            ("factor", m.factor),
            ("id_tokens", m.id_tokens),
            ("id_dim", m.id_dim),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "shared_residual_heads = {}", m.shared_residual_heads);
        let _ = writeln!(out, "residual_scale = {}", m.residual_scale);
        let _ = writeln!(out, "init_seed = {}", self.init_seed);
        write_stage(&mut out, "base", &self.base);
        write_stage(&mut out, "spss", &self.spss);
        let y = &self.synthesis;
        let _ = writeln!(out, "\n[synthesis]");
        let _ = writeln!(out, "n_pairs = {}", y.n_pairs);
        let _ = writeln!(out, "sampler_steps = {}", y.sampler_steps);
        let _ = writeln!(out, "seed = {}", y.seed);
        let _ = writeln!(out, "spms_filter_tau = {}", y.spms_filter_tau);
        let _ = writeln!(out, "spms_blend_gamma = {}", y.spms_blend_gamma);
        write_stage(&mut out, "sft", &self.sft);
        let _ = writeln!(out, "no_sft = {}", self.sft.no_sft);
        let _ = writeln!(out, "spss_synthetic_sft = {}", self.sft.spss_synthetic_sft);
        let e = &self.eval;
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "identities = {}", e.identities);
        let _ = writeln!(out, "samples_per_cell = {}", e.samples_per_cell);
        let _ = writeln!(out, "sampler_steps = {}", e.sampler_steps);
        let _ = writeln!(out, "seed = {}", e.seed);
        let _ = writeln!(out, "\n[run]");
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        out
    }

    /// CRC-32 of the resolved config text, as 8 hex digits.
    pub fn fingerprint(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }
}
