use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use infu_core::dit::{init_base, BaseModel};
use infu_core::eval::run_benchmark;
use infu_core::infusenet::InfuseNet;
use infu_core::io::checkpoint::{fingerprint, read_checkpoint, write_checkpoint};
use infu_core::io::manifests::{read_spms_dataset, write_spms_dataset};
use infu_core::io::ppm::write_ppm;
use infu_core::run_config::RunConfig;
use infu_core::sampling::{generate, GenRequest};
use infu_core::toyworld::{Prompt, ToyWorld};
use infu_core::training::{
    pretrain_base as train_base, pretrain_spss, sft_spms, spms::synthesize_spms, TrainLog,
};
use infu_core::{selftest as checks, InfuError, ParamStore};

use crate::Common;

pub const FRESH_INIT: &str = "fresh-init";

#[derive(Debug)]
pub struct CliError {
    code: u8,
    reason: String,
}

impl CliError {
    pub fn usage(reason: impl Into<String>) -> Self {
        Self {
            code: 1,
            reason: reason.into(),
        }
    }

    pub fn validation(reason: impl Into<String>) -> Self {
        Self {
            code: 2,
            reason: reason.into(),
        }
    }

    pub fn runtime(reason: impl Into<String>) -> Self {
        Self {
            code: 3,
            reason: reason.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            1 => "usage",
            2 => "validation",
            _ => "runtime",
        }
    }

    pub fn report(&self) -> ExitCode {
        let reason = self.reason.replace(['\n', '\r'], " ").replace('"', "'");
        eprintln!(
            "infu: error code={} kind={} reason=\"{reason}\"",
            self.code,
            self.kind()
        );
        ExitCode::from(self.code)
    }
}

impl From<InfuError> for CliError {
    fn from(e: InfuError) -> Self {
        if e.is_validation() {
            Self::validation(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        CliError::validation(format!(
            "cannot read config {}: {e}",
            common.config.display()
        ))
    })?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    configure_threads(&cfg);
    Ok(cfg)
}

/// `INFU_THREADS` caps the worker count; deterministic mode defaults to one
/// worker. Results do not depend on the worker count either way.
fn configure_threads(cfg: &RunConfig) {
    let env = std::env::var("INFU_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let threads = match env {
        Some(n) => n.max(1),
        None if cfg.deterministic => 1,
        None => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

fn world_of(cfg: &RunConfig) -> CliResult<ToyWorld> {
    Ok(ToyWorld::new(cfg.world.clone())?)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Writes the resolved config, preceded by `# key = value` provenance lines.
/// The file parses as a config, so a run can be repeated from it.
fn write_echo(path: &Path, cfg: &RunConfig, meta: &[(&str, String)]) -> CliResult {
    let mut text = String::new();
    for (k, v) in meta {
        let _ = writeln!(text, "# {k} = {v}");
    }
    text.push_str(&cfg.to_text());
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    cfg: &RunConfig,
    stage: &str,
    steps: usize,
    seed: u64,
) -> CliResult {
    ensure_parent(path)?;
    write_checkpoint(path, store)?;
    write_echo(
        &sidecar(path),
        cfg,
        &[
            ("stage", stage.to_string()),
            ("steps", steps.to_string()),
            ("seed", seed.to_string()),
            ("init_seed", cfg.init_seed.to_string()),
            ("checkpoint", fingerprint(store)?),
        ],
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Reads a checkpoint and, when present, checks its config snapshot against
/// the current model and world.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<ParamStore> {
    if !path.exists() {
        return Err(CliError::validation(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let store = read_checkpoint(path)?;
    let snap = sidecar(path);
    if snap.exists() {
        let text = std::fs::read_to_string(&snap)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", snap.display())))?;
        let saved = RunConfig::parse(&text).map_err(|e| {
            CliError::validation(format!("checkpoint config {}: {e}", snap.display()))
        })?;
        if saved.model != cfg.model {
            return Err(CliError::validation(format!(
                "checkpoint {} was trained with a different [model] section",
                path.display()
            )));
        }
        if saved.world != cfg.world {
            return Err(CliError::validation(format!(
                "checkpoint {} was trained with a different [world] section",
                path.display()
            )));
        }
    }
    Ok(store)
}

fn branch_seed(cfg: &RunConfig) -> u64 {
    cfg.init_seed.wrapping_add(1)
}

/// Splits a checkpoint into the base and, if present, the branch.
fn models_from(store: &ParamStore, cfg: &RunConfig) -> CliResult<(BaseModel, Option<InfuseNet>)> {
    let base_params = store.subset("base.");
    if base_params.is_empty() {
        return Err(CliError::validation("checkpoint holds no base.* tensors"));
    }
    let base = BaseModel::from_params(&cfg.model, base_params)?;
    let mut branch = store.subset("infusenet.");
    if branch.is_empty() {
        return Ok((base, None));
    }
    branch.merge(store.subset("proj."));
    let net = InfuseNet::from_params(&cfg.model, branch)?;
    Ok((base, Some(net)))
}

fn full_store(base: &BaseModel, net: &InfuseNet) -> ParamStore {
    let mut store = base.params().clone();
    store.merge(net.params().clone());
    store
}

fn progress_printer(label: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    let start = Instant::now();
    move |step, loss| {
        if (step + 1) % every == 0 || step + 1 == total {
            eprintln!(
                "{label} step {}/{total} loss {loss:.5} elapsed {:.1}s",
                step + 1,
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn summarize(label: &str, log: &TrainLog) {
    let n = log.losses.len();
    if n > 0 {
        let w = (n / 10).max(1);
        println!(
            "{label}: {n} steps, median loss first {w} {:.5}, last {w} {:.5}",
            log.median(0..w),
            log.median(n - w..n)
        );
    }
}

fn out_or(out: Option<PathBuf>, cfg: &RunConfig, default: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(default))
}

pub fn pretrain_base(common: &Common, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.base.seed = s;
    }
    let world = world_of(&cfg)?;
    let out = out_or(out, &cfg, "base.infu");
    let mut progress = progress_printer("pretrain-base", cfg.base.steps);
    let (base, log) = train_base(&world, &cfg.model, cfg.init_seed, &cfg.base, &mut progress)?;
    summarize("pretrain-base", &log);
    save_checkpoint(
        &out,
        base.params(),
        &cfg,
        "base",
        cfg.base.steps,
        cfg.base.seed,
    )
}

pub fn pretrain(common: &Common, ckpt: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.spss.seed = s;
    }
    let world = world_of(&cfg)?;
    let ckpt = out_or(ckpt, &cfg, "base.infu");
    let (base, _) = models_from(&load_checkpoint(&ckpt, &cfg)?, &cfg)?;
    let net = InfuseNet::init(branch_seed(&cfg), &cfg.model, Some(&base))?;
    let out = out_or(out, &cfg, "stage1.infu");
    let mut progress = progress_printer("pretrain", cfg.spss.steps);
    let (net, log) = pretrain_spss(&world, &base, net, &cfg.spss, &mut progress)?;
    summarize("pretrain", &log);
    save_checkpoint(
        &out,
        &full_store(&base, &net),
        &cfg,
        "spss",
        cfg.spss.steps,
        cfg.spss.seed,
    )
}

fn require_branch(net: Option<InfuseNet>, ckpt: &Path) -> CliResult<InfuseNet> {
    net.ok_or_else(|| {
        CliError::validation(format!(
            "checkpoint {} holds no identity branch",
            ckpt.display()
        ))
    })
}

pub fn synthesize(common: &Common, ckpt: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.synthesis.seed = s;
    }
    let world = world_of(&cfg)?;
    let ckpt = out_or(ckpt, &cfg, "stage1.infu");
    let (base, net) = models_from(&load_checkpoint(&ckpt, &cfg)?, &cfg)?;
    let net = require_branch(net, &ckpt)?;
    let out = out_or(out, &cfg, "spms");
    let (records, report) = synthesize_spms(
        &world,
        &base,
        &net,
        cfg.synthesis.n_pairs,
        cfg.synthesis.sampler_steps,
        &cfg.synthesis_stage(),
    )?;
    write_spms_dataset(&out, &records, &report)?;
    write_echo(
        &out.join("config.cfg"),
        &cfg,
        &[("source_checkpoint", ckpt.display().to_string())],
    )?;
    println!(
        "synthesized {} records from {} attempts (acceptance {:.1}%, mean id_loss {:.4}) into {}",
        report.accepted,
        report.attempts,
        100.0 * report.acceptance_rate(),
        report.mean_id_loss,
        out.display()
    );
    Ok(())
}

pub fn sft(
    common: &Common,
    ckpt: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.sft.seed = s;
    }
    let world = world_of(&cfg)?;
    let ckpt = out_or(ckpt, &cfg, "stage1.infu");
    let dataset = out_or(dataset, &cfg, "spms");
    let (base, net) = models_from(&load_checkpoint(&ckpt, &cfg)?, &cfg)?;
    let net = require_branch(net, &ckpt)?;
    let records = read_spms_dataset(&dataset, &world)?;
    let out = out_or(out, &cfg, "stage2.infu");
    let mut progress = progress_printer("sft", cfg.sft.steps);
    let (net, log) = sft_spms(&world, &base, net, &records, &cfg.sft, &mut progress)?;
    summarize("sft", &log);
    let steps = if cfg.sft.no_sft { 0 } else { cfg.sft.steps };
    save_checkpoint(
        &out,
        &full_store(&base, &net),
        &cfg,
        "sft",
        steps,
        cfg.sft.seed,
    )
}

pub struct SampleArgs {
    pub ckpt: String,
    pub id_seed: u64,
    pub prompt: String,
    pub source_prompt: Option<String>,
    pub steps: Option<usize>,
    pub base_only: bool,
    pub uncontrolled: bool,
    pub out: Option<PathBuf>,
}

fn parse_prompt(flag: &str, s: &str) -> CliResult<Prompt> {
    s.parse()
        .map_err(|e: InfuError| CliError::usage(format!("--{flag}: {e}")))
}

pub fn sample(common: &Common, args: SampleArgs) -> CliResult {
    let cfg = load_config(common)?;
    let world = world_of(&cfg)?;
    let prompt = parse_prompt("prompt", &args.prompt)?;
    let source_prompt = match &args.source_prompt {
        Some(s) => parse_prompt("source-prompt", s)?,
        None => prompt,
    };
    let steps = args.steps.unwrap_or(cfg.eval.sampler_steps);
    if steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let (base, net) = if args.ckpt == FRESH_INIT {
        let base = init_base(cfg.init_seed, &cfg.model)?;
        let net = InfuseNet::init(branch_seed(&cfg), &cfg.model, Some(&base))?;
        (base, Some(net))
    } else {
        let (base, net) = models_from(&load_checkpoint(Path::new(&args.ckpt), &cfg)?, &cfg)?;
        let net = match net {
            Some(n) => n,
            None => InfuseNet::init(branch_seed(&cfg), &cfg.model, Some(&base))?,
        };
        (base, Some(net))
    };
    let net = if args.base_only { None } else { net };

    let identity = world.identity(args.id_seed);
    let source = world.render(&identity, source_prompt);
    let id_embedding =
        world.encode_identity_cond(&source, &source_prompt.face_box().keypoints())?;
    let (control, _) = world.make_control(prompt, !args.uncontrolled);
    let req = GenRequest {
        prompt: Some(prompt),
        control: control.pixels,
        id_embedding,
        noise_seed: common.seed.unwrap_or(0),
    };
    let image = generate(&base, net.as_ref(), &[req], steps)?.remove(0);
    let out = out_or(args.out, &cfg, "sample.ppm");
    ensure_parent(&out)?;
    write_ppm(&image, &out)?;
    write_echo(
        &sidecar(&out),
        &cfg,
        &[
            ("ckpt", args.ckpt.clone()),
            ("id_seed", args.id_seed.to_string()),
            ("prompt", prompt.to_string()),
            ("source_prompt", source_prompt.to_string()),
            ("steps", steps.to_string()),
            ("seed", common.seed.unwrap_or(0).to_string()),
            ("base_only", args.base_only.to_string()),
        ],
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(
    common: &Common,
    ckpt: Option<PathBuf>,
    base_only: bool,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.eval.seed = s;
    }
    let world = world_of(&cfg)?;
    let ckpt = out_or(ckpt, &cfg, "stage2.infu");
    let store = load_checkpoint(&ckpt, &cfg)?;
    let (base, net) = models_from(&store, &cfg)?;
    let net = if base_only { None } else { net };
    let out = out_or(out, &cfg, "eval");
    let report = run_benchmark(
        &world,
        &base,
        net.as_ref(),
        &cfg.eval,
        cfg.fingerprint(),
        fingerprint(&store)?,
    )?;
    report.write(&out)?;
    write_echo(
        &out.join("config.cfg"),
        &cfg,
        &[
            ("ckpt", ckpt.display().to_string()),
            ("base_only", base_only.to_string()),
        ],
    )?;
    print!("{}", report.summary_table());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn selftest(seeds: u64) -> CliResult {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let results = checks::run_all(seeds);
    let mut failed = Vec::new();
    for c in &results {
        println!(
            "{} {:<28} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("selftest: {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}
