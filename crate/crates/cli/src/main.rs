//! One binary, four subcommands: `gen-data`, `train`, `infer`, `eval`.
//!
//! Configuration comes from a TOML file plus flag overrides (flags win);
//! every run echoes its fully resolved config into the output directory
//! before doing any heavy work. Exit codes: 0 success, 2 usage, 3 config,
//! 4 checkpoint chain, 5 numeric, 6 I/O or manifest.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gazediff::checkpoint::load_checkpoint;
use gazediff::config::RunConfig;
use gazediff::error::Error;
use gazediff::infer::{load_clip_frames, save_clip_outputs, InferMode, InferenceRequest, Sampler};
use gazediff::metrics::{
    afd, clip_score, frechet_distance, pooled_detection, pooled_gazed_region, temp_c,
    ColorTemplateDetector, Detector, MetricReport,
};
use gazediff::scenario::{
    generate_scenario, load_clip, write_clip, write_manifest, EntityClass, ManifestRecord,
};
use gazediff::training::{run_stage, Dataset};

const OUT_ROOT_ENV: &str = "GAZEDIFF_OUT";

#[derive(Parser)]
#[command(name = "gazediff", version, about = "desk-scale gaze-gated causal video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; relative paths root at $GAZEDIFF_OUT when set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic accident clips and a dataset manifest.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of clips.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Mark the last N clips with the `val` split tag.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
    },
    /// Run one training stage against a manifest.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Stage to run (0, 1 or 2).
        #[arg(long)]
        stage: u8,
        /// Dataset manifest path.
        #[arg(long)]
        manifest: PathBuf,
        /// Step budget override.
        #[arg(long)]
        steps: Option<u64>,
        /// Hook attachment preset for stage 2.
        #[arg(long)]
        hooks: Option<String>,
        /// Upstream checkpoint (required for stages 1 and 2).
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        /// Checkpoint output path (defaults to OUT/stage{N}.ckpt).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Stage-2 override: train every parameter.
        #[arg(long, default_value_t = false)]
        train_all: bool,
        /// Manifest split to train on (falls back to all clips).
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Sample a clip: text-to-video or video-to-video editing.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        /// t2v or v2v.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        prompt: String,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source clip directory (v2v only).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Compute metrics over inference runs.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Inference run directories (repeatable).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Reference manifest for the Fréchet distance.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Metrics to compute (comma separated); default: all computable.
        #[arg(long)]
        metrics: Option<String>,
        /// Entity word for affordance checks (default: from each prompt).
        #[arg(long)]
        entity: Option<String>,
        /// Prompt override for alignment scoring.
        #[arg(long)]
        prompt: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Range(_) => 2,
        Error::Config(_) => 3,
        Error::Chain(_) => 4,
        Error::Numeric(_) | Error::DegenerateInput(_) => 5,
        Error::Io(_) | Error::Image(_) | Error::Manifest(_) => 6,
    }
}

fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    let raw = out.unwrap_or_else(|| PathBuf::from(default_name));
    if raw.is_absolute() {
        return raw;
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(raw),
        None => raw,
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData { common, n, holdout } => cmd_gen_data(common, n, holdout),
        Command::Train {
            common,
            stage,
            manifest,
            steps,
            hooks,
            checkpoint_in,
            checkpoint_out,
            lr,
            batch,
            lambda,
            gamma,
            train_all,
            split,
        } => cmd_train(
            common,
            stage,
            manifest,
            steps,
            hooks,
            checkpoint_in,
            checkpoint_out,
            lr,
            batch,
            lambda,
            gamma,
            train_all,
            split,
        ),
        Command::Infer { common, mode, prompt, checkpoint, source, strength, ddim_steps, eta } => {
            cmd_infer(common, mode, prompt, checkpoint, source, strength, ddim_steps, eta)
        }
        Command::Eval { common, runs, reference, metrics, entity, prompt } => {
            cmd_eval(common, runs, reference, metrics, entity, prompt)
        }
    }
}

fn cmd_gen_data(common: CommonArgs, n: usize, holdout: usize) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    cfg.validate()?;
    let out = resolve_out(common.out, "runs/data");
    std::fs::create_dir_all(&out)?;
    cfg.echo_to(&out)?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let seed = gazediff::rng::derive_seed(cfg.seed, &[0xda7a_5e7, i as u64]);
        let rec = generate_scenario(seed, &cfg.scenario)?;
        let clip_dir = format!("clip_{i:05}");
        write_clip(&out.join(&clip_dir), &rec)?;
        let split = if n - i <= holdout { "val" } else { "train" };
        records.push(ManifestRecord::from_clip(&rec, &clip_dir, split));
    }
    let manifest = out.join("manifest.tsv");
    write_manifest(&records, &manifest)?;
    println!("{}", manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: CommonArgs,
    stage: u8,
    manifest: PathBuf,
    steps: Option<u64>,
    hooks: Option<String>,
    checkpoint_in: Option<PathBuf>,
    checkpoint_out: Option<PathBuf>,
    lr: Option<f64>,
    batch: Option<usize>,
    lambda: Option<f64>,
    gamma: Option<f64>,
    train_all: bool,
    split: String,
) -> Result<(), Error> {
    let mut cfg = load_config(&common)?;
    cfg.train.stage = stage;
    cfg.train.manifest = Some(manifest.display().to_string());
    if let Some(v) = steps {
        cfg.train.steps = v;
    }
    if let Some(v) = hooks {
        cfg.train.hooks = v;
    }
    if let Some(v) = &checkpoint_in {
        cfg.train.checkpoint_in = Some(v.display().to_string());
    }
    if let Some(v) = lr {
        cfg.train.lr = v;
    }
    if let Some(v) = batch {
        cfg.train.batch = v;
    }
    if let Some(v) = lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = gamma {
        cfg.train.gamma = v;
    }
    cfg.train.train_all = train_all;
    let out = resolve_out(common.out, &format!("runs/train_stage{stage}"));
    if let Some(v) = &checkpoint_out {
        cfg.train.checkpoint_out = Some(v.display().to_string());
    }
    cfg.validate()?;
    std::fs::create_dir_all(&out)?;
    cfg.echo_to(&out)?;

    let mut dataset = match Dataset::from_manifest(&manifest, Some(&split)) {
        Ok(ds) => ds,
        Err(Error::Manifest(_)) => Dataset::from_manifest(&manifest, None)?,
        Err(e) => return Err(e),
    };
    let result = run_stage(&cfg, &mut dataset, &out)?;
    println!("{}", result.checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    common: CommonArgs,
    mode: String,
    prompt: String,
    checkpoint: PathBuf,
    source: Option<PathBuf>,
    strength: Option<f64>,
    ddim_steps: Option<usize>,
    eta: Option<f64>,
) -> Result<(), Error> {
    let mode = match mode.as_str() {
        "t2v" => InferMode::T2v,
        "v2v" => InferMode::V2v,
        other => return Err(Error::contract(format!("mode must be t2v or v2v, got '{other}'"))),
    };
    let ckpt = load_checkpoint(&checkpoint)?;
    // the checkpoint's embedded config is the default; an explicit file and
    // flags override it
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(&ckpt.config_toml)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = strength {
        cfg.infer.strength = v;
    }
    if let Some(v) = ddim_steps {
        cfg.infer.ddim_steps = v;
    }
    if let Some(v) = eta {
        cfg.infer.eta = v;
    }
    cfg.validate()?;

    let out = resolve_out(common.out, "runs/infer");
    std::fs::create_dir_all(&out)?;
    cfg.echo_to(&out)?;

    let source_frames = match &source {
        Some(dir) => Some(load_clip(dir)?.frames),
        None => None,
    };
    let req = InferenceRequest {
        mode,
        prompt: prompt.clone(),
        source: source_frames,
        ddim_steps: cfg.infer.ddim_steps,
        eta: cfg.infer.eta,
        strength: cfg.infer.strength,
        seed: cfg.seed,
    };
    req.validate()?;

    let sampler = Sampler::new(&cfg, ckpt.model_params())?;
    let frames = match mode {
        InferMode::T2v => sampler.t2v_generate(&req)?,
        InferMode::V2v => sampler.v2v_edit(&req)?,
    };
    save_clip_outputs(&out, &frames)?;

    let mut meta = String::new();
    meta.push_str(&format!("mode\t{}\n", if mode == InferMode::T2v { "t2v" } else { "v2v" }));
    meta.push_str(&format!("prompt\t{prompt}\n"));
    meta.push_str(&format!("seed\t{}\n", cfg.seed));
    meta.push_str(&format!("eta\t{}\n", cfg.infer.eta));
    meta.push_str(&format!("ddim_steps\t{}\n", cfg.infer.ddim_steps));
    meta.push_str(&format!("strength\t{}\n", cfg.infer.strength));
    meta.push_str(&format!("frames\t{}\n", frames.shape()[0]));
    if let Some(src) = &source {
        meta.push_str(&format!("source\t{}\n", src.display()));
    }
    std::fs::write(out.join("request.txt"), meta)?;
    println!("{}", out.display());
    Ok(())
}

struct RunInputs {
    frames: ndarray::ArrayD<f64>,
    prompt: String,
    strength: Option<String>,
    source: Option<PathBuf>,
}

fn read_run(dir: &Path) -> Result<RunInputs, Error> {
    let req_path = dir.join("request.txt");
    let text = std::fs::read_to_string(&req_path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", req_path.display())))?;
    let mut prompt = None;
    let mut frames_n = None;
    let mut source = None;
    let mut strength = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('\t') {
            match k {
                "prompt" => prompt = Some(v.to_string()),
                "frames" => frames_n = v.parse::<usize>().ok(),
                "source" => source = Some(PathBuf::from(v)),
                "strength" => strength = Some(v.to_string()),
                _ => {}
            }
        }
    }
    let frames_n =
        frames_n.ok_or_else(|| Error::Manifest(format!("{}: no frame count", req_path.display())))?;
    Ok(RunInputs {
        frames: load_clip_frames(dir, frames_n)?,
        prompt: prompt.unwrap_or_default(),
        strength,
        source,
    })
}

fn entity_from_prompt(prompt: &str) -> Option<&'static str> {
    gazediff::encoder::tokenize_words(prompt)
        .into_iter()
        .find_map(|w| EntityClass::from_word(&w).map(|c| c.word()))
}

fn cmd_eval(
    common: CommonArgs,
    runs: Vec<PathBuf>,
    reference: Option<PathBuf>,
    metrics: Option<String>,
    entity: Option<String>,
    prompt_override: Option<String>,
) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    let out = resolve_out(common.out, "runs/eval");
    std::fs::create_dir_all(&out)?;
    cfg.echo_to(&out)?;

    let requested: Option<Vec<String>> =
        metrics.map(|m| m.split(',').map(|s| s.trim().to_string()).collect());
    let wants = |name: &str| match &requested {
        Some(list) => list.iter().any(|m| m == name),
        None => true,
    };
    let explicit = |name: &str| requested.as_ref().is_some_and(|l| l.iter().any(|m| m == name));

    let encoder = gazediff::encoder::ToyEncoder::new(cfg.encoder.clone());
    let inputs: Vec<RunInputs> = runs.iter().map(|d| read_run(d)).collect::<Result<_, _>>()?;

    let mut report = MetricReport::default();
    report.push("runs", inputs.len());
    for (i, r) in inputs.iter().enumerate() {
        if let Some(s) = &r.strength {
            report.push(&format!("run_{i}.strength"), s);
        }
    }

    if wants("clip_s") {
        let mut acc = 0.0;
        for (i, r) in inputs.iter().enumerate() {
            let prompt = prompt_override.as_deref().unwrap_or(&r.prompt);
            let s = clip_score(&r.frames, prompt, &encoder)?;
            report.push_metric(&format!("run_{i}.clip_s"), s);
            acc += s;
        }
        report.push_metric("clip_s", acc / inputs.len() as f64);
    }

    if wants("temp_c") {
        let mut acc = 0.0;
        for (i, r) in inputs.iter().enumerate() {
            let s = temp_c(&r.frames, &encoder)?;
            report.push_metric(&format!("run_{i}.temp_c"), s);
            acc += s;
        }
        report.push_metric("temp_c", acc / inputs.len() as f64);
    }

    if wants("frechet") {
        match &reference {
            None if explicit("frechet") => {
                return Err(Error::contract(
                    "frechet requested but no --reference manifest given",
                ));
            }
            None => {}
            Some(_) if inputs.len() < 2 && !explicit("frechet") => {}
            Some(manifest) => {
                let ds = Dataset::from_manifest(manifest, None)?;
                let reals: Vec<ndarray::ArrayD<f64>> =
                    ds.clips.iter().map(|c| c.frames.clone()).collect();
                let gens: Vec<ndarray::ArrayD<f64>> =
                    inputs.iter().map(|r| r.frames.clone()).collect();
                let fd = frechet_distance(&gens, &reals, &encoder, 1e-8)?;
                report.push_metric("frechet", fd);
            }
        }
    }

    if wants("afd") {
        let detector = ColorTemplateDetector::default();
        let mut detections = Vec::new();
        let mut regions = Vec::new();
        for r in &inputs {
            let Some(src_dir) = &r.source else { continue };
            let word = entity
                .as_deref()
                .or_else(|| entity_from_prompt(&r.prompt))
                .ok_or_else(|| Error::contract("affordance: no entity word in prompt"))?;
            let src = load_clip(src_dir)?;
            detections.push(pooled_detection(&detector.detect(&r.frames, word)));
            regions.push(pooled_gazed_region(&src.gaze.maps, 0.5));
        }
        if detections.is_empty() {
            if explicit("afd") {
                return Err(Error::contract(
                    "afd requested but no run has a source clip with gaze maps",
                ));
            }
        } else {
            report.push("afd_checks", detections.len());
            report.push_metric("afd", afd(&detections, &regions)?);
        }
    }

    let path = out.join("metrics.txt");
    report.save(&path)?;
    println!("{}", path.display());
    Ok(())
}
