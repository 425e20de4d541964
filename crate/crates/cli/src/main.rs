mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hila::autograd::{load_checkpoint, save_checkpoint, Graph, ParamStore};
use hila::check::{run_checks, CheckOptions};
use hila::data::{generate_shapes, read_dataset, read_ppm, write_dataset, SegSample, ShapesSpec};
use hila::encoder::{Model, ModelConfig};
use hila::error::Error;
use hila::hierarchy::{hierarchy_masks, render_mask, to_grayscale, RenderOptions};
use hila::metrics::{evaluate_crop, evaluate_maps, model_flops, Threshold};
use hila::train::{make_batch, predict_all, train, StepLog, TrainConfig};

use run::RunDir;

#[derive(Parser)]
#[command(name = "hila", version, about = "Hierarchical inter-level attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every invariant suite and print a pass/fail table.
    Check(CheckArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Render composed hierarchy masks for query pixels.
    Visualize(VisualizeArgs),
    /// Closed-form attention costs of a config.
    Flops(FlopsArgs),
    /// Write a synthetic shapes dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct CheckArgs {
    /// Model config JSON; the tiny config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hold per-op gradients to 1e-5 instead of 1e-3.
    #[arg(long)]
    float64: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Log the loss every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    #[arg(long)]
    no_augment: bool,
    /// Train the same config with HILA switched off.
    #[arg(long)]
    no_hila: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Centre crops to report, e.g. `32,48x64`.
    #[arg(long, value_delimiter = ',')]
    crop_sizes: Vec<String>,
    /// Boundary match distance in pixels; relative to the image diagonal when omitted.
    #[arg(long)]
    threshold_px: Option<f64>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Also write `metrics.json` and a manifest into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Query pixels as `y,x`, repeatable.
    #[arg(long = "query", required = true, value_parser = parse_query)]
    queries: Vec<(usize, usize)>,
    /// Stage whose features issue the queries; the deepest when omitted.
    #[arg(long)]
    stage: Option<usize>,
    /// Number of composed levels; all available when omitted.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long)]
    force: bool,
}

/// Prints to stdout. A reader that hung up early is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn parse_query(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(y)?, p(x)?))
}

fn parse_crop(s: &str) -> Result<(usize, usize)> {
    let p = |v: &str| v.trim().parse::<usize>().with_context(|| format!("bad crop size {s:?}"));
    match s.split_once('x') {
        Some((h, w)) => Ok((p(h)?, p(w)?)),
        None => Ok((p(s)?, p(s)?)),
    }
}

/// The config and the exact bytes it came from.
fn load_config(path: Option<&Path>, num_classes: usize) -> Result<(ModelConfig, Vec<u8>)> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = ModelConfig::from_json(std::str::from_utf8(&bytes)?)?;
            Ok((cfg, bytes))
        }
        None => {
            let cfg = ModelConfig::tiny(num_classes);
            Ok((cfg.clone(), cfg.to_json().into_bytes()))
        }
    }
}

fn load_model(checkpoint: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (store, meta) = load_checkpoint::<f32>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg: ModelConfig = serde_json::from_value(meta.get("model").cloned().ok_or_else(|| anyhow!("checkpoint has no model config"))?)?;
    cfg.validate()?;
    let model = Model::bind(&cfg, &store)?;
    Ok((model, store))
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let (cfg, _) = load_config(a.config.as_deref(), 4)?;
    let res = run_checks(&cfg, CheckOptions { seed: a.seed, float64: a.float64 })?;
    let width = res.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut table = String::new();
    for r in &res {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        table += &format!("{:width$}  {verdict}  {:6.2}s  {}\n", r.name, r.seconds, r.detail);
    }
    let failed: Vec<&str> = res.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        table += &format!("all {} suites passed", res.len());
        emit(&table)?;
        Ok(ExitCode::SUCCESS)
    } else {
        emit(table.trim_end())?;
        eprintln!("failed suites: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn param_summary(store: &ParamStore<f32>) -> serde_json::Value {
    let bad: Vec<&str> = store
        .iter()
        .filter(|(_, _, t)| t.data().iter().any(|v| !v.is_finite()))
        .map(|(_, n, _)| n)
        .collect();
    let max_abs = store
        .iter()
        .map(|(_, _, t)| t.data().iter().filter(|v| v.is_finite()).fold(0f32, |m, v| m.max(v.abs())))
        .fold(0f32, f32::max);
    json!({ "non_finite_params": bad, "max_abs_finite": max_abs })
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let (dm, samples) = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let (mut cfg, bytes) = load_config(a.config.as_deref(), dm.spec.num_classes)?;
    if cfg.num_classes != dm.spec.num_classes {
        bail!("config has {} classes but the dataset has {}", cfg.num_classes, dm.spec.num_classes);
    }
    if a.no_hila {
        cfg = cfg.with_hila(false);
    }
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        augment: !a.no_augment,
        seed: a.seed,
        ..Default::default()
    };
    tc.validate()?;
    let mut run = RunDir::create(&a.out, a.force, "train", a.config.as_deref(), &bytes, a.seed)?;
    let (model, mut store) = Model::init::<f32>(&cfg, a.seed)?;
    let meta = |done: u64| json!({ "model": cfg, "train": tc, "steps_done": done });
    if a.steps == 0 {
        let ckpt = a.out.join("checkpoint.bin");
        save_checkpoint(&store, &ckpt, meta(0))?;
        run.manifest.checkpoints.push(ckpt);
        run.finish("ok", json!({ "steps": 0, "params": model.num_params() }))?;
        eprintln!("wrote initialization checkpoint");
        return Ok(ExitCode::SUCCESS);
    }
    let mut log = String::new();
    let mut recent: Vec<StepLog> = Vec::new();
    let result = train(&model, &mut store, &samples, &tc, |s| {
        log.push_str(&serde_json::to_string(s).expect("log serialises"));
        log.push('\n');
        if recent.len() == 20 {
            recent.remove(0);
        }
        recent.push(s.clone());
        if s.step % a.log_every.max(1) == 0 || s.step + 1 == tc.steps {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
        }
    });
    std::fs::write(a.out.join("log.jsonl"), &log)?;
    let logs = match result {
        Ok(l) => l,
        Err(Error::NonFinite { step, loss }) => {
            let diag = json!({
                "step": step,
                "loss": loss.to_string(),
                "recent": recent,
                "params": param_summary(&store),
                "train": tc,
            });
            std::fs::write(a.out.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
            run.finish("aborted", json!({ "non_finite_step": step }))?;
            bail!("loss became {loss} at step {step}; diagnostics in {}", a.out.join("diagnostics.json").display());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = a.out.join("checkpoint.bin");
    save_checkpoint(&store, &ckpt, meta(tc.steps))?;
    run.manifest.checkpoints.push(ckpt);
    let first = &samples[0];
    let preds = predict_all(&model, &store, &samples, 16)?;
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let rep = evaluate_maps(&preds, &labels, first.height(), first.width(), cfg.num_classes, Threshold::default())?;
    let tail = &logs[logs.len().saturating_sub(50)..];
    let metrics = json!({
        "steps": tc.steps,
        "final_loss": logs.last().map(|l| l.loss),
        "mean_loss_last_50": tail.iter().map(|l| l.loss).sum::<f64>() / tail.len() as f64,
        "train_pixel_accuracy": rep.pixel_accuracy,
        "train_miou": rep.miou,
        "params": model.num_params(),
    });
    emit(&serde_json::to_string_pretty(&metrics)?)?;
    run.finish("ok", metrics)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, store) = load_model(&a.checkpoint)?;
    let (dm, samples) = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let nc = model.config.num_classes;
    if nc != dm.spec.num_classes {
        bail!("checkpoint predicts {nc} classes but the dataset has {}", dm.spec.num_classes);
    }
    let crops = a.crop_sizes.iter().map(|s| parse_crop(s)).collect::<Result<Vec<_>>>()?;
    let threshold = a.threshold_px.map_or(Threshold::default(), Threshold::Pixels);
    let (h, w) = (samples[0].height(), samples[0].width());
    let preds = predict_all(&model, &store, &samples, a.batch_size)?;
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let mut rep = evaluate_maps(&preds, &labels, h, w, nc, threshold)?;
    for c in crops {
        rep.crops.push(evaluate_crop(&preds, &labels, h, w, c, nc, threshold)?);
    }
    rep.flops = Some(model_flops(&model.config, h, w)?);
    rep.params = Some(model.num_params());
    let text = serde_json::to_string_pretty(&rep)?;
    emit(&text)?;
    if let Some(out) = &a.out {
        let bytes = model.config.to_json().into_bytes();
        let mut run = RunDir::create(out, a.force, "eval", None, &bytes, store.seed())?;
        std::fs::write(out.join("metrics.json"), &text)?;
        run.manifest.checkpoints.push(a.checkpoint.clone());
        run.finish("ok", serde_json::to_value(&rep)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_visualize(a: VisualizeArgs) -> Result<ExitCode> {
    let (model, store) = load_model(&a.checkpoint)?;
    let image = read_ppm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let (ih, iw) = (image.shape()[0], image.shape()[1]);
    model.config.stage_sizes(ih, iw)?;
    let sample = SegSample { image: image.clone(), labels: vec![0; ih * iw] };
    let (x, _) = make_batch(std::slice::from_ref(&sample), &[0], None)?;
    let g = Graph::inference(&store);
    let trace = model.forward_encoder(&g, g.constant(x))?.trace;
    let stage = a.stage.unwrap_or(trace.len());
    if stage < 2 || stage > trace.len() {
        bail!("stage must be in 2..={}", trace.len());
    }
    let available = (0..stage - 1).take_while(|n| trace[stage - 1 - n].last_top_down.is_some()).count();
    let levels = a.levels.unwrap_or(available);
    if levels == 0 {
        bail!("stage {stage} has no top-down weights; enable HILA there to visualize it");
    }
    let masks = hierarchy_masks(&trace, stage, levels, 0)?;
    let bytes = model.config.to_json().into_bytes();
    let mut run = RunDir::create(&a.out, a.force, "visualize", None, &bytes, store.seed())?;
    let base = to_grayscale(&image)?;
    let (sh, sw) = masks[0].source_hw;
    let mut files = Vec::new();
    for (qi, &(py, px)) in a.queries.iter().enumerate() {
        if py >= ih || px >= iw {
            bail!("query ({py}, {px}) lies outside the {ih}×{iw} image");
        }
        let cell = (py * sh / ih, px * sw / iw);
        for (li, m) in masks.iter().enumerate() {
            let img = render_mask(&m.normalize(), cell, &base, &RenderOptions::default())?;
            let name = format!("q{qi}_y{py}_x{px}_levels{}.ppm", li + 1);
            hila::data::write_ppm(&a.out.join(&name), &img)?;
            files.push(name);
        }
    }
    eprintln!("wrote {} masks to {}", files.len(), a.out.display());
    run.manifest.checkpoints.push(a.checkpoint.clone());
    run.finish("ok", json!({ "stage": stage, "levels": levels, "files": files }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_flops(a: FlopsArgs) -> Result<ExitCode> {
    let (cfg, _) = load_config(a.config.as_deref(), 4)?;
    let on = model_flops(&cfg, a.height, a.width)?;
    let off = model_flops(&cfg.clone().with_hila(false), a.height, a.width)?;
    let report = json!({ "config": cfg, "report": on, "without_hila": off });
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<ExitCode> {
    if a.out.join("manifest.json").exists() && !a.force {
        bail!("{} already holds a dataset; pass --force to overwrite it", a.out.display());
    }
    let spec = ShapesSpec { image_size: a.image_size, seed: a.seed, ..Default::default() };
    let samples = generate_shapes(&spec, a.n)?;
    write_dataset(&a.out, &spec, &samples)?;
    eprintln!("wrote {} samples to {}", a.n, a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Caps the worker pool at `HILA_THREADS` when set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HILA_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HILA_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().and_then(|()| match cli.command {
        Command::Check(a) => cmd_check(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Flops(a) => cmd_flops(a),
        Command::GenData(a) => cmd_gen_data(a),
    });
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
