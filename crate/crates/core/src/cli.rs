//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, Execution};
use crate::io;
use crate::nca::{self, ModelConfig};
use crate::pipeline::{self, Checkpoint, TrainConfig};
use crate::quality::{self, Case, NqmDenominator};
use crate::synth::{self, Corruption, ShapeFamily, SyntheticSpec};
use crate::volume::Volume;

#[derive(Parser, Debug)]
#[command(name = "m3dnca", version, about = "Multi-level 3D NCA segmentation with ensemble quality control")]
struct Cli {
    /// Master seed for everything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional `model`, `train` and `synth` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Segment one volume.
    Infer(InferArgs),
    /// Run a pseudo-ensemble on one volume.
    Ensemble(EnsembleArgs),
    /// Quality score of a set of member probability maps.
    Nqm(NqmArgs),
    /// Fit the score-to-Dice regression on a labelled dataset.
    Calibrate(CalibrateArgs),
    /// Score and flag a labelled dataset under corruptions.
    QcEval(QcEvalArgs),
    /// Apply an acquisition artifact to a volume.
    Corrupt(CorruptArgs),
    /// Tile plan for a volume size under a memory budget.
    Plan(PlanArgs),
    /// Parameter count and step schedule of a model.
    Info(InfoArgs),
    /// Convert a NIfTI-1 file to the native volume format.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    Standard,
    ThreeLevel,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model preset, overridden by a `model` section in --config.
    #[arg(long, value_enum, default_value = "standard")]
    model: Preset,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    family: Option<ShapeFamily>,
    /// Cubic edge length.
    #[arg(long)]
    extent: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hold out the last N cases for per-epoch evaluation.
    #[arg(long, default_value_t = 0)]
    held_out: usize,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Mask volume to write (u8).
    #[arg(long)]
    out: PathBuf,
    /// Also write the probability volume here.
    #[arg(long)]
    prob_out: Option<PathBuf>,
    /// Run tiled within this working-set budget.
    #[arg(long)]
    budget_bytes: Option<usize>,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output directory for members, mean, sd, mask and summary.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    budget_bytes: Option<usize>,
}

#[derive(Args, Debug)]
struct NqmArgs {
    /// Member volumes, or directories of `member_*.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Divide by the foreground count of the mean instead of its sum.
    #[arg(long)]
    hard_count: bool,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Calibration JSON to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    target: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Comma-separated corruptions scored besides the clean images.
    #[arg(long, default_value = "spike:0.1:1,spike:0.3:1,spike:0.6:1,spike:1:1")]
    corruptions: String,
    /// Per-case scores CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QcEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    /// Comma-separated corruptions; empty evaluates the clean images.
    #[arg(long, default_value = "")]
    corruptions: String,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `noise:STD`, `spike:INTENSITY:COUNT` or `ghost:COUNT:INTENSITY:AXIS`.
    #[arg(long)]
    kind: Corruption,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Volume extents as Z,Y,X.
    #[arg(long, value_parser = parse_extents)]
    extents: [usize; 3],
    #[arg(long)]
    budget_bytes: usize,
    /// Use a checkpoint's configuration and step counts.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Volume extents as Z,Y,X for the step schedule.
    #[arg(long, value_parser = parse_extents, default_value = "64,64,64")]
    extents: [usize; 3],
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Store as u8 (for masks).
    #[arg(long)]
    mask: bool,
}

fn parse_extents(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [e] => Ok([e; 3]),
        [z, y, x] => Ok([z, y, x]),
        _ => Err(format!("expected Z,Y,X or a single edge, got {s:?}")),
    }
}

/// Optional sections of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub synth: Option<SyntheticSpec>,
}

struct Ctx {
    seed: u64,
    quiet: bool,
    file: FileConfig,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn model(&self, preset: Preset) -> ModelConfig {
        self.file.model.clone().unwrap_or_else(|| match preset {
            Preset::Standard => ModelConfig::standard(),
            Preset::ThreeLevel => ModelConfig::three_level(),
        })
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a pool may already exist when called in-process; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        quiet: cli.quiet,
        file,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Infer(a) => cmd_infer(&ctx, a),
        Command::Ensemble(a) => cmd_ensemble(&ctx, a),
        Command::Nqm(a) => cmd_nqm(a),
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::QcEval(a) => cmd_qc_eval(&ctx, a),
        Command::Corrupt(a) => cmd_corrupt(&ctx, a),
        Command::Plan(a) => cmd_plan(&ctx, a),
        Command::Info(a) => cmd_info(&ctx, a),
        Command::Convert(a) => cmd_convert(a),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_corruptions(list: &str) -> Result<Vec<Corruption>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

fn execution(budget: Option<usize>) -> Execution {
    budget.map_or(Execution::FullFrame, Execution::Budget)
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut spec = ctx.file.synth.clone().unwrap_or_default();
    if let Some(n) = a.count {
        spec.count = n;
    }
    if let Some(f) = a.family {
        spec.family = f;
    }
    if let Some(e) = a.extent {
        spec.extents = [e; 3];
    }
    let samples = synth::generate(&spec, ctx.seed)?;
    let cases: Vec<Case> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| Case {
            id: format!("case{i:03}"),
            image: s.image,
            label: s.label,
        })
        .collect();
    io::write_dataset(&a.out, &cases)?;
    ctx.say(format!("wrote {} cases to {}", cases.len(), a.out.display()));
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let model = ctx.model(a.model.model);
    let mut cfg = ctx.file.train.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.dup {
        cfg.dup_factor = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    let cases = io::read_dataset(&a.data)?;
    if a.held_out >= cases.len() {
        return Err(Error::Config(format!(
            "holding out {} of {} cases leaves nothing to train on",
            a.held_out,
            cases.len()
        )));
    }
    let pairs: Vec<(Volume, Volume)> = cases.into_iter().map(|c| (c.image, c.label)).collect();
    let (train, held) = pairs.split_at(pairs.len() - a.held_out);
    let mut log = match &a.log {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    if let Some(w) = log.as_mut() {
        w.write_record(["epoch", "mean_loss", "lr", "eval_dice"])?;
    }
    let mut log_err = None;
    let out = pipeline::train(train, held, &model, &cfg, |e| {
        ctx.say(format!(
            "epoch {:>3}  loss {:.5}  lr {:.3e}{}",
            e.epoch,
            e.mean_loss,
            e.lr,
            e.eval_dice.map_or(String::new(), |d| format!("  dice {d:.4}"))
        ));
        if let Some(w) = log.as_mut() {
            let rec = [
                e.epoch.to_string(),
                format!("{:.8}", e.mean_loss),
                format!("{:.8e}", e.lr),
                e.eval_dice.map_or(String::new(), |d| format!("{d:.6}")),
            ];
            if let Err(err) = w.write_record(&rec).and_then(|_| w.flush().map_err(Into::into)) {
                log_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    io::save_checkpoint(&out.checkpoint, &a.out)?;
    ctx.say(format!("saved {}", a.out.display()));
    Ok(())
}

fn cmd_infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let vol = io::read_any(&a.input)?;
    let seg = inference::run(&vol, &ckpt, ctx.seed, execution(a.budget_bytes))?;
    let mut mask = Volume::new(vol.extents, seg.mask.iter().map(|&m| m as f32).collect())?;
    mask.spacing = vol.spacing;
    io::write_volume_as(&mask, &a.out, io::ElementType::U8)?;
    if let Some(p) = &a.prob_out {
        io::write_volume(&seg.prob, p)?;
    }
    let fg = seg.mask.iter().filter(|&&m| m == 1).count();
    ctx.say(format!("foreground voxels: {fg} of {}", seg.mask.len()));
    Ok(())
}

#[derive(Serialize)]
struct EnsembleSummary {
    n_members: usize,
    seed: u64,
    nqm: Option<f64>,
    foreground_voxels: usize,
}

fn cmd_ensemble(ctx: &Ctx, a: EnsembleArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let vol = io::read_any(&a.input)?;
    let ens = inference::ensemble_segment_with(&vol, &ckpt, a.n, ctx.seed, execution(a.budget_bytes))?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (i, m) in ens.members.iter().enumerate() {
        io::write_volume(&Volume::new(vol.extents, m.clone())?, &a.out_dir.join(format!("member_{i:03}.json")))?;
    }
    io::write_volume(&Volume::new(vol.extents, ens.mean_prob.clone())?, &a.out_dir.join("mean.json"))?;
    io::write_volume(&Volume::new(vol.extents, ens.sd_map.clone())?, &a.out_dir.join("sd.json"))?;
    let mask = Volume::new(vol.extents, ens.mask.iter().map(|&m| m as f32).collect())?;
    io::write_volume_as(&mask, &a.out_dir.join("mask.json"), io::ElementType::U8)?;
    let summary = EnsembleSummary {
        n_members: ens.n_members,
        seed: ctx.seed,
        nqm: ens.nqm.filter(|v| v.is_finite()),
        foreground_voxels: ens.mask.iter().filter(|&&m| m == 1).count(),
    };
    write_json(&summary, &a.out_dir.join("summary.json"))?;
    match ens.nqm {
        Some(v) => println!("nqm: {}", quality::format_score(v)),
        None => println!("nqm: undefined for a single member"),
    }
    Ok(())
}

fn member_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    name.starts_with("member_") && name.ends_with(".json")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_nqm(a: NqmArgs) -> Result<()> {
    let files = member_files(&a.inputs)?;
    let members = files
        .iter()
        .map(|f| io::read_any(f).map(|v| v.data))
        .collect::<Result<Vec<_>>>()?;
    let denom = if a.hard_count { NqmDenominator::HardCount } else { NqmDenominator::Mean };
    let v = quality::nqm(&members, denom)?;
    println!("nqm: {}", quality::format_score(v));
    Ok(())
}

fn cmd_calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let cases = io::read_dataset(&a.data)?;
    let mut list: Vec<Option<Corruption>> = vec![None];
    list.extend(parse_corruptions(&a.corruptions)?.into_iter().map(Some));
    let scored = quality::score_cases(&ckpt, &cases, &list, a.n, ctx.seed)?;
    if let Some(p) = &a.scores {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["case_id", "corruption", "dice", "nqm"])?;
        for s in &scored {
            w.write_record([
                s.case_id.clone(),
                s.corruption.clone(),
                format!("{:.6}", s.dice),
                quality::format_score(s.nqm),
            ])?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let skipped = scored.iter().filter(|s| !s.nqm.is_finite()).count();
    if skipped > 0 {
        ctx.say(format!("{skipped} case(s) with an undefined score left out of the fit"));
    }
    let pairs: Vec<(f64, f64)> = scored.iter().map(|s| (s.nqm, s.dice)).collect();
    let cal = quality::calibrate(&pairs, a.target)?;
    write_json(&cal, &a.out)?;
    println!(
        "slope {:.6}  intercept {:.6}  r {:.4}  threshold {:.6}",
        cal.slope, cal.intercept, cal.r, cal.nqm_threshold
    );
    Ok(())
}

fn cmd_qc_eval(ctx: &Ctx, a: QcEvalArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let cases = io::read_dataset(&a.data)?;
    let text = std::fs::read(&a.calibration).map_err(|e| Error::io(&a.calibration, e))?;
    let cal: quality::QcCalibration = serde_json::from_slice(&text)?;
    let corruptions = parse_corruptions(&a.corruptions)?;
    let report = quality::qc_evaluate(&ckpt, &cases, &corruptions, &cal, a.n, ctx.seed)?;
    report.write_csv(&a.out)?;
    if let Some(p) = &a.summary {
        report.write_summary(p)?;
    }
    let s = &report.summary;
    println!(
        "cases {}  failures {}  flagged {}  detection {:.3}  false-negative {:.3}  false-positive {:.3}",
        s.cases, s.failures, s.flagged, s.detection_rate, s.false_negative_rate, s.false_positive_rate
    );
    Ok(())
}

fn cmd_corrupt(ctx: &Ctx, a: CorruptArgs) -> Result<()> {
    let vol = io::read_any(&a.input)?;
    let out = a.kind.apply(&vol, ctx.seed)?;
    io::write_volume(&out, &a.out)
}

fn model_and_steps(ctx: &Ctx, preset: Preset, ckpt: Option<&Path>) -> Result<(ModelConfig, Option<Checkpoint>)> {
    match ckpt {
        Some(p) => {
            let c = io::load_checkpoint(p)?;
            Ok((c.config.clone(), Some(c)))
        }
        None => Ok((ctx.model(preset), None)),
    }
}

fn schedule(config: &ModelConfig, ckpt: Option<&Checkpoint>, extents: [usize; 3]) -> Result<Vec<usize>> {
    let ext = pipeline::level_extents(extents, config)?;
    match ckpt {
        Some(c) => c.inference_steps(&ext),
        None => config
            .kernel_sizes
            .iter()
            .zip(&ext)
            .map(|(&k, &e)| nca::step_count(e, k))
            .collect(),
    }
}

fn cmd_plan(ctx: &Ctx, a: PlanArgs) -> Result<()> {
    let (config, ckpt) = model_and_steps(ctx, a.model.model, a.checkpoint.as_deref())?;
    config.validate()?;
    let steps = schedule(&config, ckpt.as_ref(), a.extents)?;
    let plan = inference::memory_plan_with_steps(a.extents, &config, a.budget_bytes, &steps)?;
    println!("tile: {:?}", plan.tile);
    println!("estimated peak bytes: {}", plan.estimated_peak_bytes);
    println!("resident bytes: {}", plan.resident_bytes);
    for (l, s) in plan.levels.iter().enumerate() {
        println!(
            "level {}: extents {:?}  steps {}  tiles {}  buffer bytes {}",
            l + 1,
            s.extents,
            s.steps,
            s.tiles,
            s.buffer_bytes
        );
    }
    Ok(())
}

fn cmd_info(ctx: &Ctx, a: InfoArgs) -> Result<()> {
    let (config, ckpt) = model_and_steps(ctx, a.model.model, a.checkpoint.as_deref())?;
    config.validate()?;
    println!("parameters: {}", nca::param_count(&config));
    println!(
        "levels: {}  channels: {}  hidden: {}  scale factor: {}  kernels: {:?}",
        config.levels, config.channels, config.hidden, config.scale_factor, config.kernel_sizes
    );
    let ext = pipeline::level_extents(a.extents, &config)?;
    let steps = schedule(&config, ckpt.as_ref(), a.extents)?;
    for (l, (e, s)) in ext.iter().zip(&steps).enumerate() {
        println!("level {}: extents {:?}  steps {}", l + 1, e, s);
    }
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let vol = io::read_any(&a.input)?;
    let kind = if a.mask { io::ElementType::U8 } else { io::ElementType::F32 };
    io::write_volume_as(&vol, &a.out, kind)
}
