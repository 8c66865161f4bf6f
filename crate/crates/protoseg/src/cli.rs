//! Command-line front end. Exit codes: 0 success, 1 invalid configuration or
//! arguments, 2 runtime failure, 3 a check that ran and failed.

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use protoseg_core::episode::Episode;
use protoseg_core::suites::{self, Scope};
use protoseg_core::tape::OpKind;
use protoseg_core::train::{Confusion, EvalMode, EvalReport, Model, SemanticContext};

use crate::bench::{self, BenchConfig};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, DataSpec, Dataset, Split};
use crate::episodes::EpisodeManifest;
use crate::error::{CliError, Result};
use crate::io;
use crate::manifest::{self, ManifestBuilder};
use crate::metrics::{read_log, ClassCounts, MetricsLog, Record};
use crate::pipeline;
use crate::report::{self, EvalExport};

#[derive(Debug, Parser)]
#[command(name = "protoseg", version, about = "Few-shot and zero-shot point-cloud segmentation with prototypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic rooms, cut them into blocks and write a dataset.
    GenData(GenDataArgs),
    /// Pretrain the backbone as a per-point classifier on the seen classes.
    Pretrain(PretrainArgs),
    /// Episodic training from a pretrained backbone, then evaluation.
    Train(TrainArgs),
    /// Evaluate a checkpoint with support sets.
    Eval(EvalArgs),
    /// Evaluate a checkpoint from class-name embeddings alone.
    ZeroshotEval(EvalArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Summarize metrics logs into an ablation grid and a learning curve.
    Report(ReportArgs),
    /// Run the multi-seed ablation benchmark in memory.
    Bench(BenchArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset spec (TOML); built-in defaults otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Points per block.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration (TOML); built-in defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Worker threads for evaluation. Results do not depend on it.
    #[arg(long, default_value_t = NonZeroUsize::MIN)]
    pub threads: NonZeroUsize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Backbone checkpoint written by `pretrain`.
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub no_qgpa: bool,
    #[arg(long)]
    pub no_sr: bool,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub align: bool,
    /// Also train the embedding projection; needs --embeddings.
    #[arg(long)]
    pub projection: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Replay the episodes of an earlier run instead of sampling.
    #[arg(long)]
    pub episode_file: Option<PathBuf>,
    /// Class embedding directory.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// tensor, backbone, qgpa, sr, mmd or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[cfg(feature = "fault-injection")]
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Exit with code 3 unless full ≥ QGPA only ≥ baseline holds on average.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Output directory for the replayed run.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: &[String]) -> i32 {
    let argv = std::iter::once("protoseg".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, args: &[String]) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, args),
        Command::Pretrain(a) => pretrain(a, args),
        Command::Train(a) => train(a, args),
        Command::Eval(a) => eval(a, EvalMode::Visual, args),
        Command::ZeroshotEval(a) => eval(a, EvalMode::ZeroShot, args),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report_cmd(a, args),
        Command::Bench(a) => bench_cmd(a, args),
        Command::Replay(a) => replay(a),
    }
}

fn require_dir(problems: &mut Vec<String>, flag: &str, path: &Path) {
    if !path.is_dir() {
        problems.push(format!("{flag} {} is not a directory", path.display()));
    }
}

fn fail_if(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(problems))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn gen_data(a: GenDataArgs, args: &[String]) -> Result<()> {
    let mut spec: DataSpec = match &a.spec {
        Some(p) => io::read_toml(p).map_err(|e| CliError::invalid(e.to_string()))?,
        None => DataSpec::default(),
    };
    if let Some(c) = a.classes {
        spec.classes = Some(c);
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.scenes {
        spec.scenes = s;
    }
    if let Some(n) = a.points {
        spec.blocking.num_points = n;
    }
    spec.validate()?;
    let mut m = ManifestBuilder::new("gen-data", args, spec.seed, 1);
    let generated = dataset::generate(&spec)?;
    create_out(&a.out)?;
    dataset::write(&a.out, &generated)?;
    m.data_spec(&spec).output("dataset", &a.out.join(dataset::MANIFEST_FILE));
    if let Some(p) = &a.spec {
        m.input("spec", p);
    }
    m.finish(&a.out)?;
    let m = &generated.manifest;
    let test = m.blocks.iter().filter(|b| b.split == Split::Test).count();
    println!(
        "wrote {} blocks ({} train, {test} test) with {} classes to {}",
        m.blocks.len(),
        m.blocks.len() - test,
        m.classes.len() - 1,
        a.out.display()
    );
    for f in &m.folds {
        println!("fold {}: seen {:?} unseen {:?}", f.fold, f.seen, f.unseen);
    }
    Ok(())
}

/// Loads and overrides the run config, collecting problems instead of
/// stopping at the first one.
fn load_config(run: &RunArgs, problems: &mut Vec<String>) -> RunConfig {
    let mut cfg = match &run.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                problems.push(e.to_string());
                RunConfig::default()
            }
        },
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(f) = run.fold {
        cfg.fold = f;
    }
    require_dir(problems, "--data", &run.data);
    cfg
}

fn pretrain(a: PretrainArgs, args: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    let mut cfg = load_config(&a.run, &mut problems);
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    problems.extend(cfg.problems());
    fail_if(problems)?;
    let data = dataset::load(&a.run.data)?;
    pipeline::block_points(&data)?;
    let mut m = ManifestBuilder::new("pretrain", args, cfg.seed, 1);

    let outcome = pipeline::pretrain(&data, &cfg)?;
    create_out(&a.run.out)?;
    let ckpt = a.run.out.join("backbone");
    checkpoint::save_backbone(&ckpt, &cfg.backbone, &outcome.backbone)?;
    let log_path = a.run.out.join("metrics.jsonl");
    let mut log = MetricsLog::create(&log_path)?;
    log.write(&Record::Run { command: "pretrain".into(), seed: cfg.seed, fold: cfg.fold, flags: cfg.train.flags })?;
    for (epoch, &loss) in outcome.losses.iter().enumerate() {
        log.write(&Record::PretrainEpoch { epoch, loss, seed: cfg.seed })?;
    }
    log.finish()?;
    m.config(&cfg).input("data", &a.run.data).output("backbone", &ckpt).output("metrics", &log_path);
    m.finish(&a.run.out)?;
    println!(
        "pretrained {} epochs: loss {:.4} -> {:.4}",
        cfg.pretrain.epochs,
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn semantic_for(data: &Dataset, path: &Path) -> Result<SemanticContext> {
    let table = dataset::read_embeddings(path)?;
    SemanticContext::new(table, data.table.clone()).map_err(|e| CliError::invalid(format!("--embeddings: {e}")))
}

/// Evaluates `episodes`, logs one record per episode plus a summary, and
/// writes `<stem>.json` and `<stem>.csv`.
#[allow(clippy::too_many_arguments)]
fn evaluate_and_export(
    data: &Dataset,
    cfg: &RunConfig,
    model: &Model,
    episodes: &[Episode],
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
    threads: NonZeroUsize,
    log: &mut MetricsLog,
    out: &Path,
    stem: &str,
) -> Result<EvalReport> {
    let (rep, per_episode) = pipeline::evaluate(data, cfg, model, episodes, mode, semantic, threads)?;
    let mode_name = report::mode_name(mode).to_string();
    for (index, (ep, conf)) in episodes.iter().zip(&per_episode).enumerate() {
        log.write(&Record::Episode {
            index,
            mode: mode_name.clone(),
            classes: ep.class_map.clone(),
            counts: counts_of(conf),
            seed: cfg.seed,
        })?;
    }
    log.write(&Record::Eval {
        mode: mode_name,
        mean_iou: rep.mean_iou,
        episodes: rep.episodes,
        per_class: rep.per_class.iter().map(|c| (c.class, c.iou)).collect(),
        seed: cfg.seed,
    })?;
    for c in &rep.absent {
        eprintln!("warning: class {c} never occurred in the test episodes and is left out of the mean");
    }
    report::write_eval(out, stem, &EvalExport { report: rep.clone(), config: cfg.clone() })?;
    Ok(rep)
}

fn counts_of(conf: &Confusion) -> Vec<ClassCounts> {
    conf.counts.iter().map(|(&class, c)| ClassCounts { class, tp: c.tp, fp: c.fp, fn_: c.fn_ }).collect()
}

fn print_report(rep: &EvalReport) {
    for c in &rep.per_class {
        println!("  {:>3} {:<12} IoU {:.4}", c.class, c.name.as_deref().unwrap_or(""), c.iou);
    }
    println!("{} mean IoU {:.4} over {} episodes", report::mode_name(rep.mode), rep.mean_iou, rep.episodes);
}

fn train(a: TrainArgs, args: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    let mut cfg = load_config(&a.run, &mut problems);
    require_dir(&mut problems, "--backbone", &a.backbone);
    let flags = &mut cfg.train.flags;
    flags.qgpa &= !a.no_qgpa;
    flags.sr &= !a.no_sr;
    flags.augment &= !a.no_augment;
    flags.align |= a.align;
    flags.projection |= a.projection;
    if cfg.train.flags.projection && a.embeddings.is_none() {
        problems.push("--projection needs --embeddings <DIR>".into());
    }
    if let Some(p) = &a.embeddings {
        require_dir(&mut problems, "--embeddings", p);
    }
    if let Some(n) = a.iterations {
        cfg.train.max_iterations = n;
    }
    problems.extend(cfg.problems());
    fail_if(problems)?;

    let data = dataset::load(&a.run.data)?;
    let mut m = ManifestBuilder::new("train", args, cfg.seed, a.run.threads.get());
    let (bb_cfg, weights) = checkpoint::load_backbone(&a.backbone)?;
    if bb_cfg != cfg.backbone {
        return Err(CliError::invalid("the backbone checkpoint's architecture differs from the run configuration"));
    }
    let semantic = a.embeddings.as_deref().map(|p| semantic_for(&data, p)).transpose()?;
    let flags = cfg.train.flags;
    let model = pipeline::build_model(&data, &cfg, flags, weights, semantic.as_ref().map(|s| s.table.dim()))?;
    let episodes = pipeline::test_episodes(&data, &cfg)?;

    create_out(&a.run.out)?;
    let out = &a.run.out;
    let log_path = out.join("metrics.jsonl");
    let mut log = MetricsLog::create(&log_path)?;
    log.write(&Record::Run { command: "train".into(), seed: cfg.seed, fold: cfg.fold, flags })?;
    let every = (cfg.train.max_iterations / 20).max(1);
    let model = pipeline::train(&data, &cfg, model, flags.projection.then(|| semantic.clone()).flatten(), |r, _| {
        if (r.iteration + 1) % every == 0 {
            println!("iteration {:>6} loss {:.4}", r.iteration + 1, r.loss_total);
        }
        log.write(&Record::step(r, cfg.seed))
    })?;
    let ckpt = out.join("checkpoint");
    checkpoint::save_model(&ckpt, &model)?;
    let ep_path = out.join("episodes.toml");
    let (_, files) = data.pool(Split::Test);
    EpisodeManifest::describe(&episodes, files, cfg.seed, cfg.fold, Split::Test, cfg.episode).write(&ep_path)?;
    let rep = evaluate_and_export(&data, &cfg, &model, &episodes, EvalMode::Visual, None, a.run.threads, &mut log, out, "eval")?;
    print_report(&rep);
    if let Some(sem) = semantic.as_ref().filter(|_| flags.projection) {
        let zs = evaluate_and_export(
            &data, &cfg, &model, &episodes, EvalMode::ZeroShot, Some(sem), a.run.threads, &mut log, out, "eval_zero_shot",
        )?;
        print_report(&zs);
    }
    log.finish()?;
    m.config(&cfg).input("data", &a.run.data).input("backbone", &a.backbone);
    if let Some(p) = &a.embeddings {
        m.input("embeddings", p);
    }
    m.output("checkpoint", &ckpt).output("metrics", &log_path).output("episodes", &ep_path);
    m.output("eval", &out.join("eval.json"));
    m.finish(out)?;
    Ok(())
}

fn eval(a: EvalArgs, mode: EvalMode, args: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    let mut cfg = load_config(&a.run, &mut problems);
    require_dir(&mut problems, "--checkpoint", &a.checkpoint);
    if mode == EvalMode::ZeroShot && a.embeddings.is_none() {
        problems.push("zero-shot evaluation needs --embeddings <DIR>".into());
    }
    if let Some(p) = &a.embeddings {
        require_dir(&mut problems, "--embeddings", p);
    }
    if let Some(w) = a.ways {
        cfg.episode.ways = w;
    }
    if let Some(s) = a.shots {
        cfg.episode.shots = s;
    }
    if let Some(n) = a.episodes {
        cfg.eval_episodes = n;
    }
    if let Some(p) = &a.episode_file {
        if !p.is_file() {
            problems.push(format!("--episode-file {} does not exist", p.display()));
        }
    }
    problems.extend(cfg.problems());
    fail_if(problems)?;

    let command = if mode == EvalMode::Visual { "eval" } else { "zeroshot-eval" };
    let mut m = ManifestBuilder::new(command, args, cfg.seed, a.run.threads.get());
    let data = dataset::load(&a.run.data)?;
    let model = checkpoint::load_model(&a.checkpoint)?;
    cfg.backbone = model.config.backbone.clone();
    cfg.alpha = model.config.alpha;
    let semantic = a.embeddings.as_deref().map(|p| semantic_for(&data, p)).transpose()?;
    let episodes = match &a.episode_file {
        Some(p) => EpisodeManifest::read(p)?.episodes(&data)?,
        None => pipeline::test_episodes(&data, &cfg)?,
    };

    create_out(&a.run.out)?;
    let out = &a.run.out;
    let log_path = out.join("metrics.jsonl");
    let mut log = MetricsLog::create(&log_path)?;
    log.write(&Record::Run { command: command.into(), seed: cfg.seed, fold: cfg.fold, flags: cfg.train.flags })?;
    let ep_path = out.join("episodes.toml");
    let (_, files) = data.pool(Split::Test);
    EpisodeManifest::describe(&episodes, files, cfg.seed, cfg.fold, Split::Test, cfg.episode).write(&ep_path)?;
    let sem = if mode == EvalMode::ZeroShot { semantic.as_ref() } else { None };
    let rep = evaluate_and_export(&data, &cfg, &model, &episodes, mode, sem, a.run.threads, &mut log, out, "eval")?;
    log.finish()?;
    print_report(&rep);
    m.config(&cfg).input("data", &a.run.data).input("checkpoint", &a.checkpoint);
    if let Some(p) = &a.embeddings {
        m.input("embeddings", p);
    }
    if let Some(p) = &a.episode_file {
        m.input("episodes", p);
    }
    m.output("eval", &out.join("eval.json")).output("metrics", &log_path).output("episodes", &ep_path);
    m.finish(out)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let scope = Scope::parse(&a.scope)?;
    #[allow(unused_mut)]
    let mut fault: Option<OpKind> = None;
    #[cfg(feature = "fault-injection")]
    if let Some(name) = &a.inject_fault {
        fault = Some(OpKind::from_name(name).ok_or_else(|| CliError::invalid(format!("unknown op `{name}`")))?);
    }
    let start = std::time::Instant::now();
    let reports = suites::run(scope, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.report.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {}/{} max relative error {:.2e} over {} coordinates",
            r.scope.name(),
            r.name,
            r.report.max_rel_error,
            r.report.coordinates
        );
        if !r.report.passed {
            failed.push(format!("{}/{}", r.scope.name(), r.name));
        }
    }
    println!("{} of {} cases passed in {:.2?}", reports.len() - failed.len(), reports.len(), start.elapsed());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn report_cmd(a: ReportArgs, args: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    for p in &a.logs {
        if !p.is_file() {
            problems.push(format!("log {} does not exist", p.display()));
        }
    }
    fail_if(problems)?;
    let mut runs = Vec::with_capacity(a.logs.len());
    for p in &a.logs {
        let records = read_log(p)?;
        let label = p.parent().and_then(|d| d.file_name()).unwrap_or(p.as_os_str()).to_string_lossy().into_owned();
        runs.push(report::summarize(&label, &records).map_err(|m| CliError::format(p, m))?);
    }
    create_out(&a.out)?;
    let md = report::grid_markdown(&runs);
    io::write_text(&a.out.join("ablation.md"), &md)?;
    io::write_text(&a.out.join("ablation.csv"), &report::grid_csv(&runs))?;
    io::write_text(&a.out.join("learning_curve.svg"), &report::learning_curve_svg(&runs))?;
    print!("{md}");
    let mut m = ManifestBuilder::new("report", args, 0, 1);
    for (i, p) in a.logs.iter().enumerate() {
        m.input(&format!("log{i}"), p);
    }
    m.output("grid", &a.out.join("ablation.md")).output("curve", &a.out.join("learning_curve.svg"));
    m.finish(&a.out)?;
    Ok(())
}

fn bench_cmd(a: BenchArgs, args: &[String]) -> Result<()> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => io::read_toml(p).map_err(|e| CliError::invalid(e.to_string()))?,
        None => BenchConfig::default(),
    };
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    let mut problems = cfg.run.problems();
    problems.extend(cfg.data.problems());
    if cfg.seeds.is_empty() {
        problems.push("at least one seed is needed".into());
    }
    fail_if(problems)?;
    let mut m = ManifestBuilder::new("bench", args, cfg.seeds[0], cfg.threads);
    let summary = bench::run(&cfg, |m| println!("{m}"))?;
    create_out(&a.out)?;
    io::write_json(&a.out.join("bench.json"), &summary)?;
    m.config(&cfg.run).data_spec(&cfg.data).output("summary", &a.out.join("bench.json"));
    m.finish(&a.out)?;
    println!(
        "mean IoU over {} seeds: baseline {:.4}, qgpa {:.4}, full {:.4}, zero-shot {:.4}",
        summary.seeds.len(),
        summary.baseline,
        summary.qgpa,
        summary.full,
        summary.zero_shot
    );
    let ordered = summary.full >= summary.qgpa && summary.qgpa >= summary.baseline;
    if a.check && !(ordered && summary.full - summary.baseline >= 0.02) {
        return Err(CliError::CheckFailed("ablation ordering full >= qgpa >= baseline (+2 points) does not hold".into()));
    }
    Ok(())
}

/// Re-runs a recorded command with `--out` redirected and one thread.
fn replay(a: ReplayArgs) -> Result<()> {
    let recorded = manifest::read(&a.manifest)?;
    let mut args = recorded.args.clone();
    let mut i = 0;
    let mut saw_out = false;
    while i < args.len() {
        match args[i].as_str() {
            "--out" if i + 1 < args.len() => {
                args[i + 1] = a.out.display().to_string();
                saw_out = true;
                i += 1;
            }
            "--threads" if i + 1 < args.len() => {
                args[i + 1] = "1".into();
                i += 1;
            }
            s if s.starts_with("--out=") => {
                args[i] = format!("--out={}", a.out.display());
                saw_out = true;
            }
            s if s.starts_with("--threads=") => args[i] = "--threads=1".into(),
            _ => {}
        }
        i += 1;
    }
    if !saw_out || args.first().map(String::as_str) == Some("replay") {
        return Err(CliError::invalid(format!("{} does not record a replayable command", a.manifest.display())));
    }
    let argv = std::iter::once("protoseg".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::invalid(e.to_string()))?;
    dispatch(cli.command, &args)
}
