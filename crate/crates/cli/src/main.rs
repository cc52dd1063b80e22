use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vega_autodiff::gradcheck::{op_suite, GradCheckConfig};
use vega_core::anchor::{mean_intra_class_cosine, AnchorSet};
use vega_core::checkpoint::{read_checkpoint, write_checkpoint};
use vega_core::config::RunConfig;
use vega_core::data::{load_manifest, read_anchor_file, split_indices, synth_generate, write_anchor_file, write_manifest, SynthSpec};
use vega_core::gradcheck::check_objective;
use vega_core::model::{Model, ModelShape};
use vega_core::objective::{AblationMode, LossWeights};
use vega_core::train::{evaluate, train, LogEvent};
use vega_core::PerModality;

/// Writes a line to stdout; a closed pipe (`vega ... | head`) is not an error.
macro_rules! out {
    (@raw $($arg:tt)*) => {{
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "vega", version, about = "Anchor-guided multimodal emotion recognition in conversations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and a matching anchor file.
    Synth(SynthArgs),
    /// Inspect or summarize an anchor file.
    #[command(subcommand)]
    Anchors(AnchorsCmd),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print per-class ACC/F1.
    Eval(EvalArgs),
    /// Finite-difference check of every operation and of the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    convs: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    /// Class-mean distance from the origin in noise standard deviations.
    #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
    sep: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Feature widths of the text, audio and visual streams.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [64, 48, 32])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    anchor_dim: usize,
    #[arg(long, default_value_t = 35)]
    anchors_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnchorsCmd {
    /// Write a file with each class's center anchor as its only vector.
    Center {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class instance count, dimension and mean intra-class cosine.
    Stats { input: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `3`, `1,2,5` or an inclusive range `1..10`. Several seeds run as
    /// separate processes, each in `<out>/seed_<n>`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Skip per-step entries in the log.
    #[arg(long)]
    quiet_steps: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = AblationMode::Full)]
    ablation: AblationMode,
    /// Random shapes per operation.
    #[arg(long, default_value_t = 3)]
    shapes: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Cmd::Anchors(a) => anchors(a).map(|_| ExitCode::SUCCESS),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a).map(|_| ExitCode::SUCCESS),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        num_conversations: a.convs,
        utterances_per_conv: a.utts,
        dims: PerModality([a.dims[0], a.dims[1], a.dims[2]]),
        anchor_dim: a.anchor_dim,
        anchors_per_class: a.anchors_per_class,
        separation: a.sep,
        seed: a.seed,
    };
    let (ds, anchors) = synth_generate(&spec)?;
    let manifest = write_manifest(&ds, &a.out)?;
    let anchor_path = a.out.join("anchors.vea");
    write_anchor_file(&anchor_path, &anchors)?;
    out!(
        "wrote {} conversations, {} utterances, {} classes to {}; anchors {}",
        ds.conversations.len(),
        ds.num_utterances(),
        ds.num_classes(),
        manifest.display(),
        anchor_path.display()
    );
    Ok(())
}

fn anchors(cmd: AnchorsCmd) -> Result<()> {
    match cmd {
        AnchorsCmd::Center { input, out } => {
            let set = AnchorSet::from_file(&read_anchor_file(&input)?, None)?;
            write_anchor_file(&out, &set.centers_file())?;
            out!("wrote {} centers of dimension {} to {}", set.num_classes(), set.dim(), out.display());
        }
        AnchorsCmd::Stats { input } => {
            let set = AnchorSet::from_file(&read_anchor_file(&input)?, None)?;
            let width = set.classes().iter().map(String::len).max().unwrap_or(5).max(5);
            out!("{:<width$}  {:>5}  {:>5}  {:>10}", "class", "n", "dim", "intra_cos");
            for (c, name) in set.classes().iter().enumerate() {
                out!(
                    "{:<width$}  {:>5}  {:>5}  {:>10.4}",
                    name,
                    set.instances(c).len(),
                    set.dim(),
                    mean_intra_class_cosine(&set, c)
                );
            }
        }
    }
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().with_context(|| format!("bad seed range {s:?}"))?;
        let hi: u64 = hi.trim().parse().with_context(|| format!("bad seed range {s:?}"))?;
        if lo > hi {
            bail!("empty seed range {s:?}");
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().with_context(|| format!("bad seed {p:?}")))
        .collect()
}

/// Loads the config file if given, making its relative paths relative to
/// the file's directory.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let mut cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.manifest, &mut cfg.anchors, &mut cfg.out_dir].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.manifest {
        cfg.manifest = Some(p);
    }
    if let Some(p) = a.anchors {
        cfg.anchors = Some(p);
    }
    if let Some(p) = a.out {
        cfg.out_dir = Some(p);
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(m) = a.ablation {
        cfg.train.ablation = m;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = a.d {
        cfg.model.encoder.d = v;
    }
    if let Some(v) = a.heads {
        cfg.model.encoder.heads = v;
    }
    if let Some(v) = a.q {
        cfg.train.sampling.q = v;
    }
    if let Some(v) = a.images_per_class {
        cfg.train.images_per_class = Some(v);
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    if a.quiet_steps {
        cfg.train.log_steps = false;
    }
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        bail!("no seeds given");
    }
    let manifest = cfg.manifest.clone().ok_or_else(|| anyhow!("no dataset: pass --manifest or set \"manifest\" in the config"))?;
    cfg.manifest = Some(absolute(&manifest)?);
    if let Some(p) = &cfg.anchors {
        cfg.anchors = Some(absolute(p)?);
    }
    let out = absolute(cfg.out_dir.as_deref().unwrap_or(Path::new("runs")))?;
    cfg.out_dir = Some(out.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    if cfg.seeds.len() == 1 {
        train_one(&cfg, &out)?;
        return Ok(ExitCode::SUCCESS);
    }

    // One process per seed, each with a fully resolved config of its own.
    let exe = std::env::current_exe().context("locating the vega executable")?;
    let mut children = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut one = cfg.clone();
        one.seeds = vec![seed];
        one.out_dir = Some(dir.clone());
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, one.to_json()).with_context(|| format!("writing {}", cfg_path.display()))?;
        let child = Command::new(&exe)
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .stdout(File::create(dir.join("stdout.txt"))?)
            .spawn()
            .with_context(|| format!("starting seed {seed}"))?;
        children.push((seed, dir, child));
    }
    let mut failed = Vec::new();
    for (seed, dir, mut child) in children {
        let status = child.wait()?;
        if status.success() {
            let summary = std::fs::read_to_string(dir.join("stdout.txt")).unwrap_or_default();
            out!(@raw "seed {seed}: {summary}");
        } else {
            eprintln!("seed {seed} failed ({status}); see {}", dir.display());
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} of {} seeds failed: {failed:?}", failed.len(), cfg.seeds.len());
        Ok(ExitCode::FAILURE)
    }
}

fn train_one(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed = cfg.seeds[0];
    let manifest = cfg.manifest.as_deref().expect("resolved by the caller");
    let ds = load_manifest(manifest)?;
    let anchors = match &cfg.anchors {
        Some(p) => Some(AnchorSet::from_file(&read_anchor_file(p)?, None)?),
        None => None,
    };
    let [tr, va, te] = split_indices(ds.conversations.len(), cfg.split, cfg.split_seed)?;
    std::fs::write(out.join("config.json"), cfg.to_json()).context("writing config.json")?;
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut io_error = None;
    let outcome = train(&ds, &tr, &va, anchors.as_ref(), &cfg.model, &cfg.train, seed, &mut |e: &LogEvent| {
        let line = serde_json::to_string(e).expect("log events serialize");
        if let Err(err) = writeln!(log, "{line}") {
            io_error.get_or_insert(err);
        }
    })?;
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e).context("writing the training log");
    }
    write_checkpoint(out.join("checkpoint.vck"), &outcome.best)?;
    let report = evaluate(&outcome.model, &outcome.best, &ds, &te)?;
    std::fs::write(out.join("test_metrics.json"), serde_json::to_string_pretty(&report)?)?;
    out!(
        "best epoch {} of {}; test ACC {:.2} w-F1 {:.2}; checkpoint {}",
        outcome.best_epoch,
        outcome.history.len(),
        100.0 * report.acc,
        100.0 * report.weighted_f1,
        out.join("checkpoint.vck").display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.manifest {
        cfg.manifest = Some(p);
    }
    if let Some(m) = a.ablation {
        cfg.train.ablation = m;
    }
    if let Some(v) = a.d {
        cfg.model.encoder.d = v;
    }
    if let Some(v) = a.heads {
        cfg.model.encoder.heads = v;
    }
    cfg.validate()?;
    let manifest = cfg.manifest.clone().ok_or_else(|| anyhow!("no dataset: pass --manifest or set \"manifest\" in the config"))?;
    let ds = load_manifest(&manifest)?;
    let store = read_checkpoint(&a.checkpoint)?;
    let plan = cfg.train.ablation.plan();
    // The anchor width only matters when classification runs in anchor space.
    let d_anc = if plan.single_branch {
        store
            .get("vega.fuse.l2.w")
            .map(|p| p.shape[1])
            .ok_or_else(|| anyhow!("single-branch evaluation needs a checkpoint with projection heads"))?
    } else {
        0
    };
    let model = Model::new(cfg.model.clone(), ModelShape::for_dataset(&ds, d_anc, false, plan.single_branch))?;
    model
        .select_params(&store)
        .with_context(|| format!("checkpoint {} does not fit this model configuration", a.checkpoint.display()))?;
    let convs: Vec<usize> = match a.split {
        SplitName::All => (0..ds.conversations.len()).collect(),
        s => {
            let [tr, va, te] = split_indices(ds.conversations.len(), cfg.split, cfg.split_seed)?;
            match s {
                SplitName::Train => tr,
                SplitName::Val => va,
                _ => te,
            }
        }
    };
    let report = evaluate(&model, &store, &ds, &convs)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        out!(@raw "{}", report.render_table());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig::default();
    let mut ok = true;
    for r in op_suite(a.seed, a.shapes, cfg)? {
        let status = if r.report.passed() { "ok" } else { "FAILED" };
        out!("{:<12} {:>6} entries  max rel {:.2e}  {status}", r.op, r.report.checked, r.report.max_rel_err);
        ok &= r.report.passed();
    }
    let r = check_objective(a.seed, &a.ablation.plan(), &LossWeights::default(), cfg)?;
    let status = if r.report.passed() { "ok" } else { "FAILED" };
    out!(
        "{:<12} {:>6} entries  max rel {:.2e}  {status}",
        format!("objective:{}", a.ablation),
        r.report.checked,
        r.report.max_rel_err
    );
    for m in r.report.mismatches.iter().take(5) {
        eprintln!("  input {} index {}: analytic {:e} numeric {:e}", m.input, m.index, m.analytic, m.numeric);
    }
    ok &= r.report.passed();
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
