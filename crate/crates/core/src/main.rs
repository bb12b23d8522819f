use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use g2is::core_knowledge::{KMode, PcaOptions};
use g2is::feature_store::DegeneratePolicy;
use g2is::pipeline::{self, RunConfig, SelectPaths, WarmModel};
use g2is::projection::{ProjectionSketch, DEFAULT_D_OUT};
use g2is::toy::{self, SyntheticCorpus, TrainConfig};
use g2is::walk::{Dedup, FallbackTarget, ScoreSign, WalkConfig};
use g2is::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "g2is", version, about = "Gradient-graph instruction selection")]
struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random-project a GF1 feature file.
    Project(ProjectArgs),
    /// Extract core knowledge (principal components) from validation features.
    Pca(PcaArgs),
    /// Run the gradient walk and write the selection.
    Select(SelectArgs),
    /// Synthetic corpus and toy model utilities.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Run the configured pipeline end to end.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_D_OUT)]
    d_out: usize,
    /// Copy the features unchanged (d_out is ignored).
    #[arg(long)]
    passthrough: bool,
    #[arg(long)]
    drop_degenerate: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KModeArg {
    CumulativeVariance,
    CountFraction,
}

#[derive(Args, Debug)]
struct PcaArgs {
    /// Validation features; several files are stacked in order.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    k_ratio: f64,
    #[arg(long, value_enum, default_value = "cumulative-variance")]
    k_mode: KModeArg,
    /// Skip mean-centering before the decomposition.
    #[arg(long)]
    uncentered: bool,
    #[arg(long)]
    drop_degenerate: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DedupArg {
    PerComponent,
    Global,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FallbackArg {
    Component,
    WeightedCore,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    core: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    ratio: f64,
    #[arg(long, default_value_t = 0.8)]
    delta: f64,
    #[arg(long, value_enum, default_value = "per-component")]
    dedup: DedupArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Similarity-only baseline against the mean validation gradient.
    #[arg(long, requires = "validation")]
    no_graph: bool,
    #[arg(long, num_args = 1..)]
    validation: Vec<PathBuf>,
    /// Keep walking the largest component until the merged set reaches the target.
    #[arg(long)]
    top_up: bool,
    /// Exact top-K neighbor cache for candidate ranking.
    #[arg(long)]
    cache_k: Option<usize>,
    #[arg(long, value_enum, default_value = "component")]
    fallback: FallbackArg,
    /// Rank anchors and fallbacks by signed rather than absolute cosine.
    #[arg(long)]
    signed: bool,
    #[arg(long)]
    drop_degenerate: bool,
}

#[derive(Subcommand, Debug)]
enum ToyCommand {
    /// Generate a seeded multi-task corpus.
    Gen {
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adam warmup on a random corpus subset.
    Warmup {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train (momentum) and target-validation (SGD) GF1 files.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        target_task: usize,
        #[arg(long, default_value_t = 100)]
        validation_n: usize,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        validation_out: PathBuf,
    },
    /// Fine-tune on a selection and report target-task loss and accuracy.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long, default_value_t = 0)]
        target_task: usize,
        #[arg(long, default_value_t = 1000)]
        eval_n: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long = "train-seed", default_value_t = 0)]
    train_seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.train_seed,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON (`.json`) or TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    k_ratio: Option<f64>,
    #[arg(long, value_enum)]
    dedup: Option<DedupArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_graph: bool,
    #[arg(long)]
    top_up: bool,
    #[arg(long)]
    cache_k: Option<usize>,
}

fn policy(drop: bool) -> DegeneratePolicy {
    if drop {
        DegeneratePolicy::Drop
    } else {
        DegeneratePolicy::Reject
    }
}

fn dedup(d: DedupArg) -> Dedup {
    match d {
        DedupArg::PerComponent => Dedup::PerComponent,
        DedupArg::Global => Dedup::Global,
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    paths.iter().try_for_each(|p| pipeline::require_exists(p))
}

fn manifest(output: &Path, command: &str, config: &impl serde::Serialize, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let own = |ps: &[&Path]| ps.iter().map(|p| p.to_path_buf()).collect::<Vec<_>>();
    pipeline::write_run_manifest(
        &pipeline::run_manifest_path(output),
        command,
        config,
        &own(inputs),
        &own(outputs),
    )
}

fn run_project(a: &ProjectArgs) -> Result<()> {
    require(&[&a.input])?;
    let set = g2is::FeatureSet::load(&a.input, policy(a.drop_degenerate))?;
    let sketch = if a.passthrough {
        ProjectionSketch::passthrough(set.matrix.d())
    } else {
        ProjectionSketch::new(a.seed, set.matrix.d(), a.d_out)?
    };
    let projected = sketch.project(&set.matrix)?;
    g2is::FeatureSet::new(projected, set.manifest)?.save(&a.out)?;
    let sidecar = g2is::feature_store::manifest_path(&a.out);
    manifest(&a.out, "project", &sketch, &[&a.input], &[&a.out, &sidecar])
}

fn run_pca(a: &PcaArgs) -> Result<()> {
    let inputs: Vec<&Path> = a.inputs.iter().map(|p| p.as_path()).collect();
    require(&inputs)?;
    let opts = PcaOptions {
        k_ratio: a.k_ratio,
        k_mode: match a.k_mode {
            KModeArg::CumulativeVariance => KMode::CumulativeVariance,
            KModeArg::CountFraction => KMode::CountFraction,
        },
        centered: !a.uncentered,
    };
    pipeline::pca_files(&a.inputs, &opts, &a.out, policy(a.drop_degenerate))?;
    manifest(&a.out, "pca", &opts, &inputs, &[&a.out])
}

fn run_select(a: &SelectArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.train];
    if let Some(c) = &a.core {
        if !a.no_graph {
            inputs.push(c);
        }
    }
    if a.no_graph {
        inputs.extend(a.validation.iter().map(|p| p.as_path()));
    }
    require(&inputs)?;
    let cfg = WalkConfig {
        ratio: a.ratio,
        delta: a.delta,
        dedup: dedup(a.dedup),
        fallback: match a.fallback {
            FallbackArg::Component => FallbackTarget::Component,
            FallbackArg::WeightedCore => FallbackTarget::WeightedCore,
        },
        score_sign: if a.signed { ScoreSign::Signed } else { ScoreSign::Absolute },
        top_up: a.top_up,
        cache_k: a.cache_k,
        ..Default::default()
    };
    let paths = SelectPaths {
        train: &a.train,
        core: a.core.as_deref(),
        validation: &a.validation,
        out: &a.out,
        report: &a.report,
    };
    let count = pipeline::select_files(&paths, &cfg, a.no_graph, policy(a.drop_degenerate))?;
    log::info!("selected {count} samples");
    let echo = serde_json::json!({ "walk": cfg, "no_graph": a.no_graph });
    manifest(&a.out, "select", &echo, &inputs, &[&a.out, &a.report])
}

fn run_toy(cmd: &ToyCommand) -> Result<()> {
    match cmd {
        ToyCommand::Gen { n, tasks, seed, out } => {
            let corpus = toy::generate_corpus(*n, *tasks, *seed)?;
            pipeline::write_json(out, &corpus)?;
            manifest(out, "toy gen", &serde_json::json!({ "n": n, "tasks": tasks, "seed": seed }), &[], &[out])
        }
        ToyCommand::Warmup { corpus, n, train, out } => {
            require(&[corpus])?;
            let c: SyntheticCorpus = pipeline::read_json(corpus)?;
            let cfg = train.config();
            let warm = pipeline::toy_warmup(&c, *n, &cfg, cfg.seed)?;
            pipeline::write_json(out, &warm)?;
            manifest(out, "toy warmup", &serde_json::json!({ "n": n, "train": cfg }), &[corpus], &[out])
        }
        ToyCommand::Extract {
            corpus,
            model,
            target_task,
            validation_n,
            train_out,
            validation_out,
        } => {
            require(&[corpus, model])?;
            let c: SyntheticCorpus = pipeline::read_json(corpus)?;
            let warm: WarmModel = pipeline::read_json(model)?;
            let (train, validation) = pipeline::toy_extract(&c, &warm, *target_task, *validation_n)?;
            train.save(train_out)?;
            validation.save(validation_out)?;
            let echo = serde_json::json!({ "target_task": target_task, "validation_n": validation_n });
            manifest(train_out, "toy extract", &echo, &[corpus, model], &[train_out, validation_out])
        }
        ToyCommand::Eval {
            corpus,
            model,
            selection,
            target_task,
            eval_n,
            train,
            out,
        } => {
            require(&[corpus, model, selection])?;
            let c: SyntheticCorpus = pipeline::read_json(corpus)?;
            let warm: WarmModel = pipeline::read_json(model)?;
            let selected = pipeline::read_selection_indices(selection)?;
            let result = pipeline::toy_eval(&c, &warm, &selected, *target_task, *eval_n, &train.config())?;
            let text = serde_json::to_string_pretty(&result).map_err(|e| Error::Internal(e.to_string()))?;
            println!("{text}");
            if let Some(out) = out {
                pipeline::write_json(out, &result)?;
            }
            Ok(())
        }
    }
}

fn run_run(a: &RunArgs) -> Result<()> {
    require(&[&a.config])?;
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = &a.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = a.ratio {
        cfg.walk.ratio = v;
    }
    if let Some(v) = a.delta {
        cfg.walk.delta = v;
    }
    if let Some(v) = a.k_ratio {
        cfg.walk.k_ratio = v;
    }
    if let Some(v) = a.dedup {
        cfg.walk.dedup = dedup(v);
    }
    if let Some(v) = a.seed {
        cfg.walk.seed = v;
        if let Some(t) = cfg.toy.as_mut() {
            t.seed = v;
        }
    }
    if let Some(v) = a.cache_k {
        cfg.walk.cache_k = Some(v);
    }
    cfg.no_graph |= a.no_graph;
    cfg.walk.top_up |= a.top_up;
    let count = pipeline::run_pipeline(&cfg)?;
    log::info!("selected {count} samples into {}", cfg.out_dir.display());
    Ok(())
}

fn init_logging(config: Option<&Path>) {
    // A config file's log_level applies when G2IS_LOG is unset.
    let fallback = config
        .and_then(|p| RunConfig::load(p).ok())
        .and_then(|c| c.log_level)
        .unwrap_or_else(|| "warn".into());
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("G2IS_LOG", fallback))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.command {
        Command::Run(a) => Some(a.config.as_path()),
        _ => None,
    };
    init_logging(config);
    let result = g2is::par::with_threads(cli.threads, || match &cli.command {
        Command::Project(a) => run_project(a),
        Command::Pca(a) => run_pca(a),
        Command::Select(a) => run_select(a),
        Command::Toy(c) => run_toy(c),
        Command::Run(a) => run_run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("g2is: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
