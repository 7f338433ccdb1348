//! `flowgan` command-line front end.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowgan::data::{load_dataset, split_by_label, synth_fixture, FixtureSpec, FlowDataset, Label};
use flowgan::eval::{evaluate_training_set, EvalOptions, EvalReport};
use flowgan::experiment::{
    emit_histogram_compare, emit_metric_series, run_training, MarginalData, MarginalSpec,
    RunManifest,
};
use flowgan::metrics::{similarity, DEFAULT_BINS};
use flowgan::policy::{
    evaluate_marginal, evaluate_pair, fit_mean_baseline, select_best, ElitismSpec, Policy,
    PolicySpec, SelectionSetup,
};
use flowgan::wgan::{Checkpoint, CriticFilter, GanConfig, GenerateOptions};

/// Relative output paths are resolved against this directory when set.
const OUT_ROOT_ENV: &str = "FLOWGAN_OUT";

#[derive(Parser)]
#[command(name = "flowgan", version, about = "Per-class WGANs for flow-feature records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a labeled dataset from a mixture fixture spec.
    Fixture {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed stored in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one class's generator and write a run directory.
    Train(TrainArgs),
    /// Sample synthetic rows from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Histogram L1 distance and Jaccard index between two datasets.
    Metrics {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// JSON output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random-forest evaluation of a synthetic training set.
    #[command(subcommand)]
    Evaluate(EvalCommand),
    /// Search generator checkpoints for the best synthetic training set.
    Select(SelectArgs),
    /// Mean-matched independent-normal baseline training set.
    Baseline {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also score the baseline against this test set.
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Data files behind the training-evolution and histogram plots.
    #[command(subcommand, name = "emit-plots")]
    EmitPlots(PlotCommand),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Class to train; required when the data holds both labels.
    #[arg(long)]
    label: Option<u8>,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// Rows of the other class used for complementary training.
    #[arg(long)]
    complementary: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Score every checkpoint against this test set. The other class's
    /// rows are taken from `--data`.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    metrics_seed: u64,
}

#[derive(Args, Clone)]
struct GenArgs {
    /// `off`, `positive` or `pNN` for a critic-output percentile.
    #[arg(long, default_value = "off")]
    filter: String,
    #[arg(long)]
    clip_negatives: bool,
}

impl GenArgs {
    fn options(&self) -> Result<GenerateOptions> {
        let filter = match self.filter.as_str() {
            "off" => CriticFilter::Off,
            "positive" => CriticFilter::Positive,
            p if p.starts_with('p') => CriticFilter::Percentile {
                p: p[1..]
                    .parse()
                    .with_context(|| format!("bad percentile filter {p}"))
                    .map_err(config_err)?,
            },
            other => return Err(config_err(anyhow::anyhow!("unknown filter {other}"))),
        };
        Ok(GenerateOptions {
            filter,
            clip_negatives: self.clip_negatives,
            ..GenerateOptions::default()
        })
    }
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long, default_value_t = 300)]
    trees: usize,
    #[arg(long, default_value_t = 0)]
    forest_seed: u64,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions::default().with_trees(self.trees, self.forest_seed)
    }
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Synthetic rows of one class plus real rows of the other.
    Marginal {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Real training data; rows of the other class are used.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Synthetic rows; defaults to the real count of the class.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fully synthetic training set from one checkpoint per class.
    Pair {
        #[arg(long)]
        ckpt0: PathBuf,
        #[arg(long)]
        ckpt1: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Real training data, the reference score.
    Real {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    run0: PathBuf,
    #[arg(long)]
    run1: PathBuf,
    #[arg(long, default_value = "P1")]
    policy: Policy,
    /// One spec for both classes, or two separated by a comma.
    #[arg(long, default_value = "f1:10")]
    elitism: String,
    #[arg(long, default_value_t = 20)]
    draws: usize,
    #[arg(long)]
    test: PathBuf,
    /// Label-0 rows; defaults to the rows run0 was trained on.
    #[arg(long)]
    n: Option<usize>,
    /// Label-1 rows; defaults to the rows run1 was trained on.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    exhaustive: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum PlotCommand {
    /// Per-checkpoint macro-F1, L1 and Jaccard of a run.
    Series {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flattened histogram of real and synthetic data.
    Histogram {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure categories, each with its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Config,
    MissingFile,
    Runtime,
}

#[derive(Debug)]
struct Categorized(Category);

impl std::fmt::Display for Categorized {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl std::error::Error for Categorized {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    e.context(Categorized(Category::Config))
}

fn category(e: &anyhow::Error) -> Category {
    if let Some(c) = e.downcast_ref::<Categorized>() {
        return c.0;
    }
    for cause in e.chain() {
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return Category::MissingFile;
            }
        }
    }
    Category::Runtime
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Runtime => 1,
        Category::Config => 3,
        Category::MissingFile => 4,
    }
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = out_path(p);
    create_parent(&p)?;
    fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn missing(p: &Path) -> anyhow::Error {
    anyhow::anyhow!("{} does not exist", p.display()).context(Categorized(Category::MissingFile))
}

/// Loads a dataset CSV, taking the dimension from its header.
fn read_csv(p: &Path) -> Result<FlowDataset> {
    if !p.exists() {
        return Err(missing(p));
    }
    let mut header = String::new();
    BufReader::new(fs::File::open(p)?).read_line(&mut header)?;
    let cols = header.trim().split(',').count();
    if cols < 2 {
        bail!("{}: header needs feature columns and a label", p.display());
    }
    load_dataset(p, cols - 1).with_context(|| format!("reading {}", p.display()))
}

fn read_checkpoint(p: &Path) -> Result<Checkpoint> {
    if !p.exists() {
        return Err(missing(p));
    }
    Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    if !dir.exists() {
        return Err(missing(dir));
    }
    RunManifest::load(dir).with_context(|| format!("loading run {}", dir.display()))
}

fn label_arg(v: u8) -> Result<Label> {
    Label::try_from(v).map_err(|e| config_err(anyhow::anyhow!(e)))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let json = write_file(&out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv, true)?;
    write_file(&out.join("report.csv"), csv)?;
    println!(
        "macro_f1 {:.4} at threshold {} -> {}",
        report.best_macro_f1(),
        report.best().threshold,
        json.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let mut config = GanConfig::from_json(&text).map_err(|e| config_err(e.into()))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let data = read_csv(&a.data)?;
    let parts = split_by_label(&data);
    let label = match a.label {
        Some(l) => label_arg(l)?,
        None if parts.len() == 1 => *parts.keys().next().expect("one label"),
        None => return Err(config_err(anyhow::anyhow!("data holds both labels; pass --label"))),
    };
    let class = parts
        .get(&label)
        .with_context(|| format!("no rows with label {label}"))
        .map_err(config_err)?;
    let comp = a.complementary.as_deref().map(read_csv).transpose()?;
    let test = a.test.as_deref().map(read_csv).transpose()?;
    let spec = MarginalSpec {
        eval: a.eval.options(),
        seed: a.metrics_seed,
        ..MarginalSpec::default()
    };
    let marginal = match &test {
        Some(t) => Some(MarginalData {
            real_class: class,
            real_other: parts
                .get(&label.other())
                .context("--test needs rows of the other class in --data")
                .map_err(config_err)?,
            test: t,
        }),
        None => None,
    };
    let out = out_path(&a.out);
    let run_id = out
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("label{label}"));
    let run = run_training(
        &run_id,
        &config,
        class,
        comp.as_ref(),
        a.steps,
        marginal.as_ref().map(|m| (m, &spec)),
        Some(&out),
    )?;
    let m = &run.manifest;
    println!(
        "trained label {label}: {} steps, {} checkpoints -> {}",
        m.diagnostics.len(),
        m.checkpoints.len(),
        out.display()
    );
    if let Some(e) = &m.error {
        bail!("training stopped early: {e}");
    }
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    let (m0, m1) = (read_manifest(&a.run0)?, read_manifest(&a.run1)?);
    let pool0 = m0.pool(&a.run0)?;
    let pool1 = m1.pool(&a.run1)?;
    let specs: Vec<ElitismSpec> = a
        .elitism
        .split(',')
        .map(|s| s.trim().parse::<ElitismSpec>())
        .collect::<Result<_, _>>()
        .map_err(|e| config_err(anyhow::anyhow!(e)))?;
    let elitism = match specs.as_slice() {
        [e] => [*e, *e],
        [e0, e1] => [*e0, *e1],
        _ => return Err(config_err(anyhow::anyhow!("--elitism takes one or two specs"))),
    };
    let test = read_csv(&a.test)?;
    let setup = SelectionSetup {
        policy: PolicySpec::new(
            a.policy,
            a.n.unwrap_or(m0.train_rows),
            a.m.unwrap_or(m1.train_rows),
            a.draws,
        ),
        elitism,
        real_test: &test,
        generate: a.gen.options()?,
        eval: a.eval.options(),
        seed: a.seed,
        exhaustive: a.exhaustive,
    };
    let result = select_best(&pool0, &pool1, &setup)?;
    let out = out_path(&a.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("selection.json"), serde_json::to_string_pretty(&result)?)?;
    let mut lb = Vec::new();
    result.write_leaderboard(&mut lb)?;
    fs::write(out.join("leaderboard.csv"), lb)?;
    println!(
        "best macro_f1 {:.4} ({} + {}), median {:.4} over {} draws",
        result.chosen.macro_f1,
        result.chosen.ids0.join("+"),
        result.chosen.ids1.join("+"),
        result.median_macro_f1(),
        result.leaderboard.len()
    );
    Ok(())
}

fn evaluate(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Marginal {
            checkpoint,
            train,
            test,
            size,
            out,
            gen,
            eval,
            seed,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let train = read_csv(&train)?;
            let parts = split_by_label(&train);
            let other = parts
                .get(&ck.label.other())
                .with_context(|| format!("--train has no rows of label {}", ck.label.other()))
                .map_err(config_err)?;
            let size = size.unwrap_or_else(|| train.class_count(ck.label));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = evaluate_marginal(
                &ck,
                other,
                &read_csv(&test)?,
                size,
                &gen.options()?,
                &eval.options(),
                &mut rng,
            )?;
            write_report(&out, &report)
        }
        EvalCommand::Pair {
            ckpt0,
            ckpt1,
            n,
            m,
            test,
            out,
            gen,
            eval,
            seed,
        } => {
            let (c0, c1) = (read_checkpoint(&ckpt0)?, read_checkpoint(&ckpt1)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = evaluate_pair(
                &c0,
                &c1,
                (n, m),
                &read_csv(&test)?,
                &gen.options()?,
                &eval.options(),
                &mut rng,
            )?;
            write_report(&out, &report)
        }
        EvalCommand::Real {
            train,
            test,
            out,
            eval,
        } => {
            let report = evaluate_training_set(
                &read_csv(&train)?,
                &read_csv(&test)?,
                &eval.options(),
                vec![train.display().to_string()],
            )?;
            write_report(&out, &report)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixture { spec, out, seed } => {
            if !spec.exists() {
                return Err(missing(&spec));
            }
            let mut fx = FixtureSpec::from_json(&fs::read_to_string(&spec)?)
                .map_err(|e| config_err(e.into()))?;
            if let Some(s) = seed {
                fx = fx.with_seed(s);
            }
            let ds = synth_fixture(&fx).map_err(|e| config_err(e.into()))?;
            let out = out_path(&out);
            create_parent(&out)?;
            ds.save_csv(&out)?;
            println!("{} rows -> {}", ds.len(), out.display());
        }
        Command::Train(a) => train(a)?,
        Command::Generate {
            checkpoint,
            n,
            out,
            gen,
            seed,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = ck.generate(n, &gen.options()?, &mut rng)?;
            let out = out_path(&out);
            create_parent(&out)?;
            ds.save_csv(&out)?;
            println!("{} rows of label {} -> {}", ds.len(), ck.label, out.display());
        }
        Command::Metrics {
            real,
            synth,
            bins,
            out,
        } => {
            let s = similarity(read_csv(&real)?.view(), read_csv(&synth)?.view(), bins)?;
            let json = serde_json::to_string_pretty(&s)?;
            match out {
                Some(p) => {
                    write_file(&p, json)?;
                }
                None => println!("{json}"),
            }
        }
        Command::Evaluate(cmd) => evaluate(cmd)?,
        Command::Select(a) => select(a)?,
        Command::Baseline {
            train,
            out,
            test,
            eval,
            seed,
        } => {
            let real = read_csv(&train)?;
            let base = fit_mean_baseline(&real)?;
            let counts = [
                real.class_count(Label::Normal),
                real.class_count(Label::Mining),
            ];
            let ds = base.training_set(counts, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = out_path(&out);
            create_parent(&out)?;
            ds.save_csv(&out)?;
            println!("{} baseline rows -> {}", ds.len(), out.display());
            if let Some(t) = test {
                let r = evaluate_training_set(&ds, &read_csv(&t)?, &eval.options(), vec!["baseline".into()])?;
                println!("baseline macro_f1 {:.4}", r.best_macro_f1());
            }
        }
        Command::EmitPlots(PlotCommand::Series { run, out }) => {
            let m = read_manifest(&run)?;
            let mut buf = Vec::new();
            emit_metric_series(&m, &mut buf)?;
            write_file(&out, buf)?;
        }
        Command::EmitPlots(PlotCommand::Histogram {
            real,
            synth,
            bins,
            out,
        }) => {
            let mut buf = Vec::new();
            emit_histogram_compare(&read_csv(&real)?, &read_csv(&synth)?, bins, &mut buf)?;
            write_file(&out, buf)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = category(&e);
            eprintln!("error ({}): {e:#}", format!("{c:?}").to_lowercase());
            ExitCode::from(exit_code(c))
        }
    }
}
