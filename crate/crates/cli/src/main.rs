//! `sensprune`: train, sparsify, evaluate and compare regularizers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
//! 3 training diverged.

mod fetch;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use sensprune::data::{load_mnist, Dataset};
use sensprune::nn::{lenet300, lenet5, Network};
use sensprune::pruning::{load_sparse, save_sparse, PruneMask, SparsityReport};
use sensprune::recipe::{recipe, run_comparison, Architecture, Comparison, ExperimentRecipe, RECIPES};
use sensprune::regularization::RegularizerKind;
use sensprune::sensitivity::SensitivityMode;
use sensprune::trainer::{
    evaluate, render_table, train_phase1, train_phase2, EpochContext, EpochMetrics, MetricsCsv, RunSummary,
    StopReason, TrainConfig, TrainFailure,
};

const DATA_ENV: &str = "SENSPRUNE_DATA";

#[derive(Parser)]
#[command(name = "sensprune", version, about = "Sensitivity-driven regularization and pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train to the target error, then sparsify until the error rises above it.
    Train(TrainArgs),
    /// Sparsify an existing model (phase 2 only).
    Prune(PruneArgs),
    /// Test loss, top-1 error and sparsity of a saved model.
    Eval(EvalArgs),
    /// Fixed-length runs with no, l1, l2 and sensitivity regularization.
    CompareReg(CompareArgs),
    /// Render the results row of a finished run from its artifacts.
    Report(ReportArgs),
    /// Download the MNIST files and verify their checksums.
    Fetch(FetchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the MNIST IDX files (plain or .gz).
    #[arg(long, env = DATA_ENV)]
    data: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
}

/// Settings applied on top of the recipe, in increasing priority: recipe,
/// `--config` file, individual flags.
#[derive(Args, Default)]
struct Overrides {
    /// JSON file with training-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epoch budget of phase 1.
    #[arg(long)]
    epochs1: Option<usize>,
    /// Epoch budget of phase 2.
    #[arg(long)]
    epochs2: Option<usize>,
    /// Target test error as a fraction, e.g. 0.0195.
    #[arg(long)]
    target_error: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// unspecific or specific
    #[arg(long)]
    mode: Option<String>,
    /// none, l1, l2 or sensitivity
    #[arg(long)]
    regularizer: Option<String>,
    /// Leave biases out of the regularization pull.
    #[arg(long)]
    no_bias_reg: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// One of lenet300-1.65, lenet300-1.95, lenet5-0.78.
    #[arg(long, default_value = "lenet300-1.95")]
    recipe: String,
    /// Run directory for metrics, summary and model.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PruneArgs {
    /// Sparse model to start from.
    #[arg(long)]
    model: PathBuf,
    /// Recipe supplying the defaults.
    #[arg(long, default_value = "lenet300-1.95")]
    recipe: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Epochs per run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated seeds; the first one is used for the lambda sweep.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    l1_lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    l2_lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sensitivity_lambdas: Option<Vec<f64>>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `train` or `prune`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = fetch::DEFAULT_MIRROR)]
    mirror: String,
}

/// Failures sorted by exit code.
enum Failure {
    Usage(anyhow::Error),
    Diverged(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sensprune::Error> for Failure {
    fn from(e: sensprune::Error) -> Self {
        match e {
            sensprune::Error::InvalidArgument(_) => Failure::Usage(e.into()),
            sensprune::Error::Diverged { .. } => Failure::Diverged(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CompareReg(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
        Command::Fetch(a) => fetch::run(&a.data, &a.mirror).map_err(Failure::Runtime),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `sensprune --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_data(args: &DataArgs) -> Outcome<(Dataset, Dataset)> {
    let dir = args
        .data
        .as_ref()
        .ok_or_else(|| usage(format!("no data directory; pass --data or set {DATA_ENV}")))?;
    if !dir.is_dir() {
        return Err(usage(format!("data directory {} does not exist", dir.display())));
    }
    let (mut train, mut test) = load_mnist(dir).map_err(|e| match e {
        sensprune::Error::Io { .. } => Failure::Usage(anyhow!(e).context("loading MNIST")),
        other => Failure::Runtime(anyhow!(other).context("loading MNIST")),
    })?;
    if let Some(n) = args.train_limit {
        train = train.head(n);
    }
    if let Some(n) = args.test_limit {
        test = test.head(n);
    }
    eprintln!("data: {} train, {} test samples", train.len(), test.len());
    Ok((train, test))
}

/// Overlays `patch` onto `base` key by key.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn resolve_config(base: &TrainConfig, o: &Overrides) -> Outcome<TrainConfig> {
    let mut value = serde_json::to_value(base).context("config echo")?;
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        merge(&mut value, patch);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| usage(format!("config: {e}")))?;
    if let Some(v) = o.eta {
        cfg.eta = v;
    }
    if let Some(v) = o.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = o.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.epochs1 {
        cfg.max_epochs_phase1 = v;
    }
    if let Some(v) = o.epochs2 {
        cfg.max_epochs_phase2 = v;
    }
    if let Some(v) = o.target_error {
        cfg.target_error = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(m) = &o.mode {
        cfg.sensitivity.mode = match m.as_str() {
            "unspecific" => SensitivityMode::Unspecific,
            "specific" => SensitivityMode::Specific,
            other => return Err(usage(format!("unknown sensitivity mode {other:?}"))),
        };
    }
    if let Some(r) = &o.regularizer {
        cfg.regularizer = r.parse::<RegularizerKind>()?;
    }
    if o.no_bias_reg {
        cfg.regularize_biases = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn lookup_recipe(name: &str) -> Outcome<ExperimentRecipe> {
    recipe(name).map_err(|_| usage(format!("unknown recipe {name:?}; expected one of {}", RECIPES.join(", "))))
}

fn architecture_of(net: &Network) -> String {
    let specs = net.specs();
    for (arch, (input, s)) in [
        (Architecture::Lenet300, lenet300()),
        (Architecture::Lenet5, lenet5()),
    ] {
        if specs == s && net.input_shape() == input.as_slice() {
            return arch.name().to_string();
        }
    }
    "custom".to_string()
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn progress(m: &EpochMetrics) {
    let ratio = m.ratio.map_or("inf".to_string(), |r| format!("{r:.1}x"));
    eprintln!(
        "phase {} epoch {:>3}  train {:.4}  test {:.4}  err {:.2}%  ratio {}  {:.0}s",
        m.phase,
        m.epoch,
        m.train_loss,
        m.test_loss,
        100.0 * m.test_err,
        ratio,
        m.wall_s
    );
}

/// Saves the last good state of a diverged run and turns the failure into
/// the matching exit code.
fn handle_failure(out: &Path, f: TrainFailure) -> Failure {
    if let Some(cp) = &f.checkpoint {
        let path = out.join("checkpoint.sparse");
        match save_sparse(&path, &cp.net, &cp.mask) {
            Ok(_) => eprintln!("saved epoch {} checkpoint to {}", cp.epoch, path.display()),
            Err(e) => eprintln!("could not save checkpoint: {e}"),
        }
    }
    f.error.into()
}

struct RunWriter {
    out: PathBuf,
    csv: MetricsCsv,
}

impl RunWriter {
    fn new(out: &Path, net: &Network, recipe_name: Option<&str>, arch: &str, cfg: &TrainConfig) -> Outcome<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let echo = serde_json::json!({ "recipe": recipe_name, "architecture": arch, "config": cfg });
        write_json(&out.join("config.json"), &echo)?;
        let names: Vec<String> = net.groups().iter().map(|g| g.name.clone()).collect();
        let csv = MetricsCsv::create(&out.join("metrics.csv"), &names)?;
        Ok(Self {
            out: out.to_path_buf(),
            csv,
        })
    }

    fn observer(&mut self) -> impl FnMut(&EpochMetrics) + '_ {
        |m| {
            progress(m);
            if let Err(e) = self.csv.append(m) {
                eprintln!("warning: metrics.csv: {e}");
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        net: &Network,
        mask: &PruneMask,
        recipe_name: Option<&str>,
        arch: &str,
        cfg: &TrainConfig,
        phases: (usize, usize),
        stop: StopReason,
        returned_epoch: usize,
        test: (f64, f64),
    ) -> Outcome {
        let model = self.out.join("model.sparse");
        let bytes = save_sparse(&model, net, mask)?;
        let summary = RunSummary {
            recipe: recipe_name.map(str::to_string),
            architecture: arch.to_string(),
            config: cfg.clone(),
            phase1_epochs: phases.0,
            phase2_epochs: phases.1,
            stop,
            returned_epoch,
            test_loss: test.0,
            test_err: test.1,
            sparsity: SparsityReport::new(net, Some(mask))?,
            model_file: Some("model.sparse".into()),
        };
        summary.save(&self.out.join("summary.json"))?;
        println!("{}", summary.sparsity);
        println!("test loss {:.6}  top-1 error {:.2}%", test.0, 100.0 * test.1);
        println!("model: {} ({bytes} bytes)", model.display());
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let r = lookup_recipe(&a.recipe)?;
    if r.comparison.is_some() {
        return Err(usage(format!("{} is a comparison recipe; use compare-reg", r.name)));
    }
    let cfg = resolve_config(&r.config, &a.overrides)?;
    let (train, test) = load_data(&a.data)?;
    let net = r.architecture.build(cfg.seed);
    let arch = r.architecture.name();
    let mut w = RunWriter::new(&a.out, &net, Some(&r.name), arch, &cfg)?;
    let out = a.out.clone();

    let started = std::time::Instant::now();
    let mut observer = w.observer();
    let mut ctx = EpochContext {
        first_epoch: 1,
        started,
        observer: &mut observer,
    };
    let p1 = train_phase1(net, &train, &test, &cfg, &mut ctx).map_err(|f| handle_failure(&out, f))?;
    let n1 = p1.history.len();
    let result = if p1.stop == StopReason::TargetReached {
        ctx.first_epoch = n1 + 1;
        let p2 = train_phase2(p1.net, p1.mask, &train, &test, &cfg, &mut ctx)
            .map_err(|f| handle_failure(&out, f))?;
        (p2.history.len(), p2)
    } else {
        eprintln!(
            "phase 1 did not reach {:.2}% within {} epochs; skipping sparsification",
            100.0 * cfg.target_error,
            cfg.max_epochs_phase1
        );
        (0, p1)
    };
    drop(observer);
    let (n2, p) = result;
    w.finish(
        &p.net,
        &p.mask,
        Some(&r.name),
        arch,
        &cfg,
        (n1, n2),
        p.stop,
        p.returned_epoch,
        (p.test_loss, p.test_err),
    )
}

fn cmd_prune(a: PruneArgs) -> Outcome {
    let r = lookup_recipe(&a.recipe)?;
    let cfg = resolve_config(&r.config, &a.overrides)?;
    let (net, mask) = load_sparse(&a.model).map_err(|e| usage(format!("{}: {e}", a.model.display())))?;
    let (train, test) = load_data(&a.data)?;
    let arch = architecture_of(&net);
    let mut w = RunWriter::new(&a.out, &net, None, &arch, &cfg)?;
    let out = a.out.clone();
    let mut observer = w.observer();
    let mut ctx = EpochContext::new(&mut observer);
    let p = train_phase2(net, mask, &train, &test, &cfg, &mut ctx).map_err(|f| handle_failure(&out, f))?;
    drop(observer);
    w.finish(
        &p.net,
        &p.mask,
        None,
        &arch,
        &cfg,
        (0, p.history.len()),
        p.stop,
        p.returned_epoch,
        (p.test_loss, p.test_err),
    )
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (net, mask) = load_sparse(&a.model).map_err(|e| usage(format!("{}: {e}", a.model.display())))?;
    let (_, test) = load_data(&a.data)?;
    let (loss, err) = evaluate(&net, &test, 1000)?;
    let report = SparsityReport::new(&net, Some(&mask))?;
    println!("{report}");
    println!("test_loss {loss}");
    println!("test_err {err}");
    println!("{}", render_table(&architecture_of(&net), &report, err));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Outcome {
    let path = a.run.join("summary.json");
    if !path.is_file() {
        return Err(usage(format!("{} not found; is this a run directory?", path.display())));
    }
    let summary = RunSummary::load(&path).map_err(|e| Failure::Runtime(anyhow!(e)))?;
    let label = summary.recipe.clone().unwrap_or_else(|| summary.architecture.clone());
    println!("{}", summary.table(&label));
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Outcome {
    let r = lookup_recipe("fig2-comparison")?;
    let cfg = resolve_config(&r.config, &a.overrides)?;
    let mut spec = r.comparison.clone().unwrap_or_default();
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(s) = a.seeds {
        spec.seeds = s;
    }
    if let Some(v) = a.l1_lambdas {
        spec.l1_lambdas = v;
    }
    if let Some(v) = a.l2_lambdas {
        spec.l2_lambdas = v;
    }
    if let Some(v) = a.sensitivity_lambdas {
        spec.sensitivity_lambdas = v;
    }
    let (train, test) = load_data(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(
        &a.out.join("config.json"),
        &serde_json::json!({ "recipe": r.name, "architecture": r.architecture.name(), "config": cfg, "comparison": spec }),
    )?;
    let res = run_comparison(r.architecture, &train, &test, &cfg, &spec, |kind, lambda, seed, m| {
        eprint!("{kind} lambda={lambda:e} seed={seed}: ");
        progress(m);
    })
    .map_err(|f| handle_failure(&a.out, f))?;
    write_json(&a.out.join("comparison.json"), &serde_json::to_value(&res).context("comparison")?)?;
    for s in &res.summaries {
        write_curves(&a.out.join(format!("{}.csv", s.kind)), &res, s.kind, &spec)?;
        println!(
            "{:<12} lambda {:<8e} final test loss {:.5} ± {:.5}",
            s.kind.to_string(),
            s.lambda,
            s.mean,
            s.std
        );
    }
    Ok(())
}

fn write_curves(path: &Path, res: &sensprune::recipe::ComparisonResult, kind: RegularizerKind, spec: &Comparison) -> Outcome {
    let runs: Vec<_> = res.selected_runs(kind).collect();
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("epoch");
    for r in &runs {
        header.push_str(&format!(",test_loss_seed{}", r.seed));
    }
    header.push_str(",mean_test_loss");
    writeln!(w, "{header}").context("csv")?;
    for e in 0..spec.epochs {
        let losses: Vec<f64> = runs.iter().map(|r| r.history[e].test_loss).collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let cols: Vec<String> = losses.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{},{},{}", runs[0].history[e].epoch, cols.join(","), mean).context("csv")?;
    }
    w.flush().context("csv")?;
    Ok(())
}
