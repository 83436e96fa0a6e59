use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qverify::circuits::{builtin_profile, DeviceProfile};
use qverify::datapipe::{
    self, build_dataset, metrics, predictions_csv, run_baseline, split_by_circuit, BaselineMethod, BaselineOptions,
    DataError, Dataset, DatasetConfig,
};
use qverify::mcnet::{
    predict, train_branch, Aggregation, Branch, Fusion, History, McNet, ModelConfig, ModelError, TrainConfig,
};
use qverify::shadows::DiagonalConvention;

/// Error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RESOURCE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn config_err(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Config(_) | DataError::Corrupt { .. } | DataError::Metric(_) | DataError::Circuit(_) => {
                EXIT_CONFIG
            }
            DataError::TooLarge(_) | DataError::Io(_) => EXIT_RESOURCE,
            DataError::Model(m) => return Failure::from_model(m.to_string(), m),
            DataError::Dag(_) | DataError::Qsim(_) | DataError::Shadow(_) => EXIT_NUMERIC,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn from_model(message: String, e: &ModelError) -> Self {
        let code = match e {
            ModelError::Config(_) | ModelError::Input(_) => EXIT_CONFIG,
            ModelError::Io(_) => EXIT_RESOURCE,
            ModelError::Tensor(_) | ModelError::Diverged(_) => EXIT_NUMERIC,
        };
        Failure { code, message }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::from_model(e.to_string(), &e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_RESOURCE,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "qverify", version, about = "Cross-platform fidelity estimation toolkit")]
struct Cli {
    /// Worker threads for data generation and baselines (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of circuits, snapshots, DAGs and exact labels.
    Gen(GenArgs),
    /// Run a shadow-based fidelity estimator on a dataset.
    Baseline(BaselineArgs),
    /// Train the network, all stages or one at a time.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with any of the flag values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    qubits: Option<usize>,
    #[arg(long)]
    circuits: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    /// Built-in profile name or a profile JSON file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    qubits: Option<usize>,
    circuits: Option<usize>,
    levels: Option<usize>,
    shots: Option<usize>,
    profile: Option<String>,
    seed: Option<u64>,
    layers: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Evaluate every record instead of the held-out circuits.
    #[arg(long)]
    all_records: bool,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct BaselineArgs {
    /// `cs` (classical shadows) or `cc` (randomized-measurement correlations).
    #[arg(long)]
    method: String,
    #[arg(long)]
    dataset: PathBuf,
    /// Use only the first M stored snapshots per state (cs).
    #[arg(long)]
    shots_override: Option<usize>,
    /// Keep self-pairs in the shadow purity estimates (cs).
    #[arg(long)]
    include_diagonal: bool,
    /// Random basis settings per pair (cc).
    #[arg(long, default_value_t = 50)]
    cc_settings: usize,
    /// Shots per basis setting (cc).
    #[arg(long, default_value_t = 4)]
    cc_shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Stage {
    All,
    BranchMea,
    BranchCirc,
    Finetune,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// JSON training config; see `TrainFile`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Stage::All)]
    stage: Stage,
    #[arg(long)]
    out: PathBuf,
}

/// Model options the dataset does not determine.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelFile {
    d: usize,
    d3: usize,
    aggregation: Aggregation,
    fusion: Fusion,
    conv_widths: Vec<usize>,
    graph_layers: usize,
    graph_width: usize,
    glimpses: usize,
    seed: u64,
}

impl Default for ModelFile {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelFile {
            d: m.d,
            d3: m.d3,
            aggregation: m.aggregation,
            fusion: m.fusion,
            conv_widths: m.conv_widths,
            graph_layers: m.graph_layers,
            graph_width: m.graph_width,
            glimpses: m.glimpses,
            seed: m.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SplitFile {
    test_fraction: f64,
    seed: u64,
}

impl Default for SplitFile {
    fn default() -> Self {
        SplitFile {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    model: ModelFile,
    train: TrainConfig,
    split: SplitFile,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BranchArg {
    Full,
    Mea,
    Circ,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint stem, e.g. `run/finetune`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Also write one representation vector per state.
    #[arg(long)]
    emit_repr: bool,
    #[arg(long, value_enum, default_value_t = BranchArg::Full)]
    branch: BranchArg,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value).expect("serializable"))?;
    Ok(())
}

fn resolve_profile(name: &str, n_qubits: usize) -> CliResult<DeviceProfile> {
    if let Some(p) = builtin_profile(name, n_qubits) {
        return Ok(p);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(config_err(format!(
            "--profile `{name}` is neither a built-in profile ({}) nor a file",
            qverify::circuits::BUILTIN_PROFILES.join(", ")
        )));
    }
    let text = fs::read_to_string(path)?;
    DeviceProfile::from_json(&text).map_err(|e| config_err(format!("--profile {name}: {e}")))
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let file: GenConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    let resolved = GenConfig {
        qubits: args.qubits.or(file.qubits),
        circuits: args.circuits.or(file.circuits),
        levels: args.levels.or(file.levels),
        shots: args.shots.or(file.shots),
        profile: args.profile.or(file.profile),
        seed: args.seed.or(file.seed),
        layers: args.layers.or(file.layers).or(Some(datapipe::DEFAULT_LAYERS)),
        out: args.out.or(file.out),
    };
    fn need<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
        v.clone().ok_or_else(|| config_err(format!("missing required --{flag}")))
    }
    let n = need(&resolved.qubits, "qubits")?;
    let profile_name = need(&resolved.profile, "profile")?;
    let out = need(&resolved.out, "out")?;
    if n > qverify::qsim::MAX_QUBITS {
        return Err(DataError::TooLarge(format!("{n} qubits exceeds the limit of {}", qverify::qsim::MAX_QUBITS)).into());
    }
    let mut cfg = DatasetConfig::new(
        n,
        need(&resolved.circuits, "circuits")?,
        need(&resolved.levels, "levels")?,
        need(&resolved.shots, "shots")?,
        need(&resolved.seed, "seed")?,
        resolve_profile(&profile_name, n)?,
    );
    cfg.layers = resolved.layers.unwrap_or(datapipe::DEFAULT_LAYERS);
    let ds = build_dataset(&cfg)?;
    // the output location is not part of the dataset's content
    let stored = GenConfig { out: None, ..resolved };
    let resolved_json = serde_json::to_vec_pretty(&stored).expect("serializable");
    ds.save_with(&out, &[("gen_config.json", &resolved_json)])?;
    println!("wrote {} records ({} states) to {}", ds.records.len(), ds.states.len(), out.display());
    Ok(())
}

fn selected_records(ds: &Dataset, split: &SplitArgs) -> CliResult<Vec<usize>> {
    if split.all_records {
        Ok((0..ds.records.len()).collect())
    } else {
        Ok(split_by_circuit(ds, split.test_fraction, split.split_seed)?.test_records)
    }
}

fn write_predictions(out: &Path, ds: &Dataset, records: &[usize], preds: &[f64]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("predictions.csv"), predictions_csv(ds, records, preds))?;
    let labels: Vec<f64> = records.iter().map(|&r| ds.records[r].fidelity).collect();
    let report = metrics(preds, &labels)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!(
        "records {}  mse {:.6e}  r2 {}  rmse {}",
        report.count,
        report.mse,
        report.r2.map_or("n/a".into(), |v| format!("{v:.6}")),
        report.rmse.map_or("n/a".into(), |v| format!("{v:.6e}"))
    );
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> CliResult<()> {
    let method: BaselineMethod = args.method.parse()?;
    let ds = Dataset::load(&args.dataset)?;
    let records = selected_records(&ds, &args.split)?;
    let opts = BaselineOptions {
        method,
        shots_override: args.shots_override,
        convention: if args.include_diagonal {
            DiagonalConvention::Include
        } else {
            DiagonalConvention::Exclude
        },
        cc_settings: args.cc_settings,
        cc_shots: args.cc_shots,
        seed: args.seed,
    };
    let preds = run_baseline(&ds, &records, &opts)?;
    write_predictions(&args.out, &ds, &records, &preds)?;
    write_json(
        &args.out.join("baseline_config.json"),
        &serde_json::json!({
            "method": args.method,
            "dataset": args.dataset,
            "shots_override": args.shots_override,
            "include_diagonal": args.include_diagonal,
            "cc_settings": args.cc_settings,
            "cc_shots": args.cc_shots,
            "seed": args.seed,
            "all_records": args.split.all_records,
            "test_fraction": args.split.test_fraction,
            "split_seed": args.split.split_seed,
        }),
    )
}

fn checkpoint(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

fn require_checkpoint(out: &Path, stage: &str) -> CliResult<McNet> {
    let stem = checkpoint(out, stage);
    if !stem.with_extension("config.json").exists() {
        return Err(config_err(format!(
            "missing checkpoint `{}`: run `--stage {}` first",
            stem.display(),
            match stage {
                "mea" => "branch-mea",
                "circ" => "branch-circ",
                _ => "finetune",
            }
        )));
    }
    Ok(McNet::load(&stem)?)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let ds = Dataset::load(&args.dataset)?;
    let split = split_by_circuit(&ds, file.split.test_fraction, file.split.seed)?;
    let states = ds.state_inputs(None)?;
    let train = ds.pairs(&split.train_records);
    let test = ds.pairs(&split.test_records);
    let m = &file.model;
    let model_cfg = ModelConfig {
        n_qubits: ds.config.n_qubits,
        measurement_dim: states[0].features.cols(),
        node_dim: ds.dags[0].feature_dim,
        d: m.d,
        d3: m.d3,
        aggregation: m.aggregation,
        fusion: m.fusion,
        conv_widths: m.conv_widths.clone(),
        graph_layers: m.graph_layers,
        graph_width: m.graph_width,
        glimpses: m.glimpses,
        seed: m.seed,
    };
    model_cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("train_config.json"), &file)?;
    let cfg = &file.train;
    let run = |stage: &str| -> CliResult<()> {
        let (mut model, branch, epochs, lr) = match stage {
            "mea" => (McNet::new(model_cfg.clone())?, Branch::Measurement, cfg.epochs_stage1, cfg.lr_stage1),
            "circ" => (McNet::new(model_cfg.clone())?, Branch::Circuit, cfg.epochs_stage1, cfg.lr_stage1),
            _ => {
                let mea = require_checkpoint(&args.out, "mea")?;
                let circ = require_checkpoint(&args.out, "circ")?;
                let mut model = McNet::new(model_cfg.clone())?;
                model.params.copy_from(&mea.params, "mea.").map_err(ModelError::from)?;
                model.params.copy_from(&circ.params, "circ.").map_err(ModelError::from)?;
                (model, Branch::Full, cfg.epochs_stage2, cfg.stage2_lr())
            }
        };
        let mut history = History::default();
        train_branch(&mut model, &states, &train, &test, branch, epochs, lr, cfg, stage, &mut history)?;
        model.save(&checkpoint(&args.out, stage))?;
        fs::write(args.out.join(format!("history_{stage}.csv")), history.to_csv())?;
        if let Some(last) = history.epochs.last() {
            println!(
                "{stage}: {} epochs, test mse {:.6e}, r2 {:.6}",
                history.epochs.len(),
                last.test_mse,
                last.test_r2
            );
        }
        Ok(())
    };
    match args.stage {
        Stage::BranchMea => run("mea"),
        Stage::BranchCirc => run("circ"),
        Stage::Finetune => run("finetune"),
        Stage::All => {
            run("mea")?;
            run("circ")?;
            run("finetune")
        }
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let stem = &args.model;
    if !stem.with_extension("config.json").exists() {
        return Err(config_err(format!("missing checkpoint `{}`", stem.display())));
    }
    let model = McNet::load(stem)?;
    let ds = Dataset::load(&args.dataset)?;
    let records = selected_records(&ds, &args.split)?;
    let branch = match args.branch {
        BranchArg::Full => Branch::Full,
        BranchArg::Mea => Branch::Measurement,
        BranchArg::Circ => Branch::Circuit,
    };
    let states = ds.state_inputs(None)?;
    let preds = predict(&model, &states, &ds.pairs(&records), branch)?;
    write_predictions(&args.out, &ds, &records, &preds)?;
    if args.emit_repr {
        let mut used: Vec<usize> = records
            .iter()
            .flat_map(|&r| [ds.records[r].state_i, ds.records[r].state_j])
            .collect();
        used.sort_unstable();
        used.dedup();
        let csv = datapipe::export_representations(&model, &ds, &used, branch)?;
        fs::write(args.out.join("representations.csv"), csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RESOURCE);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
