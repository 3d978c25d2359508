//! `fsi`: few-shot intent classification on fixed sentence embeddings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 divergence, benchmark failure or a failed reference comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fsi_core::bench::{
    bench_encoding, bench_training, detect_hardware, BenchResult, EmbeddingProvider, HttpProvider, StoreProvider,
    DEFAULT_BATCH_SIZE, REFERENCE_CPU_THROUGHPUT, REFERENCE_CPU_TRAIN_SECONDS,
};
use fsi_core::dataset::{load_dataset, DatasetFormat};
use fsi_core::experiments::{
    compare_to_reference, prepare, run_prepared_keeping_model, run_sweep, write_json_atomic, ComparisonStatus,
    ExperimentResult, ExperimentSpec, Observation, ReferenceTable, Regime, SweepReport, SweepSpec,
    DEFAULT_SEED_COUNT, DEFAULT_TOLERANCE,
};
use fsi_core::mlp::{
    MlpConfig, MlpModel, Optimizer, DEFAULT_DROPOUT, DEFAULT_HIDDEN_DIM, DEFAULT_HIDDEN_LAYERS, DEFAULT_ITERATIONS,
};
use fsi_core::{build_label_index, few_shot_sample, Dataset, EmbeddingStore, Error, ErrorKind, FewShotSplit, Result};

#[derive(Parser)]
#[command(name = "fsi", version, about = "Few-shot intent classifiers on fixed sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset file and print its statistics.
    Ingest(IngestArgs),
    /// Draw a balanced k-shot training subset and write it as a split file.
    Sample(SampleArgs),
    /// Train and evaluate over several seeds; writes a result JSON.
    Train(TrainArgs),
    /// Score a saved model on a test file.
    Eval(EvalArgs),
    /// Run the one-factor-at-a-time hyperparameter sweep.
    Sweep(SweepArgs),
    /// Time encoding throughput or train-and-evaluate wall time.
    Bench(BenchArgs),
    /// Compare result files against published accuracies.
    Compare(CompareArgs),
    /// Write the rows of a split file as a canonical CSV.
    ExportSplit(ExportSplitArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Dataset file (.csv or .jsonl).
    #[arg(long, env = "FSI_DATA")]
    data: PathBuf,
    /// Override format detection: csv or jsonl.
    #[arg(long, env = "FSI_FORMAT")]
    format: Option<DatasetFormat>,
}

impl InputArgs {
    fn load(&self) -> Result<Dataset> {
        let format = match self.format {
            Some(f) => f,
            None => DatasetFormat::from_path(&self.data)?,
        };
        load_dataset(&self.data, format)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Also write the dataset as canonical CSV.
    #[arg(long, env = "FSI_CANONICAL")]
    canonical: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Examples per intent.
    #[arg(long, env = "FSI_K")]
    k: usize,
    #[arg(long, env = "FSI_SEED")]
    seed: u64,
    /// Split file to write.
    #[arg(long, env = "FSI_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportSplitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, env = "FSI_SPLIT")]
    split: PathBuf,
    /// CSV file to write.
    #[arg(long, env = "FSI_OUT")]
    out: PathBuf,
}

/// Where training and test rows and their stores live.
#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory: train.{csv,jsonl}, test.{csv,jsonl},
    /// stores/train/<store> and stores/test/<store>.
    #[arg(long, env = "FSI_DATASET")]
    dataset: Option<PathBuf>,
    /// Store file names inside the dataset directory, in concatenation order.
    #[arg(long, env = "FSI_STORES", value_delimiter = ',', num_args = 1..)]
    stores: Vec<String>,
    /// Training file, overriding the dataset directory.
    #[arg(long, env = "FSI_TRAIN")]
    train: Option<PathBuf>,
    /// Test file, overriding the dataset directory.
    #[arg(long, env = "FSI_TEST")]
    test: Option<PathBuf>,
    /// Training store paths, overriding the dataset directory.
    #[arg(long, env = "FSI_TRAIN_STORES", value_delimiter = ',', num_args = 1..)]
    train_stores: Vec<PathBuf>,
    /// Test store paths, overriding the dataset directory.
    #[arg(long, env = "FSI_TEST_STORES", value_delimiter = ',', num_args = 1..)]
    test_stores: Vec<PathBuf>,
    /// Dataset name used in reports (defaults to the directory name).
    #[arg(long, env = "FSI_NAME")]
    name: Option<String>,
    /// L2-normalise feature rows before training.
    #[arg(long, env = "FSI_NORMALIZE")]
    normalize: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, env = "FSI_HIDDEN_LAYERS", default_value_t = DEFAULT_HIDDEN_LAYERS)]
    hidden_layers: usize,
    #[arg(long, env = "FSI_HIDDEN_DIM", default_value_t = DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    #[arg(long, env = "FSI_DROPOUT", default_value_t = DEFAULT_DROPOUT)]
    dropout: f64,
    /// sgd or adam.
    #[arg(long, env = "FSI_OPTIMIZER", default_value = "sgd")]
    optimizer: Optimizer,
    /// Initial learning rate [default: 0.7 for sgd, 4e-4 for adam].
    #[arg(long, env = "FSI_LR")]
    lr: Option<f64>,
    #[arg(long, env = "FSI_ITERATIONS", default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
}

impl ModelArgs {
    fn config(&self) -> Result<MlpConfig> {
        let config = MlpConfig {
            hidden_layers: self.hidden_layers,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            optimizer: self.optimizer,
            initial_lr: self.lr.unwrap_or(self.optimizer.default_lr()),
            iterations: self.iterations,
            seed: 0,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct RegimeArgs {
    /// k10, k30 or full.
    #[arg(long, env = "FSI_REGIME", default_value = "k10", conflicts_with = "k")]
    regime: Regime,
    /// Examples per intent; shorthand for --regime k<N>.
    #[arg(long, env = "FSI_K")]
    k: Option<usize>,
}

impl RegimeArgs {
    fn regime(&self) -> Result<Regime> {
        match self.k {
            Some(0) => Err(Error::Usage("--k must be positive".into())),
            Some(k) => Ok(Regime::Shots(k)),
            None => Ok(self.regime),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    regime: RegimeArgs,
    /// First seed; run i uses seed + i.
    #[arg(long, env = "FSI_SEED")]
    seed: u64,
    #[arg(long, env = "FSI_RUNS", default_value_t = DEFAULT_SEED_COUNT)]
    runs: usize,
    /// Use this split file for every run instead of sampling.
    #[arg(long, env = "FSI_SPLIT")]
    split: Option<PathBuf>,
    /// Directory receiving the result JSON.
    #[arg(long, env = "FSI_OUT", default_value = "results")]
    out: PathBuf,
    /// Save the first run's model here.
    #[arg(long, env = "FSI_MODEL")]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model checkpoint written by `train --model-out`.
    #[arg(long, env = "FSI_MODEL")]
    model: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    regime: RegimeArgs,
    #[arg(long, env = "FSI_SEED")]
    seed: u64,
    #[arg(long, env = "FSI_RUNS", default_value_t = DEFAULT_SEED_COUNT)]
    runs: usize,
    /// Configurations trained in parallel.
    #[arg(long, env = "FSI_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Directory for per-config results (reused on rerun) and the report.
    #[arg(long, env = "FSI_OUT", default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    what: BenchCommand,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Sentences per second through an embedding provider.
    Encode(BenchEncodeArgs),
    /// Seconds to sample, train and evaluate one model.
    Train(BenchTrainArgs),
}

#[derive(Args)]
struct BenchCommon {
    /// Free-text description of the machine [default: detected].
    #[arg(long, env = "FSI_HARDWARE")]
    hardware: Option<String>,
    #[arg(long, env = "FSI_REPETITIONS", default_value_t = 3)]
    repetitions: usize,
    /// Write the benchmark JSON here.
    #[arg(long, env = "FSI_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchEncodeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Look vectors up in this store instead of calling a service.
    #[arg(long, env = "FSI_STORE", conflicts_with = "url", required_unless_present = "url")]
    store: Option<PathBuf>,
    /// Base URL of an encoding service.
    #[arg(long, env = "FSI_URL")]
    url: Option<String>,
    #[arg(long, env = "FSI_BATCH_SIZE", default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Encode only the first N rows.
    #[arg(long, env = "FSI_LIMIT")]
    limit: Option<usize>,
    #[arg(long, env = "FSI_TIMEOUT_SECS", default_value_t = 60)]
    timeout_secs: u64,
    #[command(flatten)]
    common: BenchCommon,
}

#[derive(Args)]
struct BenchTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    regime: RegimeArgs,
    #[arg(long, env = "FSI_SEED", default_value_t = 0)]
    seed: u64,
    /// Time loading the data files too.
    #[arg(long, env = "FSI_INCLUDE_LOADING")]
    include_loading: bool,
    #[command(flatten)]
    common: BenchCommon,
}

#[derive(Args)]
struct CompareArgs {
    /// Result or sweep report JSON files, or directories of them.
    #[arg(required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    /// `accuracy`, `sweep` or a CSV with model,dataset,regime,accuracy.
    #[arg(long, env = "FSI_REFERENCE", default_value = "accuracy")]
    reference: String,
    /// Allowed |observed - reference|, as a fraction.
    #[arg(long, env = "FSI_TOLERANCE", default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Write the comparison JSON here.
    #[arg(long, env = "FSI_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Runtime => 3,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::ExportSplit(a) => export_split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => match a.what {
            BenchCommand::Encode(a) => bench_encode(a),
            BenchCommand::Train(a) => bench_train(a),
        },
        Command::Compare(a) => return compare(a),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn print_json<T: Serialize>(label: &str, value: &T) {
    println!("{label}: {}", serde_json::to_string(value).expect("serialisable"));
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ds = a.input.load()?;
    let labels = build_label_index(&ds)?;
    let mut counts = vec![0usize; labels.num_classes()];
    for id in labels.class_ids(&ds)? {
        counts[id] += 1;
    }
    println!("file:    {}", a.input.data.display());
    println!("rows:    {}", ds.len());
    println!("intents: {}", labels.num_classes());
    println!(
        "per intent: min {} max {}",
        counts.iter().min().unwrap_or(&0),
        counts.iter().max().unwrap_or(&0)
    );
    println!("digest:  {}", ds.digest());
    if let Some(out) = &a.canonical {
        ds.write_canonical_csv(out)?;
        println!("canonical CSV written to {}", out.display());
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ds = a.input.load()?;
    let labels = build_label_index(&ds)?;
    let split = few_shot_sample(&ds, &labels, a.k, a.seed)?;
    split.write(&a.out)?;
    println!(
        "{} rows ({} per intent, {} intents, seed {}) written to {}",
        split.row_indices.len(),
        a.k,
        labels.num_classes(),
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn export_split(a: ExportSplitArgs) -> Result<()> {
    let ds = a.input.load()?;
    let labels = build_label_index(&ds)?;
    let split = FewShotSplit::read(&a.split)?;
    split.validate(&ds, &labels)?;
    let subset = ds.select(format!("{}-k{}-s{}", ds.name, split.k, split.seed), &split.row_indices)?;
    subset.write_canonical_csv(&a.out)?;
    println!("{} rows written to {}", subset.len(), a.out.display());
    Ok(())
}

fn seeds(first: u64, runs: usize) -> Result<Vec<u64>> {
    if runs == 0 {
        return Err(Error::Usage("--runs must be at least 1".into()));
    }
    Ok((0..runs as u64).map(|i| first.wrapping_add(i)).collect())
}

fn resolve_spec(data: &DataArgs, config: MlpConfig, regime: Regime, seeds: Vec<u64>) -> Result<ExperimentSpec> {
    let mut spec = match &data.dataset {
        Some(dir) => {
            let stores = if data.stores.is_empty() && data.train_stores.is_empty() {
                return Err(Error::Usage("--stores is required with --dataset".into()));
            } else {
                &data.stores
            };
            ExperimentSpec::from_dataset_dir(dir, stores, regime, config, seeds)?
        }
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| {
                v.clone()
                    .ok_or_else(|| Error::Usage(format!("{flag} is required without --dataset")))
            };
            ExperimentSpec {
                dataset: "dataset".into(),
                train_path: need(&data.train, "--train")?,
                test_path: need(&data.test, "--test")?,
                train_stores: Vec::new(),
                test_stores: Vec::new(),
                regime,
                config,
                seeds,
                normalize: false,
                split_file: None,
            }
        }
    };
    if let Some(p) = &data.train {
        spec.train_path = p.clone();
    }
    if let Some(p) = &data.test {
        spec.test_path = p.clone();
    }
    if !data.train_stores.is_empty() {
        spec.train_stores = data.train_stores.clone();
    }
    if !data.test_stores.is_empty() {
        spec.test_stores = data.test_stores.clone();
    }
    if let Some(name) = &data.name {
        spec.dataset = name.clone();
    }
    spec.normalize = data.normalize;
    if spec.train_stores.is_empty() {
        return Err(Error::Usage("no training stores: pass --stores or --train-stores".into()));
    }
    if spec.test_stores.is_empty() {
        return Err(Error::Usage("no test stores: pass --stores or --test-stores".into()));
    }
    spec.validate()?;
    Ok(spec)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut spec = resolve_spec(&a.data, a.model.config()?, a.regime.regime()?, seeds(a.seed, a.runs)?)?;
    spec.split_file = a.split.clone();
    print_json("config", &spec);
    let data = prepare(&spec)?;
    let (result, model) = run_prepared_keeping_model(&spec, &data)?;
    let path = result.persist(&a.out)?;
    for (seed, acc) in result.seeds.iter().zip(&result.accuracies) {
        println!("seed {seed}: accuracy {:.2}", acc * 100.0);
    }
    for f in &result.failures {
        println!("seed {}: FAILED {}", f.seed, f.error);
    }
    println!(
        "{} {} {}: mean {:.2} std {:.2} over {} run(s), {:.1}s",
        result.encoder,
        spec.dataset,
        spec.regime,
        result.mean * 100.0,
        result.std * 100.0,
        result.accuracies.len(),
        result.train_seconds
    );
    println!("result written to {}", path.display());
    if let Some(out) = &a.model_out {
        match model {
            Some(m) => {
                m.save(out)?;
                println!("model written to {}", out.display());
            }
            None => eprintln!("warning: every run diverged, no model written"),
        }
    }
    if result.accuracies.is_empty() {
        let first = &result.failures[0];
        return Err(Error::Divergence {
            iteration: 0,
            what: format!("all {} runs diverged; first: {}", result.failures.len(), first.error),
        });
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = MlpModel::load(&a.model)?;
    let mut data = a.data.clone();
    if data.train_stores.is_empty() {
        data.train_stores = data.test_stores.clone();
    }
    let spec = resolve_spec(&data, model.config().clone(), Regime::Full, vec![model.config().seed])?;
    let train = Dataset::load(&spec.train_path)?;
    let labels = build_label_index(&train)?;
    let test = Dataset::load(&spec.test_path)?;
    let y = labels.class_ids(&test)?;
    let stores = spec
        .test_stores
        .iter()
        .map(|p| EmbeddingStore::read_for(p, &test))
        .collect::<Result<Vec<_>>>()?;
    let store = fsi_core::embeddings::combine(&stores)?;
    let rows: Vec<usize> = (0..test.len()).collect();
    let mut x = store.gather(&rows)?;
    if spec.normalize {
        fsi_core::embeddings::l2_normalize_rows(&mut x);
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: x.ncols(),
        });
    }
    if labels.num_classes() != model.num_classes() {
        return Err(Error::Incompatible(format!(
            "model has {} classes but {} has {} intents",
            model.num_classes(),
            spec.train_path.display(),
            labels.num_classes()
        )));
    }
    let acc = model.evaluate(x.view(), &y)?;
    print_json("config", model.config());
    println!("{} rows, accuracy {:.2}", test.len(), acc * 100.0);
    Ok(())
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    spec: &'a ExperimentSpec,
    report: &'a SweepReport,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let spec = resolve_spec(&a.data, a.model.config()?, a.regime.regime()?, seeds(a.seed, a.runs)?)?;
    if a.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    print_json("config", &spec);
    let report = run_sweep(&SweepSpec {
        base: spec.clone(),
        jobs: a.jobs,
        results_dir: Some(a.out.clone()),
    })?;
    print!("{}", report.render());
    let path = a.out.join(format!("sweep-{}.json", spec.content_hash()));
    write_json_atomic(&path, &SweepOutput { spec: &spec, report: &report })?;
    println!("report written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput<'a, C: Serialize> {
    #[serde(flatten)]
    result: &'a BenchResult,
    config: C,
}

fn finish_bench<C: Serialize>(result: &BenchResult, config: C, out: Option<&Path>) -> Result<()> {
    println!(
        "{}: median {:.3} {} over {} repetitions {:?}",
        result.name, result.median, result.unit, result.repetitions, result.raw
    );
    println!("hardware: {}", result.hardware);
    if let Some(out) = out {
        write_json_atomic(out, &BenchOutput { result, config })?;
        println!("benchmark written to {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EncodeConfig<'a> {
    data: &'a Path,
    store: Option<&'a Path>,
    url: Option<&'a str>,
    batch_size: usize,
    sentences: usize,
}

fn bench_encode(a: BenchEncodeArgs) -> Result<()> {
    let ds = a.input.load()?;
    let n = a.limit.unwrap_or(ds.len()).min(ds.len());
    let sentences: Vec<String> = ds.rows()[..n].iter().map(|r| r.text.clone()).collect();
    let hardware = a.common.hardware.clone().unwrap_or_else(detect_hardware);
    let mut provider: Box<dyn EmbeddingProvider> = match (&a.store, &a.url) {
        (Some(store), _) => Box::new(StoreProvider::new(&ds, EmbeddingStore::read(store)?)?),
        (None, Some(url)) => {
            let p = HttpProvider::new(url, Duration::from_secs(a.timeout_secs));
            let health = p.health()?;
            println!("service encoder {} (dim {})", health.encoder, health.dim);
            Box::new(p)
        }
        (None, None) => return Err(Error::Usage("pass --store or --url".into())),
    };
    let config = EncodeConfig {
        data: &a.input.data,
        store: a.store.as_deref(),
        url: a.url.as_deref(),
        batch_size: a.batch_size,
        sentences: n,
    };
    print_json("config", &config);
    let result = bench_encoding(provider.as_mut(), &sentences, a.batch_size, a.common.repetitions, &hardware)?;
    finish_bench(&result, &config, a.common.out.as_deref())?;
    let context: Vec<String> = REFERENCE_CPU_THROUGHPUT
        .iter()
        .map(|(m, v)| format!("{m} {v}"))
        .collect();
    println!("published CPU sentences/s (context only): {}", context.join(", "));
    Ok(())
}

fn bench_train(a: BenchTrainArgs) -> Result<()> {
    let spec = resolve_spec(&a.data, a.model.config()?, a.regime.regime()?, vec![a.seed])?;
    let hardware = a.common.hardware.clone().unwrap_or_else(detect_hardware);
    print_json("config", &spec);
    let result = bench_training(&spec, a.common.repetitions, a.include_loading, &hardware)?;
    finish_bench(&result, &spec, a.common.out.as_deref())?;
    let context: Vec<String> = REFERENCE_CPU_TRAIN_SECONDS
        .iter()
        .map(|(m, v)| format!("{m} {v}s"))
        .collect();
    println!(
        "published end-to-end CPU times incl. encoding (context only): {}",
        context.join(", ")
    );
    Ok(())
}

fn collect_json_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn observations_from(path: &Path) -> Result<Vec<Observation>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    if value.get("report").is_some() {
        let report: SweepReport =
            serde_json::from_value(value["report"].clone()).map_err(|e| Error::json(path, e))?;
        return Ok(report
            .aggregate
            .map(|agg| Observation {
                model: report.encoder.clone(),
                dataset: report.dataset.clone(),
                regime: report.regime.to_string(),
                accuracy: agg.avg,
            })
            .into_iter()
            .collect());
    }
    let result: ExperimentResult = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    if result.accuracies.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![result.observation()])
}

fn compare(a: CompareArgs) -> Result<ExitCode> {
    if !(a.tolerance.is_finite() && a.tolerance >= 0.0) {
        return Err(Error::Usage(format!("--tolerance must be non-negative, got {}", a.tolerance)));
    }
    let table = match a.reference.as_str() {
        "accuracy" => ReferenceTable::accuracy(),
        "sweep" => ReferenceTable::sweep(),
        path => ReferenceTable::load(Path::new(path))?,
    };
    let mut observations = Vec::new();
    for file in collect_json_files(&a.results)? {
        observations.extend(observations_from(&file)?);
    }
    let report = compare_to_reference(&observations, &table, a.tolerance)?;
    print!("{}", report.render());
    if let Some(out) = &a.out {
        write_json_atomic(out, &report)?;
    }
    Ok(match report.status {
        ComparisonStatus::Pass => ExitCode::SUCCESS,
        ComparisonStatus::Fail => ExitCode::from(3),
        ComparisonStatus::Empty => ExitCode::from(2),
    })
}
