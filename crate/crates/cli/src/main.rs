//! `hydravit`: train, evaluate, slice, benchmark and plot sliceable ViTs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hydravit::data::{
    checkpoint_dtype, load_checkpoint, load_cifar10_dir, load_mnist_dir, save_checkpoint, synth_dataset, Augmentation,
    Checkpoint, ConfigFile, Dataset, Split,
};
use hydravit::eval::{parse_report_csv, sweep, write_report_csv, BenchSettings, SweepRow};
use hydravit::trainer::{SamplingDistribution, TrainConfig, TrainReport, Trainer};
use hydravit::vit::{extract_subnetwork, init_weights};
use hydravit::{DType, Float, ModelConfig, TensorError};

#[derive(Parser, Debug)]
#[command(name = "hydravit", version, about = "Train, slice, evaluate and benchmark a sliceable vision transformer")]
struct Cli {
    /// Worker threads for kernels and evaluation
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a universal model by sampling one subnetwork per batch
    Train(TrainArgs),
    /// Report accuracy of subnetworks on the test split
    Eval(EvalArgs),
    /// Extract the subnetwork with the first K heads as a standalone checkpoint
    Slice(SliceArgs),
    /// Measure throughput and resource counts of subnetworks
    Bench(BenchArgs),
    /// Plot sweep CSVs as accuracy-vs-MACs and accuracy-vs-throughput SVG panels
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
    Synth,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory (uncompressed MNIST IDX files or CIFAR-10 binary batches)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset format
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,
    /// Use only the first N samples of each split
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with `model` and optional `train` sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write (rewritten after every epoch)
    #[arg(long)]
    out: PathBuf,
    /// Continue the run saved in this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Seed for initialization, shuffling and subnetwork sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Smallest head count to sample
    #[arg(long)]
    heads_min: Option<usize>,
    /// Largest head count to sample
    #[arg(long)]
    heads_max: Option<usize>,
    /// Explicit head counts to sample, e.g. 3,6,12 (instead of a range)
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    /// Sampling weights, one per head count in the range or list; uniform if omitted
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    weights: Option<Vec<f64>>,
    /// Train a separate classifier for every head count
    #[arg(long)]
    separate_classifiers: bool,
    /// Passes over the training split
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per optimizer step
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Random horizontal flips and padded crops
    #[arg(long)]
    augment: bool,
    /// Per-epoch report (epoch,k,batches,mean_loss,val_accuracy)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Element type of weights and arithmetic
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// A head count, a comma-separated list, or `all`
    #[arg(long, default_value = "all")]
    heads: String,
    /// Images per forward pass
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Also write the report CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SliceArgs {
    /// Universal checkpoint to slice
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of heads to keep
    #[arg(long)]
    heads: usize,
    /// Where to write the standalone checkpoint
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to benchmark
    #[arg(long)]
    ckpt: PathBuf,
    /// A head count, a comma-separated list, or `all`
    #[arg(long, default_value = "all")]
    heads: String,
    /// Images per forward pass
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Seconds per head count, warmup included
    #[arg(long, default_value_t = 2.0)]
    secs: f64,
    /// Seconds of warmup discarded before timing
    #[arg(long, default_value_t = 0.5)]
    warmup: f64,
    /// Also measure accuracy on this dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Format of --data; `synth` needs no directory
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetKind,
    /// Use only the first N test samples
    #[arg(long)]
    limit: Option<usize>,
    /// Also write the report CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Sweep CSV files; each becomes one series
    #[arg(long, required = true, num_args = 1..)]
    csv: Vec<PathBuf>,
    /// SVG file to write
    #[arg(long)]
    out_svg: PathBuf,
}

/// A failure attributable to how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<hydravit::Error>() {
            return match e {
                hydravit::Error::Data(_) => 2,
                hydravit::Error::NonFiniteLoss { .. } | hydravit::Error::Tensor(TensorError::NonFinite { .. }) => 3,
                _ => 1,
            };
        }
        if cause.is::<hydravit::DataError>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

/// Training allocates and frees the same large activation buffers every step;
/// keeping freed memory in the heap avoids refaulting those pages each time.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn main() -> ExitCode {
    retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("starting thread pool")?;
    match cli.command {
        Command::Train(a) => match a.dtype {
            DTypeArg::F32 => cmd_train::<f32>(a),
            DTypeArg::F64 => cmd_train::<f64>(a),
        },
        Command::Eval(a) => with_dtype(&a.ckpt.clone(), a, cmd_eval::<f32>, cmd_eval::<f64>),
        Command::Slice(a) => with_dtype(&a.ckpt.clone(), a, cmd_slice::<f32>, cmd_slice::<f64>),
        Command::Bench(a) => with_dtype(&a.ckpt.clone(), a, cmd_bench::<f32>, cmd_bench::<f64>),
        Command::Report(a) => cmd_report(a),
    }
}

fn with_dtype<A>(ckpt: &Path, args: A, f32_cmd: fn(A) -> Result<()>, f64_cmd: fn(A) -> Result<()>) -> Result<()> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    match checkpoint_dtype(&bytes)? {
        DType::F32 => f32_cmd(args),
        DType::F64 => f64_cmd(args),
    }
}

fn load_split(kind: DatasetKind, dir: Option<&Path>, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let data = match kind {
        DatasetKind::Synth => {
            let (seed, n) = if split == Split::Test { (1, 512) } else { (0, 2048) };
            synth_dataset(seed, n, 4, 16)?
        }
        DatasetKind::Mnist | DatasetKind::Cifar10 => {
            let dir = dir.ok_or_else(|| usage("--data is required for this dataset"))?;
            if kind == DatasetKind::Mnist {
                load_mnist_dir(dir, split)?
            } else {
                load_cifar10_dir(dir, split)?
            }
        }
    };
    Ok(match limit {
        Some(0) => return Err(usage("--limit must be at least 1")),
        Some(n) => data.take(n),
        None => data,
    })
}

fn default_model(kind: DatasetKind) -> ModelConfig {
    match kind {
        DatasetKind::Mnist => ModelConfig::mnist_tiny(),
        DatasetKind::Cifar10 => ModelConfig { min_heads: 2, ..ModelConfig::vit(6, 8, 16, 4, 32, 4, 3, 10) },
        DatasetKind::Synth => ModelConfig { min_heads: 1, ..ModelConfig::vit(2, 4, 4, 2, 16, 4, 1, 4) },
    }
}

fn check_data_fits(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.channels != cfg.in_channels
        || data.height != cfg.image_size
        || data.width != cfg.image_size
        || data.num_classes != cfg.num_classes
    {
        return Err(usage(format!(
            "dataset ({}x{}x{}, {} classes) does not fit the model ({}x{}x{}, {} classes)",
            data.channels,
            data.height,
            data.width,
            data.num_classes,
            cfg.in_channels,
            cfg.image_size,
            cfg.image_size,
            cfg.num_classes
        )));
    }
    Ok(())
}

fn check_normalization<T: Float>(ckpt: &Checkpoint<T>, data: &Dataset) -> Result<()> {
    match &ckpt.normalization {
        Some(n) if *n != data.normalization => Err(hydravit::Error::Data(hydravit::DataError::Invalid(format!(
            "dataset normalization {:?} differs from the checkpoint's {:?}",
            data.normalization, n
        )))
        .into()),
        _ => Ok(()),
    }
}

/// Sampling distribution from `--heads-min/--heads-max/--heads/--weights`.
fn distribution_from_flags(a: &TrainArgs, cfg: &ModelConfig) -> Result<Option<SamplingDistribution>> {
    let support: Vec<usize> = match (&a.heads, a.heads_min, a.heads_max) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(usage("--heads cannot be combined with --heads-min/--heads-max"))
        }
        (Some(list), None, None) => {
            let mut list = list.clone();
            list.sort_unstable();
            list.dedup();
            list
        }
        (None, None, None) if a.weights.is_none() => return Ok(None),
        (None, lo, hi) => {
            let lo = lo.unwrap_or(cfg.min_heads);
            let hi = hi.unwrap_or(cfg.num_heads);
            if lo == 0 || lo > hi {
                return Err(usage(format!("empty head range [{lo}, {hi}]")));
            }
            (lo..=hi).collect()
        }
    };
    if let Some(&k) = support.iter().find(|&&k| k == 0 || k > cfg.num_heads) {
        return Err(usage(format!("head count {k} outside [1, {}]", cfg.num_heads)));
    }
    let dist = match &a.weights {
        None => SamplingDistribution::normalized(support.clone(), vec![1.0; support.len()]),
        Some(w) => {
            if w.len() != support.len() {
                return Err(usage(format!("{} weights given for {} head counts {support:?}", w.len(), support.len())));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(usage(format!("weights {w:?} must be finite and non-negative")));
            }
            SamplingDistribution::normalized(support, w.clone())
        }
    };
    dist.map(Some).map_err(|e| usage(e.to_string()))
}

fn cmd_train<T: Float>(a: TrainArgs) -> Result<()> {
    let train = load_split(a.data.dataset, a.data.data.as_deref(), Split::Train, a.data.limit)?;
    let val = load_split(a.data.dataset, a.data.data.as_deref(), Split::Test, a.data.limit)?;
    let normalization = train.normalization.clone();
    let mut trainer = if let Some(path) = &a.resume {
        let shaping = a.config.is_some()
            || a.seed.is_some()
            || a.heads_min.is_some()
            || a.heads_max.is_some()
            || a.heads.is_some()
            || a.weights.is_some()
            || a.separate_classifiers
            || a.epochs.is_some()
            || a.batch_size.is_some()
            || a.lr.is_some()
            || a.augment;
        if shaping {
            return Err(usage("--resume continues the saved run; its configuration cannot be changed"));
        }
        let ckpt = load_checkpoint::<T>(path)?;
        check_normalization(&ckpt, &train)?;
        Trainer::from_checkpoint(ckpt)?
    } else {
        let (mut model, mut train_cfg) = match &a.config {
            Some(p) => {
                let file = ConfigFile::load(p)?;
                (file.model, file.train)
            }
            None => (default_model(a.data.dataset), TrainConfig::default()),
        };
        if a.separate_classifiers {
            model.separate_classifiers = true;
        }
        if let Some(d) = distribution_from_flags(&a, &model)? {
            model.min_heads = d.support()[0];
            train_cfg.distribution = Some(d);
        }
        if let Some(s) = a.seed {
            train_cfg.seed = s;
        }
        if let Some(e) = a.epochs {
            train_cfg.epochs = e;
        }
        if let Some(b) = a.batch_size {
            train_cfg.batch_size = b;
        }
        if let Some(lr) = a.lr {
            train_cfg.learning_rate = lr;
        }
        if a.augment {
            train_cfg.augmentation = Augmentation { horizontal_flip: true, crop_padding: 4 };
        }
        model.validate()?;
        train_cfg.validate()?;
        check_data_fits(&model, &train)?;
        let weights = init_weights::<T>(&model, train_cfg.seed)?;
        Trainer::new(model, train_cfg, weights, train.len())?
    };
    check_data_fits(trainer.config(), &train)?;
    if val.is_empty() {
        return Err(hydravit::Error::Data(hydravit::DataError::Empty("validation split".into())).into());
    }
    let normalization = Some(normalization);
    while let Some(outcome) = trainer.train_next_batch(&train)? {
        if outcome.epoch_done {
            let report = trainer.validate_epoch(&val)?;
            let accs: Vec<String> = report.val_accuracy.iter().map(|(k, v)| format!("k{k}={:.4}", v)).collect();
            eprintln!("epoch {} done: {}", report.epoch + 1, accs.join(" "));
            save_checkpoint(&a.out, &trainer.checkpoint(normalization.clone()))?;
            if let Some(csv) = &a.csv {
                write_file(csv, trainer.report().to_csv().as_bytes())?;
            }
        }
    }
    save_checkpoint(&a.out, &trainer.checkpoint(normalization))?;
    if let Some(csv) = &a.csv {
        write_file(csv, trainer.report().to_csv().as_bytes())?;
    } else {
        print!("{}", TrainReport::to_csv(&trainer.report()));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn parse_heads(spec: &str, cfg: &ModelConfig) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok(cfg.supported_heads().collect());
    }
    let ks = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| usage(format!("bad head count `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    for &k in &ks {
        if k < cfg.min_heads || k > cfg.num_heads {
            return Err(usage(format!(
                "head count {k} is not supported by this checkpoint (range [{}, {}])",
                cfg.min_heads, cfg.num_heads
            )));
        }
    }
    Ok(ks)
}

fn emit_rows(rows: &[SweepRow], csv: Option<&Path>) -> Result<()> {
    let text = write_report_csv(rows)?;
    print!("{text}");
    std::io::stdout().flush()?;
    if let Some(p) = csv {
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_eval<T: Float>(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint::<T>(&a.ckpt)?;
    let ks = parse_heads(&a.heads, &ckpt.config)?;
    let data = load_split(a.data.dataset, a.data.data.as_deref(), Split::Test, a.data.limit)?;
    check_data_fits(&ckpt.config, &data)?;
    check_normalization(&ckpt, &data)?;
    let rows = sweep(&ckpt.weights, &ckpt.config, Some(&data), &ks, None, a.batch_size)?;
    emit_rows(&rows, a.csv.as_deref())
}

fn cmd_slice<T: Float>(a: SliceArgs) -> Result<()> {
    let ckpt = load_checkpoint::<T>(&a.ckpt)?;
    let (cfg, weights) = extract_subnetwork(&ckpt.weights, &ckpt.config, a.heads)?;
    save_checkpoint(&a.out, &Checkpoint::weights_only(cfg, weights, ckpt.normalization))?;
    Ok(())
}

fn cmd_bench<T: Float>(a: BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint::<T>(&a.ckpt)?;
    let ks = parse_heads(&a.heads, &ckpt.config)?;
    if !(a.secs.is_finite() && a.warmup.is_finite() && a.warmup >= 0.0 && a.secs > a.warmup) {
        return Err(usage(format!("--secs {} must exceed --warmup {}", a.secs, a.warmup)));
    }
    let data = match (&a.data, a.dataset) {
        (None, DatasetKind::Mnist | DatasetKind::Cifar10) => None,
        (dir, kind) => {
            let d = load_split(kind, dir.as_deref(), Split::Test, a.limit)?;
            check_data_fits(&ckpt.config, &d)?;
            check_normalization(&ckpt, &d)?;
            Some(d)
        }
    };
    let bench = BenchSettings {
        batch_size: a.batch,
        duration: Duration::from_secs_f64(a.secs),
        warmup: Duration::from_secs_f64(a.warmup),
    };
    let rows = sweep(&ckpt.weights, &ckpt.config, data.as_ref(), &ks, Some(bench), 256)?;
    eprintln!("batch size {}, {} thread(s)", a.batch, rayon::current_num_threads());
    emit_rows(&rows, a.csv.as_deref())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut series = Vec::new();
    for path in &a.csv {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_report_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        series.push(svg::Series { name, rows });
    }
    if !series.iter().flat_map(|s| &s.rows).any(|r| r.accuracy.is_some()) {
        return Err(anyhow!(hydravit::Error::Data(hydravit::DataError::Empty(
            "no report row carries an accuracy (run eval, or bench with --data)".into()
        ))));
    }
    write_file(&a.out_svg, svg::render(&series).as_bytes())
}
