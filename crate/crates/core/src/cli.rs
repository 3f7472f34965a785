//! The `mcnc` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::autodiff::Activation;
use crate::bench::bench_reconstruct;
use crate::coverage::{coverage_report, generator_cloud, write_point_cloud_csv};
use crate::error::{Error, Result};
use crate::format::{load_compressed, save_compressed};
use crate::generator::{Generator, GeneratorConfig};
use crate::harness::{
    evaluate_params, load_mnist_dir, mnist_dir_from_env, run_ablation, synthetic_splits, train, train_with_search,
    write_ablation_csv, write_ablation_json, AblationAxis, AblationSpec, AxisValue, DataSplits, McncSetup, MlpSpec,
    OptimizerKind, TrainConfig, TrainedModel, DATA_DIR_ENV,
};
use crate::reparam::{
    compression_report, format_centi, llama2_adapter_matrices, reconstruction_flops, ChunkScope, CompressionReport,
    FlopsMethod, LlamaShape, MatrixGroup,
};

#[derive(Parser, Debug)]
#[command(name = "mcnc", version, about = "Manifold-constrained neural compression")]
struct Cli {
    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier, compressed or dense.
    Train(TrainArgs),
    /// Test accuracy of a saved compressed classifier.
    Eval(EvalArgs),
    /// Uniformity of generator outputs on the sphere.
    Coverage(CoverageArgs),
    /// Analytic cost of regenerating weights.
    Flops(FlopsArgs),
    /// Run a one-axis ablation grid.
    Ablate(AblateArgs),
    /// Time full reconstruction of a saved model.
    Bench(BenchArgs),
    /// Parameter accounting of a saved model.
    Info(ModelFileArg),
    /// Reconstruct every layer of a saved model.
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// MNIST directory, or `synthetic[:N]`. Defaults to $MCNC_DATA_DIR.
    #[arg(long)]
    data: Option<String>,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator input dimension k.
    #[arg(long = "mcnc-k", default_value_t = 9)]
    k: usize,
    /// Generator output (chunk) dimension d.
    #[arg(long = "mcnc-d", default_value_t = 5000)]
    d: usize,
    #[arg(long, default_value = "1000,1000", value_delimiter = ',')]
    gen_hidden: Vec<usize>,
    #[arg(long, default_value = "sine")]
    activation: Activation,
    #[arg(long, default_value_t = 4.5)]
    frequency: f64,
    #[arg(long, default_value = "global")]
    scope: ChunkScope,
    /// Train biases directly instead of compressing them.
    #[arg(long)]
    direct_biases: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "784-256-256-10")]
    model: MlpSpec,
    #[command(flatten)]
    data: DataArgs,
    /// Train the uncompressed network.
    #[arg(long)]
    dense: bool,
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long, conflicts_with = "lr_search")]
    lr: Option<f64>,
    /// Comma-separated rates; the best test accuracy is kept.
    #[arg(long, value_delimiter = ',')]
    lr_search: Option<Vec<f64>>,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to save the compressed model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelFileArg {
    #[arg(long)]
    model_file: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    file: ModelFileArg,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Inputs are uniform in [-L, L]^k.
    #[arg(long = "L", default_value_t = 1.0)]
    bound: f64,
    #[arg(long, default_value = "sine")]
    activation: Activation,
    /// First-layer multiplier; 1 leaves L as the only input scale.
    #[arg(long, default_value_t = 1.0)]
    frequency: f64,
    #[arg(long, default_value = "1024,1024", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = crate::coverage::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = crate::coverage::DEFAULT_PROJECTIONS)]
    projections: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = crate::coverage::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Also write the normalized outputs as x,y,z rows (d = 3 only).
    #[arg(long)]
    cloud_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Generator layer widths `k-h1-…-d`.
    #[arg(long, default_value = "5-32-32-5000")]
    gen_spec: String,
    /// Matrix groups `ROWSxCOLS[:COUNT]`, comma-separated.
    #[arg(
        long,
        value_delimiter = ',',
        required_unless_present = "preset",
        conflicts_with = "preset"
    )]
    shapes: Option<Vec<MatrixGroup>>,
    /// LLaMA-2 adapter shapes: `llama2-7b` or `llama2-13b`.
    #[arg(long)]
    preset: Option<String>,
    /// `mcnc`, `nola` (preset basis count) or `nola:<bases>`.
    #[arg(long, default_value = "mcnc")]
    method: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    axis: AblationAxis,
    /// Comma-separated values, e.g. `sine,relu` or `1:1000,31:16000`.
    #[arg(long)]
    values: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    lr_search: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run cells one after another.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    file: ModelFileArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    file: ModelFileArg,
    /// Write all layers as concatenated little-endian f64.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for runtime failures.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&parsed) {
        Ok(()) => 0,
        Err(e) => {
            let report = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            if parsed.json {
                println!("{report}");
            }
            eprintln!("mcnc: error[{}]: {e}", e.kind());
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Coverage(a) => cmd_coverage(a)?,
        Command::Flops(a) => cmd_flops(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Info(a) => cmd_info(a)?,
        Command::Reconstruct(a) => cmd_reconstruct(a)?,
    };
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&out.json)?);
    } else {
        print!("{}", out.text);
    }
    Ok(())
}

struct Output {
    text: String,
    json: Value,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn load_data(args: &DataArgs, seed: u64, n_features: usize, n_classes: usize) -> Result<DataSplits> {
    let mut splits = match args.data.as_deref() {
        Some(s) if s.starts_with("synthetic") => {
            let n = match s.strip_prefix("synthetic:") {
                Some(n) => n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad synthetic size in {s:?}")))?,
                None => 2000,
            };
            synthetic_splits(n, n.div_ceil(4), n_features, n_classes, seed)?
        }
        Some(dir) => load_mnist_dir(dir)?,
        None => {
            let dir = mnist_dir_from_env().ok_or_else(|| {
                Error::Data(format!(
                    "no --data given and ${DATA_DIR_ENV} does not point at MNIST IDX files"
                ))
            })?;
            load_mnist_dir(dir)?
        }
    };
    if let Some(n) = args.train_limit {
        splits.train = splits.train.head(n)?;
    }
    if let Some(n) = args.test_limit {
        splits.test = splits.test.head(n)?;
    }
    Ok(splits)
}

fn generator_config(g: &GenArgs, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        k: g.k,
        d: g.d,
        hidden_widths: g.gen_hidden.clone(),
        activation: g.activation,
        input_frequency: g.frequency,
        ..GeneratorConfig::default()
    }
}

fn report_text(r: &CompressionReport) -> String {
    format!(
        "trainable: {} of {} compressible parameters ({})\nchunks: {} (tail waste {})\nexcluded: {}\nstored: {} bytes (dense f32: {} bytes)\n",
        r.trainable_params,
        r.compressible_params,
        r.percentage_label(),
        r.n_chunks,
        r.tail_waste,
        r.excluded_params,
        r.stored_bytes,
        r.dense_bytes
    )
}

fn cmd_train(a: &TrainArgs) -> Result<Output> {
    if a.dense && a.out.is_some() {
        return Err(Error::Config("--out stores compressed models only".into()));
    }
    let data = load_data(&a.data, a.seed, a.model.n_inputs(), a.model.n_classes())?;
    let cfg = TrainConfig {
        optimizer: a.optimizer,
        lr: a.lr.unwrap_or(0.01),
        lr_search: a.lr_search.clone().unwrap_or_default(),
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let setup = (!a.dense).then(|| {
        let mut s = McncSetup::new(generator_config(&a.gen, a.seed)).with_scope(a.gen.scope);
        s.compress_biases = !a.gen.direct_biases;
        s
    });
    let (result, trials) = if cfg.lr_search.is_empty() {
        (train(&a.model, setup.as_ref(), &data, &cfg)?, vec![])
    } else {
        train_with_search(&a.model, setup.as_ref(), &data, &cfg)?
    };
    let saved = match (&a.out, &result.model) {
        (Some(path), TrainedModel::Compressed { model, .. }) => Some(save_compressed(model, path)?),
        _ => None,
    };
    let mut text = format!(
        "model: {}{}\nlr: {}\ntest accuracy: {:.4}\nfinal loss: {:.6}\n",
        a.model,
        if a.dense { " (dense)" } else { "" },
        result.lr,
        result.test_accuracy,
        result.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    text += &report_text(&result.compression);
    if let (Some(path), Some(n)) = (&a.out, saved) {
        text += &format!("saved: {} ({n} bytes)\n", path.display());
    }
    Ok(Output {
        text,
        json: json!({
            "model": a.model.to_string(),
            "dense": a.dense,
            "lr": result.lr,
            "final_lr": result.final_lr,
            "test_accuracy": result.test_accuracy,
            "loss_curve": result.loss_curve,
            "steps": result.steps,
            "trainable_params": result.trainable_params,
            "compression": result.compression,
            "lr_trials": trials,
            "saved_bytes": saved,
        }),
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<Output> {
    let cm = load_compressed(&a.file.model_file)?;
    let gen = Generator::build(&cm.generator)?;
    let params = cm.effective_params(&cm.reconstruct(&gen)?)?;
    let spec = MlpSpec::from_params(&params.iter().map(|t| t.shape()).collect::<Vec<_>>())?;
    let data = load_data(&a.data, 0, spec.n_inputs(), spec.n_classes())?;
    let acc = evaluate_params(&spec, &params, &data.test)?;
    Ok(Output {
        text: format!(
            "model: {spec}\ntest accuracy: {acc:.4} on {} examples\n",
            data.test.len()
        ),
        json: json!({ "model": spec.to_string(), "test_accuracy": acc, "n_examples": data.test.len() }),
    })
}

fn cmd_coverage(a: &CoverageArgs) -> Result<Output> {
    let cfg = GeneratorConfig {
        seed: a.seed,
        k: a.k,
        d: a.d,
        hidden_widths: a.hidden.clone(),
        activation: a.activation,
        input_frequency: a.frequency,
        ..GeneratorConfig::default()
    };
    let gen = Generator::build(&cfg)?;
    let report = coverage_report(&gen, a.bound, a.samples, a.projections, a.seed, a.tau)?;
    if let Some(path) = &a.out_json {
        serde_json::to_writer_pretty(create(path)?, &report)?;
    }
    if let Some(path) = &a.cloud_csv {
        if a.d != 3 {
            return Err(Error::Config("--cloud-csv needs --d 3".into()));
        }
        write_point_cloud_csv(&generator_cloud(&gen, a.bound, a.samples, a.seed)?, create(path)?)?;
    }
    Ok(Output {
        text: format!(
            "L: {}\nsliced W2: {:.6}\nuniformity score: {:.6} (tau {})\n",
            a.bound, report.swd, report.uniformity_score, report.tau
        ),
        json: serde_json::to_value(&report)?,
    })
}

fn parse_gen_spec(s: &str) -> Result<GeneratorConfig> {
    let dims: Vec<usize> = s
        .split(['-', ','])
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad generator spec {s:?} (expected k-h1-…-d)")))?;
    if dims.len() < 2 {
        return Err(Error::Config(format!("generator spec {s:?} needs at least k and d")));
    }
    Ok(GeneratorConfig::new(0, dims[0], *dims.last().expect("len ≥ 2")).with_hidden(dims[1..dims.len() - 1].to_vec()))
}

fn cmd_flops(a: &FlopsArgs) -> Result<Output> {
    let gen = parse_gen_spec(&a.gen_spec)?;
    let preset = a.preset.as_deref().map(LlamaShape::preset).transpose()?;
    let groups = match (&a.shapes, preset) {
        (Some(g), _) => g.clone(),
        (None, Some(p)) => llama2_adapter_matrices(&p)?,
        (None, None) => return Err(Error::Config("give --shapes or --preset".into())),
    };
    let method = match (a.method.to_ascii_lowercase().as_str(), preset) {
        ("nola", Some(p)) => FlopsMethod::Nola { n_bases: p.nola_bases },
        ("nola", None) => return Err(Error::Config("--method nola needs a basis count (nola:<bases>)".into())),
        (m, _) => m.parse()?,
    };
    let report = reconstruction_flops(&gen, &groups, method)?;
    let mut text = String::new();
    for g in &report.groups {
        text += &format!(
            "{}x{} ×{}: {} FLOPs ({} MFLOPs) each\n",
            g.group.rows,
            g.group.cols,
            g.group.count,
            g.per_matrix,
            format_centi((g.per_matrix + 5_000) / 10_000)
        );
    }
    let tab = format_centi(report.tabulated_centi_gflops());
    text += &format!("method: {method}\ntotal: {tab} GFLOPs ({} FLOPs)\n", report.total);
    Ok(Output {
        text,
        json: json!({
            "method": method.to_string(),
            "groups": report.groups,
            "total_flops": report.total,
            "gflops": tab,
            "gflops_exact_rounding": format_centi(report.exact_centi_gflops()),
        }),
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<Output> {
    let values = AxisValue::parse_list(a.axis, &a.values)?;
    let mut spec = AblationSpec::mnist(a.axis, values);
    spec.repeats = a.repeats;
    spec.base.epochs = a.epochs;
    spec.base.batch_size = a.batch_size;
    spec.base.lr_search = a.lr_search.clone();
    spec.base.seed = a.seed;
    spec.generator.seed = a.seed;
    spec.parallel = !a.serial;
    let data = load_data(&a.data, a.seed, spec.mlp.n_inputs(), spec.mlp.n_classes())?;
    let table = run_ablation(&spec, &data)?;
    if let Some(path) = &a.out_csv {
        write_ablation_csv(&table, create(path)?)?;
    }
    if let Some(path) = &a.out_json {
        write_ablation_json(&table, create(path)?)?;
    }
    let mut text = format!("axis: {}\n", a.axis);
    for r in &table.rows {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        text += &format!(
            "{:>12}  {} ± {}  ({} failed)\n",
            r.value,
            pct(r.mean_accuracy),
            pct(r.std_accuracy),
            r.failed_cells
        );
    }
    Ok(Output {
        text,
        json: json!({ "rows": table.rows }),
    })
}

fn cmd_bench(a: &BenchArgs) -> Result<Output> {
    let cm = load_compressed(&a.file.model_file)?;
    let gen = Generator::build(&cm.generator)?;
    let (report, _) = bench_reconstruct(&cm, &gen, a.workers, a.repeats)?;
    Ok(Output {
        text: format!(
            "workers: {}\nwall: {:.3} ms per reconstruction (median of {})\nchunks/sec: {:.1}\nGFLOP/s: {:.3}\n",
            report.workers,
            report.wall_ms,
            report.repeats,
            report.chunks_per_sec,
            report.flops_per_sec / 1e9
        ),
        json: serde_json::to_value(&report)?,
    })
}

fn cmd_info(a: &ModelFileArg) -> Result<Output> {
    let cm = load_compressed(&a.model_file)?;
    let r = compression_report(&cm)?;
    let g = &cm.generator;
    let text = format!(
        "generator: k={} d={} hidden={:?} activation={} seed={}\nscope: {}\n{}",
        g.k,
        g.d,
        g.hidden_widths,
        g.activation,
        g.seed,
        cm.scope,
        report_text(&r)
    );
    Ok(Output {
        text,
        json: json!({ "generator": g, "scope": cm.scope, "report": r, "percentage": r.percentage_label() }),
    })
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<Output> {
    let cm = load_compressed(&a.file.model_file)?;
    let gen = Generator::build(&cm.generator)?;
    let layers = cm.reconstruct_with_workers(&gen, a.workers)?;
    let mut w = create(&a.out)?;
    let mut n = 0;
    for t in &layers {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&a.out, e))?;
        }
        n += t.len();
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    Ok(Output {
        text: format!("wrote {n} values from {} layers to {}\n", layers.len(), a.out.display()),
        json: json!({ "values": n, "layers": layers.len(), "out": a.out }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(cli(["mcnc", "frobnicate"]), 2);
        assert_eq!(cli(["mcnc", "flops", "--bogus"]), 2);
        assert_eq!(cli(["mcnc", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_one() {
        assert_eq!(
            cli(["mcnc", "coverage", "--d", "3", "--k", "1", "--L", "0", "--hidden", "8"]),
            1
        );
        assert_eq!(cli(["mcnc", "info", "--model-file", "/nonexistent/model.mcnc"]), 1);
    }

    #[test]
    fn gen_spec_parsing() {
        let g = parse_gen_spec("5-32-32-5000").unwrap();
        assert_eq!((g.k, g.d, g.hidden_widths.clone()), (5, 5000, vec![32, 32]));
        assert!(parse_gen_spec("5").is_err());
    }
}
