use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use flexprefill::engine::{HeadConfig, HeadInput};
use flexprefill::fpt::{self, TensorBundle};
use flexprefill::pattern::RepresentativePosition;
use flexprefill::report::{
    heatmap_csv, run_layers, sweep, sweep_csv, sweep_json, HeatmapKind, InputDigest, RunReport,
    SweepParam, ToolInfo,
};
use flexprefill::selection::{BudgetConfig, QaMode};
use flexprefill::workload::{generate_heads, WorkloadKind, WorkloadSpec};
use flexprefill::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VIOLATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "flexattn",
    version,
    about = "Adaptive sparse attention experiments on synthetic or stored Q/K/V tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload and write it as an FPT file.
    Gen(GenArgs),
    /// Run every head and write a JSON report.
    Run(RunArgs),
    /// Repeat a run over a list of gamma or tau values.
    Sweep(SweepArgs),
    /// Turn a report into a layer x head CSV grid.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Needle,
    Blocky,
    Local,
    Random,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    seq_len: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    spike_count: usize,
    #[arg(long, default_value_t = 10.0)]
    spike_gain: f64,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 8.0)]
    cluster_gain: f64,
    #[arg(long, default_value_t = 128)]
    segment_len: usize,
    #[arg(long, default_value_t = 128)]
    window: usize,
    #[arg(long, default_value_t = 4.5)]
    decay_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "inputs", required = true, multiple = true)]
struct InputArgs {
    /// Q/K/V workload file; each file is one layer.
    #[arg(long, group = "inputs", conflicts_with_all = ["q", "k", "v"])]
    workload: Vec<PathBuf>,
    #[arg(long, group = "inputs", requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    v: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QaModeArg {
    Global,
    PerQuery,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 128)]
    block_size: usize,
    #[arg(long, default_value_t = 1024)]
    min_budget: usize,
    #[arg(long)]
    max_budget: Option<usize>,
    /// Do not force the first key block and the diagonal.
    #[arg(long)]
    no_first_last: bool,
    #[arg(long, value_enum, default_value = "global")]
    qa_mode: QaModeArg,
    /// Run the dense oracle and fill the error fields of the report.
    #[arg(long)]
    oracle_errors: bool,
}

impl ConfigArgs {
    fn config(&self, gamma: f64, tau: f64) -> HeadConfig {
        HeadConfig {
            tau,
            block_size: self.block_size,
            budget: BudgetConfig {
                gamma,
                min_budget_tokens: self.min_budget,
                max_budget_tokens: self.max_budget,
                keep_first_last_blocks: !self.no_first_last,
                qa_mode: match self.qa_mode {
                    QaModeArg::Global => QaMode::GlobalFlatten,
                    QaModeArg::PerQuery => QaMode::PerQueryBlock,
                },
            },
            representative: RepresentativePosition::Last,
            collect_error_metrics: self.oracle_errors,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Check the per-row error bound against the dense oracle; exit 4 on
    /// any violation.
    #[arg(long)]
    check_bound: bool,
    #[arg(long)]
    report: PathBuf,
    /// Also write sparsity.csv, pattern.csv and jsd.csv here.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
#[group(id = "sweep_param", required = true, multiple = false)]
struct SweepValues {
    #[arg(long, value_delimiter = ',', num_args = 1.., group = "sweep_param")]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1.., group = "sweep_param")]
    tau: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    values: SweepValues,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    report: PathBuf,
    /// One of sparsity, pattern, jsd.
    #[arg(long)]
    what: String,
    /// Output path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            _ if e.is_io() => EXIT_IO,
            Error::Shape(_) => EXIT_IO,
            Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_VIOLATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn parallelism() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("FLEXATTN_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(available)
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fpt::write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let kind = match a.kind {
        Kind::Needle => WorkloadKind::Needle {
            spike_count: a.spike_count,
            spike_gain: a.spike_gain,
        },
        Kind::Blocky => WorkloadKind::Blocky {
            clusters: a.clusters,
            cluster_gain: a.cluster_gain,
            segment_len: a.segment_len,
        },
        Kind::Local => WorkloadKind::Local {
            window: a.window,
            decay_rate: a.decay_rate,
        },
        Kind::Random => WorkloadKind::Random,
    };
    if a.heads == 0 {
        return Err(Error::InvalidArgument("--heads must be >= 1".into()).into());
    }
    let spec = WorkloadSpec::new(kind, a.seq_len, a.dim, a.seed);
    let heads = generate_heads(&spec, a.heads)?;
    let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for w in heads {
        q.push(w.q);
        k.push(w.k);
        v.push(w.v);
    }
    fpt::save(&TensorBundle::qkv(q, k, v)?, &a.out)?;
    Ok(())
}

struct LoadedInputs {
    layers: Vec<Vec<HeadInput>>,
    digests: Vec<InputDigest>,
}

fn read_digested(path: &Path, digests: &mut Vec<InputDigest>) -> CliResult<TensorBundle> {
    let bytes = std::fs::read(path).map_err(|e| {
        Failure::from(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })?;
    digests.push(InputDigest {
        path: path.display().to_string(),
        sha256: Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
    });
    fpt::decode(bytes.as_slice()).map_err(|e| Failure {
        message: format!("{}: {e}", path.display()),
        ..Failure::from(e)
    })
}

fn single_stack(bundle: TensorBundle, path: &Path) -> CliResult<Vec<flexprefill::Tensor2D>> {
    if bundle.names.len() != 1 {
        return Err(Error::HeaderValidation(format!(
            "{}: expected one tensor, found {}",
            path.display(),
            bundle.names.len()
        ))
        .into());
    }
    Ok(bundle.tensors.into_iter().next().unwrap())
}

fn zip_heads(
    q: Vec<flexprefill::Tensor2D>,
    k: Vec<flexprefill::Tensor2D>,
    v: Vec<flexprefill::Tensor2D>,
) -> CliResult<Vec<HeadInput>> {
    if q.len() != k.len() || q.len() != v.len() {
        return Err(Error::Shape("q, k and v have different head counts".into()).into());
    }
    Ok(q.into_iter()
        .zip(k)
        .zip(v)
        .map(|((q, k), v)| HeadInput { q, k, v })
        .collect())
}

fn load_inputs(a: &InputArgs) -> CliResult<LoadedInputs> {
    let mut digests = Vec::new();
    let mut layers = Vec::new();
    if let (Some(qp), Some(kp), Some(vp)) = (&a.q, &a.k, &a.v) {
        let q = single_stack(read_digested(qp, &mut digests)?, qp)?;
        let k = single_stack(read_digested(kp, &mut digests)?, kp)?;
        let v = single_stack(read_digested(vp, &mut digests)?, vp)?;
        layers.push(zip_heads(q, k, v)?);
    } else {
        for path in &a.workload {
            let b = read_digested(path, &mut digests)?;
            let take = |name: &str| {
                b.get(name).map(|s| s.to_vec()).ok_or_else(|| {
                    Failure::from(Error::HeaderValidation(format!(
                        "{}: no tensor named {name:?}",
                        path.display()
                    )))
                })
            };
            layers.push(zip_heads(take("q")?, take("k")?, take("v")?)?);
        }
    }
    Ok(LoadedInputs { layers, digests })
}

fn tool() -> ToolInfo {
    ToolInfo {
        name: "flexattn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let mut cfg = a.config.config(a.gamma, a.tau);
    cfg.collect_error_metrics |= a.check_bound;
    cfg.validate()?;
    let inputs = load_inputs(&a.inputs)?;
    let entries = run_layers(&inputs.layers, &cfg, parallelism())?;
    let report = RunReport::new(tool(), cfg, inputs.digests, entries);
    fpt::write_atomic(&a.report, report.to_json()?.as_bytes())?;
    if let Some(dir) = &a.heatmap_dir {
        std::fs::create_dir_all(dir)?;
        for what in HeatmapKind::ALL {
            let csv = heatmap_csv(&report, what)?;
            fpt::write_atomic(&dir.join(format!("{}.csv", what.name())), csv.as_bytes())?;
        }
    }
    if a.check_bound {
        let violations: usize = report
            .heads
            .iter()
            .filter_map(|e| e.report.bound_violations)
            .sum();
        if violations > 0 {
            return Err(Failure {
                code: EXIT_VIOLATION,
                message: format!("error bound violated at {violations} entries"),
            });
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let (param, values) = if a.values.gamma.is_empty() {
        (SweepParam::Tau, &a.values.tau)
    } else {
        (SweepParam::Gamma, &a.values.gamma)
    };
    let base = a.config.config(0.95, 0.1);
    if values.len() < 2 {
        return Err(Failure {
            code: EXIT_USAGE,
            message: format!("a sweep needs at least 2 points, got {}", values.len()),
        });
    }
    let inputs = load_inputs(&a.inputs)?;
    let rows = sweep(&inputs.layers, &base, param, values, parallelism())?;
    let text = match a.format {
        Format::Csv => sweep_csv(&rows),
        Format::Json => sweep_json(&rows)?,
    };
    write_output(a.out.as_deref(), &text)
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult<()> {
    let what: HeatmapKind = a.what.parse()?;
    let text = std::fs::read_to_string(&a.report)?;
    let report = RunReport::from_json(&text)?;
    if !report.aggregates_consistent() {
        return Err(Failure {
            code: EXIT_VIOLATION,
            message: "report aggregates do not match its head entries".into(),
        });
    }
    write_output(a.out.as_deref(), &heatmap_csv(&report, what)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("FLEXATTN_THREADS") {
        if let Ok(t) = threads.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build_global();
        }
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("flexattn: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
