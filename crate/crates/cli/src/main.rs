//! `unicomp`: compress, analyze, verify-bound, bench and synth.
//!
//! Exit codes: 0 ok, 1 invariant violation, 2 usage or config, 3 input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use unicomp::alloc::AllocVariant;
use unicomp::baselines::Selector;
use unicomp::bench::{bench_sdc, BenchConfig};
use unicomp::fgf::FusionVariant;
use unicomp::io::{read_container_file, to_stable_json, write_compressed, write_container_file, FormatError};
use unicomp::pipeline::{analyze, compress, CompressionConfig, CompressionReport, DEFAULT_U_C, DEFAULT_U_F};
use unicomp::verify::{verify_bounds, Mutation, VerifyConfig};
use unicomp::{EmitOrder, Error};

const EXIT_VIOLATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "unicomp", version, about = "Uniqueness-driven video token compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a token container and write the retained tokens plus a report.
    Compress(CompressArgs),
    /// Run the pipeline and print the report without writing tokens.
    Analyze(AnalyzeArgs),
    /// Randomized checks of the reconstruction-error bounds.
    VerifyBound(VerifyArgs),
    /// Time the reference and parallel spatial compression paths.
    Bench(BenchArgs),
    /// Write a seeded synthetic container.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Ids,
    Uniqueness,
}

#[derive(Clone, Copy, ValueEnum)]
enum FgfArg {
    Fusion,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocArg {
    Softmax,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Sdc,
    UniqueTopk,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

#[derive(Args)]
struct PipelineArgs {
    /// Input UCTK container.
    #[arg(long)]
    input: PathBuf,
    /// Fraction of `T * N` tokens to emit, markers included.
    #[arg(long, group = "budget")]
    ratio: Option<f64>,
    /// Absolute limit on emitted tokens, markers included.
    #[arg(long, group = "budget")]
    token_max: Option<usize>,
    /// Keep up to `N` tokens per frame group, with no total limit.
    #[arg(long, group = "budget")]
    auto: bool,
    /// Frame-grouping threshold.
    #[arg(long, default_value_t = DEFAULT_U_F)]
    uf: f64,
    /// Token-redundancy threshold.
    #[arg(long, default_value_t = DEFAULT_U_C)]
    uc: f64,
    #[arg(long, value_enum, default_value_t = OrderArg::Ids)]
    order: OrderArg,
    /// Keep retained features as-is instead of fusing their neighbours.
    #[arg(long)]
    no_fuse: bool,
    #[arg(long, value_enum, default_value_t = FgfArg::Fusion)]
    fgf: FgfArg,
    #[arg(long, value_enum, default_value_t = AllocArg::Softmax)]
    alloc: AllocArg,
    /// Keep stage timings in the report (they make it run-dependent).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct CompressArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output UCTK container of retained tokens; the layout sidecar goes
    /// next to it as `<output>.meta.json`.
    #[arg(long)]
    output: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_enum, default_value_t = SelectorArg::Sdc)]
    selector: SelectorArg,
    /// Seed for the random selector.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Draw trial tokens from this container's frames instead of random unit vectors.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    max_n: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    max_d: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately break the bound to show the suite catches it.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    kt: usize,
    #[arg(long, default_value_t = 20)]
    repeat: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = DEFAULT_U_C)]
    uc: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for the parallel path.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 196)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Static shots; 0 makes every frame independent.
    #[arg(long, default_value_t = 0)]
    scenes: usize,
    /// Per-entry noise added to each scene frame.
    #[arg(long, default_value_t = 0.01)]
    jitter: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code and single-line message.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::BudgetTooSmall { .. }
            | Error::BudgetOutOfRange { .. }
            | Error::ThresholdOutOfRange { .. } => EXIT_USAGE,
            _ => EXIT_INPUT,
        };
        Failure(code, e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure(EXIT_INPUT, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure(EXIT_INPUT, format!("{}: {e}", path.display()))
}

fn read_input(path: &Path) -> Result<unicomp::VideoTensor, Failure> {
    read_container_file(path).map_err(|e| Failure(EXIT_INPUT, format!("{}: {e}", path.display())))
}

impl PipelineArgs {
    fn config(&self) -> Result<CompressionConfig, Failure> {
        let mut cfg = match (self.ratio, self.token_max, self.auto) {
            (Some(r), None, false) => CompressionConfig::with_ratio(r),
            (None, Some(k), false) => CompressionConfig::with_token_max(k),
            (None, None, true) => CompressionConfig::auto(),
            (None, None, false) => {
                return Err(Failure(EXIT_USAGE, "one of --ratio, --token-max or --auto is required".into()))
            }
            _ => return Err(Failure(EXIT_USAGE, "--ratio, --token-max and --auto are exclusive".into())),
        };
        cfg.u_f = self.uf;
        cfg.u_c = self.uc;
        cfg.order = match self.order {
            OrderArg::Ids => EmitOrder::Ids,
            OrderArg::Uniqueness => EmitOrder::Uniqueness,
        };
        cfg.fuse = !self.no_fuse;
        cfg.fgf_variant = match self.fgf {
            FgfArg::Fusion => FusionVariant::Fusion,
            FgfArg::First => FusionVariant::First,
        };
        cfg.alloc_variant = match self.alloc {
            AllocArg::Softmax => AllocVariant::Softmax,
            AllocArg::Uniform => AllocVariant::Uniform,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn finish(&self, report: CompressionReport) -> CompressionReport {
        if self.timings {
            report
        } else {
            report.without_timings()
        }
    }
}

fn summary(r: &CompressionReport) -> String {
    let t = &r.totals;
    let limit = t.token_max.map_or_else(|| "none".to_string(), |k| k.to_string());
    format!(
        "frames {} tokens/frame {} groups {} emitted {} (retained {} + markers {}) limit {} ratio {:.4}{}",
        t.frames,
        t.tokens_per_frame,
        t.groups,
        t.emitted,
        t.retained,
        t.markers,
        limit,
        t.retained_ratio,
        if t.bypassed { " bypassed" } else { "" }
    )
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, format!("{text}\n")).map_err(|e| io_failure(path, e))
}

fn cmd_compress(a: &CompressArgs) -> Result<u8, Failure> {
    let cfg = a.pipeline.config()?;
    let video = read_input(&a.pipeline.input)?;
    let out = compress(&video, &cfg)?;
    let (bytes, sidecar) = write_compressed(&out)?;
    fs::write(&a.output, bytes).map_err(|e| io_failure(&a.output, e))?;
    write_text(&sidecar_path(&a.output), &sidecar)?;
    let report = a.pipeline.finish(out.report);
    write_text(&a.report, &to_stable_json(&report)?)?;
    println!("{}", summary(&report));
    Ok(0)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<u8, Failure> {
    let mut cfg = a.pipeline.config()?;
    cfg.selector = match a.selector {
        SelectorArg::Sdc => Selector::Sdc,
        SelectorArg::UniqueTopk => Selector::UniqueTopk,
        SelectorArg::Random => Selector::Random { seed: a.seed },
    };
    let video = read_input(&a.pipeline.input)?;
    let report = a.pipeline.finish(analyze(&video, &cfg)?);
    println!("{}", to_stable_json(&report)?);
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs) -> Result<u8, Failure> {
    let pool = match &a.input {
        Some(p) => read_input(p)?.frames().to_vec(),
        None => Vec::new(),
    };
    let cfg = VerifyConfig {
        trials: a.trials,
        max_n: a.max_n as usize,
        max_d: a.max_d as usize,
        seed: a.seed,
        mutation: match a.inject_fault {
            Some(FaultArg::SignFlip) => Mutation::SignFlip,
            None => Mutation::None,
        },
    };
    let out = verify_bounds(&cfg, &pool);
    for line in out.summary_lines() {
        println!("{line}");
    }
    match &out.counterexample {
        Some(c) => {
            println!("counterexample: {}", serde_json::to_string(c).expect("plain data"));
            Ok(EXIT_VIOLATION)
        }
        None => Ok(0),
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<u8, Failure> {
    if a.n == 0 || a.d == 0 || a.kt == 0 || a.kt > a.n {
        return Err(Failure(EXIT_USAGE, "need n >= 1, d >= 1 and 1 <= kt <= n".into()));
    }
    let r = bench_sdc(&BenchConfig {
        n: a.n,
        d: a.d,
        budget: a.kt,
        u_c: a.uc,
        repeat: a.repeat,
        seed: a.seed,
        threads: a.threads,
    })?;
    println!("n {} d {} kt {} repeat {} threads {}", r.n, r.d, r.budget, r.repeat, a.threads);
    println!("reference median {:.3} ms", r.reference_ms);
    println!("parallel median {:.3} ms", r.parallel_ms);
    println!("speedup {:.2}x", r.speedup);
    println!("mismatches {}", r.mismatches);
    Ok(if r.mismatches == 0 { 0 } else { EXIT_VIOLATION })
}

fn cmd_synth(a: &SynthArgs) -> Result<u8, Failure> {
    if a.frames == 0 || a.tokens == 0 || a.dim == 0 {
        return Err(Failure(EXIT_USAGE, "frames, tokens and dim must be >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let video = if a.scenes == 0 {
        unicomp::synth::random_video(&mut rng, a.frames, a.tokens, a.dim, None)
    } else {
        unicomp::synth::scene_video(&mut rng, a.frames, a.tokens, a.dim, a.scenes, a.jitter)
    };
    write_container_file(&a.output, &video)?;
    println!("wrote {} frames x {} tokens x {} dims", a.frames, a.tokens, a.dim);
    Ok(0)
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("UNICOMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure(EXIT_USAGE, format!("UNICOMP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure(EXIT_USAGE, e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<u8, Failure> {
        init_threads()?;
        match &cli.command {
            Command::Compress(a) => cmd_compress(a),
            Command::Analyze(a) => cmd_analyze(a),
            Command::VerifyBound(a) => cmd_verify(a),
            Command::Bench(a) => cmd_bench(a),
            Command::Synth(a) => cmd_synth(a),
        }
    };
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
