use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grag::analysis::SegmentLabel;
use grag::harness::analyze::{analyze_bundle, apply_to_bundle, capture_toy_bundle};
use grag::harness::bench::{run_bench, BenchConfig};
use grag::harness::config::{read_json, write_json, GragConfigFile};
use grag::harness::conformance::{check_bundle, default_cases, generate_bundle, DEFAULT_TOLERANCE};
use grag::harness::load_dump_bundle;
use grag::harness::sweep::{run_sweep_to_dir, SweepConfig, REPORT_CSV, SUMMARY_JSON};
use grag::harness::toy::{build_toy_model, EditInputs, ToyModelConfig};
use grag::{DType, GragError, Result};

const THREADS_ENV: &str = "GRAG_NUM_THREADS";

/// Group relative attention guidance: analysis, sweeps and conformance.
#[derive(Debug, Parser)]
#[command(
    name = "grag",
    version,
    after_help = "Set GRAG_NUM_THREADS to fix the worker thread count."
)]
struct Cli {
    /// Seed for every random draw; overrides the seed in config files [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Norm maps, head statistics and cross-step similarity of a dump bundle.
    Analyze {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated segments, e.g. q_edit,k_src [default: all six]
        #[arg(long, value_delimiter = ',')]
        segments: Vec<SegmentLabel>,
    },
    /// Rewrite the K tensors of a dump bundle with GRAG applied.
    Apply {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a lambda / delta / CFG sweep on the seeded toy model.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write or verify a golden-vector bundle.
    Conformance(ConformanceArgs),
    /// Time one joint-attention forward pass.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Capture the toy model's attention inputs as a dump bundle.
    Dump {
        /// Toy model config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of captures, each with inputs seeded by `seed + step`.
        #[arg(long, default_value_t = 3)]
        steps: u64,
        #[arg(long, default_value_t = DType::F32)]
        dtype: DType,
    },
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).multiple(false))]
struct ConformanceArgs {
    #[arg(long, value_name = "DIR", group = "mode")]
    generate: Option<PathBuf>,
    #[arg(long, value_name = "DIR", group = "mode")]
    check: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
}

enum Outcome {
    Ok,
    ConformanceFailed,
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| GragError::Config(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| GragError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<Outcome> {
    init_threads()?;
    match cli.command {
        Command::Analyze {
            bundle,
            out,
            segments,
        } => {
            let labels = if segments.is_empty() {
                SegmentLabel::ALL.to_vec()
            } else {
                segments
            };
            let b = load_dump_bundle(&bundle)?;
            let s = analyze_bundle(&b, &labels, &out)?;
            println!(
                "analyzed {} layer/segment pairs into {}",
                s.segments.len(),
                out.display()
            );
        }
        Command::Apply {
            bundle,
            config,
            out,
        } => {
            let cfg = GragConfigFile::load(&config)?;
            let n = apply_to_bundle(&bundle, &cfg, &out)?;
            println!("guided {n} K tensors into {}", out.display());
        }
        Command::Sweep { config, out } => {
            let mut cfg = SweepConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.model.seed = seed;
            }
            let report = run_sweep_to_dir(&cfg, &out)?;
            for r in &report.rows {
                let cfg_scale = r.point.cfg.map(|s| format!(" cfg={s}")).unwrap_or_default();
                println!(
                    "lambda={} delta={}{cfg_scale} divergence={:.6e} cosine={:.9}",
                    r.point.lambda, r.point.delta, r.divergence, r.cosine
                );
            }
            println!(
                "wrote {} and {} to {}",
                REPORT_CSV,
                SUMMARY_JSON,
                out.display()
            );
        }
        Command::Conformance(args) => {
            if let Some(dir) = args.generate {
                let cases = default_cases(cli.seed.unwrap_or(grag::harness::toy::DEFAULT_SEED))?;
                let index = generate_bundle(&dir, &cases)?;
                println!("wrote {} cases to {}", index.cases.len(), dir.display());
            } else if let Some(dir) = args.check {
                let report = check_bundle(&dir, args.tol)?;
                for c in &report.cases {
                    let diff = c
                        .max_abs_diff
                        .map(|d| format!("{d:.3e}"))
                        .unwrap_or_else(|| "shape mismatch".into());
                    let verdict = if c.passed { "PASS" } else { "FAIL" };
                    println!("{verdict} {} ({}) max_abs_diff={diff}", c.name, c.dtype);
                }
                if !report.passed() {
                    let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                    eprintln!(
                        "conformance failed (tol {}): {}",
                        args.tol,
                        names.join(", ")
                    );
                    return Ok(Outcome::ConformanceFailed);
                }
            }
        }
        Command::Bench { config, out } => {
            let cfg: BenchConfig = match config {
                Some(p) => read_json(p)?,
                None => BenchConfig::default(),
            };
            let report = run_bench(&cfg, cli.seed.unwrap_or(grag::harness::toy::DEFAULT_SEED))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("plain data")
            );
            if let Some(p) = out {
                write_json(p, &report)?;
            }
        }
        Command::Dump {
            config,
            out,
            steps,
            dtype,
        } => {
            let mut cfg: ToyModelConfig = match config {
                Some(p) => read_json(p)?,
                None => ToyModelConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let m = match dtype {
                DType::F32 => dump::<f32>(&cfg, steps, &out)?,
                DType::F64 => dump::<f64>(&cfg, steps, &out)?,
            };
            println!("wrote {} tensors to {}", m, out.display());
        }
    }
    Ok(Outcome::Ok)
}

fn dump<T: grag::Scalar>(cfg: &ToyModelConfig, steps: u64, out: &std::path::Path) -> Result<usize>
where
    grag::harness::AnyTensor: From<grag::Tensor<T>>,
{
    let model = build_toy_model::<T>(cfg)?;
    let inputs = (0..steps)
        .map(|s| EditInputs::seeded(cfg, cfg.seed.wrapping_add(s), 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(capture_toy_bundle(&model, &inputs, None, out)?
        .entries
        .len())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ConformanceFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
