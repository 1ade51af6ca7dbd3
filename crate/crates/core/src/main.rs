use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpemb::cli::{self, BenchConfig, SimulateConfig, TrainToyConfig, TraceSpec};
use mpemb::{Error, Precision, ReplacementPolicy, RoundingMode};

#[derive(Parser)]
#[command(name = "mpemb", version, about = "Mixed-precision embedding tables with an FP32 row cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file. Omit to use built-in defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ratios=[0.05,0.1]` or `--set train.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; falls back to the config, then MPEMB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Replay an access trace over a grid of cache configurations.
    Simulate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Output directory (overrides `out_dir`).
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the teacher-student toy task and report accuracy drop against FP32.
    TrainToy {
        #[command(flatten)]
        args: ConfigArgs,
        /// Metrics JSON output (overrides `out`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the compression factor relative to FP32 storage.
    Compression {
        #[arg(short, long)]
        precision: Precision,
        #[arg(short, long)]
        dim: usize,
        #[arg(short, long, default_value_t = 0.0)]
        ratio: f64,
        #[arg(long, default_value = "lfu")]
        policy: ReplacementPolicy,
    },
    /// Measure fetch/update throughput as a function of cache hit rate.
    Bench {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Quantize a text matrix into a binary snapshot.
    Quantize {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        precision: Precision,
        #[arg(short, long, default_value = "nearest")]
        rounding: RoundingMode,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic access trace in the text trace format.
    GenTrace {
        /// Trace spec as JSON, e.g. '{"kind":"zipf","num_rows":1000,"iterations":10,"batch_rows":32}'.
        #[arg(short = 't', long)]
        spec: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cmd: Command) -> mpemb::Result<i32> {
    match cmd {
        Command::Simulate { args, out_dir } => {
            let mut o = args.overrides();
            if let Some(d) = out_dir {
                o.push(format!("out_dir={}", d.display()));
            }
            let cfg: SimulateConfig = cli::load_config(args.config.as_deref(), &o)?;
            let out = cli::cmd_simulate(&cfg)?;
            print!("{}", cli::render_sim_table(&out));
            println!("wrote {}", out.csv_path.display());
            if out.failures() > 0 {
                eprintln!("{} of {} cells failed", out.failures(), out.cells.len());
                return Ok(cli::EXIT_RUNTIME);
            }
        }
        Command::TrainToy { args, out } => {
            let mut o = args.overrides();
            if let Some(p) = out {
                o.push(format!("out={}", p.display()));
            }
            let cfg: TrainToyConfig = cli::load_config(args.config.as_deref(), &o)?;
            let rows = cli::cmd_train_toy(&cfg)?;
            print!("{}", cli::render_drop_table(&rows));
        }
        Command::Compression {
            precision,
            dim,
            ratio,
            policy,
        } => println!("{}", cli::cmd_compression(precision, dim, ratio, policy)?),
        Command::Bench { args } => {
            let cfg: BenchConfig = cli::load_config(args.config.as_deref(), &args.overrides())?;
            let report = cli::cmd_bench(&cfg)?;
            print!("{}", cli::render_bench_table(&report));
            if !report.monotone {
                eprintln!("warning: update throughput is not monotone in hit rate");
            }
            if !report.extremes_ordered {
                eprintln!("update throughput at the highest hit rate does not beat the lowest");
                return Ok(cli::EXIT_RUNTIME);
            }
        }
        Command::Quantize {
            input,
            output,
            precision,
            rounding,
            seed,
        } => {
            let (rows, dim) = cli::cmd_quantize(&input, &output, precision, rounding, seed)?;
            println!("wrote {rows} rows x {dim} ({precision}) to {}", output.display());
        }
        Command::GenTrace { spec, output, seed } => {
            let spec: TraceSpec = serde_json::from_str(&spec).map_err(Error::from)?;
            let t = cli::cmd_gen_trace(&spec, seed, &output)?;
            println!(
                "wrote {} iterations, {} accesses to {}",
                t.iterations.len(),
                t.total_accesses(),
                output.display()
            );
        }
    }
    Ok(cli::EXIT_OK)
}

fn main() -> ExitCode {
    let parsed = Cli::parse();
    match run(parsed.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
