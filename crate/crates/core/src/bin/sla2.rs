use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sla2::attention::Fault;
use sla2::io::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "sla2",
    version,
    about = "Sparse + linear attention verification lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Quantized sparse branch during stage-2 training.
    #[arg(long, global = true)]
    quant: Option<Switch>,
    /// Percent of block pairs skipped (stage2, bench).
    #[arg(long, global = true)]
    sparsity: Option<f64>,
    /// Inject a known bug to check that verification notices it.
    #[arg(long, global = true)]
    fault: Option<FaultArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Synthetic data, dense pretraining and Q/K/V capture.
    GenData,
    /// Run every verification suite; exit status 1 if any check fails.
    Verify,
    /// Train routers and mixing ratios against dense attention.
    Stage1,
    /// Fine-tune the model through the frozen routers.
    Stage2,
    /// Time dense vs sparse + linear attention.
    Bench,
    /// Summarize every run under the output root.
    Report,
}

#[derive(ValueEnum, Clone, Copy)]
enum Switch {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy)]
enum FaultArg {
    DvAssign,
}

fn configure(cli: &Cli) -> sla2::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(q) = cli.quant {
        cfg.qat = matches!(q, Switch::On);
    }
    if let Some(s) = cli.sparsity {
        cfg.stage2.sparsity = s;
        cfg.bench.sparsities = vec![s];
    }
    if let Some(FaultArg::DvAssign) = cli.fault {
        cfg.verify.fault = Some(Fault::DvAssign);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads_from_env() -> sla2::Result<()> {
    if let Ok(v) = std::env::var("SLA2_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| sla2::Error::Config(format!("SLA2_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| sla2::Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> sla2::Result<bool> {
    threads_from_env()?;
    let cfg = configure(cli)?;
    let out = &cli.out;
    let (output, ok) = match cli.command {
        Command::GenData => (io::cmd_gen_data(&cfg, out)?, true),
        Command::Stage1 => (io::cmd_stage1(&cfg, out)?, true),
        Command::Stage2 => (io::cmd_stage2(&cfg, out)?, true),
        Command::Bench => (io::cmd_bench(&cfg, out)?, true),
        Command::Report => (io::cmd_report(&cfg, out)?, true),
        Command::Verify => {
            let (o, report) = io::cmd_verify(&cfg, out)?;
            (o, report.passed)
        }
    };
    print!("{}", output.summary);
    if !output.summary.ends_with('\n') {
        println!();
    }
    println!("wrote {}", output.dir.display());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
