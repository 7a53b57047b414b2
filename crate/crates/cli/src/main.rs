use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flashblock::analysis::{frozen_context_fixture, stability_study, StabilityStudy};
use flashblock::bench::{sweep_context, sweep_rows_to_csv, SweepPolicy};
use flashblock::reuse::{
    calibrate_head_gates, HeadGateTable, ReuseConfig, ReuseMode, DEFAULT_GAMMA,
};
use flashblock::sim::{
    run_sequence, traces_to_csv, ModelConfig, RunConfig, SyntheticModel, UnmaskSchedule,
};
use flashblock::sparse::{gap_rows_to_csv, measure_sparse_gap, DEFAULT_KEY_BLOCK_SIZE};
use flashblock::verify::{run_verify, VerifyConfig};
use flashblock::Error;

#[derive(Parser)]
#[command(
    name = "flashblock",
    version,
    about = "Block-external attention reuse: simulation, sweeps and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite against the dense oracle.
    Verify(VerifyArgs),
    /// Generate blocks and print the per-step trace.
    Run(RunArgs),
    /// Counted attention work per step across context lengths.
    SweepContext(SweepContextArgs),
    /// Sparse attention gap with and without residual reuse.
    SweepDensity(SweepDensityArgs),
    /// Cross-step similarity of external and internal attention partials.
    AnalyzeSimilarity(SimilarityArgs),
    /// Per-head reuse gates from sample rollouts.
    CalibrateGates(CalibrateArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab,
            num_layers: self.layers,
            num_heads: self.heads,
            head_dim: self.dim,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    PerStep,
    Linear,
}

#[derive(Args)]
struct BlockArgs {
    #[arg(long, default_value_t = 8)]
    block_size: usize,
    /// Step budget per block.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, value_enum, default_value = "per-step")]
    schedule: Schedule,
    /// Tokens unmasked per step with the per-step schedule.
    #[arg(long, default_value_t = 1)]
    unmask_per_step: usize,
}

impl BlockArgs {
    fn unmask(&self) -> UnmaskSchedule {
        match self.schedule {
            Schedule::PerStep => UnmaskSchedule::PerStep(self.unmask_per_step),
            Schedule::Linear => UnmaskSchedule::Linear,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    layers: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    heads: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    block_size: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    tau: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    TokenThreshold,
    AlwaysRecompute,
    AlwaysReuse,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 32)]
    prompt_len: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    tau: usize,
    #[arg(long, value_enum, default_value = "token-threshold")]
    mode: Mode,
    /// Check every attention call against the dense oracle.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepContextArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "128,512,2048,8192")]
    contexts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    tau: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "reuse,dense")]
    policy: Vec<String>,
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepDensityArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    densities: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = DEFAULT_KEY_BLOCK_SIZE)]
    key_block: usize,
    #[arg(long, default_value_t = 256)]
    prompt_len: usize,
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Constant prompt, no positions, in-block noise: the external context cannot move.
    Frozen,
    /// Random prompt on the seeded model.
    Default,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, value_enum, default_value = "frozen")]
    fixture: Fixture,
    /// Output directory for the CSV files; stdout gets the summary otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 32)]
    prompt_len: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn invocation() -> String {
    let args: Vec<String> = std::env::args().skip(1).collect();
    format!("# flashblock {}\n", args.join(" "))
}

fn emit(out: Option<&Path>, body: &str) -> flashblock::Result<()> {
    match out {
        Some(path) => Ok(fs::write(path, body)?),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn emit_csv(out: Option<&Path>, csv: &str) -> flashblock::Result<()> {
    emit(out, &format!("{}{csv}", invocation()))
}

fn configure_threads() {
    if let Some(n) = std::env::var("FLASHBLOCK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn verify(args: &VerifyArgs) -> flashblock::Result<bool> {
    let cfg = VerifyConfig {
        seed: args.seed,
        layers: args.layers as usize,
        heads: args.heads as usize,
        dim: args.dim as usize,
        blocks: args.blocks,
        block_size: args.block_size as usize,
        tau: args.tau as usize,
        trials: args.trials,
    };
    let reports = run_verify(&cfg)?;
    for r in &reports {
        println!("{r}");
    }
    if args.blocks == 0 {
        println!("note: no blocks generated, trace is empty");
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn run(args: &RunArgs) -> flashblock::Result<()> {
    let model = SyntheticModel::<f64>::new(args.model.config())?;
    let run = RunConfig {
        prompt_len: args.prompt_len,
        num_blocks: args.blocks,
        block_size: args.block.block_size,
        steps_per_block: args.block.steps,
        unmask: args.block.unmask(),
        seed: args.model.seed,
        verify: args.verify,
        ..RunConfig::default()
    };
    let policy = match args.mode {
        Mode::TokenThreshold => {
            ReuseConfig::new(args.tau, DEFAULT_GAMMA, ReuseMode::TokenThreshold)?
        }
        Mode::AlwaysRecompute => ReuseConfig::always_recompute(),
        Mode::AlwaysReuse => ReuseConfig::always_reuse(),
    };
    let result = run_sequence(&model, &run, &policy, None, &mut ())?;
    emit_csv(args.out.as_deref(), &traces_to_csv(&result.traces))
}

fn sweep_context_cmd(args: &SweepContextArgs) -> flashblock::Result<()> {
    let model = SyntheticModel::<f64>::new(args.model.config())?;
    let policies = args
        .policy
        .iter()
        .map(|p| p.parse::<SweepPolicy>())
        .collect::<flashblock::Result<Vec<_>>>()?;
    let run = RunConfig {
        block_size: args.block.block_size,
        steps_per_block: args.block.steps,
        unmask: args.block.unmask(),
        seed: args.model.seed,
        ..RunConfig::default()
    };
    let rows = sweep_context(&model, &run, &args.contexts, &args.tau, &policies)?;
    emit_csv(args.out.as_deref(), &sweep_rows_to_csv(&rows))
}

fn sweep_density_cmd(args: &SweepDensityArgs) -> flashblock::Result<()> {
    let model = SyntheticModel::<f64>::new(args.model.config())?;
    let run = RunConfig {
        prompt_len: args.prompt_len,
        block_size: args.block.block_size,
        steps_per_block: args.block.steps,
        unmask: args.block.unmask(),
        seed: args.model.seed,
        ..RunConfig::default()
    };
    let rows = measure_sparse_gap(
        &model,
        &run,
        &args.densities,
        args.layer,
        args.key_block,
        args.seeds,
    )?;
    emit_csv(args.out.as_deref(), &gap_rows_to_csv(&rows))
}

fn similarity(args: &SimilarityArgs) -> flashblock::Result<()> {
    let (mc, run) = match args.fixture {
        Fixture::Frozen => frozen_context_fixture(args.seed),
        Fixture::Default => (
            ModelConfig {
                seed: args.seed,
                ..ModelConfig::default()
            },
            RunConfig {
                seed: args.seed,
                ..RunConfig::default()
            },
        ),
    };
    if args.steps < 2 {
        eprintln!("warning: fewer than two steps, no step pairs to compare");
    }
    let model = SyntheticModel::<f64>::new(mc)?;
    let study = stability_study(&model, &run, args.steps, args.seed)?;
    eprintln!(
        "external partial more stable on {:.1}% of heads",
        100.0 * study.fraction_external_more_stable()
    );
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            emit_csv(
                Some(&dir.join("similarity_summary.csv")),
                &study.summary_csv(),
            )?;
            emit_csv(
                Some(&dir.join("similarity_full.csv")),
                &StabilityStudy::full_csv(&study.full_out),
            )?;
            emit_csv(
                Some(&dir.join("similarity_full_in.csv")),
                &StabilityStudy::full_csv(&study.full_in),
            )
        }
        None => emit_csv(None, &study.summary_csv()),
    }
}

fn calibrate(args: &CalibrateArgs) -> flashblock::Result<()> {
    let model = SyntheticModel::<f64>::new(args.model.config())?;
    let run = RunConfig {
        prompt_len: args.prompt_len,
        num_blocks: 1,
        block_size: args.block.block_size,
        steps_per_block: args.block.steps,
        unmask: args.block.unmask(),
        seed: args.model.seed,
        ..RunConfig::default()
    };
    let table: HeadGateTable = calibrate_head_gates(&model, &run, args.samples, args.gamma)?;
    let enabled = table.heads.iter().filter(|h| h.enabled).count();
    eprintln!(
        "{enabled} of {} heads gated on at gamma={}",
        table.heads.len(),
        table.gamma
    );
    emit(args.out.as_deref(), &format!("{}\n", table.to_json()?))
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => verify(a),
        Command::Run(a) => run(a).map(|_| true),
        Command::SweepContext(a) => sweep_context_cmd(a).map(|_| true),
        Command::SweepDensity(a) => sweep_density_cmd(a).map(|_| true),
        Command::AnalyzeSimilarity(a) => similarity(a).map(|_| true),
        Command::CalibrateGates(a) => calibrate(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
