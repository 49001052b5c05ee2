use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpl_cli::config::{resolve, Command, ExperimentConfig};
use fpl_cli::run::{execute, execution, CliError, CliResult, Context, RunDir, EXIT_MISSING};

/// Homogeneous Fokker-Planck-Landau experiments.
#[derive(Parser)]
#[command(name = "fpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config merged over the preset (or the built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; must be absent or empty.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long)]
    workers: Option<usize>,
    /// maxwellian2d, bkw2d, coulomb2d or twogauss3d.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `inputs.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Overrides `inputs.surrogate`.
    #[arg(long)]
    surrogate: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the labelled training and held-out datasets.
    GenData(Common),
    /// Train the diffusion and friction surrogates.
    TrainStep1(Common),
    /// Train the physics-informed solution network on frozen surrogates.
    TrainStep2(Common),
    /// Explicit time integration with direct or surrogate operators.
    SolveHybrid(Common),
    /// Conservation, equilibrium and stability diagnostics of the operator.
    Diagnose(Common),
    /// Time direct and surrogate collision-operator evaluation against N.
    Benchmark(Common),
    /// Held-out error of trained surrogates.
    Eval(Common),
    /// Check a config without computing; prints the resolved config.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Also check the artifacts this command would read.
        #[arg(long = "for", value_enum)]
        target: Option<Target>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Target {
    GenData,
    TrainStep1,
    TrainStep2,
    SolveHybrid,
    Diagnose,
    Benchmark,
    Eval,
}

impl From<Target> for Command {
    fn from(t: Target) -> Self {
        match t {
            Target::GenData => Command::GenData,
            Target::TrainStep1 => Command::TrainStep1,
            Target::TrainStep2 => Command::TrainStep2,
            Target::SolveHybrid => Command::SolveHybrid,
            Target::Diagnose => Command::Diagnose,
            Target::Benchmark => Command::Benchmark,
            Target::Eval => Command::Eval,
        }
    }
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut c = resolve(common.preset.as_deref(), common.config.as_deref()).map_err(CliError::validation)?;
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(w) = common.workers {
        c.workers = w;
    }
    if let Some(o) = &common.out {
        c.out = Some(o.clone());
    }
    if let Some(d) = &common.dataset {
        c.inputs.dataset = Some(d.clone());
    }
    if let Some(s) = &common.surrogate {
        c.inputs.surrogate = Some(s.clone());
    }
    c.derive_seeds();
    Ok(c)
}

fn init_threads(workers: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        // Ignored if a pool already exists; the count actually used is recorded.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        1
    }
}

fn run(command: Command, common: &Common) -> CliResult<()> {
    let config = load(common)?;
    let problems = config.violations(Some(command));
    if !problems.is_empty() {
        return Err(CliError::validation(format!("invalid configuration:\n  {}", problems.join("\n  "))));
    }
    let missing = config.missing_dependencies(command);
    if !missing.is_empty() {
        return Err(CliError { code: EXIT_MISSING, message: format!("missing dependencies:\n  {}", missing.join("\n  ")) });
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
    let run = RunDir::create(&out)?;
    let threads = init_threads(config.workers);
    let ctx = Context {
        command,
        preset: common.preset.clone(),
        exec: execution(config.workers),
        config,
        run,
        threads,
    };
    let summary = execute(&ctx)?;
    print!("{}", toml::to_string(&summary).unwrap_or_default());
    eprintln!("[fpl] wrote {}", ctx.run.root().display());
    Ok(())
}

fn validate(common: &Common, target: Option<Command>) -> CliResult<()> {
    let config = load(common)?;
    let mut problems = config.violations(target);
    if let Some(t) = target {
        problems.extend(config.missing_dependencies(t));
    }
    if problems.is_empty() {
        println!("ok");
    } else {
        for p in &problems {
            println!("error: {p}");
        }
    }
    println!("\n# resolved configuration");
    print!("{}", toml::to_string(&config).map_err(|e| CliError::validation(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Sub::GenData(c) => run(Command::GenData, c),
        Sub::TrainStep1(c) => run(Command::TrainStep1, c),
        Sub::TrainStep2(c) => run(Command::TrainStep2, c),
        Sub::SolveHybrid(c) => run(Command::SolveHybrid, c),
        Sub::Diagnose(c) => run(Command::Diagnose, c),
        Sub::Benchmark(c) => run(Command::Benchmark, c),
        Sub::Eval(c) => run(Command::Eval, c),
        Sub::Validate { common, target } => validate(common, target.map(Command::from)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code.clamp(1, 255) as u8)
        }
    }
}
