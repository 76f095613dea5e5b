use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sasleak::commands::{self, Source};
use sasleak::config::Config;
use sasleak::corpus;
use sasleak::CliError;
use sasleak_core::oracle::{RunEnd, SecretAssignment};

#[derive(Parser)]
#[command(name = "sasleak", version, about = "Symbolic abstract interpretation for cache-line and branch leaks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a program and check every memory access and branch.
    Analyze {
        file: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// Human-readable text instead of JSON.
        #[arg(long)]
        pretty: bool,
        /// JSON output (the default).
        #[arg(long, conflicts_with = "pretty")]
        json: bool,
        /// Include the abstract state at every program point.
        #[arg(long)]
        dump_states: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analysis against concrete runs with random secrets.
    Oracle {
        file: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Write one SMT-LIB script per site that mentions a secret.
    EmitSmt {
        file: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// Output directory.
        #[arg(long, default_value = "smt")]
        out: PathBuf,
    },
    /// Run a program concretely and print the labelled trace.
    Trace {
        file: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// JSON secret assignment; drawn from the seed when absent.
        #[arg(long)]
        secrets: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        fuel: usize,
    },
    /// List or analyze the bundled fixtures.
    Corpus {
        /// Analyze this fixture instead of listing.
        name: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Opts {
    /// Word width W in bits.
    #[arg(long)]
    width: Option<u32>,
    /// Cache line offset bits L.
    #[arg(long)]
    line_bits: Option<u32>,
    /// Value set size bound N.
    #[arg(long)]
    bound: Option<usize>,
    /// Skip branch conditions.
    #[arg(long, conflicts_with = "check_branches")]
    no_branches: bool,
    #[arg(long)]
    check_branches: bool,
    /// Random samples tried by the built-in solver.
    #[arg(long)]
    enum_budget: Option<u64>,
    /// Largest free-variable bit count searched exhaustively.
    #[arg(long)]
    exhaustive_cap: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    oracle_runs: Option<usize>,
    /// Maximum nested call depth.
    #[arg(long)]
    call_depth: Option<usize>,
    #[arg(long)]
    iteration_budget: Option<u64>,
}

impl Opts {
    fn config(&self) -> Config {
        let d = Config::default();
        Config {
            width: self.width.unwrap_or(d.width),
            line_bits: self.line_bits.unwrap_or(d.line_bits),
            bound: self.bound.unwrap_or(d.bound),
            check_branches: !self.no_branches,
            exhaustive_cap_bits: self.exhaustive_cap.unwrap_or(d.exhaustive_cap_bits),
            enum_budget: self.enum_budget.unwrap_or(d.enum_budget),
            seed: self.seed.unwrap_or(d.seed),
            oracle_runs: self.oracle_runs.unwrap_or(d.oracle_runs),
            call_depth_budget: self.call_depth.unwrap_or(d.call_depth_budget),
            iteration_budget: self.iteration_budget.unwrap_or(d.iteration_budget),
        }
    }
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| CliError::Io { path: path.clone(), source }),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Analyze { file, opts, pretty, json: _, dump_states, out } => {
            let a = commands::analyze(&Source::read(&file)?, &opts.config(), dump_states)?;
            let text = if pretty { a.report.to_text() } else { a.report.to_json() };
            emit(&text, out.as_ref())?;
            Ok(commands::analyze_exit_code(&a.report))
        }
        Command::Oracle { file, opts } => {
            let src = Source::read(&file)?;
            let rep = commands::oracle(&src, &opts.config())?;
            emit(&commands::soundness_text(&src.name, &rep), None)?;
            Ok(if rep.violations.is_empty() { 0 } else { 2 })
        }
        Command::EmitSmt { file, opts, out } => {
            let written = commands::emit_smt(&Source::read(&file)?, &opts.config(), &out)?;
            if written.is_empty() {
                eprintln!("no secret-dependent sites, nothing written");
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Trace { file, opts, secrets, fuel } => {
            let assignment = match secrets {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
                    let a: SecretAssignment = serde_json::from_str(&text)
                        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                    Some(a)
                }
                None => None,
            };
            let (used, t) = commands::trace(&Source::read(&file)?, &opts.config(), assignment, fuel)?;
            eprintln!("secrets {}", serde_json::to_string(&used).expect("assignment serializes"));
            emit(&t.dump(), None)?;
            Ok(match t.end {
                RunEnd::Finished => 0,
                RunEnd::Fault(f) => {
                    eprintln!("fault: {f}");
                    1
                }
                RunEnd::FuelExhausted => {
                    eprintln!("fuel exhausted after {fuel} steps");
                    1
                }
            })
        }
        Command::Corpus { name: None, json } => {
            if json {
                emit(&(serde_json::to_string_pretty(corpus::FIXTURES).expect("fixtures serialize") + "\n"), None)?;
            } else {
                emit(&corpus::listing_text(), None)?;
            }
            Ok(0)
        }
        Command::Corpus { name: Some(name), json } => {
            let f = corpus::fixture(&name).ok_or_else(|| CliError::Input(format!("no fixture named {name}")))?;
            let a = commands::analyze(&f.source(), &corpus::golden_config(), false)?;
            emit(&if json { a.report.to_json() } else { a.report.to_text() }, None)?;
            Ok(commands::analyze_exit_code(&a.report))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
