//! `ipa`: trace generation, invariant inference, fault injection and
//! error-propagation reports as composable subcommands with file handoff.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 runtime trap (partial
//! trace still written), 3 timeout, 4 non-converged invariant set.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ipa_core::campaign::{
    run_campaign, CampaignConfig, CampaignError,
};
use ipa_core::epa::{detect, diff_traces, mean_pairwise_variance, variance};
use ipa_core::inference::{
    infer, parse_invariants, stability_curve, write_invariants, StabilityCurve,
};
use ipa_core::injector::FaultPlan;
use ipa_core::rng::derive_seed;
use ipa_core::trace::{parse_trace, write_trace, TraceFile};
use ipa_core::value::Value;
use ipa_core::vm::{
    builtin, builtin_default_input, builtin_names, builtin_source, default_step_budget, execute,
    golden_runs, load_program, Granularity, GoldenError, Outcome, Program, ScheduleSeed,
};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_TRAP: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;
const EXIT_UNSTABLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ipa",
    about = "Error propagation analysis workbench: mini-VM traces, likely invariants, fault injection campaigns",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProgramArgs {
    /// Built-in benchmark name (see `ipa dump-builtin --list`)
    #[arg(long, conflicts_with = "program")]
    builtin: Option<String>,
    /// Path to a VM assembly file
    #[arg(long)]
    program: Option<PathBuf>,
    /// Program input as a JSON list (thread count is prepended separately)
    #[arg(long)]
    input: Option<String>,
    /// Logical thread count passed as the first input value
    #[arg(long, default_value_t = 4)]
    threads: i64,
    /// Sampling granularity: function | block
    #[arg(long, default_value = "function")]
    granularity: String,
}

impl ProgramArgs {
    fn load(&self) -> Result<(Program, Vec<Value>, Granularity)> {
        let program = match (&self.builtin, &self.program) {
            (Some(name), None) => builtin(name)?,
            (None, Some(path)) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "program".to_string());
                load_program(&name, &text)?
            }
            _ => bail!("exactly one of --builtin or --program is required"),
        };
        let base: Vec<Value> = match (&self.input, &self.builtin) {
            (Some(json), _) => serde_json::from_str(json).context("parsing --input JSON")?,
            (None, Some(name)) => builtin_default_input(name)?,
            (None, None) => bail!("--input is required for --program files"),
        };
        let mut input = vec![Value::I64(self.threads)];
        input.extend(base);
        let granularity = Granularity::parse(&self.granularity)
            .ok_or_else(|| anyhow!("granularity must be `function` or `block`"))?;
        Ok((program, input, granularity))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its trace
    Run {
        #[command(flatten)]
        prog: ProgramArgs,
        /// Scheduler seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fault plan JSON file to inject
        #[arg(long)]
        fault: Option<PathBuf>,
        /// Explicit step budget (default: multiplier x fault-free seed-0 steps)
        #[arg(long)]
        step_budget: Option<u64>,
        /// Step budget multiplier
        #[arg(long, default_value_t = 10)]
        budget_multiplier: u64,
        /// Trace output path
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Machine-readable summary on stdout
        #[arg(long)]
        json: bool,
    },
    /// Infer likely invariants from one or more golden trace files
    Infer {
        /// Trace files
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Confidence threshold
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        /// Invariant file output path
        #[arg(long, short = 'o')]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Validate a faulty trace against an invariant file
    Detect {
        /// Invariant file
        #[arg(long)]
        invariants: PathBuf,
        /// Faulty trace file
        #[arg(long)]
        trace: PathBuf,
        /// Report path (JSON lines); stdout when omitted
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Positional line-by-line diff of two traces (classic EPA)
    Diff {
        golden: PathBuf,
        faulty: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Mean pairwise variance over trace files
    Variance {
        /// Two or more trace files; the earlier file of each pair is the
        /// denominator
        #[arg(required = true, num_args = 2..)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run a full injection campaign from a config file
    Campaign {
        /// Campaign config (JSON with a top-level `version`)
        #[arg(long)]
        config: PathBuf,
        /// Report directory
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Parallel jobs (0 = default pool, 1 = sequential)
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        json: bool,
    },
    /// Invariant-set convergence over increasing profiling runs
    Stability {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated run counts
        #[arg(long, default_value = "1,2,3,4,5,10,15")]
        ns: String,
        #[arg(long)]
        json: bool,
    },
    /// Print the source of a built-in benchmark
    DumpBuiltin {
        /// Builtin name
        name: Option<String>,
        /// List available builtins
        #[arg(long)]
        list: bool,
    },
}

#[derive(serde::Deserialize)]
struct ConfigFile {
    version: u32,
    #[serde(flatten)]
    campaign: CampaignConfig,
}

fn load_config(path: &Path) -> Result<CampaignConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ConfigFile = serde_json::from_str(&text).context("parsing campaign config")?;
    if cfg.version != 1 {
        bail!("unsupported config version {}", cfg.version);
    }
    Ok(cfg.campaign)
}

fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_trace(&text).with_context(|| format!("parsing trace {}", path.display()))?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run {
            prog,
            seed,
            fault,
            step_budget,
            budget_multiplier,
            out,
            json,
        } => {
            let (program, input, granularity) = prog.load()?;
            let plan: Option<FaultPlan> = match fault {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    Some(serde_json::from_str(&text).context("parsing fault plan")?)
                }
                None => None,
            };
            let budget = match step_budget {
                Some(b) => b,
                None => default_step_budget(&program, &input, granularity, budget_multiplier)?,
            };
            let result = execute(
                &program,
                &input,
                ScheduleSeed(seed),
                granularity,
                plan.as_ref(),
                budget,
            )?;
            fs::write(&out, write_trace(&result.trace))
                .with_context(|| format!("writing {}", out.display()))?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "outcome": result.outcome.to_string(),
                        "steps": result.steps,
                        "activated": result.activated,
                        "output": result.output,
                        "trace": out,
                    })
                );
            } else {
                println!("{}", result.outcome);
                println!("steps: {}", result.steps);
                if plan.is_some() {
                    println!("activated: {}", result.activated);
                }
                println!("trace: {}", out.display());
            }
            Ok(match result.outcome {
                Outcome::Normal => EXIT_OK,
                Outcome::Trap(_) => EXIT_TRAP,
                Outcome::Timeout => EXIT_TIMEOUT,
            })
        }
        Command::Infer {
            traces,
            threshold,
            out,
            json,
        } => {
            let parsed: Vec<TraceFile> = traces
                .iter()
                .map(|p| read_trace(p))
                .collect::<Result<_>>()?;
            // granularity is a property of the traces themselves
            let granularity = if parsed.iter().any(|t| {
                t.declarations
                    .iter()
                    .any(|d| d.point.kind == ipa_core::trace::PointKind::BasicBlockEntry)
            }) {
                Granularity::BasicBlock
            } else {
                Granularity::Function
            };
            let set = infer(&parsed, threshold, granularity)?;
            fs::write(&out, write_invariants(&set))
                .with_context(|| format!("writing {}", out.display()))?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "invariants": set.len(),
                        "fingerprint": set.fingerprint(),
                        "threshold": threshold,
                        "out": out,
                    })
                );
            } else {
                println!("{} invariants (fingerprint {})", set.len(), set.fingerprint());
                println!("invariants: {}", out.display());
            }
            Ok(EXIT_OK)
        }
        Command::Detect {
            invariants,
            trace,
            out,
        } => {
            let text = fs::read_to_string(&invariants)
                .with_context(|| format!("reading {}", invariants.display()))?;
            let set = parse_invariants(&text)?;
            let faulty = read_trace(&trace)?;
            let report = detect(&set, &faulty);
            let body = report::violation_report(&report);
            match out {
                Some(path) => fs::write(&path, body)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", body),
            }
            Ok(EXIT_OK)
        }
        Command::Diff { golden, faulty, json } => {
            let g = read_trace(&golden)?;
            let f = read_trace(&faulty)?;
            let devs = diff_traces(&g, &f);
            if json {
                for d in &devs {
                    println!("{}", serde_json::to_string(d)?);
                }
                println!(
                    "{}",
                    serde_json::json!({"summary": {"deviations": devs.len()}})
                );
            } else {
                for d in &devs {
                    println!(
                        "{:?} golden={:?} faulty={:?} {}",
                        d.kind, d.golden_seq, d.faulty_seq, d.detail
                    );
                }
                println!("{} deviations", devs.len());
            }
            Ok(EXIT_OK)
        }
        Command::Variance { traces, json } => {
            let parsed: Vec<TraceFile> = traces
                .iter()
                .map(|p| read_trace(p))
                .collect::<Result<_>>()?;
            let mean = mean_pairwise_variance(&parsed)?;
            if json {
                let mut pairs = Vec::new();
                for i in 0..parsed.len() {
                    for j in (i + 1)..parsed.len() {
                        pairs.push(serde_json::json!({
                            "a": i, "b": j,
                            "variance": variance(&parsed[i], &parsed[j])?,
                        }));
                    }
                }
                println!(
                    "{}",
                    serde_json::json!({"mean_pairwise_variance": mean, "pairs": pairs})
                );
            } else {
                println!("mean pairwise variance: {}", mean);
            }
            Ok(EXIT_OK)
        }
        Command::Campaign {
            config,
            out,
            jobs,
            json,
        } => {
            let cfg = load_config(&config)?;
            match run_campaign(&cfg, jobs) {
                Ok((result, timings)) => {
                    report::write_campaign_dir(&out, &result)?;
                    if json {
                        println!("{}", serde_json::to_string_pretty(&result)?);
                    } else {
                        report::print_campaign_summary(&result, &timings);
                        println!("report: {}", out.display());
                    }
                    Ok(EXIT_OK)
                }
                Err(CampaignError::Unstable { granularity, n1, n2 }) => {
                    eprintln!(
                        "invariant set does not converge at {} granularity (n={} vs n={}); refusing to run the campaign",
                        granularity, n1, n2
                    );
                    Ok(EXIT_UNSTABLE)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Stability { config, ns, json } => {
            let cfg = load_config(&config)?;
            let ns: Vec<usize> = ns
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("parsing --ns")?;
            let program = ipa_core::campaign::resolve_program(&cfg.program)?;
            let input = ipa_core::campaign::resolve_input(&cfg)?;
            let budget = default_step_budget(
                &program,
                &input,
                cfg.granularity,
                cfg.step_budget_multiplier,
            )?;
            let curve: StabilityCurve = stability_curve(
                |i| -> Result<TraceFile, GoldenError> {
                    let seed = derive_seed(cfg.seed, "stability", i as u64);
                    golden_runs(&program, &input, &[seed], cfg.granularity, budget)
                        .map(|mut v| v.pop().unwrap())
                },
                &ns,
                cfg.confidence_threshold,
                cfg.granularity,
            )?;
            if json {
                println!("{}", serde_json::to_string_pretty(&curve)?);
            } else {
                println!("n\tinvariants\tfingerprint");
                for row in &curve.rows {
                    println!("{}\t{}\t{}", row.n, row.invariant_count, row.fingerprint);
                }
                match curve.converged {
                    Some(true) => {
                        let last = curve.rows.last().unwrap().n;
                        println!("converged: yes (set identical at the last two n, up to n={})", last);
                    }
                    Some(false) => {
                        let last = curve.rows.last().unwrap().n;
                        println!("converged: no (not converged by n={})", last);
                    }
                    None => println!("converged: undefined (single n value)"),
                }
            }
            Ok(EXIT_OK)
        }
        Command::DumpBuiltin { name, list } => {
            if list || name.is_none() {
                for n in builtin_names() {
                    println!("{}", n);
                }
                return Ok(EXIT_OK);
            }
            print!("{}", builtin_source(&name.unwrap())?);
            Ok(EXIT_OK)
        }
    }
}
