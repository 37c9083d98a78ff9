use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use cachesym::cache::{CacheConfig, Reductions};
use cachesym::detect::Mode;
use cachesym::oracle::{brute_force_leaks, replay, replay_prefix, BruteForceLimits, Outcome};
use cachesym::report::{exit_code, prepare, run, to_json, Adversary, RunConfig};

#[derive(Parser)]
#[command(
    name = "cachesym",
    version,
    about = "Find cache-timing leaks induced by thread interleavings"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CacheArgs {
    /// Named geometry: default (64KB/64B/1-way) or paper-fig3 (512B/1B/1-way).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    cache_size: Option<u64>,
    #[arg(long)]
    line_size: Option<u64>,
    #[arg(long)]
    assoc: Option<u32>,
}

impl CacheArgs {
    fn resolve(&self) -> Result<CacheConfig, String> {
        let base = match &self.preset {
            Some(p) => CacheConfig::preset(p).ok_or_else(|| format!("unknown preset `{p}`"))?,
            None => CacheConfig::default(),
        };
        CacheConfig::new(
            self.cache_size.unwrap_or(base.cache_size),
            self.line_size.unwrap_or(base.line_size),
            self.assoc.unwrap_or(base.ways),
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Args, Clone)]
struct ProgramArgs {
    file: PathBuf,
    #[arg(long, default_value = "fixed")]
    adversary: Adversary,
    /// Maximum iterations per unrolled loop.
    #[arg(long, default_value_t = 64)]
    unroll: u32,
    #[command(flatten)]
    cache: CacheArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Explore interleavings and report leaks as JSON.
    Analyze {
        #[command(flatten)]
        prog: ProgramArgs,
        #[arg(long, default_value = "precise")]
        mode: Mode,
        #[arg(long)]
        no_reduce_concretize: bool,
        #[arg(long)]
        no_reduce_tables: bool,
        #[arg(long)]
        no_reduce_layout: bool,
        /// Only check accesses another thread may interfere with.
        #[arg(long)]
        no_check_sequential: bool,
        #[arg(long)]
        no_early_termination: bool,
        #[arg(long)]
        max_interleavings: Option<u64>,
        /// Total exploration budget in milliseconds.
        #[arg(long)]
        budget_ms: Option<u64>,
        /// Per-query solver timeout.
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        /// External SMT-LIB2 solver command (e.g. z3); built-in enumeration otherwise.
        #[arg(long)]
        solver: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one concrete execution and print each access's hit/miss.
    Replay {
        #[command(flatten)]
        prog: ProgramArgs,
        /// Thread id per access, comma separated.
        #[arg(long, value_delimiter = ',')]
        schedule: Vec<u32>,
        /// Input or base-address binding, NAME=VALUE (repeatable).
        #[arg(long = "set", value_parser = parse_binding)]
        bindings: Vec<(String, u64)>,
        /// Accept a schedule that stops before every thread finishes.
        #[arg(long)]
        prefix: bool,
    },
    /// Enumerate all secrets, layouts and schedules to find leaking sites.
    BruteForce {
        #[command(flatten)]
        prog: ProgramArgs,
        #[arg(long, default_value_t = 16)]
        key_bits: u32,
    },
    /// Print the program after parsing, unrolling and adversary handling.
    PrintIr {
        #[command(flatten)]
        prog: ProgramArgs,
    },
}

fn parse_binding(s: &str) -> Result<(String, u64), String> {
    let (n, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    let v = match v.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => v.parse(),
    }
    .map_err(|e| format!("bad value in `{s}`: {e}"))?;
    Ok((n.to_string(), v))
}

fn load(args: &ProgramArgs) -> Result<(cachesym::ir::Program, CacheConfig), String> {
    let cache = args.cache.resolve()?;
    let path = args.file.display().to_string();
    let text = std::fs::read_to_string(&args.file).map_err(|e| format!("{path}: {e}"))?;
    let mut rc = RunConfig::new(&args.file);
    rc.cache = cache;
    rc.adversary = args.adversary;
    rc.unroll = args.unroll;
    let prog = prepare(&text, &path, &rc).map_err(|e| e.to_string())?;
    Ok((prog, cache))
}

fn seq(outs: &[Outcome]) -> String {
    let parts: Vec<String> = outs.iter().map(|o| o.to_string()).collect();
    format!("<{}>", parts.join(", "))
}

fn main_inner(cli: Cli) -> Result<i32, String> {
    match cli.cmd {
        Cmd::Analyze {
            prog,
            mode,
            no_reduce_concretize,
            no_reduce_tables,
            no_reduce_layout,
            no_check_sequential,
            no_early_termination,
            max_interleavings,
            budget_ms,
            timeout_ms,
            solver,
            out,
        } => {
            let mut rc = RunConfig::new(&prog.file);
            rc.cache = prog.cache.resolve()?;
            rc.mode = mode;
            rc.adversary = prog.adversary;
            rc.unroll = prog.unroll;
            rc.reductions = Reductions {
                concretize: !no_reduce_concretize,
                tables: !no_reduce_tables,
                layout: !no_reduce_layout,
            };
            rc.check_sequential = !no_check_sequential;
            rc.early_termination = !no_early_termination;
            rc.max_interleavings = max_interleavings;
            rc.wall_clock = budget_ms.map(Duration::from_millis);
            rc.timeout = Duration::from_millis(timeout_ms);
            rc.solver = solver;
            rc.out = out.clone();
            let report = run(&rc).map_err(|e| e.to_string())?;
            if out.is_none() {
                print!("{}", to_json(&report));
            }
            Ok(report.exit_code())
        }
        Cmd::Replay {
            prog,
            schedule,
            bindings,
            prefix,
        } => {
            let (p, cfg) = load(&prog)?;
            let env: BTreeMap<String, u64> = bindings.into_iter().collect();
            let exec = if prefix {
                replay_prefix(&p, &env, &schedule, cfg)
            } else {
                replay(&p, &env, &schedule, cfg)
            }
            .map_err(|e| e.to_string())?;
            for a in &exec.accesses {
                println!(
                    "thread {} line {} addr {} {}",
                    a.tid, a.site, a.addr, a.outcome
                );
            }
            println!("critical: {}", seq(&exec.behavior(Some(p.critical_tid()))));
            Ok(0)
        }
        Cmd::BruteForce { prog, key_bits } => {
            let (p, cfg) = load(&prog)?;
            let limits = BruteForceLimits {
                key_bits,
                ..Default::default()
            };
            let leaks = brute_force_leaks(&p, cfg, limits).map_err(|e| e.to_string())?;
            for l in &leaks {
                let s: Vec<String> = l.schedule.iter().map(|t| t.to_string()).collect();
                println!("line {} schedule {}", l.site, s.join(","));
            }
            Ok(exit_code(!leaks.is_empty(), true, false))
        }
        Cmd::PrintIr { prog } => {
            let (p, _) = load(&prog)?;
            print!("{}", cachesym::ir::print_program(&p));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
