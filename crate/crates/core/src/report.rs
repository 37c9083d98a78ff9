//! End-to-end runs and the JSON report.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::cache::{CacheConfig, Reductions};
use crate::detect::Mode;
use crate::engine::domains_for;
use crate::explore::{explore, ExploreError, ExploreOptions, ExploreStats, LeakReport};
use crate::ir::{parse_program, synthesize_adversary, unroll_loops, IrError, Program, Site};
use crate::oracle::{replay_prefix, OracleError, Outcome};
use crate::solver::{Backend, Enumerative, ExternalSmt, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Adversary {
    /// Analyze the threads as written.
    Fixed,
    /// Add a probing thread with a solver-chosen address.
    Synthesize,
    /// Drop every non-critical thread.
    None,
}

impl std::str::FromStr for Adversary {
    type Err = String;

    fn from_str(s: &str) -> Result<Adversary, String> {
        match s {
            "fixed" => Ok(Adversary::Fixed),
            "synthesize" => Ok(Adversary::Synthesize),
            "none" => Ok(Adversary::None),
            _ => Err(format!(
                "unknown adversary `{s}` (expected fixed, synthesize or none)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub program: PathBuf,
    pub cache: CacheConfig,
    pub mode: Mode,
    pub adversary: Adversary,
    pub reductions: Reductions,
    pub unroll: u32,
    pub max_interleavings: Option<u64>,
    pub wall_clock: Option<Duration>,
    pub timeout: Duration,
    pub solver: Option<String>,
    pub out: Option<PathBuf>,
    pub check_sequential: bool,
    pub early_termination: bool,
}

impl RunConfig {
    pub fn new(program: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            program: program.into(),
            cache: CacheConfig::default(),
            mode: Mode::Precise,
            adversary: Adversary::Fixed,
            reductions: Reductions::all(),
            unroll: 64,
            max_interleavings: None,
            wall_clock: None,
            timeout: Duration::from_secs(30),
            solver: None,
            out: None,
            check_sequential: true,
            early_termination: true,
        }
    }

    pub fn explore_options(&self) -> ExploreOptions {
        ExploreOptions {
            mode: self.mode,
            reductions: self.reductions,
            check_sequential: self.check_sequential,
            early_termination: self.early_termination,
            max_interleavings: self.max_interleavings,
            wall_clock: self.wall_clock,
            ..ExploreOptions::default()
        }
    }

    pub fn backend(&self) -> Box<dyn Backend> {
        match &self.solver {
            Some(cmd) => Box::new(ExternalSmt::new(cmd, self.timeout)),
            None => Box::new(Enumerative::default()),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Ir { path: String, source: IrError },
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error("replay of the leak at line {site} failed: {source}")]
    Replay { site: Site, source: OracleError },
    #[error("replay of the leak at line {0} does not reproduce the reported hit/miss split")]
    Unconfirmed(Site),
}

/// Parses, unrolls and applies the adversary choice.
pub fn prepare(text: &str, path: &str, rc: &RunConfig) -> Result<Program, RunError> {
    let ir = |source| RunError::Ir {
        path: path.to_string(),
        source,
    };
    let p = parse_program(text).map_err(ir)?;
    let p = unroll_loops(&p, rc.unroll).map_err(ir)?;
    match rc.adversary {
        Adversary::Fixed => Ok(p),
        Adversary::None => Ok(p.critical_only()),
        Adversary::Synthesize => {
            synthesize_adversary(&p, rc.cache.line_size as u32, rc.cache.cache_size).map_err(ir)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CacheView {
    pub size: u64,
    pub line: u64,
    pub assoc: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct LeakView {
    pub site: Site,
    pub access_index: usize,
    pub schedule: Vec<(u32, Site)>,
    pub k1: BTreeMap<String, u64>,
    pub k2: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary_addr: Option<u64>,
    pub verdict1: Outcome,
    pub verdict2: Outcome,
    pub cross_thread: bool,
    pub replay_confirmed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StatsView {
    pub interleavings: u64,
    pub leak_checks: u64,
    pub solver_calls: u64,
    pub states_forked: u64,
    pub schedules_pruned: u64,
    pub indeterminate: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub program: String,
    pub cache: CacheView,
    pub mode: Mode,
    pub leaks: Vec<LeakView>,
    pub stats: StatsView,
    pub complete: bool,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        exit_code(!self.leaks.is_empty(), self.complete, false)
    }
}

/// 2 on error, 3 when bounds cut the search short, 1 for leaks, else 0.
pub fn exit_code(leaks: bool, complete: bool, error: bool) -> i32 {
    if error {
        2
    } else if !complete {
        3
    } else if leaks {
        1
    } else {
        0
    }
}

/// Re-executes both witness runs and compares the leaky access.
pub fn confirm(prog: &Program, cfg: CacheConfig, r: &LeakReport) -> Result<bool, OracleError> {
    let tids = r.tids();
    let e1 = replay_prefix(prog, &r.witness.env(1), &tids, cfg)?;
    let e2 = replay_prefix(prog, &r.witness.env(2), &tids, cfg)?;
    let (o1, o2) = (
        e1.accesses[r.access_index].outcome,
        e2.accesses[r.access_index].outcome,
    );
    Ok(o1 == r.verdict1 && o2 == r.verdict2 && o1 != o2)
}

pub fn write_report(
    program: &str,
    cfg: &CacheConfig,
    mode: Mode,
    reports: &[(LeakReport, bool)],
    stats: &ExploreStats,
    wall_ms: u64,
    complete: bool,
) -> Report {
    Report {
        program: program.to_string(),
        cache: CacheView {
            size: cfg.cache_size,
            line: cfg.line_size,
            assoc: cfg.ways,
        },
        mode,
        leaks: reports
            .iter()
            .map(|(r, ok)| LeakView {
                site: r.site,
                access_index: r.access_index,
                schedule: r.schedule.iter().map(|s| (s.tid, s.site)).collect(),
                k1: r.witness.k1.clone(),
                k2: r.witness.k2.clone(),
                adversary_addr: r.adversary_addr,
                verdict1: r.verdict1,
                verdict2: r.verdict2,
                cross_thread: r.cross_thread,
                replay_confirmed: *ok,
            })
            .collect(),
        stats: StatsView {
            interleavings: stats.interleavings_explored,
            leak_checks: stats.leak_checks,
            solver_calls: stats.solver_calls,
            states_forked: stats.states_forked,
            schedules_pruned: stats.schedules_pruned,
            indeterminate: stats.indeterminate,
            wall_ms,
        },
        complete,
    }
}

pub fn to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Full pipeline: parse, prepare, explore, confirm every leak by replay.
pub fn run(rc: &RunConfig) -> Result<Report, RunError> {
    let start = Instant::now();
    let path = rc.program.display().to_string();
    let text = std::fs::read_to_string(&rc.program).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    let prog = prepare(&text, &path, rc)?;
    let session = Session::new(rc.backend(), domains_for(&prog, &rc.cache));
    let ex = explore(&prog, rc.cache, rc.explore_options(), &session)?;
    let mut confirmed = Vec::new();
    for r in ex.reports {
        let ok = confirm(&prog, rc.cache, &r).map_err(|source| RunError::Replay {
            site: r.site,
            source,
        })?;
        if !ok {
            return Err(RunError::Unconfirmed(r.site));
        }
        confirmed.push((r, ok));
    }
    let report = write_report(
        &path,
        &rc.cache,
        rc.mode,
        &confirmed,
        &ex.stats,
        start.elapsed().as_millis() as u64,
        ex.complete,
    );
    if let Some(out) = &rc.out {
        std::fs::write(out, to_json(&report)).map_err(|source| RunError::Io {
            path: out.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}
