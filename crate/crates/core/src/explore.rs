//! Depth-first exploration of branch outcomes and access interleavings,
//! checking critical-thread accesses for secret-dependent hit/miss.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::cache::{
    build_hit, may_same_line, AccessKind, AccessRecord, BuildStats, BuiltHit, CacheConfig,
    CacheError, Reductions,
};
use crate::detect::{solve, Mode, Verdict, Witness};
use crate::engine::{Machine, SymbolicState};
use crate::expr::Expr;
use crate::ir::{Program, Site};
use crate::oracle::Outcome;
use crate::solver::Session;

#[derive(Clone, Copy, Debug)]
pub struct ExploreOptions {
    pub mode: Mode,
    pub reductions: Reductions,
    /// Also check critical accesses no other thread can interfere with.
    pub check_sequential: bool,
    /// Stop an interleaving after a leak caused by another thread.
    pub early_termination: bool,
    /// Skip interleavings equivalent to an already explored one.
    pub prune_independent: bool,
    pub max_interleavings: Option<u64>,
    pub wall_clock: Option<Duration>,
    /// Longest symbolic trace accepted by the set-associative encoding.
    pub assoc_window: usize,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            mode: Mode::Precise,
            reductions: Reductions::all(),
            check_sequential: true,
            early_termination: true,
            prune_independent: true,
            max_interleavings: None,
            wall_clock: None,
            assoc_window: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExploreStats {
    pub interleavings_explored: u64,
    pub leak_checks: u64,
    pub solver_calls: u64,
    pub states_forked: u64,
    pub schedules_pruned: u64,
    pub indeterminate: u64,
    pub pair_checks: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScheduleStep {
    pub tid: u32,
    pub site: Site,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakReport {
    pub site: Site,
    pub tid: u32,
    pub kind: AccessKind,
    pub access_index: usize,
    pub schedule: Vec<ScheduleStep>,
    pub witness: Witness,
    /// Concrete base of the first solver-placed declaration, if any.
    pub adversary_addr: Option<u64>,
    pub verdict1: Outcome,
    pub verdict2: Outcome,
    pub mode: Mode,
    /// The leak disappears when other threads' accesses are removed.
    pub cross_thread: bool,
}

impl LeakReport {
    pub fn tids(&self) -> Vec<u32> {
        self.schedule.iter().map(|s| s.tid).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub reports: Vec<LeakReport>,
    pub stats: ExploreStats,
    pub complete: bool,
    /// Every explored (possibly leak-terminated) interleaving.
    pub interleavings: Vec<Vec<ScheduleStep>>,
}

impl Exploration {
    pub fn sites(&self) -> std::collections::BTreeSet<Site> {
        self.reports.iter().map(|r| r.site).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExploreError {
    #[error(transparent)]
    Cache(#[from] CacheError),
}

type SeqKey = (Vec<usize>, usize);

pub struct Explorer<'a> {
    m: Machine<'a>,
    opts: ExploreOptions,
    critical: u32,
    start: Instant,
    same_line: HashMap<(usize, usize, usize), bool>,
    sequential: HashMap<SeqKey, (Verdict, BuiltHit)>,
    build: BuildStats,
    out: Exploration,
}

fn hit_of(tau: &Expr, env: &BTreeMap<String, u64>) -> Outcome {
    if tau.eval_map(env) == 1 {
        Outcome::Hit
    } else {
        Outcome::Miss
    }
}

impl<'a> Explorer<'a> {
    pub fn new(
        prog: &'a Program,
        cfg: CacheConfig,
        opts: ExploreOptions,
        session: &'a Session,
    ) -> Explorer<'a> {
        Explorer {
            m: Machine::new(prog, cfg, session),
            opts,
            critical: prog.critical_tid(),
            start: Instant::now(),
            same_line: HashMap::new(),
            sequential: HashMap::new(),
            build: BuildStats::default(),
            out: Exploration {
                reports: Vec::new(),
                stats: ExploreStats::default(),
                complete: true,
                interleavings: Vec::new(),
            },
        }
    }

    fn may_same_line(&mut self, a: &AccessRecord, b: &AccessRecord, pcon: &Expr) -> bool {
        let key = (a.addr.id(), b.addr.id(), pcon.id());
        if let Some(v) = self.same_line.get(&key) {
            return *v;
        }
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.pcon = pcon.clone();
        b2.pcon = pcon.clone();
        let session = self.m.session;
        let v = may_same_line(&a2, &b2, &self.m.cfg, &session.domains, &mut |e| {
            session.sat(e)
        });
        self.same_line.insert(key, v);
        v
    }

    fn dependent(&mut self, a: &AccessRecord, b: &AccessRecord, pcon: &Expr) -> bool {
        a.tid == b.tid || a.decl == b.decl || self.may_same_line(a, b, pcon)
    }

    /// Whether appending `b` would leave the lexicographically smallest
    /// member of its equivalence class: some independent access of a
    /// higher thread could be moved after it.
    fn redundant(&mut self, s: &SymbolicState, b: &AccessRecord) -> bool {
        for e in s.trace.iter().rev() {
            if self.dependent(e, b, &s.pcon) {
                return false;
            }
            if e.tid > b.tid {
                return true;
            }
        }
        false
    }

    /// True when `t` is a critical-thread access and some earlier access of
    /// another thread may share its cache set.
    pub fn adversarial_access(&mut self, s: &SymbolicState, t: &AccessRecord) -> bool {
        if t.tid != self.critical {
            return false;
        }
        let others: Vec<AccessRecord> =
            s.trace.iter().filter(|r| r.tid != t.tid).cloned().collect();
        others.iter().any(|r| self.may_same_line(r, t, &s.pcon))
    }

    fn build(&mut self, trace: &[AccessRecord]) -> Result<BuiltHit, CacheError> {
        let session = self.m.session;
        let i = trace.len() - 1;
        build_hit(
            trace,
            i,
            &self.m.cfg,
            &self.m.prog.decls,
            &session.domains,
            self.opts.reductions,
            self.opts.assoc_window,
            &mut |e| session.sat(e),
            &mut self.build,
        )
    }

    fn decide(&mut self, built: &BuiltHit, pcon: &Expr) -> Verdict {
        self.out.stats.leak_checks += 1;
        let session = self.m.session;
        let mut v = solve(session, self.opts.mode, &built.tau, pcon, &self.m.secrets);
        if let (Verdict::Leak(w), Some(full)) = (&v, &built.full) {
            if !w.separates(full, pcon) {
                v = solve(session, self.opts.mode, full, pcon, &self.m.secrets);
            }
        }
        if matches!(v, Verdict::Indeterminate(_)) {
            self.out.stats.indeterminate += 1;
        }
        v
    }

    fn sequential_verdict(
        &mut self,
        trace: &[AccessRecord],
        pcon: &Expr,
    ) -> Result<(Verdict, BuiltHit), CacheError> {
        let own: Vec<AccessRecord> = trace
            .iter()
            .filter(|r| r.tid == self.critical)
            .cloned()
            .collect();
        let key = (own.iter().map(|r| r.addr.id()).collect(), pcon.id());
        if let Some(v) = self.sequential.get(&key) {
            return Ok(v.clone());
        }
        let built = self.build(&own)?;
        let v = self.decide(&built, pcon);
        self.sequential.insert(key, (v.clone(), built.clone()));
        Ok((v, built))
    }

    /// Leak check for thread `tid`'s pending access at `s`.
    pub fn divergent_cache_behavior(
        &mut self,
        s: &SymbolicState,
        tid: u32,
    ) -> Result<Option<LeakReport>, CacheError> {
        let t = self.m.peek_access(s, tid);
        let adversarial = self.adversarial_access(s, &t);
        if !adversarial && !(self.opts.check_sequential && t.tid == self.critical) {
            return Ok(None);
        }
        let mut trace = s.trace.clone();
        trace.push(t.clone());
        let (verdict, built, cross) = if adversarial {
            let built = self.build(&trace)?;
            let v = self.decide(&built, &s.pcon);
            let cross = matches!(v, Verdict::Leak(_))
                && !matches!(
                    self.sequential_verdict(&trace, &s.pcon)?.0,
                    Verdict::Leak(_)
                );
            (v, built, cross)
        } else {
            let (v, b) = self.sequential_verdict(&trace, &s.pcon)?;
            (v, b, false)
        };
        let Verdict::Leak(mut witness) = verdict else {
            return Ok(None);
        };
        let session = self.m.session;
        let mut adversary_addr = None;
        for d in &self.m.prog.decls {
            if d.fixed_base().is_none() {
                let name = d.base_var();
                let v = *witness
                    .shared
                    .entry(name.clone())
                    .or_insert_with(|| session.domains.get(&name).nth(0));
                adversary_addr.get_or_insert(v);
            }
        }
        let tau = built.full.as_ref().unwrap_or(&built.tau);
        let schedule = trace
            .iter()
            .map(|r| ScheduleStep {
                tid: r.tid,
                site: r.site,
            })
            .collect();
        Ok(Some(LeakReport {
            site: t.site,
            tid: t.tid,
            kind: t.kind,
            access_index: s.trace.len(),
            schedule,
            verdict1: hit_of(tau, &witness.env(1)),
            verdict2: hit_of(tau, &witness.env(2)),
            witness,
            adversary_addr,
            mode: self.opts.mode,
            cross_thread: cross,
        }))
    }

    fn out_of_budget(&self) -> bool {
        self.opts
            .max_interleavings
            .is_some_and(|m| self.out.stats.interleavings_explored >= m)
            || self
                .opts
                .wall_clock
                .is_some_and(|w| self.start.elapsed() >= w)
    }

    fn finish_interleaving(&mut self, s: &SymbolicState, extra: Option<&AccessRecord>) {
        self.out.stats.interleavings_explored += 1;
        let steps = s
            .trace
            .iter()
            .chain(extra)
            .map(|r| ScheduleStep {
                tid: r.tid,
                site: r.site,
            })
            .collect();
        self.out.interleavings.push(steps);
    }

    fn dfs(&mut self, s: SymbolicState) -> Result<(), CacheError> {
        if self.out_of_budget() {
            self.out.complete = false;
            return Ok(());
        }
        let enabled = self.m.enabled_events(&s);
        if enabled.is_empty() {
            self.finish_interleaving(&s, None);
            return Ok(());
        }
        for tid in enabled {
            let access = self.m.peek_access(&s, tid);
            if self.opts.prune_independent && self.redundant(&s, &access) {
                self.out.stats.schedules_pruned += 1;
                continue;
            }
            if let Some(report) = self.divergent_cache_behavior(&s, tid)? {
                let stop = self.opts.early_termination && report.cross_thread;
                self.out.reports.push(report);
                if stop {
                    self.finish_interleaving(&s, Some(&access));
                    continue;
                }
            }
            let next = self.m.next_symbolic_state(&s, tid);
            self.out.stats.states_forked += next.len().saturating_sub(1) as u64;
            for n in next {
                self.dfs(n)?;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<Exploration, ExploreError> {
        let calls0 = self.m.session.calls();
        let init = self.m.initial_states();
        self.out.stats.states_forked += init.len().saturating_sub(1) as u64;
        for s in init {
            self.dfs(s)?;
        }
        self.out.stats.solver_calls = self.m.session.calls() - calls0;
        self.out.stats.pair_checks = self.build.pair_checks;
        Ok(self.out)
    }
}

/// Explores a loop-free program.
pub fn explore(
    prog: &Program,
    cfg: CacheConfig,
    opts: ExploreOptions,
    session: &Session,
) -> Result<Exploration, ExploreError> {
    Explorer::new(prog, cfg, opts, session).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::domains_for;
    use crate::ir::parse_program;
    use crate::oracle::replay;
    use crate::solver::Enumerative;

    const CONCURRENT: &str = "\
array p [256] elem 1 at 0
scalar k elem 1 at 256 secret
array q [256] elem 1 at 257
thread 1 critical {
  if (k <= 127) {
    load reg2, q[255 - k]
  } else {
    load reg2, q[k - 128] }
  load reg1, p[k]
  reg1 := reg1 + reg2
  store p[k], reg1 }
scalar tmp elem 1 at 513
thread 2 { load reg3, tmp }
";

    fn run(src: &str, opts: ExploreOptions) -> (Program, Exploration) {
        let p = parse_program(src).unwrap();
        let cfg = CacheConfig::preset("direct-512b").unwrap();
        let s = Session::new(Box::new(Enumerative::default()), domains_for(&p, &cfg));
        let e = explore(&p, cfg, opts, &s).unwrap();
        (p, e)
    }

    fn lines(steps: &[ScheduleStep]) -> Vec<u32> {
        steps.iter().map(|s| s.site.line).collect()
    }

    #[test]
    fn concurrent_example_leaks_only_in_one_class() {
        let (p, e) = run(CONCURRENT, ExploreOptions::default());
        assert!(e.complete);
        assert_eq!(e.reports.len(), 1);
        let r = &e.reports[0];
        assert_eq!(r.site, Site::line(11));
        assert_eq!(lines(&r.schedule), vec![6, 9, 13, 11]);
        assert!(r.cross_thread);
        let (k1, k2) = (r.witness.k1["k"], r.witness.k2["k"]);
        assert_eq!((k1, k2), (0, 1));
        assert_ne!(r.verdict1, r.verdict2);
        let cfg = CacheConfig::preset("direct-512b").unwrap();
        let b1 = replay(&p, &r.witness.env(1), &r.tids(), cfg).unwrap();
        let b2 = replay(&p, &r.witness.env(2), &r.tids(), cfg).unwrap();
        assert_eq!(b1.accesses[3].outcome, r.verdict1);
        assert_eq!(b2.accesses[3].outcome, r.verdict2);

        let mut explored: Vec<Vec<u32>> = e.interleavings.iter().map(|s| lines(s)).collect();
        explored.sort();
        assert_eq!(
            explored,
            vec![
                vec![6, 9, 11, 13],
                vec![6, 9, 13, 11],
                vec![6, 13, 9, 11],
                vec![8, 9, 11, 13]
            ]
        );
    }

    #[test]
    fn two_step_agrees_on_running_example() {
        let opts = ExploreOptions {
            mode: Mode::TwoStep,
            ..Default::default()
        };
        let (_, e) = run(CONCURRENT, opts);
        assert_eq!(e.sites(), [Site::line(11)].into());
        let r = &e.reports[0];
        assert!(r.witness.k1["k"] == 1 || r.witness.k2["k"] == 1);
    }

    #[test]
    fn disabling_early_termination_keeps_sites() {
        let opts = ExploreOptions {
            early_termination: false,
            ..Default::default()
        };
        let (_, e) = run(CONCURRENT, opts);
        assert_eq!(e.sites(), [Site::line(11)].into());
    }

    #[test]
    fn unpruned_search_visits_every_schedule() {
        let opts = ExploreOptions {
            prune_independent: false,
            early_termination: false,
            ..Default::default()
        };
        let (_, e) = run(CONCURRENT, opts);
        // Four placements of the other thread's access on each of two paths.
        assert_eq!(e.stats.interleavings_explored, 8);
        assert_eq!(e.stats.schedules_pruned, 0);
    }

    #[test]
    fn budget_marks_incomplete() {
        let opts = ExploreOptions {
            max_interleavings: Some(1),
            ..Default::default()
        };
        let (_, e) = run(CONCURRENT, opts);
        assert!(!e.complete);
    }
}
