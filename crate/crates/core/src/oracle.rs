//! Concrete ground truth: an LRU cache simulator, schedule replay, and
//! exhaustive leak enumeration for small programs.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::cache::{AccessKind, CacheConfig};
use crate::engine::{address, domains_for, initial_value, lower, truth};
use crate::expr::{mask, Expr};
use crate::ir::{DeclKind, Program, Sensitivity, Site, Stmt};
use crate::par;
use crate::solver::Domain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Hit,
    Miss,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Hit => "hit",
            Outcome::Miss => "miss",
        })
    }
}

/// Per-set block lists, most recently used first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteCache {
    cfg: CacheConfig,
    sets: HashMap<u64, VecDeque<u64>>,
}

impl ConcreteCache {
    pub fn new(cfg: CacheConfig) -> ConcreteCache {
        ConcreteCache {
            cfg,
            sets: HashMap::new(),
        }
    }

    /// LRU access with write-allocate.
    pub fn access(&mut self, addr: u64) -> Outcome {
        let block = self.cfg.block(addr);
        let set = self.sets.entry(block % self.cfg.num_sets()).or_default();
        if let Some(pos) = set.iter().position(|b| *b == block) {
            set.remove(pos);
            set.push_front(block);
            Outcome::Hit
        } else {
            set.push_front(block);
            set.truncate(self.cfg.ways as usize);
            Outcome::Miss
        }
    }

    pub fn blocks_in_set(&self, set: u64) -> Vec<u64> {
        self.sets
            .get(&set)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }
}

/// Functional form of one simulated access.
pub fn simulate_access(st: &ConcreteCache, addr: u64) -> (ConcreteCache, Outcome) {
    let mut n = st.clone();
    let o = n.access(addr);
    (n, o)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AccessEvent {
    pub tid: u32,
    pub site: Site,
    pub kind: AccessKind,
    pub addr: u64,
    pub outcome: Outcome,
    /// Branch decisions taken (by any thread) before this access.
    pub branches_before: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Execution {
    pub accesses: Vec<AccessEvent>,
    pub branches: Vec<(u32, Site, bool)>,
    pub schedule: Vec<u32>,
}

impl Execution {
    pub fn behavior(&self, tid: Option<u32>) -> Vec<Outcome> {
        self.accesses
            .iter()
            .filter(|a| tid.is_none_or(|t| a.tid == t))
            .map(|a| a.outcome)
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("schedule step {step}: thread {tid} has no pending access")]
    NotEnabled { step: usize, tid: u32 },
    #[error("schedule ended with accesses still pending in thread(s) {0:?}")]
    Leftover(Vec<u32>),
    #[error("unknown thread {0} in schedule")]
    UnknownThread(u32),
    #[error("{what} exceeds the brute-force cap ({have} > {cap})")]
    Cap {
        what: &'static str,
        have: u128,
        cap: u128,
    },
}

#[derive(Clone, Debug)]
struct Th {
    tid: u32,
    regs: HashMap<String, u64>,
    pending: Vec<Stmt>,
}

/// Concrete interpreter state.
#[derive(Clone, Debug)]
pub struct Runner<'a> {
    prog: &'a Program,
    env: BTreeMap<String, u64>,
    inputs: HashMap<String, u32>,
    threads: Vec<Th>,
    memory: HashMap<u64, u64>,
    cache: ConcreteCache,
    pub exec: Execution,
}

impl<'a> Runner<'a> {
    /// `env` binds secrets and symbolic bases (`&name`); public inputs take
    /// their declared values; anything unbound reads zero.
    pub fn new(
        prog: &'a Program,
        cfg: CacheConfig,
        env: &BTreeMap<String, u64>,
    ) -> Result<Runner<'a>, OracleError> {
        let mut full: BTreeMap<String, u64> = prog
            .public_inputs()
            .into_iter()
            .map(|(v, x)| (v.name, x & mask(v.width)))
            .collect();
        let mut inputs: HashMap<String, u32> = prog
            .inputs
            .iter()
            .map(|i| (i.name.clone(), i.width))
            .collect();
        for d in &prog.decls {
            if d.kind == DeclKind::Scalar && d.sensitivity != Sensitivity::Derived {
                inputs.insert(d.name.clone(), d.elem_bits());
            }
        }
        for v in prog.secret_inputs() {
            full.insert(
                v.name.clone(),
                env.get(&v.name).copied().unwrap_or(0) & mask(v.width),
            );
        }
        for (k, v) in env {
            full.entry(k.clone()).or_insert(*v);
        }
        let mut threads: Vec<Th> = prog
            .threads
            .iter()
            .map(|t| Th {
                tid: t.tid,
                regs: HashMap::new(),
                pending: t.body.iter().rev().cloned().collect(),
            })
            .collect();
        threads.sort_by_key(|t| t.tid);
        let mut r = Runner {
            prog,
            env: full,
            inputs,
            threads,
            memory: HashMap::new(),
            cache: ConcreteCache::new(cfg),
            exec: Execution::default(),
        };
        r.settle()?;
        Ok(r)
    }

    fn value(&self, th: &Th, e: &crate::ir::IrExpr) -> u64 {
        let env = &self.env;
        let c = lower(e, &|n| {
            if let Some(v) = th.regs.get(n) {
                Expr::word(*v)
            } else if let Some(w) = self.inputs.get(n) {
                Expr::word(env.get(n).copied().unwrap_or(0) & mask(*w))
            } else {
                Expr::word(0)
            }
        });
        c.as_const().expect("concrete expression folds")
    }

    fn settle(&mut self) -> Result<(), OracleError> {
        for ti in 0..self.threads.len() {
            loop {
                let th = &self.threads[ti];
                match th.pending.last() {
                    None | Some(Stmt::Load { .. }) | Some(Stmt::Store { .. }) => break,
                    Some(Stmt::Assign { dst, value, .. }) => {
                        let v = self.value(th, value);
                        let dst = dst.clone();
                        let th = &mut self.threads[ti];
                        th.pending.pop();
                        th.regs.insert(dst, v);
                    }
                    Some(Stmt::Assume { cond, pos }) => {
                        let holds = self.value(th, cond) != 0;
                        let site = pos.site();
                        let th = &mut self.threads[ti];
                        if holds {
                            th.pending.pop();
                        } else {
                            th.pending.clear();
                        }
                        self.exec.branches.push((th.tid, site, holds));
                    }
                    Some(Stmt::If { .. }) => {
                        let Some(Stmt::If {
                            cond,
                            then_body,
                            else_body,
                            pos,
                        }) = self.threads[ti].pending.pop()
                        else {
                            unreachable!()
                        };
                        let c = truth(&Expr::word(self.value(&self.threads[ti], &cond))).is_true();
                        let arm = if c { then_body } else { else_body };
                        let th = &mut self.threads[ti];
                        th.pending.extend(arm.into_iter().rev());
                        self.exec.branches.push((th.tid, pos.site(), c));
                    }
                    Some(Stmt::For { .. }) | Some(Stmt::While { .. }) => {
                        panic!("loops must be unrolled before replay")
                    }
                }
            }
        }
        Ok(())
    }

    pub fn enabled(&self) -> Vec<u32> {
        self.threads
            .iter()
            .filter(|t| !t.pending.is_empty())
            .map(|t| t.tid)
            .collect()
    }

    pub fn done(&self) -> bool {
        self.threads.iter().all(|t| t.pending.is_empty())
    }

    /// Runs the pending access of `tid`.
    pub fn step(&mut self, tid: u32) -> Result<&AccessEvent, OracleError> {
        let step = self.exec.schedule.len();
        let ti = self
            .threads
            .iter()
            .position(|t| t.tid == tid)
            .ok_or(OracleError::UnknownThread(tid))?;
        let Some(stmt) = self.threads[ti].pending.last().cloned() else {
            return Err(OracleError::NotEnabled { step, tid });
        };
        let (kind, array, index, pos) = match &stmt {
            Stmt::Load {
                array, index, pos, ..
            } => (AccessKind::Load, array, index, pos),
            Stmt::Store {
                array, index, pos, ..
            } => (AccessKind::Store, array, index, pos),
            _ => return Err(OracleError::NotEnabled { step, tid }),
        };
        let d = self.prog.decl(array).expect("validated declaration");
        let idx = self.value(&self.threads[ti], index);
        let env = &self.env;
        let addr = address(d, &Expr::word(idx)).eval(&|n| env.get(n).copied()) & mask(32);
        let width = mask(d.elem_bits().min(32));
        match &stmt {
            Stmt::Load { dst, .. } => {
                let v = match self.memory.get(&addr) {
                    Some(v) => *v,
                    None => initial_value(d, &Expr::word(idx)).eval(&|n| env.get(n).copied()),
                } & width;
                self.threads[ti].regs.insert(dst.clone(), v);
            }
            Stmt::Store { value, .. } => {
                let v = self.value(&self.threads[ti], value) & width;
                self.memory.insert(addr, v);
            }
            _ => unreachable!(),
        }
        self.threads[ti].pending.pop();
        let outcome = self.cache.access(addr);
        self.exec.schedule.push(tid);
        self.exec.accesses.push(AccessEvent {
            tid,
            site: pos.site(),
            kind,
            addr,
            outcome,
            branches_before: self.exec.branches.len(),
        });
        self.settle()?;
        Ok(self.exec.accesses.last().unwrap())
    }
}

/// Executes `schedule` (one thread id per access) to completion.
pub fn replay(
    prog: &Program,
    env: &BTreeMap<String, u64>,
    schedule: &[u32],
    cfg: CacheConfig,
) -> Result<Execution, OracleError> {
    let r = run_schedule(prog, env, schedule, cfg)?;
    if !r.done() {
        return Err(OracleError::Leftover(r.enabled()));
    }
    Ok(r.exec)
}

/// Like `replay` but accepts a schedule that stops early.
pub fn replay_prefix(
    prog: &Program,
    env: &BTreeMap<String, u64>,
    schedule: &[u32],
    cfg: CacheConfig,
) -> Result<Execution, OracleError> {
    Ok(run_schedule(prog, env, schedule, cfg)?.exec)
}

fn run_schedule<'a>(
    prog: &'a Program,
    env: &BTreeMap<String, u64>,
    schedule: &[u32],
    cfg: CacheConfig,
) -> Result<Runner<'a>, OracleError> {
    let mut r = Runner::new(prog, cfg, env)?;
    for &tid in schedule {
        r.step(tid)?;
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug)]
pub struct BruteForceLimits {
    pub key_bits: u32,
    /// Cap on executions (valuations × layouts × schedules).
    pub max_runs: u128,
}

impl Default for BruteForceLimits {
    fn default() -> Self {
        BruteForceLimits {
            key_bits: 16,
            max_runs: 1 << 26,
        }
    }
}

/// A critical-thread access whose outcome depends on the secret under one
/// schedule prefix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BruteLeak {
    pub site: Site,
    pub schedule: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct GroupKey {
    layout: u64,
    schedule: Vec<u32>,
    branches: Vec<(u32, Site, bool)>,
    site: Site,
}

/// Enumerates every secret valuation, adversary layout and schedule;
/// returns the critical-thread accesses where two valuations on the same
/// path and schedule disagree.
pub fn brute_force_leaks(
    prog: &Program,
    cfg: CacheConfig,
    limits: BruteForceLimits,
) -> Result<BTreeSet<BruteLeak>, OracleError> {
    let secrets = prog.secret_inputs();
    let bits: u32 = secrets.iter().map(|v| v.width).sum();
    if bits > limits.key_bits {
        return Err(OracleError::Cap {
            what: "secret width",
            have: bits as u128,
            cap: limits.key_bits as u128,
        });
    }
    let critical = prog.critical_tid();
    let domains = domains_for(prog, &cfg);
    // Line-aligned candidate bases for each symbolic declaration.
    let mut layout_vars: Vec<(String, Vec<u64>)> = Vec::new();
    for d in &prog.decls {
        if d.fixed_base().is_some() {
            continue;
        }
        if let Domain::Stride { lo, hi, step } = domains.get(&d.base_var()) {
            let step = step.max(cfg.line_size);
            let lo = lo.div_ceil(step) * step;
            layout_vars.push((d.base_var(), (lo..hi).step_by(step as usize).collect()));
        }
    }
    let layouts: u128 = layout_vars.iter().map(|(_, v)| v.len() as u128).product();
    let valuations: u128 = 1u128 << bits;
    let total = layouts * valuations;
    if total > limits.max_runs {
        return Err(OracleError::Cap {
            what: "valuations x layouts",
            have: total,
            cap: limits.max_runs,
        });
    }
    let env_at = |i: u64| -> (u64, BTreeMap<String, u64>) {
        let mut env = BTreeMap::new();
        let mut rest = i % valuations as u64;
        for v in &secrets {
            env.insert(v.name.clone(), rest & mask(v.width));
            rest >>= v.width;
        }
        let layout = i / valuations as u64;
        let mut l = layout;
        for (name, cands) in &layout_vars {
            env.insert(name.clone(), cands[(l % cands.len() as u64) as usize]);
            l /= cands.len() as u64;
        }
        (layout, env)
    };

    type Groups = HashMap<GroupKey, (bool, bool)>;
    let merged = par::fold_chunks(
        total as u64,
        256,
        || (),
        |_, range| -> Result<(Groups, u128), OracleError> {
            let mut groups: Groups = HashMap::new();
            let mut runs = 0u128;
            for i in range {
                let (layout, env) = env_at(i);
                let root = Runner::new(prog, cfg, &env)?;
                let mut stack = vec![root];
                while let Some(r) = stack.pop() {
                    let en = r.enabled();
                    if en.is_empty() {
                        runs += 1;
                        for (pos, a) in r.exec.accesses.iter().enumerate() {
                            if a.tid != critical {
                                continue;
                            }
                            let key = GroupKey {
                                layout,
                                schedule: r.exec.schedule[..=pos].to_vec(),
                                branches: r.exec.branches[..a.branches_before].to_vec(),
                                site: a.site,
                            };
                            let e = groups.entry(key).or_insert((false, false));
                            match a.outcome {
                                Outcome::Hit => e.0 = true,
                                Outcome::Miss => e.1 = true,
                            }
                        }
                        continue;
                    }
                    for &tid in en.iter().rev() {
                        let mut n = r.clone();
                        n.step(tid)?;
                        stack.push(n);
                    }
                }
            }
            Ok((groups, runs))
        },
        |a, b| {
            let (mut ga, ra) = a?;
            let (gb, rb) = b?;
            for (k, (h, m)) in gb {
                let e = ga.entry(k).or_insert((false, false));
                e.0 |= h;
                e.1 |= m;
            }
            Ok((ga, ra + rb))
        },
    );
    let (groups, runs) = match merged {
        Some(r) => r?,
        None => return Ok(BTreeSet::new()),
    };
    if runs > limits.max_runs {
        return Err(OracleError::Cap {
            what: "executions",
            have: runs,
            cap: limits.max_runs,
        });
    }
    Ok(groups
        .into_iter()
        .filter(|(_, (h, m))| *h && *m)
        .map(|(k, _)| BruteLeak {
            site: k.site,
            schedule: k.schedule,
        })
        .collect())
}

/// Distinct sites among brute-force leaks.
pub fn leak_sites(leaks: &BTreeSet<BruteLeak>) -> BTreeSet<Site> {
    leaks.iter().map(|l| l.site).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn direct_512() -> CacheConfig {
        CacheConfig::preset("direct-512b").unwrap()
    }

    fn env(k: u64) -> BTreeMap<String, u64> {
        BTreeMap::from([("k".to_string(), k)])
    }

    const LEAKY: &str = "\
array p [256] elem 1 at 0
scalar k elem 1 at 256 secret
array q [256] elem 1 at 257
thread 1 {
  load reg1, p[k]
  if (k <= 127) {
    load reg2, q[255 - k]
  } else {
    load reg2, q[k - 128] }
  reg1 := reg1 + reg2
  store p[k], reg1 }
";

    #[test]
    fn direct_mapped_conflicts() {
        let mut c = ConcreteCache::new(direct_512());
        assert_eq!(c.access(0), Outcome::Miss);
        assert_eq!(c.access(512), Outcome::Miss);
        assert_eq!(c.access(0), Outcome::Miss);
        assert_eq!(c.access(0), Outcome::Hit);
    }

    #[test]
    fn two_way_keeps_both_blocks() {
        let cfg = CacheConfig::new(512, 1, 2).unwrap();
        let c = ConcreteCache::new(cfg);
        let (c, a) = simulate_access(&c, 0);
        let (c, b) = simulate_access(&c, 512);
        let (_, d) = simulate_access(&c, 0);
        assert_eq!((a, b, d), (Outcome::Miss, Outcome::Miss, Outcome::Hit));
    }

    #[test]
    fn round_robin_over_capacity_always_misses() {
        for ways in [1, 2, 4] {
            let cfg = CacheConfig::new(256, 4, ways).unwrap();
            let stride = cfg.num_sets() * cfg.line_size;
            let mut c = ConcreteCache::new(cfg);
            for round in 0..3 {
                for b in 0..=ways as u64 {
                    assert_eq!(
                        c.access(b * stride),
                        Outcome::Miss,
                        "ways={ways} round={round}"
                    );
                }
            }
            let mut c = ConcreteCache::new(cfg);
            c.access(40);
            assert_eq!(c.access(40), Outcome::Hit);
        }
    }

    #[test]
    fn sequential_behaviors_of_leaky_program() {
        let p = parse_program(LEAKY).unwrap();
        use Outcome::*;
        let b0 = replay(&p, &env(0), &[1, 1, 1], direct_512())
            .unwrap()
            .behavior(None);
        assert_eq!(b0, vec![Miss, Miss, Miss]);
        for k in [1, 7, 127, 128, 255] {
            let b = replay(&p, &env(k), &[1, 1, 1], direct_512())
                .unwrap()
                .behavior(None);
            assert_eq!(b, vec![Miss, Miss, Hit], "k={k}");
        }
    }

    #[test]
    fn strict_replay_rejects_bad_schedules() {
        let p = parse_program(LEAKY).unwrap();
        assert!(matches!(
            replay(&p, &env(0), &[1, 1], direct_512()),
            Err(OracleError::Leftover(_))
        ));
        assert!(matches!(
            replay(&p, &env(0), &[1, 1, 1, 1], direct_512()),
            Err(OracleError::NotEnabled { step: 3, .. })
        ));
        assert!(matches!(
            replay(&p, &env(0), &[2], direct_512()),
            Err(OracleError::UnknownThread(2))
        ));
        assert_eq!(
            replay_prefix(&p, &env(0), &[1], direct_512())
                .unwrap()
                .accesses
                .len(),
            1
        );
    }

    #[test]
    fn brute_force_on_sequential_pair() {
        let p = parse_program(LEAKY).unwrap();
        let leaks = brute_force_leaks(&p, direct_512(), BruteForceLimits::default()).unwrap();
        assert_eq!(leak_sites(&leaks), BTreeSet::from([Site::line(11)]));
        let fixed = LEAKY
            .replace("  load reg1, p[k]\n  if", "  if")
            .replace("  reg1 := reg1", "  load reg1, p[k]\n  reg1 := reg1");
        let p = parse_program(&fixed).unwrap();
        assert!(
            brute_force_leaks(&p, direct_512(), BruteForceLimits::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn no_secrets_no_leaks() {
        let p = parse_program("array a [4] elem 1 at 0\nthread 1 { load r, a[1]\n load s, a[r] }")
            .unwrap();
        assert!(
            brute_force_leaks(&p, direct_512(), BruteForceLimits::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn caps_are_explicit() {
        let p = parse_program(
            "input k width 20 secret\narray a [4] elem 1 at 0\nthread 1 { load r, a[k & 3] }",
        )
        .unwrap();
        assert!(matches!(
            brute_force_leaks(&p, direct_512(), BruteForceLimits::default()),
            Err(OracleError::Cap { .. })
        ));
    }

    #[test]
    fn false_assumption_stops_only_its_thread() {
        let p = parse_program(
            "scalar k elem 1 at 64 secret\narray a [4] elem 1 at 0\n\
             thread 1 critical { load r, a[0]\n assume k != 2\n load r, a[1] }\nthread 2 { load s, a[2] }",
        )
        .unwrap();
        let cfg = direct_512();
        let e = replay(&p, &env(2), &[1, 2], cfg).unwrap();
        assert_eq!(e.accesses.len(), 2);
        assert_eq!(e.branches.len(), 1);
        assert!(replay(&p, &env(2), &[1, 2, 1], cfg).is_err());
        assert_eq!(
            replay(&p, &env(1), &[1, 2, 1], cfg).unwrap().accesses.len(),
            3
        );
    }
}
