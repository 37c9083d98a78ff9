#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Deserialize;

use cachesym::cache::{AccessRecord, CacheConfig};
use cachesym::engine::{domains_for, Machine, SymbolicState};
use cachesym::explore::{explore, Exploration, ExploreOptions};
use cachesym::ir::Program;
use cachesym::oracle::{brute_force_leaks, leak_sites, BruteForceLimits};
use cachesym::report::{prepare, Adversary, RunConfig};
use cachesym::solver::{Enumerative, Session};

#[derive(Debug, Deserialize)]
pub struct SboxCache {
    pub cache_size: u64,
    pub line_size: u64,
    pub assoc: u32,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Entry {
    pub file: String,
    pub preset: Option<String>,
    pub adversary: String,
    pub key_bits: u32,
    pub sites: Vec<String>,
    pub cross_thread: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct Manifest {
    pub sbox_cache: SboxCache,
    pub program: Vec<Entry>,
}

pub struct Case {
    pub name: String,
    pub entry: Entry,
    pub cfg: CacheConfig,
    pub prog: Program,
    pub rc: RunConfig,
}

impl Case {
    pub fn is_sbox(&self) -> bool {
        self.entry.file.starts_with("sbox_")
    }

    /// Static count of memory accesses over all threads after unrolling.
    pub fn gamma_events(&self) -> usize {
        self.prog
            .threads
            .iter()
            .map(|t| count_accesses(&t.body))
            .sum()
    }

    pub fn expected(&self) -> BTreeSet<String> {
        self.entry.sites.iter().cloned().collect()
    }

    pub fn with_cache(&self, cfg: CacheConfig) -> Case {
        let mut rc = self.rc.clone();
        rc.cache = cfg;
        let text = std::fs::read_to_string(&rc.program).unwrap();
        let prog = prepare(&text, &self.entry.file, &rc).unwrap();
        Case {
            name: self.name.clone(),
            entry: self.entry.clone(),
            cfg,
            prog,
            rc,
        }
    }
}

fn count_accesses(body: &[cachesym::ir::Stmt]) -> usize {
    use cachesym::ir::Stmt;
    body.iter()
        .map(|s| match s {
            Stmt::Load { .. } | Stmt::Store { .. } => 1,
            Stmt::If {
                then_body,
                else_body,
                ..
            } => count_accesses(then_body) + count_accesses(else_body),
            Stmt::For { body, .. } | Stmt::While { body, .. } => count_accesses(body),
            _ => 0,
        })
        .sum()
}

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn manifest() -> Manifest {
    let text = std::fs::read_to_string(corpus_dir().join("manifest.toml")).unwrap();
    toml::from_str(&text).unwrap()
}

pub fn cases() -> Vec<Case> {
    let m = manifest();
    m.program
        .into_iter()
        .map(|entry| {
            let cfg = match &entry.preset {
                Some(p) => CacheConfig::preset(p).unwrap(),
                None => CacheConfig::new(
                    m.sbox_cache.cache_size,
                    m.sbox_cache.line_size,
                    m.sbox_cache.assoc,
                )
                .unwrap(),
            };
            let path = corpus_dir().join(&entry.file);
            let mut rc = RunConfig::new(&path);
            rc.cache = cfg;
            rc.adversary = entry.adversary.parse::<Adversary>().unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            let prog = prepare(&text, &entry.file, &rc).unwrap();
            Case {
                name: format!("{} ({})", entry.file, entry.adversary),
                entry,
                cfg,
                prog,
                rc,
            }
        })
        .collect()
}

pub fn session(prog: &Program, cfg: &CacheConfig) -> Session {
    Session::new(Box::new(Enumerative::default()), domains_for(prog, cfg))
}

pub fn analyze(prog: &Program, cfg: CacheConfig, opts: ExploreOptions) -> Exploration {
    let s = session(prog, &cfg);
    explore(prog, cfg, opts, &s).unwrap()
}

pub fn names<T: ToString>(xs: impl IntoIterator<Item = T>) -> BTreeSet<String> {
    xs.into_iter().map(|x| x.to_string()).collect()
}

pub fn brute_sites(prog: &Program, cfg: CacheConfig, key_bits: u32) -> BTreeSet<String> {
    let limits = BruteForceLimits {
        key_bits,
        ..Default::default()
    };
    names(leak_sites(&brute_force_leaks(prog, cfg, limits).unwrap()))
}

/// Every complete symbolic run (all schedules, all feasible paths), no pruning.
pub fn all_runs(m: &Machine) -> Vec<SymbolicState> {
    let mut out = Vec::new();
    let mut stack = m.initial_states();
    while let Some(s) = stack.pop() {
        let en = m.enabled_events(&s);
        if en.is_empty() {
            out.push(s);
            continue;
        }
        for t in en {
            stack.extend(m.next_symbolic_state(&s, t));
        }
    }
    out
}

pub fn traces(prog: &Program, cfg: CacheConfig, s: &Session) -> Vec<Vec<AccessRecord>> {
    let m = Machine::new(prog, cfg, s);
    all_runs(&m).into_iter().map(|s| s.trace).collect()
}
