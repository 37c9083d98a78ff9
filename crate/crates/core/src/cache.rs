//! Symbolic cache model: hit/miss constraints over a trace of accesses.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::expr::Expr;
use crate::interval::{range_of, Bounds};
use crate::ir::{Declaration, Site};
use crate::solver::{Domain, Domains};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    pub cache_size: u64,
    pub line_size: u64,
    pub ways: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            cache_size: 64 * 1024,
            line_size: 64,
            ways: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("invalid cache geometry: {0}")]
    Config(String),
    #[error("access {index} needs a {window}-access window; symbolic set-associative constraints are capped")]
    Window { index: usize, window: usize },
}

impl CacheConfig {
    pub fn new(cache_size: u64, line_size: u64, ways: u32) -> Result<CacheConfig, CacheError> {
        let c = CacheConfig {
            cache_size,
            line_size,
            ways,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn preset(name: &str) -> Option<CacheConfig> {
        match name {
            "default" => Some(CacheConfig::default()),
            "paper-fig3" | "direct-512b" => Some(CacheConfig {
                cache_size: 512,
                line_size: 1,
                ways: 1,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |m: &str| Err(CacheError::Config(m.to_string()));
        if !self.line_size.is_power_of_two() || !self.cache_size.is_power_of_two() {
            return bad("cache and line sizes must be powers of two");
        }
        if self.ways == 0 || !self.ways.is_power_of_two() {
            return bad("associativity must be a power of two");
        }
        if self.cache_size < self.line_size * self.ways as u64 {
            return bad("cache smaller than one set");
        }
        if self.cache_size > 1 << 31 {
            return bad("cache larger than 2 GiB");
        }
        Ok(())
    }

    pub fn num_sets(&self) -> u64 {
        self.cache_size / (self.line_size * self.ways as u64)
    }

    pub fn offset_bits(&self) -> u32 {
        self.line_size.trailing_zeros()
    }

    /// Block number of a concrete address.
    pub fn block(&self, addr: u64) -> u64 {
        addr >> self.offset_bits()
    }

    /// Set index of a concrete address.
    pub fn set(&self, addr: u64) -> u64 {
        self.block(addr) % self.num_sets()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Load,
    Store,
}

/// One symbolic memory access on an explored path.
#[derive(Clone, Debug)]
pub struct AccessRecord {
    pub tid: u32,
    pub kind: AccessKind,
    /// 32-bit byte address.
    pub addr: Expr,
    /// Path condition holding when the access executes.
    pub pcon: Expr,
    pub site: Site,
    /// Index of the accessed declaration.
    pub decl: usize,
}

/// Block identity (`addr >> log2 line_size`).
pub fn tag(cfg: &CacheConfig, addr: &Expr) -> Expr {
    addr.lshr(&Expr::word(cfg.offset_bits() as u64))
}

/// Cache set of an address.
pub fn line(cfg: &CacheConfig, addr: &Expr) -> Expr {
    tag(cfg, addr).and(&Expr::word(cfg.num_sets() - 1))
}

/// Direct-mapped hit condition of access `i`: some earlier access touched
/// the same block and nothing in between mapped to the same set.
pub fn hit_constraint(trace: &[AccessRecord], i: usize, cfg: &CacheConfig) -> Expr {
    let addrs: Vec<Expr> = trace[..=i].iter().map(|r| r.addr.clone()).collect();
    direct_hit(&addrs, i, cfg, &mut |_, _| true, &mut |_, _| true)
}

/// `keep_pair(j, tag_eq)` may veto a candidate earlier access; `keep_mid(l)`
/// may drop an in-between set conflict.
fn direct_hit(
    addrs: &[Expr],
    i: usize,
    cfg: &CacheConfig,
    keep_pair: &mut dyn FnMut(usize, &Expr) -> bool,
    keep_mid: &mut dyn FnMut(usize, usize) -> bool,
) -> Expr {
    let (tag_i, line_i) = (tag(cfg, &addrs[i]), line(cfg, &addrs[i]));
    let lines: Vec<Expr> = addrs[..i].iter().map(|a| line(cfg, a)).collect();
    let mut clauses = Vec::new();
    for j in (0..i).rev() {
        let te = tag(cfg, &addrs[j]).eq_(&tag_i);
        if te.is_false() || (!te.is_true() && !keep_pair(j, &te)) {
            continue;
        }
        let mut parts = vec![te.clone()];
        for (l, line_l) in lines.iter().enumerate().take(i).skip(j + 1) {
            if keep_mid(l, j) {
                parts.push(line_l.ne_(&line_i));
            }
        }
        clauses.push(Expr::all(parts.iter()));
        if te.is_true() {
            break;
        }
    }
    Expr::any(clauses.iter())
}

/// Set-associative LRU hit condition: access `i` hits when an earlier
/// access `j` touched its block and fewer than `ways` other blocks of the
/// same set were touched since.
pub fn hit_constraint_assoc(
    trace: &[AccessRecord],
    i: usize,
    cfg: &CacheConfig,
    window: usize,
) -> Result<Expr, CacheError> {
    let addrs: Vec<Expr> = trace[..=i].iter().map(|r| r.addr.clone()).collect();
    assoc_hit(&addrs, i, cfg, window, &mut |_, _| true, &mut |_, _| true)
}

fn assoc_hit(
    addrs: &[Expr],
    i: usize,
    cfg: &CacheConfig,
    window: usize,
    keep_pair: &mut dyn FnMut(usize, &Expr) -> bool,
    keep_mid: &mut dyn FnMut(usize, usize) -> bool,
) -> Result<Expr, CacheError> {
    if cfg.ways == 1 {
        return Ok(direct_hit(addrs, i, cfg, keep_pair, keep_mid));
    }
    if i > window && addrs[..=i].iter().any(|a| a.as_const().is_none()) {
        return Err(CacheError::Window {
            index: i,
            window: i,
        });
    }
    let tags: Vec<Expr> = addrs.iter().map(|a| tag(cfg, a)).collect();
    let lines: Vec<Expr> = addrs.iter().map(|a| line(cfg, a)).collect();
    let cw = 16;
    let limit = Expr::constant(cw, cfg.ways as u64 - 1);
    let mut clauses = Vec::new();
    for j in (0..i).rev() {
        let te = tags[j].eq_(&tags[i]);
        if te.is_false() || (!te.is_true() && !keep_pair(j, &te)) {
            continue;
        }
        let mut count = Expr::constant(cw, 0);
        for l in j + 1..i {
            if !keep_mid(l, j) {
                continue;
            }
            let mut d = vec![lines[l].eq_(&lines[i]), tags[l].ne_(&tags[i])];
            for m in j + 1..l {
                if keep_mid(m, j) {
                    d.push(tags[m].ne_(&tags[l]));
                }
            }
            let ind = Expr::ite(
                &Expr::all(d.iter()),
                &Expr::constant(cw, 1),
                &Expr::constant(cw, 0),
            );
            count = count.add(&ind);
        }
        clauses.push(te.and(&count.ule(&limit)));
        if te.is_true() {
            break;
        }
    }
    Ok(Expr::any(clauses.iter()))
}

/// Whether two accesses can fall into the same cache set under their path
/// conditions. Interval reasoning settles most pairs; the rest go to `sat`
/// (`None` = unknown, treated as possible).
pub fn may_same_line(
    a: &AccessRecord,
    b: &AccessRecord,
    cfg: &CacheConfig,
    domains: &Domains,
    sat: &mut dyn FnMut(&Expr) -> Option<bool>,
) -> bool {
    let eq = line(cfg, &a.addr).eq_(&line(cfg, &b.addr));
    if let Some(v) = eq.as_const() {
        return v == 1;
    }
    let pcon = a.pcon.and(&b.pcon);
    let bounds = Bounds::new(&pcon, domains);
    if bounds.is_empty() {
        return false;
    }
    let (ra, rb) = (range_of(&a.addr, &bounds), range_of(&b.addr, &bounds));
    if !sets_may_meet(cfg, ra, rb) {
        return false;
    }
    sat(&eq.and(&pcon)).unwrap_or(true)
}

/// Set indices covered by a byte range, as at most two inclusive runs.
fn set_runs(cfg: &CacheConfig, r: (u64, u64)) -> Vec<(u64, u64)> {
    let n = cfg.num_sets();
    let (b0, b1) = (cfg.block(r.0), cfg.block(r.1));
    if b1 - b0 + 1 >= n {
        return vec![(0, n - 1)];
    }
    let (s0, s1) = (b0 % n, b1 % n);
    if s0 <= s1 {
        vec![(s0, s1)]
    } else {
        vec![(s0, n - 1), (0, s1)]
    }
}

fn sets_may_meet(cfg: &CacheConfig, a: (u64, u64), b: (u64, u64)) -> bool {
    let (ra, rb) = (set_runs(cfg, a), set_runs(cfg, b));
    ra.iter()
        .any(|x| rb.iter().any(|y| x.0.max(y.0) <= x.1.min(y.1)))
}

/// Whether any block in range `l` can differ from a block in range `i`
/// while sharing its set, i.e. whether `l` could evict `i`.
fn may_evict(cfg: &CacheConfig, l: (u64, u64), i: (u64, u64)) -> bool {
    let n = cfg.num_sets() as i128;
    let (lo, hi) = (
        cfg.block(l.0) as i128 - cfg.block(i.1) as i128,
        cfg.block(l.1) as i128 - cfg.block(i.0) as i128,
    );
    // Smallest multiple of n not below lo; skip zero.
    let mut m = lo.div_euclid(n) * n;
    if m < lo {
        m += n;
    }
    if m == 0 {
        m += n;
    }
    m <= hi
}

/// Substitutes fixed public inputs into addresses and path conditions.
pub fn concretize_addresses(trace: &[AccessRecord], domains: &Domains) -> Vec<AccessRecord> {
    let mut cache: HashMap<Arc<str>, Option<Expr>> = HashMap::new();
    let mut fixed = |e: &Expr| -> Expr {
        let mut map = HashMap::new();
        for (name, w) in e.free_vars() {
            let v = cache
                .entry(name.clone())
                .or_insert_with(|| match domains.get(&name) {
                    Domain::Fixed(v) => Some(Expr::constant(w, v)),
                    _ => None,
                })
                .clone();
            if let Some(v) = v {
                map.insert(name, v);
            }
        }
        if map.is_empty() {
            e.clone()
        } else {
            e.substitute(&map)
        }
    };
    trace
        .iter()
        .map(|r| AccessRecord {
            addr: fixed(&r.addr),
            pcon: fixed(&r.pcon),
            ..r.clone()
        })
        .collect()
}

/// Block span `[first, last]` of a fixed-base declaration.
fn decl_blocks(cfg: &CacheConfig, d: &Declaration) -> Option<(u64, u64)> {
    let base = d.fixed_base()?;
    Some((cfg.block(base), cfg.block(base + d.bytes() - 1)))
}

/// True when two accesses touch distinct fixed tables whose block ranges
/// are disjoint, so they can never share a block (in-bounds indexing).
pub fn prune_distinct_table_pairs(
    a: &AccessRecord,
    b: &AccessRecord,
    decls: &[Declaration],
    cfg: &CacheConfig,
) -> bool {
    if a.decl == b.decl {
        return false;
    }
    match (
        decl_blocks(cfg, &decls[a.decl]),
        decl_blocks(cfg, &decls[b.decl]),
    ) {
        (Some(x), Some(y)) => x.1 < y.0 || y.1 < x.0,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reductions {
    pub concretize: bool,
    pub tables: bool,
    pub layout: bool,
}

impl Reductions {
    pub fn all() -> Reductions {
        Reductions {
            concretize: true,
            tables: true,
            layout: true,
        }
    }

    pub fn none() -> Reductions {
        Reductions {
            concretize: false,
            tables: false,
            layout: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    /// Solver calls spent deciding whether two accesses can share a block.
    pub pair_checks: u64,
    pub pruned_pairs: u64,
    pub dropped_conflicts: u64,
}

impl BuildStats {
    pub fn absorb(&mut self, o: &BuildStats) {
        self.pair_checks += o.pair_checks;
        self.pruned_pairs += o.pruned_pairs;
        self.dropped_conflicts += o.dropped_conflicts;
    }
}

/// A hit constraint plus, when the layout reduction removed conflicts, the
/// unreduced constraint for confirming witnesses.
#[derive(Clone, Debug)]
pub struct BuiltHit {
    pub tau: Expr,
    pub full: Option<Expr>,
}

/// Builds the hit constraint of access `i` with the enabled reductions.
/// Candidate earlier accesses whose block equality is not syntactically
/// decided are checked against the path condition with `sat`.
#[allow(clippy::too_many_arguments)]
pub fn build_hit(
    trace: &[AccessRecord],
    i: usize,
    cfg: &CacheConfig,
    decls: &[Declaration],
    domains: &Domains,
    red: Reductions,
    window: usize,
    sat: &mut dyn FnMut(&Expr) -> Option<bool>,
    stats: &mut BuildStats,
) -> Result<BuiltHit, CacheError> {
    let owned;
    let tr = if red.concretize {
        owned = concretize_addresses(&trace[..=i], domains);
        &owned[..]
    } else {
        &trace[..=i]
    };
    let addrs: Vec<Expr> = tr.iter().map(|r| r.addr.clone()).collect();
    let pcon = tr[i].pcon.clone();
    let bounds = Bounds::new(&pcon, domains);
    let ranges: Vec<(u64, u64)> = addrs.iter().map(|a| range_of(a, &bounds)).collect();

    let mut local = BuildStats::default();
    let mut keep_pair = |j: usize, te: &Expr| {
        if red.tables && prune_distinct_table_pairs(&tr[j], &tr[i], decls, cfg) {
            local.pruned_pairs += 1;
            return false;
        }
        local.pair_checks += 1;
        sat(&te.and(&pcon)).unwrap_or(true)
    };
    let mut dropped = false;
    let mut seen = std::collections::HashSet::new();
    let mut keep_mid = |l: usize, _j: usize| {
        if red.layout && !may_evict(cfg, ranges[l], ranges[i]) {
            if seen.insert(l) {
                dropped = true;
            }
            return false;
        }
        true
    };
    let tau = assoc_hit(&addrs, i, cfg, window, &mut keep_pair, &mut keep_mid)?;
    local.dropped_conflicts = seen.len() as u64;
    stats.absorb(&local);
    let full = if dropped {
        Some(assoc_hit(
            &addrs,
            i,
            cfg,
            window,
            &mut |_, _| true,
            &mut |_, _| true,
        )?)
    } else {
        None
    };
    Ok(BuiltHit { tau, full })
}
