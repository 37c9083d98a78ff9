//! Satisfiability backends for width-1 bitvector formulas.
//!
//! Two interchangeable backends answer the same queries: a built-in
//! enumerator over the (small) variable domains, and an external SMT solver
//! driven over stdin/stdout with SMT-LIB2 text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::expr::{mask, Compiled, Expr, Node};
use crate::par;

/// Satisfying assignment, keyed by variable name.
pub type Model = BTreeMap<String, u64>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SatResult {
    Sat(Model),
    Unsat,
    /// Timeout, oversized domain, or solver failure.
    Unknown(String),
}

impl SatResult {
    pub fn is_sat(&self) -> bool {
        matches!(self, SatResult::Sat(_))
    }
}

/// Value set of a variable as seen by the solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Every value of the variable's width.
    Full,
    /// A single value (fixed public input).
    Fixed(u64),
    /// `lo, lo+step, ...` up to and excluding `hi`.
    Stride { lo: u64, hi: u64, step: u64 },
}

impl Domain {
    pub fn len(&self, width: u32) -> u128 {
        match *self {
            Domain::Full => 1u128 << width,
            Domain::Fixed(_) => 1,
            Domain::Stride { lo, hi, step } => {
                if hi <= lo {
                    0
                } else {
                    ((hi - lo).div_ceil(step)) as u128
                }
            }
        }
    }

    pub fn is_empty(&self, width: u32) -> bool {
        self.len(width) == 0
    }

    pub fn nth(&self, i: u64) -> u64 {
        match *self {
            Domain::Full => i,
            Domain::Fixed(v) => v,
            Domain::Stride { lo, step, .. } => lo + i * step,
        }
    }

    /// Range/alignment constraint equivalent to this domain.
    pub fn constraint(&self, v: &Expr) -> Expr {
        let w = v.width();
        match *self {
            Domain::Full => Expr::tru(),
            Domain::Fixed(x) => v.eq_(&Expr::constant(w, x)),
            Domain::Stride { lo, hi, step } => {
                let mut c = Expr::constant(w, lo).ule(v);
                if hi <= mask(w) {
                    c = c.and(&v.ult(&Expr::constant(w, hi)));
                }
                if step > 1 {
                    let off = v.sub(&Expr::constant(w, lo));
                    let aligned = if step.is_power_of_two() {
                        off.and(&Expr::constant(w, step - 1))
                            .eq_(&Expr::constant(w, 0))
                    } else {
                        // only power-of-two strides arise from cache geometry
                        panic!("stride {step} is not a power of two")
                    };
                    c = c.and(&aligned);
                }
                c
            }
        }
    }
}

/// Per-variable domains. Variables not listed range over their full width.
/// Instance suffixes (`k#1`) inherit the domain of the base name.
#[derive(Clone, Debug, Default)]
pub struct Domains {
    map: BTreeMap<String, Domain>,
}

impl Domains {
    pub fn set(&mut self, name: &str, d: Domain) {
        self.map.insert(name.to_string(), d);
    }

    pub fn get(&self, name: &str) -> Domain {
        let base = name.split('#').next().unwrap_or(name);
        self.map
            .get(name)
            .or_else(|| self.map.get(base))
            .copied()
            .unwrap_or(Domain::Full)
    }

    /// Conjunction of domain constraints for the free variables of `e`.
    pub fn constraints_for(&self, e: &Expr) -> Expr {
        let mut acc = Expr::tru();
        for (name, w) in e.free_vars() {
            acc = acc.and(&self.get(&name).constraint(&Expr::var(&name, w)));
        }
        acc
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Decides `assertion` (width 1) with every variable restricted to its
    /// domain.
    fn check(&self, assertion: &Expr, domains: &Domains) -> SatResult;

    /// Searches for two valuations of `secrets` that both satisfy `pcon` and
    /// disagree on `tau`, sharing every other variable. The returned model
    /// binds `<secret>#1` and `<secret>#2` plus the shared variables.
    fn diverge(
        &self,
        tau: &Expr,
        pcon: &Expr,
        secrets: &[(String, u32)],
        domains: &Domains,
    ) -> SatResult {
        let q = precise_formula(tau, pcon, secrets);
        self.check(&q, domains)
    }
}

/// Renames each secret `k` to `k#<suffix>`.
pub fn instantiate(e: &Expr, secrets: &[(String, u32)], suffix: u32) -> Expr {
    let map: HashMap<Arc<str>, Expr> = secrets
        .iter()
        .map(|(n, w)| {
            (
                Arc::from(n.as_str()),
                Expr::var(&format!("{n}#{suffix}"), *w),
            )
        })
        .collect();
    e.substitute(&map)
}

/// `pcon(K1) ∧ pcon(K2) ∧ K1 ≠ K2 ∧ (tau(K1) xor tau(K2))`.
pub fn precise_formula(tau: &Expr, pcon: &Expr, secrets: &[(String, u32)]) -> Expr {
    let differ = Expr::any(
        secrets
            .iter()
            .map(|(n, w)| Expr::var(&format!("{n}#1"), *w).ne_(&Expr::var(&format!("{n}#2"), *w)))
            .collect::<Vec<_>>()
            .iter(),
    );
    Expr::all(
        [
            instantiate(pcon, secrets, 1),
            instantiate(pcon, secrets, 2),
            differ,
            instantiate(tau, secrets, 1).xor(&instantiate(tau, secrets, 2)),
        ]
        .iter(),
    )
}

/// Exhaustive search over variable domains.
#[derive(Clone, Debug)]
pub struct Enumerative {
    /// Upper bound on the number of assignments tried per query.
    pub max_assignments: u128,
}

impl Default for Enumerative {
    fn default() -> Self {
        Enumerative {
            max_assignments: 1 << 24,
        }
    }
}

struct Space {
    vars: Vec<(Arc<str>, u32)>,
    doms: Vec<Domain>,
    sizes: Vec<u64>,
    total: u128,
}

impl Space {
    fn new(vars: Vec<(Arc<str>, u32)>, domains: &Domains) -> Space {
        let doms: Vec<Domain> = vars.iter().map(|(n, _)| domains.get(n)).collect();
        let sizes: Vec<u64> = vars
            .iter()
            .zip(&doms)
            .map(|((_, w), d)| d.len(*w).min(u64::MAX as u128) as u64)
            .collect();
        let total = sizes
            .iter()
            .fold(1u128, |acc, &s| acc.saturating_mul(s as u128));
        Space {
            vars,
            doms,
            sizes,
            total,
        }
    }

    /// Decodes a mixed-radix index; the last variable varies fastest.
    fn decode(&self, mut idx: u64, out: &mut [u64]) {
        for i in (0..self.vars.len()).rev() {
            let s = self.sizes[i];
            out[i] = self.doms[i].nth(idx % s);
            idx /= s;
        }
    }

    fn model(&self, values: &[u64]) -> Model {
        self.vars
            .iter()
            .zip(values)
            .map(|((n, _), v)| (n.to_string(), *v))
            .collect()
    }
}

const CHUNK: u64 = 4096;

impl Enumerative {
    fn too_large(&self, total: u128) -> Option<SatResult> {
        (total > self.max_assignments).then(|| {
            SatResult::Unknown(format!(
                "enumeration space of {total} assignments exceeds limit {}",
                self.max_assignments
            ))
        })
    }
}

impl Backend for Enumerative {
    fn name(&self) -> &'static str {
        "enumerative"
    }

    fn check(&self, assertion: &Expr, domains: &Domains) -> SatResult {
        assert_eq!(assertion.width(), 1, "assertion must have width 1");
        if let Some(c) = assertion.as_const() {
            return if c == 1 {
                SatResult::Sat(Model::new())
            } else {
                SatResult::Unsat
            };
        }
        let vars: Vec<(Arc<str>, u32)> = assertion.free_vars().into_iter().collect();
        let space = Space::new(vars, domains);
        if space.total == 0 {
            return SatResult::Unsat;
        }
        if let Some(r) = self.too_large(space.total) {
            return r;
        }
        let prog = Compiled::new(assertion, &space.vars);
        let n = space.vars.len();
        let hit = par::find_first(
            space.total as u64,
            CHUNK,
            || (vec![0u64; n], prog.scratch()),
            |(vals, scratch), i| {
                space.decode(i, vals);
                (prog.eval(vals, scratch) == 1).then(|| vals.clone())
            },
        );
        match hit {
            Some((_, vals)) => SatResult::Sat(space.model(&vals)),
            None => SatResult::Unsat,
        }
    }

    /// Splits the variables into shared ones and secrets, and for each shared
    /// assignment scans the secret space for one valuation where `tau` holds
    /// and one where it does not. Equivalent to checking the precise formula,
    /// without squaring the secret space.
    fn diverge(
        &self,
        tau: &Expr,
        pcon: &Expr,
        secrets: &[(String, u32)],
        domains: &Domains,
    ) -> SatResult {
        let both = tau.and(pcon);
        let free = both.free_vars();
        let secret_names: Vec<&str> = secrets.iter().map(|(n, _)| n.as_str()).collect();
        let shared_vars: Vec<(Arc<str>, u32)> = free
            .iter()
            .filter(|(n, _)| !secret_names.contains(&&***n))
            .map(|(n, w)| (n.clone(), *w))
            .chain(
                pcon.free_vars()
                    .into_iter()
                    .filter(|(n, _)| !secret_names.contains(&&**n) && !free.contains_key(n)),
            )
            .collect();
        let secret_vars: Vec<(Arc<str>, u32)> = secrets
            .iter()
            .map(|(n, w)| (Arc::from(n.as_str()), *w))
            .collect();
        let shared = Space::new(shared_vars, domains);
        let sec = Space::new(secret_vars, domains);
        if shared.total == 0 || sec.total < 2 {
            return SatResult::Unsat;
        }
        if let Some(r) = self
            .too_large(shared.total)
            .or_else(|| self.too_large(sec.total))
        {
            return r;
        }
        if let Some(r) = self.too_large(shared.total.saturating_mul(sec.total) >> 8) {
            return r;
        }
        let order: Vec<(Arc<str>, u32)> = shared.vars.iter().chain(&sec.vars).cloned().collect();
        let tau_c = Compiled::new(tau, &order);
        let pcon_c = Compiled::new(pcon, &order);
        let ns = shared.vars.len();
        let nk = sec.vars.len();

        // For one shared assignment: first secret index where tau holds and
        // first where it fails, both under pcon.
        let scan = |vals: &mut Vec<u64>,
                    st: &mut Vec<u64>,
                    sp: &mut Vec<u64>,
                    range: std::ops::Range<u64>| {
            let (mut t, mut f) = (None, None);
            for j in range {
                sec.decode(j, &mut vals[ns..]);
                if pcon_c.eval(vals, sp) != 1 {
                    continue;
                }
                if tau_c.eval(vals, st) == 1 {
                    t.get_or_insert(j);
                } else {
                    f.get_or_insert(j);
                }
                if t.is_some() && f.is_some() {
                    break;
                }
            }
            (t, f)
        };
        let to_model = |shared_idx: u64, a: u64, b: u64| {
            let mut vals = vec![0u64; ns + nk];
            shared.decode(shared_idx, &mut vals[..ns]);
            let mut m = shared.model(&vals[..ns]);
            let (first, second) = (a.min(b), a.max(b));
            for (suffix, j) in [(1, first), (2, second)] {
                sec.decode(j, &mut vals[ns..]);
                for ((n, _), v) in sec.vars.iter().zip(&vals[ns..]) {
                    m.insert(format!("{n}#{suffix}"), *v);
                }
            }
            m
        };

        if shared.total == 1 {
            // Single layout: parallelise across the secret space instead.
            let merged = par::fold_chunks(
                sec.total as u64,
                CHUNK,
                || (vec![0u64; ns + nk], tau_c.scratch(), pcon_c.scratch()),
                |(vals, st, sp), range| {
                    shared.decode(0, &mut vals[..ns]);
                    scan(vals, st, sp, range)
                },
                |(t1, f1), (t2, f2)| (t1.or(t2), f1.or(f2)),
            );
            return match merged {
                Some((Some(t), Some(f))) => SatResult::Sat(to_model(0, t, f)),
                _ => SatResult::Unsat,
            };
        }

        let hit = par::find_first(
            shared.total as u64,
            1,
            || (vec![0u64; ns + nk], tau_c.scratch(), pcon_c.scratch()),
            |(vals, st, sp), i| {
                shared.decode(i, &mut vals[..ns]);
                match scan(vals, st, sp, 0..sec.total as u64) {
                    (Some(t), Some(f)) => Some((t, f)),
                    _ => None,
                }
            },
        );
        match hit {
            Some((i, (t, f))) => SatResult::Sat(to_model(i, t, f)),
            None => SatResult::Unsat,
        }
    }
}

/// Serializes `assertion` as a self-contained QF_BV query. Every variable is
/// constrained to its domain; internal nodes become numbered `define-fun`s in
/// a fixed traversal order so identical inputs give identical text.
pub fn emit_query(assertion: &Expr, domains: &Domains) -> String {
    let full = assertion.and(&domains.constraints_for(assertion));
    emit_raw(&full)
}

fn quote(name: &str) -> String {
    format!("|{name}|")
}

fn sort(w: u32) -> String {
    format!("(_ BitVec {w})")
}

fn emit_raw(e: &Expr) -> String {
    let mut out = String::new();
    out.push_str("(set-logic QF_BV)\n(set-option :produce-models true)\n");
    for (name, w) in e.free_vars() {
        let _ = writeln!(out, "(declare-fun {} () {})", quote(&name), sort(w));
    }
    let mut names: HashMap<usize, String> = HashMap::new();
    let mut next = 0usize;
    for node in e.topo() {
        let r = |x: &Expr| names[&x.id()].clone();
        let as_bool = |x: &Expr| format!("(= {} #b1)", r(x));
        let of_bool = |b: String| format!("(ite {b} #b1 #b0)");
        let term = match node.node() {
            Node::Const { width, value } => {
                names.insert(node.id(), format!("(_ bv{value} {width})"));
                continue;
            }
            Node::Var { name, .. } => {
                names.insert(node.id(), quote(name));
                continue;
            }
            Node::Not(a) => format!("(bvnot {})", r(a)),
            Node::Bin(op, a, b) => {
                use crate::expr::BinOp::*;
                let f = match op {
                    Add => "bvadd",
                    Sub => "bvsub",
                    Mul => "bvmul",
                    And => "bvand",
                    Or => "bvor",
                    Xor => "bvxor",
                    Shl => "bvshl",
                    Lshr => "bvlshr",
                    Eq => "=",
                    Ult => "bvult",
                    Ule => "bvule",
                };
                let t = format!("({f} {} {})", r(a), r(b));
                if op.is_comparison() {
                    of_bool(t)
                } else {
                    t
                }
            }
            Node::Ite(c, a, b) => format!("(ite {} {} {})", as_bool(c), r(a), r(b)),
            Node::Zext(a, w) => format!("((_ zero_extend {}) {})", w - a.width(), r(a)),
            Node::Extract(a, hi, lo) => format!("((_ extract {hi} {lo}) {})", r(a)),
        };
        let name = format!("|_t{next}|");
        next += 1;
        let _ = writeln!(out, "(define-fun {name} () {} {term})", sort(node.width()));
        names.insert(node.id(), name);
    }
    let _ = writeln!(out, "(assert (= {} #b1))", names[&e.id()]);
    out.push_str("(check-sat)\n(get-model)\n");
    out
}

/// Minimal s-expression reader for solver responses.
#[derive(Clone, Debug, PartialEq)]
pub enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

pub fn parse_sexps(text: &str) -> Result<Vec<Sexp>, String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0;
    let mut out = Vec::new();
    fn skip_ws(c: &[char], p: &mut usize) {
        while *p < c.len() {
            if c[*p].is_whitespace() {
                *p += 1;
            } else if c[*p] == ';' {
                while *p < c.len() && c[*p] != '\n' {
                    *p += 1;
                }
            } else {
                break;
            }
        }
    }
    fn one(c: &[char], p: &mut usize) -> Result<Sexp, String> {
        skip_ws(c, p);
        match c.get(*p) {
            None => Err("unexpected end of input".into()),
            Some('(') => {
                *p += 1;
                let mut items = Vec::new();
                loop {
                    skip_ws(c, p);
                    match c.get(*p) {
                        None => return Err("unclosed list".into()),
                        Some(')') => {
                            *p += 1;
                            return Ok(Sexp::List(items));
                        }
                        _ => items.push(one(c, p)?),
                    }
                }
            }
            Some(')') => Err(format!("unexpected ')' at {p}")),
            Some('|') => {
                let start = *p + 1;
                *p = start;
                while *p < c.len() && c[*p] != '|' {
                    *p += 1;
                }
                let s: String = c[start..*p].iter().collect();
                *p += 1;
                Ok(Sexp::Atom(s))
            }
            Some('"') => {
                let start = *p;
                *p += 1;
                while *p < c.len() && c[*p] != '"' {
                    *p += 1;
                }
                *p += 1;
                Ok(Sexp::Atom(c[start..(*p).min(c.len())].iter().collect()))
            }
            _ => {
                let start = *p;
                while *p < c.len() && !c[*p].is_whitespace() && c[*p] != '(' && c[*p] != ')' {
                    *p += 1;
                }
                Ok(Sexp::Atom(c[start..*p].iter().collect()))
            }
        }
    }
    loop {
        skip_ws(&chars, &mut pos);
        if pos >= chars.len() {
            return Ok(out);
        }
        out.push(one(&chars, &mut pos)?);
    }
}

fn bv_literal(s: &Sexp) -> Option<u64> {
    match s {
        Sexp::Atom(a) => {
            if let Some(h) = a.strip_prefix("#x") {
                u64::from_str_radix(h, 16).ok()
            } else if let Some(b) = a.strip_prefix("#b") {
                u64::from_str_radix(b, 2).ok()
            } else {
                None
            }
        }
        Sexp::List(items) => match items.as_slice() {
            [Sexp::Atom(u), Sexp::Atom(bv), _] if u == "_" => bv.strip_prefix("bv")?.parse().ok(),
            _ => None,
        },
    }
}

/// Parses `sat`/`unsat`/`unknown` followed by an optional model.
pub fn parse_response(text: &str) -> SatResult {
    let sexps = match parse_sexps(text) {
        Ok(s) => s,
        Err(e) => return SatResult::Unknown(format!("unparsable solver output: {e}")),
    };
    let mut it = sexps.into_iter();
    match it.next() {
        Some(Sexp::Atom(a)) if a == "unsat" => SatResult::Unsat,
        Some(Sexp::Atom(a)) if a == "sat" => {
            let mut model = Model::new();
            if let Some(Sexp::List(defs)) = it.next() {
                for d in defs {
                    if let Sexp::List(parts) = d {
                        // (define-fun name () sort value)
                        if let [Sexp::Atom(kw), Sexp::Atom(name), _, _, value] = parts.as_slice() {
                            if kw == "define-fun" && !name.starts_with("_t") {
                                if let Some(v) = bv_literal(value) {
                                    model.insert(name.clone(), v);
                                }
                            }
                        }
                    }
                }
            }
            SatResult::Sat(model)
        }
        Some(Sexp::Atom(a)) if a == "unknown" => {
            SatResult::Unknown("solver answered unknown".into())
        }
        other => SatResult::Unknown(format!("unexpected solver output: {other:?}")),
    }
}

/// An SMT solver executable speaking SMT-LIB2 over stdin/stdout.
#[derive(Clone, Debug)]
pub struct ExternalSmt {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ExternalSmt {
    /// `command` is the executable followed by optional whitespace-separated
    /// arguments. A bare `z3` gets `-in` so it reads stdin.
    pub fn new(command: &str, timeout: Duration) -> ExternalSmt {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = PathBuf::from(parts.next().unwrap_or_default());
        let mut args: Vec<String> = parts.collect();
        if args.is_empty() && program.file_name().is_some_and(|f| f == "z3") {
            args.push("-in".into());
        }
        ExternalSmt {
            program,
            args,
            timeout,
        }
    }

    pub fn run(&self, query: &str) -> SatResult {
        let mut child = match Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => {
                return SatResult::Unknown(format!("cannot start {}: {e}", self.program.display()))
            }
        };
        if let Some(mut stdin) = child.stdin.take() {
            if let Err(e) = stdin.write_all(query.as_bytes()) {
                let _ = child.kill();
                return SatResult::Unknown(format!("writing query: {e}"));
            }
        }
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let start = Instant::now();
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return SatResult::Unknown("timeout".into());
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(2)),
                Err(e) => return SatResult::Unknown(format!("waiting for solver: {e}")),
            }
        }
        let text = reader.join().unwrap_or_default();
        parse_response(&text)
    }
}

impl Backend for ExternalSmt {
    fn name(&self) -> &'static str {
        "smtlib"
    }

    fn check(&self, assertion: &Expr, domains: &Domains) -> SatResult {
        if let Some(c) = assertion.as_const() {
            return if c == 1 {
                SatResult::Sat(Model::new())
            } else {
                SatResult::Unsat
            };
        }
        let vars = assertion.free_vars();
        match self.run(&emit_query(assertion, domains)) {
            SatResult::Sat(mut m) => {
                // Unconstrained variables may be omitted from the model.
                for (n, _) in vars {
                    m.entry(n.to_string()).or_insert(0);
                }
                SatResult::Sat(m)
            }
            other => other,
        }
    }
}

/// Path of a usable `z3` binary, if one is installed.
pub fn find_z3() -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join("z3"))
        .find(|p| p.is_file())
}

/// A backend bound to one program's variable domains, counting the queries
/// it answers.
pub struct Session {
    pub backend: Box<dyn Backend>,
    pub domains: Domains,
    calls: AtomicU64,
    unknown: AtomicU64,
}

impl Session {
    pub fn new(backend: Box<dyn Backend>, domains: Domains) -> Session {
        Session {
            backend,
            domains,
            calls: AtomicU64::new(0),
            unknown: AtomicU64::new(0),
        }
    }

    /// Satisfiability of `e`; `None` when the backend gave up. Constant
    /// formulas are answered without a query.
    pub fn sat(&self, e: &Expr) -> Option<bool> {
        if let Some(v) = e.as_const() {
            return Some(v == 1);
        }
        match self.check(e) {
            SatResult::Sat(_) => Some(true),
            SatResult::Unsat => Some(false),
            SatResult::Unknown(_) => None,
        }
    }

    pub fn check(&self, e: &Expr) -> SatResult {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let r = self.backend.check(e, &self.domains);
        if matches!(r, SatResult::Unknown(_)) {
            self.unknown.fetch_add(1, Ordering::Relaxed);
        }
        r
    }

    pub fn diverge(&self, tau: &Expr, pcon: &Expr, secrets: &[(String, u32)]) -> SatResult {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let r = self.backend.diverge(tau, pcon, secrets, &self.domains);
        if matches!(r, SatResult::Unknown(_)) {
            self.unknown.fetch_add(1, Ordering::Relaxed);
        }
        r
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn unknowns(&self) -> u64 {
        self.unknown.load(Ordering::Relaxed)
    }
}
