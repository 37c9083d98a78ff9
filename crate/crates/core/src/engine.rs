//! Symbolic execution of the concurrent IR.
//!
//! A state advances in two kinds of steps. Local work (assignments, branch
//! decisions, assumptions) is settled eagerly for every thread, lowest tid
//! first and the true arm before the false arm. Memory accesses are the only
//! scheduling points: the explorer picks which thread's pending access runs
//! next.

use std::collections::HashMap;

use crate::cache::{AccessKind, AccessRecord, CacheConfig};
use crate::expr::{mask, Expr};
use crate::ir::{
    DeclKind, Declaration, IrBinOp, IrExpr, IrUnOp, Placement, Program, Sensitivity, Site, Stmt,
};
use crate::solver::{Domain, Domains, Session};

/// Lowers an IR expression to a 32-bit term. `lookup` resolves identifiers.
pub fn lower(e: &IrExpr, lookup: &dyn Fn(&str) -> Expr) -> Expr {
    match e {
        IrExpr::Lit(v) => Expr::word(v & mask(32)),
        IrExpr::Ident(n) => lookup(n),
        IrExpr::Un(op, a) => {
            let a = lower(a, lookup);
            match op {
                IrUnOp::Not => a.not(),
                IrUnOp::LNot => a.eq_(&Expr::word(0)).zext(32),
                IrUnOp::Neg => Expr::word(0).sub(&a),
            }
        }
        IrExpr::Bin(op, a, b) => {
            let (a, b) = (lower(a, lookup), lower(b, lookup));
            match op {
                IrBinOp::Add => a.add(&b),
                IrBinOp::Sub => a.sub(&b),
                IrBinOp::Mul => a.mul(&b),
                IrBinOp::And => a.and(&b),
                IrBinOp::Or => a.or(&b),
                IrBinOp::Xor => a.xor(&b),
                IrBinOp::Shl => a.shl(&b),
                IrBinOp::Shr => a.lshr(&b),
                IrBinOp::Eq => a.eq_(&b).zext(32),
                IrBinOp::Ne => a.ne_(&b).zext(32),
                IrBinOp::Lt => a.ult(&b).zext(32),
                IrBinOp::Le => a.ule(&b).zext(32),
                IrBinOp::Gt => b.ult(&a).zext(32),
                IrBinOp::Ge => b.ule(&a).zext(32),
            }
        }
    }
}

/// Truth value (width 1) of a lowered condition.
pub fn truth(c: &Expr) -> Expr {
    c.ne_(&Expr::word(0))
}

/// Value of an input variable as a 32-bit term.
fn input_term(name: &str, width: u32) -> Expr {
    Expr::var(name, width).zext(32)
}

/// Initial contents of element `idx` of `d`: table contents, input
/// variables for secret/public declarations, zero otherwise. Indices
/// outside the declaration read zero.
pub fn initial_value(d: &Declaration, idx: &Expr) -> Expr {
    let elem = |i: u32| -> Expr {
        match (&d.init, d.sensitivity) {
            (Some(vals), _) => Expr::word(vals[i as usize] & mask(d.elem_bits().min(32))),
            (None, Sensitivity::Secret | Sensitivity::Public(_)) => {
                input_term(&d.element_var(i), d.elem_bits())
            }
            (None, Sensitivity::Derived) => Expr::word(0),
        }
    };
    if d.init.is_none() && d.sensitivity == Sensitivity::Derived {
        return Expr::word(0);
    }
    if let Some(i) = idx.as_const() {
        return if i < d.length as u64 {
            elem(i as u32)
        } else {
            Expr::word(0)
        };
    }
    let mut acc = Expr::word(0);
    for i in (0..d.length).rev() {
        let c = idx.eq_(&Expr::word(i as u64));
        if !c.is_false() {
            acc = Expr::ite(&c, &elem(i), &acc);
        }
    }
    acc
}

/// Solver domains for a program: fixed publics and windowed symbolic bases.
pub fn domains_for(prog: &Program, cfg: &CacheConfig) -> Domains {
    let mut d = Domains::default();
    for (v, x) in prog.public_inputs() {
        d.set(&v.name, Domain::Fixed(x & mask(v.width)));
    }
    for decl in &prog.decls {
        if let Placement::Symbolic { window } = decl.placement {
            let (lo, hi) = window.unwrap_or((0, 4 * cfg.cache_size));
            let step = decl.elem_size as u64;
            let lo = lo.div_ceil(step) * step;
            let hi = hi.min((1u64 << 32) - decl.bytes() + 1);
            d.set(&decl.base_var(), Domain::Stride { lo, hi, step });
        }
    }
    d
}

/// Byte address of element `idx` of `d`.
pub fn address(d: &Declaration, idx: &Expr) -> Expr {
    let base = match d.placement {
        Placement::Fixed(b) => Expr::word(b),
        Placement::Symbolic { .. } => Expr::var(&d.base_var(), 32),
    };
    base.add(&idx.mul(&Expr::word(d.elem_size as u64)))
}

#[derive(Clone, Debug)]
pub struct ThreadState {
    pub tid: u32,
    pub critical: bool,
    regs: HashMap<String, Expr>,
    /// Remaining statements, next one last.
    pending: Vec<Stmt>,
}

impl ThreadState {
    pub fn next_stmt(&self) -> Option<&Stmt> {
        self.pending.last()
    }

    pub fn reg(&self, name: &str) -> Option<&Expr> {
        self.regs.get(name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchRecord {
    pub tid: u32,
    pub site: Site,
    pub taken: bool,
}

#[derive(Clone, Debug)]
pub struct SymbolicState {
    pub threads: Vec<ThreadState>,
    pub pcon: Expr,
    pub trace: Vec<AccessRecord>,
    /// `(address, value)` of every store so far, oldest first.
    pub stores: Vec<(Expr, Expr)>,
    pub branches: Vec<BranchRecord>,
    /// Thread of each executed access, in order.
    pub schedule: Vec<u32>,
}

impl SymbolicState {
    pub fn thread(&self, tid: u32) -> &ThreadState {
        self.threads
            .iter()
            .find(|t| t.tid == tid)
            .expect("known thread")
    }

    pub fn is_final(&self) -> bool {
        self.threads.iter().all(|t| t.pending.is_empty())
    }
}

/// Executes one (loop-free) program symbolically.
pub struct Machine<'a> {
    pub prog: &'a Program,
    pub cfg: CacheConfig,
    pub session: &'a Session,
    pub secrets: Vec<(String, u32)>,
    inputs: HashMap<String, u32>,
}

impl<'a> Machine<'a> {
    pub fn new(prog: &'a Program, cfg: CacheConfig, session: &'a Session) -> Machine<'a> {
        assert!(
            prog.is_loop_free(),
            "unroll loops before symbolic execution"
        );
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
        let secrets = prog
            .secret_inputs()
            .into_iter()
            .map(|v| (v.name, v.width))
            .collect();
        Machine {
            prog,
            cfg,
            session,
            secrets,
            inputs,
        }
    }

    /// Whether `pcon` may hold; unknown answers count as feasible.
    pub fn feasible(&self, pcon: &Expr) -> bool {
        self.session.sat(pcon).unwrap_or(true)
    }

    pub fn eval(&self, th: &ThreadState, e: &IrExpr) -> Expr {
        lower(e, &|n| {
            if let Some(v) = th.regs.get(n) {
                v.clone()
            } else if let Some(w) = self.inputs.get(n) {
                input_term(n, *w)
            } else {
                Expr::word(0)
            }
        })
    }

    pub fn initial_states(&self) -> Vec<SymbolicState> {
        let mut threads: Vec<ThreadState> = self
            .prog
            .threads
            .iter()
            .map(|t| ThreadState {
                tid: t.tid,
                critical: t.critical,
                regs: HashMap::new(),
                pending: t.body.iter().rev().cloned().collect(),
            })
            .collect();
        threads.sort_by_key(|t| t.tid);
        self.settle(SymbolicState {
            threads,
            pcon: Expr::tru(),
            trace: Vec::new(),
            stores: Vec::new(),
            branches: Vec::new(),
            schedule: Vec::new(),
        })
    }

    /// Threads whose next statement is a memory access, ascending.
    pub fn enabled_events(&self, s: &SymbolicState) -> Vec<u32> {
        s.threads
            .iter()
            .filter(|t| !t.pending.is_empty())
            .map(|t| t.tid)
            .collect()
    }

    /// The access thread `tid` would perform next.
    pub fn peek_access(&self, s: &SymbolicState, tid: u32) -> AccessRecord {
        let th = s.thread(tid);
        self.access_of(s, th).0
    }

    fn access_of(&self, s: &SymbolicState, th: &ThreadState) -> (AccessRecord, usize, Expr) {
        let (kind, array, index, pos) = match th.pending.last() {
            Some(Stmt::Load {
                array, index, pos, ..
            }) => (AccessKind::Load, array, index, pos),
            Some(Stmt::Store {
                array, index, pos, ..
            }) => (AccessKind::Store, array, index, pos),
            other => panic!("thread {} has no pending access: {other:?}", th.tid),
        };
        let di = self.prog.decl_index(array).expect("validated declaration");
        let idx = self.eval(th, index);
        let rec = AccessRecord {
            tid: th.tid,
            kind,
            addr: address(&self.prog.decls[di], &idx),
            pcon: s.pcon.clone(),
            site: pos.site(),
            decl: di,
        };
        (rec, di, idx)
    }

    /// Value read by a load from `addr`: the latest store that may alias,
    /// falling back to the initial contents.
    fn read(&self, s: &SymbolicState, d: &Declaration, idx: &Expr, addr: &Expr) -> Expr {
        let mut v = initial_value(d, idx);
        for (a, val) in &s.stores {
            let c = a.eq_(addr);
            if c.is_true() {
                v = val.clone();
            } else if !c.is_false() {
                v = Expr::ite(&c, val, &v);
            }
        }
        v
    }

    /// Runs the pending access of `tid`, then settles local work.
    pub fn next_symbolic_state(&self, s: &SymbolicState, tid: u32) -> Vec<SymbolicState> {
        let ti = s
            .threads
            .iter()
            .position(|t| t.tid == tid)
            .expect("known thread");
        let (rec, di, idx) = self.access_of(s, &s.threads[ti]);
        let d = &self.prog.decls[di];
        let width_mask = Expr::word(mask(d.elem_bits().min(32)));
        let mut n = s.clone();
        let stmt = n.threads[ti].pending.pop().expect("pending access");
        match stmt {
            Stmt::Load { dst, .. } => {
                let v = self.read(s, d, &idx, &rec.addr).and(&width_mask);
                n.threads[ti].regs.insert(dst, v);
            }
            Stmt::Store { value, .. } => {
                let v = self.eval(&s.threads[ti], &value).and(&width_mask);
                n.stores.push((rec.addr.clone(), v));
            }
            _ => unreachable!(),
        }
        n.trace.push(rec);
        n.schedule.push(tid);
        self.settle(n)
    }

    fn settle(&self, s: SymbolicState) -> Vec<SymbolicState> {
        let mut work = vec![s];
        for ti in 0..work[0].threads.len() {
            let mut next = Vec::new();
            for st in work {
                self.settle_thread(st, ti, &mut next);
            }
            work = next;
        }
        work
    }

    fn settle_thread(&self, mut s: SymbolicState, ti: usize, out: &mut Vec<SymbolicState>) {
        loop {
            let th = &s.threads[ti];
            match th.pending.last() {
                None | Some(Stmt::Load { .. }) | Some(Stmt::Store { .. }) => {
                    out.push(s);
                    return;
                }
                Some(Stmt::Assign { dst, value, .. }) => {
                    let v = self.eval(th, value);
                    let dst = dst.clone();
                    let th = &mut s.threads[ti];
                    th.pending.pop();
                    th.regs.insert(dst, v);
                }
                Some(Stmt::Assume { cond, pos }) => {
                    // A false assumption halts the thread; what it already
                    // did still counts.
                    let (c, site) = (truth(&self.eval(th, cond)), pos.site());
                    let tid = th.tid;
                    let halted = s.pcon.and(&c.not());
                    if !halted.is_false() && self.feasible(&halted) {
                        let mut h = s.clone();
                        h.pcon = halted;
                        h.threads[ti].pending.clear();
                        h.branches.push(BranchRecord {
                            tid,
                            site,
                            taken: false,
                        });
                        out.push(h);
                    }
                    let pc = s.pcon.and(&c);
                    if pc.is_false() || !self.feasible(&pc) {
                        return;
                    }
                    s.pcon = pc;
                    s.threads[ti].pending.pop();
                    s.branches.push(BranchRecord {
                        tid,
                        site,
                        taken: true,
                    });
                }
                Some(Stmt::If { .. }) => {
                    let Some(Stmt::If {
                        cond,
                        then_body,
                        else_body,
                        pos,
                    }) = s.threads[ti].pending.pop()
                    else {
                        unreachable!()
                    };
                    let c = truth(&self.eval(&s.threads[ti], &cond));
                    for (taken, arm) in [(true, &then_body), (false, &else_body)] {
                        let pc = s.pcon.and(&if taken { c.clone() } else { c.not() });
                        if pc.is_false() || !self.feasible(&pc) {
                            continue;
                        }
                        let mut b = s.clone();
                        b.pcon = pc;
                        b.threads[ti].pending.extend(arm.iter().rev().cloned());
                        b.branches.push(BranchRecord {
                            tid: b.threads[ti].tid,
                            site: pos.site(),
                            taken,
                        });
                        self.settle_thread(b, ti, out);
                    }
                    return;
                }
                Some(Stmt::For { .. }) | Some(Stmt::While { .. }) => {
                    panic!("loops must be unrolled before symbolic execution")
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;
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

    fn session(p: &Program, cfg: &CacheConfig) -> Session {
        Session::new(Box::new(Enumerative::default()), domains_for(p, cfg))
    }

    #[test]
    fn branches_split_states_true_arm_first() {
        let p = parse_program(CONCURRENT).unwrap();
        let cfg = CacheConfig::preset("direct-512b").unwrap();
        let s = session(&p, &cfg);
        let m = Machine::new(&p, cfg, &s);
        let init = m.initial_states();
        assert_eq!(init.len(), 2);
        assert!(init[0].branches[0].taken);
        assert!(!init[1].branches[0].taken);
        assert_eq!(m.enabled_events(&init[0]), vec![1, 2]);
        let a = m.peek_access(&init[0], 1);
        assert_eq!(a.site, Site::line(6));
        let kv = |v: u64| move |n: &str| (n == "k").then_some(v);
        assert_eq!(a.addr.eval(&kv(0)), 257 + 255);
        assert_eq!(a.addr.eval(&kv(100)), 257 + 155);
    }

    #[test]
    fn runs_to_completion_with_four_accesses() {
        let p = parse_program(CONCURRENT).unwrap();
        let cfg = CacheConfig::preset("direct-512b").unwrap();
        let s = session(&p, &cfg);
        let m = Machine::new(&p, cfg, &s);
        let mut st = m.initial_states().remove(0);
        for tid in [1, 1, 2, 1] {
            st = m.next_symbolic_state(&st, tid).remove(0);
        }
        assert!(st.is_final());
        let sites: Vec<u32> = st.trace.iter().map(|r| r.site.line).collect();
        assert_eq!(sites, vec![6, 9, 13, 11]);
        assert_eq!(st.stores.len(), 1);
    }

    #[test]
    fn table_contents_and_store_forwarding() {
        let p = parse_program(
            "array S [4] elem 1 at 0 = { 2, 3, 0, 1 }\ninput x width 2 secret\narray m [4] elem 1 at 8\n\
             thread 1 { load a, S[x]\n store m[1], a + 1\n load b, m[x]\n load c, m[1] }",
        )
        .unwrap();
        let cfg = CacheConfig::preset("direct-512b").unwrap();
        let s = session(&p, &cfg);
        let m = Machine::new(&p, cfg, &s);
        let mut st = m.initial_states().remove(0);
        for _ in 0..4 {
            st = m.next_symbolic_state(&st, 1).remove(0);
        }
        let th = st.thread(1);
        for xv in 0..4u64 {
            let env = |n: &str| (n == "x").then_some(xv);
            let a = [2, 3, 0, 1][xv as usize];
            assert_eq!(th.reg("a").unwrap().eval(&env), a);
            assert_eq!(th.reg("c").unwrap().eval(&env), a + 1);
            assert_eq!(
                th.reg("b").unwrap().eval(&env),
                if xv == 1 { a + 1 } else { 0 }
            );
        }
    }

    #[test]
    fn infeasible_arms_are_dropped() {
        let p = parse_program("input n width 8 public = 3\narray a [4] elem 1 at 0\nthread 1 { if n > 5 { load r, a[0] } else { load r, a[1] } }")
            .unwrap();
        let cfg = CacheConfig::default();
        let s = session(&p, &cfg);
        let m = Machine::new(&p, cfg, &s);
        let init = m.initial_states();
        assert_eq!(init.len(), 1);
        assert!(!init[0].branches[0].taken);
    }

    #[test]
    fn false_assumption_halts_the_thread() {
        let p = parse_program("input k width 2 secret\narray a [4] elem 1 at 0\nthread 1 { load r, a[0]\n assume k != 2\n load r, a[1] }")
            .unwrap();
        let cfg = CacheConfig::default();
        let s = session(&p, &cfg);
        let m = Machine::new(&p, cfg, &s);
        let st = m.initial_states().remove(0);
        let next = m.next_symbolic_state(&st, 1);
        assert_eq!(next.len(), 2);
        let halted = next
            .iter()
            .find(|n| m.enabled_events(n).is_empty())
            .unwrap();
        assert_eq!(halted.pcon.eval(&|_| Some(2)), 1);
        assert_eq!(halted.pcon.eval(&|_| Some(1)), 0);
        assert_eq!(halted.trace.len(), 1);
    }
}
