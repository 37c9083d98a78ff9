//! Unsigned interval over-approximation of bit-vector expressions, used to
//! skip solver calls that are decidable from simple bounds.

use std::collections::HashMap;
use std::sync::Arc;

use crate::expr::{mask, BinOp, Expr, Node};
use crate::solver::{Domain, Domains};

/// Inclusive `[lo, hi]`.
pub type Range = (u64, u64);

/// Per-variable bounds gathered from domains and path-condition conjuncts.
#[derive(Clone, Debug, Default)]
pub struct Bounds {
    vars: HashMap<Arc<str>, Range>,
}

fn conjuncts(e: &Expr, out: &mut Vec<Expr>) {
    match e.node() {
        Node::Bin(BinOp::And, a, b) if e.width() == 1 => {
            conjuncts(a, out);
            conjuncts(b, out);
        }
        _ => out.push(e.clone()),
    }
}

/// Variable underneath zero-extensions.
fn base_var(e: &Expr) -> Option<(Arc<str>, u32)> {
    match e.node() {
        Node::Var { name, width } => Some((name.clone(), *width)),
        Node::Zext(inner, _) => base_var(inner),
        _ => None,
    }
}

impl Bounds {
    pub fn new(pcon: &Expr, domains: &Domains) -> Bounds {
        let mut b = Bounds::default();
        for (name, w) in pcon.free_vars() {
            b.vars
                .insert(name.clone(), domain_range(domains.get(&name), w));
        }
        let mut cs = Vec::new();
        conjuncts(pcon, &mut cs);
        for c in cs {
            b.tighten(&c, false);
        }
        b
    }

    fn narrow(&mut self, name: Arc<str>, width: u32, lo: u64, hi: u64) {
        let r = self.vars.entry(name).or_insert((0, mask(width)));
        r.0 = r.0.max(lo);
        r.1 = r.1.min(hi);
    }

    fn tighten(&mut self, c: &Expr, negated: bool) {
        match c.node() {
            Node::Not(inner) => self.tighten(inner, !negated),
            Node::Bin(op @ (BinOp::Ule | BinOp::Ult | BinOp::Eq), a, b) => {
                let (op, a, b) = (*op, a.clone(), b.clone());
                if let (Some((n, w)), Some(k)) = (base_var(&a), b.as_const()) {
                    match (op, negated) {
                        (BinOp::Ule, false) => self.narrow(n, w, 0, k),
                        (BinOp::Ult, false) if k > 0 => self.narrow(n, w, 0, k - 1),
                        (BinOp::Ule, true) => self.narrow(n, w, k.saturating_add(1), u64::MAX),
                        (BinOp::Ult, true) => self.narrow(n, w, k, u64::MAX),
                        (BinOp::Eq, false) => self.narrow(n, w, k, k),
                        _ => {}
                    }
                } else if let (Some(k), Some((n, w))) = (a.as_const(), base_var(&b)) {
                    match (op, negated) {
                        (BinOp::Ule, false) => self.narrow(n, w, k, u64::MAX),
                        (BinOp::Ult, false) => self.narrow(n, w, k.saturating_add(1), u64::MAX),
                        (BinOp::Ule, true) if k > 0 => self.narrow(n, w, 0, k - 1),
                        (BinOp::Ult, true) => self.narrow(n, w, 0, k),
                        (BinOp::Eq, false) => self.narrow(n, w, k, k),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }

    pub fn var(&self, name: &str, width: u32) -> Range {
        self.vars.get(name).copied().unwrap_or((0, mask(width)))
    }

    /// Whether some variable has an empty range (the path is infeasible).
    pub fn is_empty(&self) -> bool {
        self.vars.values().any(|(lo, hi)| lo > hi)
    }
}

fn domain_range(d: Domain, width: u32) -> Range {
    match d {
        Domain::Full => (0, mask(width)),
        Domain::Fixed(v) => (v, v),
        Domain::Stride { lo, step, .. } => {
            let n = d.len(width) as u64;
            if n == 0 {
                (1, 0)
            } else {
                (lo, lo + (n - 1) * step)
            }
        }
    }
}

fn bit_cover(hi: u64) -> u64 {
    if hi == 0 {
        0
    } else {
        u64::MAX >> hi.leading_zeros()
    }
}

/// Over-approximates the values `e` can take.
pub fn range_of(e: &Expr, b: &Bounds) -> Range {
    let mut memo = HashMap::new();
    go(e, b, &mut memo)
}

fn go(e: &Expr, b: &Bounds, memo: &mut HashMap<usize, Range>) -> Range {
    if let Some(r) = memo.get(&e.id()) {
        return *r;
    }
    let w = e.width();
    let full = (0, mask(w));
    let r = match e.node() {
        Node::Const { value, .. } => (*value, *value),
        Node::Var { name, width } => b.var(name, *width),
        Node::Zext(a, _) => go(a, b, memo),
        Node::Extract(a, hi, 0) => {
            let r = go(a, b, memo);
            if r.1 <= mask(hi + 1) {
                r
            } else {
                full
            }
        }
        Node::Ite(_, t, f) => {
            let (x, y) = (go(t, b, memo), go(f, b, memo));
            (x.0.min(y.0), x.1.max(y.1))
        }
        Node::Bin(op, x, y) if !op.is_comparison() => {
            let (p, q) = (go(x, b, memo), go(y, b, memo));
            let m = mask(w) as u128;
            let fits = |lo: u128, hi: u128| {
                if hi <= m {
                    (lo as u64, hi as u64)
                } else {
                    full
                }
            };
            match op {
                BinOp::Add => fits(p.0 as u128 + q.0 as u128, p.1 as u128 + q.1 as u128),
                BinOp::Sub if p.0 >= q.1 => (p.0 - q.1, p.1 - q.0),
                BinOp::Mul => fits(p.0 as u128 * q.0 as u128, p.1 as u128 * q.1 as u128),
                BinOp::Shl if q.1 < 64 => fits((p.0 as u128) << q.0, (p.1 as u128) << q.1),
                BinOp::Lshr if q.1 < 64 => (p.0 >> q.1, p.1 >> q.0.min(63)),
                BinOp::And => (0, p.1.min(q.1)),
                BinOp::Or | BinOp::Xor => (0, bit_cover(p.1.max(q.1)) & mask(w)),
                _ => full,
            }
        }
        _ => full,
    };
    memo.insert(e.id(), r);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_bounds_flow_into_addresses() {
        let k = Expr::var("k", 8);
        let pcon = k.ule(&Expr::constant(8, 127));
        let b = Bounds::new(&pcon, &Domains::default());
        assert_eq!(b.var("k", 8), (0, 127));
        let addr = Expr::word(257).add(&Expr::word(255).sub(&k.zext(32)));
        assert_eq!(range_of(&addr, &b), (385, 512));
        let neg = Bounds::new(&pcon.not(), &Domains::default());
        assert_eq!(neg.var("k", 8), (128, 255));
    }

    #[test]
    fn domains_bound_variables() {
        let mut d = Domains::default();
        d.set(
            "a",
            Domain::Stride {
                lo: 0,
                hi: 256,
                step: 64,
            },
        );
        let a = Expr::var("a", 32);
        let b = Bounds::new(&a.ule(&Expr::word(1000)), &d);
        assert_eq!(range_of(&a.add(&Expr::word(3)), &b), (3, 195));
    }
}
