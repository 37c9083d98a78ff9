//! Fixed-width bitvector expressions.
//!
//! Every [`Expr`] is hash-consed through a global interner, so two
//! structurally equal expressions are the same allocation and equality is a
//! pointer comparison. The smart constructors fold constants and apply a
//! handful of local rewrites; they never change the value an expression
//! denotes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, LazyLock, Mutex};

/// Binary operators. Comparisons produce width 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Lshr,
    Eq,
    Ult,
    Ule,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ult | BinOp::Ule)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Shl => "<<",
            BinOp::Lshr => ">>",
            BinOp::Eq => "==",
            BinOp::Ult => "<",
            BinOp::Ule => "<=",
        }
    }

    /// Applies the operator to two values already masked to `width`.
    pub fn apply(self, width: u32, a: u64, b: u64) -> u64 {
        let m = mask(width);
        match self {
            BinOp::Add => a.wrapping_add(b) & m,
            BinOp::Sub => a.wrapping_sub(b) & m,
            BinOp::Mul => a.wrapping_mul(b) & m,
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= width as u64 {
                    0
                } else {
                    (a << b) & m
                }
            }
            BinOp::Lshr => {
                if b >= width as u64 {
                    0
                } else {
                    a >> b
                }
            }
            BinOp::Eq => (a == b) as u64,
            BinOp::Ult => (a < b) as u64,
            BinOp::Ule => (a <= b) as u64,
        }
    }
}

pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

#[derive(Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Const {
        width: u32,
        value: u64,
    },
    Var {
        name: Arc<str>,
        width: u32,
    },
    /// Bitwise complement (logical negation at width 1).
    Not(Expr),
    Bin(BinOp, Expr, Expr),
    Ite(Expr, Expr, Expr),
    Zext(Expr, u32),
    /// Bits `hi..=lo` of the operand.
    Extract(Expr, u32, u32),
}

/// Shared handle to an interned expression node.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (Arc::as_ptr(&self.0) as usize).hash(state)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

static INTERNER: LazyLock<Mutex<HashSet<Arc<Node>>>> = LazyLock::new(Default::default);

fn intern(node: Node) -> Expr {
    let mut table = INTERNER.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(existing) = table.get(&node) {
        return Expr(existing.clone());
    }
    let arc = Arc::new(node);
    table.insert(arc.clone());
    Expr(arc)
}

impl Expr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    /// Stable identity of the node for memo tables.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn width(&self) -> u32 {
        match self.node() {
            Node::Const { width, .. } | Node::Var { width, .. } => *width,
            Node::Not(a) => a.width(),
            Node::Bin(op, a, _) => {
                if op.is_comparison() {
                    1
                } else {
                    a.width()
                }
            }
            Node::Ite(_, a, _) => a.width(),
            Node::Zext(_, w) => *w,
            Node::Extract(_, hi, lo) => hi - lo + 1,
        }
    }

    pub fn constant(width: u32, value: u64) -> Expr {
        assert!((1..=64).contains(&width), "unsupported width {width}");
        intern(Node::Const {
            width,
            value: value & mask(width),
        })
    }

    pub fn word(value: u64) -> Expr {
        Expr::constant(32, value)
    }

    pub fn tru() -> Expr {
        Expr::constant(1, 1)
    }

    pub fn fals() -> Expr {
        Expr::constant(1, 0)
    }

    pub fn boolean(b: bool) -> Expr {
        Expr::constant(1, b as u64)
    }

    pub fn var(name: &str, width: u32) -> Expr {
        assert!((1..=64).contains(&width), "unsupported width {width}");
        intern(Node::Var {
            name: Arc::from(name),
            width,
        })
    }

    pub fn as_const(&self) -> Option<u64> {
        match self.node() {
            Node::Const { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn is_true(&self) -> bool {
        self.width() == 1 && self.as_const() == Some(1)
    }

    pub fn is_false(&self) -> bool {
        self.width() == 1 && self.as_const() == Some(0)
    }

    pub fn var_name(&self) -> Option<&str> {
        match self.node() {
            Node::Var { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn not(&self) -> Expr {
        match self.node() {
            Node::Const { width, value } => Expr::constant(*width, !value),
            Node::Not(inner) => inner.clone(),
            Node::Bin(BinOp::Ult, a, b) if self.width() == 1 => Expr::bin(BinOp::Ule, b, a),
            Node::Bin(BinOp::Ule, a, b) if self.width() == 1 => Expr::bin(BinOp::Ult, b, a),
            _ => intern(Node::Not(self.clone())),
        }
    }

    pub fn bin(op: BinOp, a: &Expr, b: &Expr) -> Expr {
        let w = a.width();
        assert_eq!(
            w,
            b.width(),
            "width mismatch in {op:?}: {a} ({w}) vs {b} ({})",
            b.width()
        );
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let r = op.apply(w, x, y);
            return if op.is_comparison() {
                Expr::constant(1, r)
            } else {
                Expr::constant(w, r)
            };
        }
        let all = mask(w);
        let (ca, cb) = (a.as_const(), b.as_const());
        match op {
            BinOp::Add => {
                if ca == Some(0) {
                    return b.clone();
                }
                if cb == Some(0) {
                    return a.clone();
                }
                // (x + c1) + c2 -> x + (c1 + c2)
                if let (Some(c2), Node::Bin(BinOp::Add, x, c1)) = (cb, a.node()) {
                    if let Some(c1) = c1.as_const() {
                        return Expr::bin(BinOp::Add, x, &Expr::constant(w, c1.wrapping_add(c2)));
                    }
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::Add, b, a);
                }
            }
            BinOp::Sub => {
                if cb == Some(0) {
                    return a.clone();
                }
                if a == b {
                    return Expr::constant(w, 0);
                }
                if let Some(c) = cb {
                    return Expr::bin(BinOp::Add, a, &Expr::constant(w, c.wrapping_neg()));
                }
            }
            BinOp::Mul => {
                if ca == Some(0) || cb == Some(0) {
                    return Expr::constant(w, 0);
                }
                if ca == Some(1) {
                    return b.clone();
                }
                if cb == Some(1) {
                    return a.clone();
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::Mul, b, a);
                }
            }
            BinOp::And => {
                if ca == Some(0) || cb == Some(0) {
                    return Expr::constant(w, 0);
                }
                if ca == Some(all) {
                    return b.clone();
                }
                if cb == Some(all) || a == b {
                    return a.clone();
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::And, b, a);
                }
            }
            BinOp::Or => {
                if ca == Some(all) || cb == Some(all) {
                    return Expr::constant(w, all);
                }
                if ca == Some(0) {
                    return b.clone();
                }
                if cb == Some(0) || a == b {
                    return a.clone();
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::Or, b, a);
                }
            }
            BinOp::Xor => {
                if ca == Some(0) {
                    return b.clone();
                }
                if cb == Some(0) {
                    return a.clone();
                }
                if a == b {
                    return Expr::constant(w, 0);
                }
                if w == 1 && cb == Some(1) {
                    return a.not();
                }
                if w == 1 && ca == Some(1) {
                    return b.not();
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::Xor, b, a);
                }
            }
            BinOp::Shl | BinOp::Lshr => {
                if cb == Some(0) {
                    return a.clone();
                }
                if let Some(s) = cb {
                    if s >= w as u64 {
                        return Expr::constant(w, 0);
                    }
                }
                if ca == Some(0) {
                    return Expr::constant(w, 0);
                }
            }
            BinOp::Eq => {
                if a == b {
                    return Expr::tru();
                }
                if w == 1 {
                    match (ca, cb) {
                        (Some(1), _) => return b.clone(),
                        (_, Some(1)) => return a.clone(),
                        (Some(0), _) => return b.not(),
                        (_, Some(0)) => return a.not(),
                        _ => {}
                    }
                }
                if let (Node::Zext(x, _), Node::Zext(y, _)) = (a.node(), b.node()) {
                    if x.width() == y.width() {
                        return Expr::bin(BinOp::Eq, x, y);
                    }
                }
                // zext(x) == c
                if let (Node::Zext(x, _), Some(c)) = (a.node(), cb) {
                    if c > mask(x.width()) {
                        return Expr::fals();
                    }
                    return Expr::bin(BinOp::Eq, x, &Expr::constant(x.width(), c));
                }
                if let (Some(c2), Node::Bin(BinOp::Add, x, c1)) = (cb, a.node()) {
                    if let Some(c1) = c1.as_const() {
                        return Expr::bin(BinOp::Eq, x, &Expr::constant(w, c2.wrapping_sub(c1)));
                    }
                }
                if let (Node::Bin(BinOp::Add, x, c1), Node::Bin(BinOp::Add, y, c2)) =
                    (a.node(), b.node())
                {
                    if x == y {
                        if let (Some(c1), Some(c2)) = (c1.as_const(), c2.as_const()) {
                            return Expr::boolean(c1 == c2);
                        }
                    }
                }
                if ca.is_some() {
                    return Expr::bin(BinOp::Eq, b, a);
                }
            }
            BinOp::Ult => {
                if a == b || cb == Some(0) {
                    return Expr::fals();
                }
                if ca == Some(all) {
                    return Expr::fals();
                }
            }
            BinOp::Ule => {
                if a == b || ca == Some(0) || cb == Some(all) {
                    return Expr::tru();
                }
            }
        }
        intern(Node::Bin(op, a.clone(), b.clone()))
    }

    pub fn add(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Add, self, o)
    }
    pub fn sub(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Sub, self, o)
    }
    pub fn mul(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Mul, self, o)
    }
    pub fn and(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::And, self, o)
    }
    pub fn or(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Or, self, o)
    }
    pub fn xor(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Xor, self, o)
    }
    pub fn shl(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Shl, self, o)
    }
    pub fn lshr(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Lshr, self, o)
    }
    pub fn eq_(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Eq, self, o)
    }
    pub fn ne_(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Eq, self, o).not()
    }
    pub fn ult(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Ult, self, o)
    }
    pub fn ule(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Ule, self, o)
    }

    /// Conjunction of width-1 expressions.
    pub fn all<'a>(items: impl IntoIterator<Item = &'a Expr>) -> Expr {
        let mut acc = Expr::tru();
        for e in items {
            acc = acc.and(e);
            if acc.is_false() {
                break;
            }
        }
        acc
    }

    /// Disjunction of width-1 expressions.
    pub fn any<'a>(items: impl IntoIterator<Item = &'a Expr>) -> Expr {
        let mut acc = Expr::fals();
        for e in items {
            acc = acc.or(e);
            if acc.is_true() {
                break;
            }
        }
        acc
    }

    pub fn ite(c: &Expr, t: &Expr, e: &Expr) -> Expr {
        assert_eq!(c.width(), 1, "ite condition must have width 1");
        assert_eq!(t.width(), e.width(), "ite arms differ in width");
        if c.is_true() || t == e {
            return t.clone();
        }
        if c.is_false() {
            return e.clone();
        }
        if t.width() == 1 && t.is_true() && e.is_false() {
            return c.clone();
        }
        if t.width() == 1 && t.is_false() && e.is_true() {
            return c.not();
        }
        intern(Node::Ite(c.clone(), t.clone(), e.clone()))
    }

    pub fn zext(&self, width: u32) -> Expr {
        let w = self.width();
        assert!(width >= w, "zext to narrower width");
        if width == w {
            return self.clone();
        }
        if let Some(v) = self.as_const() {
            return Expr::constant(width, v);
        }
        if let Node::Zext(inner, _) = self.node() {
            return inner.zext(width);
        }
        intern(Node::Zext(self.clone(), width))
    }

    pub fn extract(&self, hi: u32, lo: u32) -> Expr {
        assert!(hi >= lo && hi < self.width(), "bad extract [{hi}:{lo}]");
        if lo == 0 && hi + 1 == self.width() {
            return self.clone();
        }
        if let Some(v) = self.as_const() {
            return Expr::constant(hi - lo + 1, v >> lo);
        }
        if let Node::Zext(inner, _) = self.node() {
            if lo == 0 && hi + 1 == inner.width() {
                return inner.clone();
            }
            if lo >= inner.width() {
                return Expr::constant(hi - lo + 1, 0);
            }
        }
        intern(Node::Extract(self.clone(), hi, lo))
    }

    /// Resizes to `width` by zero extension or truncation.
    pub fn resize(&self, width: u32) -> Expr {
        match self.width().cmp(&width) {
            std::cmp::Ordering::Less => self.zext(width),
            std::cmp::Ordering::Equal => self.clone(),
            std::cmp::Ordering::Greater => self.extract(width - 1, 0),
        }
    }

    /// Nodes reachable from `self`, children before parents.
    pub fn topo(&self) -> Vec<Expr> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if expanded {
                out.push(e);
                continue;
            }
            if !seen.insert(e.id()) {
                continue;
            }
            stack.push((e.clone(), true));
            let kids = e.children();
            for k in kids.into_iter().rev() {
                if !seen.contains(&k.id()) {
                    stack.push((k, false));
                }
            }
        }
        out
    }

    pub fn children(&self) -> Vec<Expr> {
        match self.node() {
            Node::Const { .. } | Node::Var { .. } => vec![],
            Node::Not(a) | Node::Zext(a, _) | Node::Extract(a, _, _) => vec![a.clone()],
            Node::Bin(_, a, b) => vec![a.clone(), b.clone()],
            Node::Ite(c, a, b) => vec![c.clone(), a.clone(), b.clone()],
        }
    }

    /// Free variables with their widths, ordered by name.
    pub fn free_vars(&self) -> BTreeMap<Arc<str>, u32> {
        self.topo()
            .into_iter()
            .filter_map(|e| match e.node() {
                Node::Var { name, width } => Some((name.clone(), *width)),
                _ => None,
            })
            .collect()
    }

    pub fn mentions(&self, pred: &dyn Fn(&str) -> bool) -> bool {
        self.topo().iter().any(|e| e.var_name().is_some_and(pred))
    }

    /// Rebuilds the expression with variables replaced per `map`.
    pub fn substitute(&self, map: &HashMap<Arc<str>, Expr>) -> Expr {
        self.rewrite(&mut |e| match e.node() {
            Node::Var { name, width } => map.get(name).map(|r| {
                assert_eq!(r.width(), *width, "substitution for {name} changes width");
                r.clone()
            }),
            _ => None,
        })
    }

    /// Bottom-up rewrite. `leaf` may replace any node before its children are
    /// visited; returning `None` keeps the node and rebuilds it from
    /// rewritten children.
    pub fn rewrite(&self, leaf: &mut dyn FnMut(&Expr) -> Option<Expr>) -> Expr {
        let mut memo: HashMap<usize, Expr> = HashMap::new();
        for e in self.topo() {
            if let Some(r) = leaf(&e) {
                memo.insert(e.id(), r);
                continue;
            }
            let get = |x: &Expr| memo[&x.id()].clone();
            let rebuilt = match e.node() {
                Node::Const { .. } | Node::Var { .. } => e.clone(),
                Node::Not(a) => get(a).not(),
                Node::Bin(op, a, b) => Expr::bin(*op, &get(a), &get(b)),
                Node::Ite(c, a, b) => Expr::ite(&get(c), &get(a), &get(b)),
                Node::Zext(a, w) => get(a).zext(*w),
                Node::Extract(a, hi, lo) => get(a).extract(*hi, *lo),
            };
            memo.insert(e.id(), rebuilt);
        }
        memo[&self.id()].clone()
    }

    /// Evaluates under `env`; panics on an unbound variable.
    pub fn eval(&self, env: &dyn Fn(&str) -> Option<u64>) -> u64 {
        let mut memo: HashMap<usize, u64> = HashMap::new();
        for e in self.topo() {
            let get = |x: &Expr| memo[&x.id()];
            let w = e.width();
            let v = match e.node() {
                Node::Const { value, .. } => *value,
                Node::Var { name, width } => {
                    env(name).unwrap_or_else(|| panic!("unbound variable {name}")) & mask(*width)
                }
                Node::Not(a) => !get(a) & mask(w),
                Node::Bin(op, a, b) => op.apply(a.width(), get(a), get(b)),
                Node::Ite(c, a, b) => {
                    if get(c) != 0 {
                        get(a)
                    } else {
                        get(b)
                    }
                }
                Node::Zext(a, _) => get(a),
                Node::Extract(a, _, lo) => (get(a) >> lo) & mask(w),
            };
            memo.insert(e.id(), v);
        }
        memo[&self.id()]
    }

    pub fn eval_map(&self, env: &BTreeMap<String, u64>) -> u64 {
        self.eval(&|n| env.get(n).copied())
    }

    pub fn size(&self) -> usize {
        self.topo().len()
    }
}

fn fmt_expr(e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e.node() {
        Node::Const { width, value } => {
            if *width == 1 {
                write!(f, "{}", if *value == 1 { "true" } else { "false" })
            } else {
                write!(f, "{value}")
            }
        }
        Node::Var { name, .. } => write!(f, "{name}"),
        Node::Not(a) => {
            if let Node::Bin(BinOp::Eq, x, y) = a.node() {
                write!(f, "({x} != {y})")
            } else if a.width() == 1 {
                write!(f, "!{a}")
            } else {
                write!(f, "~{a}")
            }
        }
        Node::Bin(op, a, b) => {
            let sym = match (op, a.width()) {
                (BinOp::And, 1) => "&&",
                (BinOp::Or, 1) => "||",
                _ => op.symbol(),
            };
            write!(f, "({a} {sym} {b})")
        }
        Node::Ite(c, a, b) => write!(f, "ite({c}, {a}, {b})"),
        Node::Zext(a, _) => write!(f, "{a}"),
        Node::Extract(a, hi, lo) => write!(f, "{a}[{hi}:{lo}]"),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_expr(self, f)
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(u64),
    Var(usize),
    Not(usize, u64),
    Bin(BinOp, usize, usize, u32),
    Ite(usize, usize, usize),
    Copy(usize),
    Extract(usize, u32, u64),
}

/// An expression flattened into a straight-line program over slots, for
/// evaluating the same expression under many valuations.
#[derive(Clone, Debug)]
pub struct Compiled {
    ops: Vec<Op>,
    vars: Vec<(Arc<str>, u32)>,
}

impl Compiled {
    /// Compiles `e`; variables are numbered in the order of `vars`, which
    /// must cover every free variable of `e`.
    pub fn new(e: &Expr, vars: &[(Arc<str>, u32)]) -> Compiled {
        let index: HashMap<&str, usize> = vars
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (&**n, i))
            .collect();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut ops = Vec::new();
        for node in e.topo() {
            let s = |x: &Expr| slot[&x.id()];
            let op = match node.node() {
                Node::Const { value, .. } => Op::Const(*value),
                Node::Var { name, .. } => Op::Var(
                    *index
                        .get(&**name)
                        .unwrap_or_else(|| panic!("variable {name} missing from compile order")),
                ),
                Node::Not(a) => Op::Not(s(a), mask(node.width())),
                Node::Bin(op, a, b) => Op::Bin(*op, s(a), s(b), a.width()),
                Node::Ite(c, a, b) => Op::Ite(s(c), s(a), s(b)),
                Node::Zext(a, _) => Op::Copy(s(a)),
                Node::Extract(a, _, lo) => Op::Extract(s(a), *lo, mask(node.width())),
            };
            slot.insert(node.id(), ops.len());
            ops.push(op);
        }
        Compiled {
            ops,
            vars: vars.to_vec(),
        }
    }

    pub fn vars(&self) -> &[(Arc<str>, u32)] {
        &self.vars
    }

    pub fn scratch(&self) -> Vec<u64> {
        vec![0; self.ops.len()]
    }

    /// Evaluates with `values[i]` bound to the i-th variable.
    pub fn eval(&self, values: &[u64], scratch: &mut [u64]) -> u64 {
        for (i, op) in self.ops.iter().enumerate() {
            scratch[i] = match *op {
                Op::Const(v) => v,
                Op::Var(v) => values[v] & mask(self.vars[v].1),
                Op::Not(a, m) => !scratch[a] & m,
                Op::Bin(op, a, b, w) => op.apply(w, scratch[a], scratch[b]),
                Op::Ite(c, a, b) => {
                    if scratch[c] != 0 {
                        scratch[a]
                    } else {
                        scratch[b]
                    }
                }
                Op::Copy(a) => scratch[a],
                Op::Extract(a, lo, m) => (scratch[a] >> lo) & m,
            };
        }
        *scratch
            .last()
            .expect("compiled expression has at least one op")
    }
}
