//! The concurrent mini-IR: declarations, inputs, and threads of loads,
//! stores, assignments and structured branches.

mod parse;
mod print;
mod transform;

pub use parse::parse_program;
pub use print::print_program;
pub use transform::{synthesize_adversary, unroll_loops, ADVERSARY_DECL};

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Source position. `instance` tells apart copies of one statement made by
/// loop unrolling (0 for statements outside any loop).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
    pub instance: u32,
}

/// A memory access site as reported to users: source line plus unroll copy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub line: u32,
    pub instance: u32,
}

impl Pos {
    pub fn site(&self) -> Site {
        Site {
            line: self.line,
            instance: self.instance,
        }
    }
}

impl Site {
    pub fn line(line: u32) -> Site {
        Site { line, instance: 0 }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.instance == 0 {
            write!(f, "{}", self.line)
        } else {
            write!(f, "{}.{}", self.line, self.instance)
        }
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeclKind {
    Array,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Fixed(u64),
    /// Base address chosen by the solver, optionally restricted to
    /// `[lo, hi)`; without a window the cache-derived default applies.
    Symbolic {
        window: Option<(u64, u64)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sensitivity {
    Secret,
    Public(u64),
    Derived,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Declaration {
    pub name: String,
    pub kind: DeclKind,
    pub elem_size: u32,
    pub length: u32,
    pub placement: Placement,
    pub sensitivity: Sensitivity,
    /// Concrete initial contents, one value per element.
    pub init: Option<Vec<u64>>,
    pub pos: Pos,
}

impl Declaration {
    pub fn bytes(&self) -> u64 {
        self.elem_size as u64 * self.length as u64
    }

    pub fn elem_bits(&self) -> u32 {
        self.elem_size * 8
    }

    /// Name of the solver variable holding a symbolic base address.
    pub fn base_var(&self) -> String {
        format!("&{}", self.name)
    }

    pub fn fixed_base(&self) -> Option<u64> {
        match self.placement {
            Placement::Fixed(b) => Some(b),
            Placement::Symbolic { .. } => None,
        }
    }

    /// Name of the input variable for element `i` of a secret/public
    /// declaration.
    pub fn element_var(&self, i: u32) -> String {
        match self.kind {
            DeclKind::Scalar => self.name.clone(),
            DeclKind::Array => format!("{}[{i}]", self.name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Input {
    pub name: String,
    pub width: u32,
    pub sensitivity: Sensitivity,
    pub pos: Pos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IrBinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl IrBinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            IrBinOp::Add => "+",
            IrBinOp::Sub => "-",
            IrBinOp::Mul => "*",
            IrBinOp::And => "&",
            IrBinOp::Or => "|",
            IrBinOp::Xor => "^",
            IrBinOp::Shl => "<<",
            IrBinOp::Shr => ">>",
            IrBinOp::Eq => "==",
            IrBinOp::Ne => "!=",
            IrBinOp::Lt => "<",
            IrBinOp::Le => "<=",
            IrBinOp::Gt => ">",
            IrBinOp::Ge => ">=",
        }
    }

    /// Binding strength, higher binds tighter (C ordering).
    pub fn precedence(self) -> u8 {
        match self {
            IrBinOp::Mul => 7,
            IrBinOp::Add | IrBinOp::Sub => 6,
            IrBinOp::Shl | IrBinOp::Shr => 5,
            IrBinOp::Lt | IrBinOp::Le | IrBinOp::Gt | IrBinOp::Ge => 4,
            IrBinOp::Eq | IrBinOp::Ne => 3,
            IrBinOp::And => 2,
            IrBinOp::Xor => 1,
            IrBinOp::Or => 0,
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            IrBinOp::Eq | IrBinOp::Ne | IrBinOp::Lt | IrBinOp::Le | IrBinOp::Gt | IrBinOp::Ge
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IrUnOp {
    /// Bitwise complement.
    Not,
    /// Logical negation.
    LNot,
    Neg,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IrExpr {
    Lit(u64),
    Ident(String),
    Un(IrUnOp, Box<IrExpr>),
    Bin(IrBinOp, Box<IrExpr>, Box<IrExpr>),
}

impl IrExpr {
    pub fn idents(&self, out: &mut Vec<String>) {
        match self {
            IrExpr::Lit(_) => {}
            IrExpr::Ident(n) => out.push(n.clone()),
            IrExpr::Un(_, a) => a.idents(out),
            IrExpr::Bin(_, a, b) => {
                a.idents(out);
                b.idents(out);
            }
        }
    }

    /// Replaces identifier `name` by literal `v`.
    pub fn substitute(&self, name: &str, v: u64) -> IrExpr {
        match self {
            IrExpr::Ident(n) if n == name => IrExpr::Lit(v),
            IrExpr::Lit(_) | IrExpr::Ident(_) => self.clone(),
            IrExpr::Un(op, a) => IrExpr::Un(*op, Box::new(a.substitute(name, v))),
            IrExpr::Bin(op, a, b) => IrExpr::Bin(
                *op,
                Box::new(a.substitute(name, v)),
                Box::new(b.substitute(name, v)),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Assign {
        dst: String,
        value: IrExpr,
        pos: Pos,
    },
    Load {
        dst: String,
        array: String,
        index: IrExpr,
        pos: Pos,
    },
    Store {
        array: String,
        index: IrExpr,
        value: IrExpr,
        pos: Pos,
    },
    If {
        cond: IrExpr,
        then_body: Vec<Stmt>,
        else_body: Vec<Stmt>,
        pos: Pos,
    },
    For {
        var: String,
        lo: u64,
        hi: u64,
        body: Vec<Stmt>,
        pos: Pos,
    },
    While {
        cond: IrExpr,
        max: Option<u32>,
        body: Vec<Stmt>,
        pos: Pos,
    },
    /// Restricts the path; produced when unrolling bounded `while` loops.
    Assume { cond: IrExpr, pos: Pos },
}

impl Stmt {
    pub fn pos(&self) -> Pos {
        match self {
            Stmt::Assign { pos, .. }
            | Stmt::Load { pos, .. }
            | Stmt::Store { pos, .. }
            | Stmt::If { pos, .. }
            | Stmt::For { pos, .. }
            | Stmt::While { pos, .. }
            | Stmt::Assume { pos, .. } => *pos,
        }
    }

    pub fn pos_mut(&mut self) -> &mut Pos {
        match self {
            Stmt::Assign { pos, .. }
            | Stmt::Load { pos, .. }
            | Stmt::Store { pos, .. }
            | Stmt::If { pos, .. }
            | Stmt::For { pos, .. }
            | Stmt::While { pos, .. }
            | Stmt::Assume { pos, .. } => pos,
        }
    }

    pub fn is_loop(&self) -> bool {
        matches!(self, Stmt::For { .. } | Stmt::While { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Thread {
    pub tid: u32,
    pub critical: bool,
    /// Marks a thread created by adversary synthesis.
    pub adversary: bool,
    pub body: Vec<Stmt>,
    pub pos: Pos,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub decls: Vec<Declaration>,
    pub inputs: Vec<Input>,
    pub threads: Vec<Thread>,
}

/// Widths are in bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputVar {
    pub name: String,
    pub width: u32,
}

impl Program {
    pub fn decl(&self, name: &str) -> Option<&Declaration> {
        self.decls.iter().find(|d| d.name == name)
    }

    pub fn decl_index(&self, name: &str) -> Option<usize> {
        self.decls.iter().position(|d| d.name == name)
    }

    pub fn critical_tid(&self) -> u32 {
        self.threads
            .iter()
            .find(|t| t.critical)
            .map(|t| t.tid)
            .expect("validated program has a critical thread")
    }

    pub fn thread(&self, tid: u32) -> Option<&Thread> {
        self.threads.iter().find(|t| t.tid == tid)
    }

    fn vars_with(
        &self,
        want: impl Fn(&Sensitivity) -> Option<u64>,
    ) -> Vec<(InputVar, Option<u64>)> {
        let mut out = Vec::new();
        for i in &self.inputs {
            if let Some(v) = want(&i.sensitivity) {
                out.push((
                    InputVar {
                        name: i.name.clone(),
                        width: i.width,
                    },
                    Some(v),
                ));
            } else if matches!(i.sensitivity, Sensitivity::Secret)
                && want(&Sensitivity::Secret).is_some()
            {
                out.push((
                    InputVar {
                        name: i.name.clone(),
                        width: i.width,
                    },
                    None,
                ));
            }
        }
        for d in &self.decls {
            if let Some(v) = want(&d.sensitivity) {
                for e in 0..d.length {
                    out.push((
                        InputVar {
                            name: d.element_var(e),
                            width: d.elem_bits(),
                        },
                        Some(v),
                    ));
                }
            }
        }
        out
    }

    /// Secret input variables: `input ... secret` lines plus every element
    /// of a secret declaration.
    pub fn secret_inputs(&self) -> Vec<InputVar> {
        self.vars_with(|s| matches!(s, Sensitivity::Secret).then_some(0))
            .into_iter()
            .map(|(v, _)| v)
            .collect()
    }

    /// Public input variables with their fixed values.
    pub fn public_inputs(&self) -> Vec<(InputVar, u64)> {
        self.vars_with(|s| match s {
            Sensitivity::Public(v) => Some(*v),
            _ => None,
        })
        .into_iter()
        .map(|(v, x)| (v, x.unwrap_or(0)))
        .collect()
    }

    pub fn secret_bits(&self) -> u32 {
        self.secret_inputs().iter().map(|v| v.width).sum()
    }

    pub fn has_symbolic_base(&self) -> bool {
        self.decls
            .iter()
            .any(|d| matches!(d.placement, Placement::Symbolic { .. }))
    }

    pub fn is_loop_free(&self) -> bool {
        fn free(body: &[Stmt]) -> bool {
            body.iter().all(|s| match s {
                Stmt::For { .. } | Stmt::While { .. } => false,
                Stmt::If {
                    then_body,
                    else_body,
                    ..
                } => free(then_body) && free(else_body),
                _ => true,
            })
        }
        self.threads.iter().all(|t| free(&t.body))
    }

    /// Copy with every position zeroed, for structural comparison.
    pub fn without_positions(&self) -> Program {
        fn strip(body: &mut [Stmt]) {
            for s in body {
                *s.pos_mut() = Pos::default();
                match s {
                    Stmt::If {
                        then_body,
                        else_body,
                        ..
                    } => {
                        strip(then_body);
                        strip(else_body);
                    }
                    Stmt::For { body, .. } | Stmt::While { body, .. } => strip(body),
                    _ => {}
                }
            }
        }
        let mut p = self.clone();
        for d in &mut p.decls {
            d.pos = Pos::default();
        }
        for i in &mut p.inputs {
            i.pos = Pos::default();
        }
        for t in &mut p.threads {
            t.pos = Pos::default();
            strip(&mut t.body);
        }
        p
    }

    /// Keeps only the critical thread.
    pub fn critical_only(&self) -> Program {
        let mut p = self.clone();
        p.threads.retain(|t| t.critical);
        p
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("line {line}: duplicate declaration of `{name}`")]
    Duplicate { name: String, line: u32 },
    #[error("declarations `{a}` and `{b}` overlap at byte {byte}")]
    Overlap { a: String, b: String, byte: u64 },
    #[error("{line}:{col}: reference to undeclared identifier `{name}`")]
    Undeclared { name: String, line: u32, col: u32 },
    #[error("line {line}: {msg}")]
    Invalid { line: u32, msg: String },
    #[error("line {line}: loop runs {trips} iterations, more than the unroll bound {bound}")]
    BoundExceeded { line: u32, trips: u64, bound: u32 },
    #[error("line {line}: `while` loop needs a `max <n>` annotation to be unrolled")]
    Unbounded { line: u32 },
    #[error("program already has a non-critical thread; cannot synthesize an adversary")]
    AdversaryExists,
}
