use std::collections::{HashMap, HashSet};

use super::*;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(u64),
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: u32,
    col: u32,
}

const SYMBOLS: [&str; 27] = [
    ":=", "..", "<<", ">>", "==", "!=", "<=", ">=", "(", ")", "{", "}", "[", "]", ",", ";", "+",
    "-", "*", "&", "|", "^", "<", ">", "~", "!", "=",
];

fn lex(src: &str) -> Result<Vec<Token>, IrError> {
    let mut out = Vec::new();
    for (ln, raw) in src.lines().enumerate() {
        let line = ln as u32 + 1;
        let text = raw.split('#').next().unwrap_or("");
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i as u32 + 1;
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().filter(|c| **c != '_').collect();
                let v = if let Some(h) = s.strip_prefix("0x") {
                    u64::from_str_radix(h, 16)
                } else if let Some(b) = s.strip_prefix("0b") {
                    u64::from_str_radix(b, 2)
                } else {
                    s.parse()
                };
                let v = v.map_err(|_| IrError::Syntax {
                    line,
                    col,
                    msg: format!("bad number `{s}`"),
                })?;
                out.push(Token {
                    tok: Tok::Num(v),
                    line,
                    col,
                });
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line,
                    col,
                });
            } else {
                let rest: String = chars[i..].iter().take(2).collect();
                let sym = SYMBOLS
                    .iter()
                    .find(|s| rest.starts_with(**s))
                    .ok_or_else(|| IrError::Syntax {
                        line,
                        col,
                        msg: format!("unexpected character `{c}`"),
                    })?;
                i += sym.len();
                out.push(Token {
                    tok: Tok::Sym(sym),
                    line,
                    col,
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
    last_line: u32,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.tok)
    }

    fn here(&self) -> (u32, u32) {
        self.toks
            .get(self.at)
            .map(|t| (t.line, t.col))
            .unwrap_or((self.last_line + 1, 1))
    }

    fn pos(&self) -> Pos {
        let (line, col) = self.here();
        Pos {
            line,
            col,
            instance: 0,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let (line, col) = self.here();
        Err(IrError::Syntax {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|t| t.tok.clone());
        if t.is_some() {
            self.at += 1;
        }
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), IrError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", self.describe()))
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(x)) if x == kw) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), IrError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected `{kw}`, found {}", self.describe()))
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(Tok::Ident(s)) => format!("`{s}`"),
            Some(Tok::Num(n)) => format!("`{n}`"),
            Some(Tok::Sym(s)) => format!("`{s}`"),
        }
    }

    fn ident(&mut self) -> Result<String, IrError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !is_keyword(s) => {
                let s = s.clone();
                self.at += 1;
                Ok(s)
            }
            _ => self.err(format!("expected identifier, found {}", self.describe())),
        }
    }

    fn number(&mut self) -> Result<u64, IrError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let n = *n;
                self.at += 1;
                Ok(n)
            }
            _ => self.err(format!("expected number, found {}", self.describe())),
        }
    }

    fn sensitivity(&mut self) -> Result<Sensitivity, IrError> {
        if self.eat_kw("secret") {
            Ok(Sensitivity::Secret)
        } else if self.eat_kw("public") {
            self.expect_sym("=")?;
            Ok(Sensitivity::Public(self.number()?))
        } else {
            // `derived` is the default and may be spelled out.
            self.eat_kw("derived");
            Ok(Sensitivity::Derived)
        }
    }

    fn placement(&mut self) -> Result<Placement, IrError> {
        self.expect_kw("at")?;
        if self.eat_kw("symbolic") {
            let window = if self.eat_kw("within") {
                let lo = self.number()?;
                self.expect_sym("..")?;
                let hi = self.number()?;
                Some((lo, hi))
            } else {
                None
            };
            Ok(Placement::Symbolic { window })
        } else {
            Ok(Placement::Fixed(self.number()?))
        }
    }

    fn decl(&mut self, kind: DeclKind) -> Result<Declaration, IrError> {
        let pos = self.pos();
        self.next();
        let name = self.ident()?;
        let length = if kind == DeclKind::Array {
            self.expect_sym("[")?;
            let n = self.number()?;
            self.expect_sym("]")?;
            n
        } else {
            1
        };
        self.expect_kw("elem")?;
        let elem_size = self.number()?;
        let placement = self.placement()?;
        let sensitivity = self.sensitivity()?;
        let init = if self.eat_sym("=") {
            self.expect_sym("{")?;
            let mut vals = Vec::new();
            if !self.eat_sym("}") {
                loop {
                    vals.push(self.number()?);
                    if self.eat_sym("}") {
                        break;
                    }
                    self.expect_sym(",")?;
                }
            }
            Some(vals)
        } else {
            None
        };
        let bad = |msg: String| IrError::Invalid {
            line: pos.line,
            msg,
        };
        if length == 0 || length > u32::MAX as u64 {
            return Err(bad(format!("`{name}` has invalid length {length}")));
        }
        if !elem_size.is_power_of_two() || elem_size > 64 {
            return Err(bad(format!(
                "element size of `{name}` must be a power of two up to 64"
            )));
        }
        if let Placement::Fixed(base) = placement {
            if base % elem_size != 0 {
                return Err(bad(format!(
                    "base {base} of `{name}` is not a multiple of {elem_size}"
                )));
            }
            if base + elem_size * length > 1 << 32 {
                return Err(bad(format!(
                    "`{name}` does not fit in the 32-bit address space"
                )));
            }
        }
        if let Some(v) = &init {
            if v.len() as u64 != length {
                return Err(bad(format!(
                    "`{name}` has {} initial values for {length} elements",
                    v.len()
                )));
            }
        }
        if elem_size > 4 && sensitivity != Sensitivity::Derived {
            return Err(bad(format!(
                "input declaration `{name}` wider than 32 bits"
            )));
        }
        Ok(Declaration {
            name,
            kind,
            elem_size: elem_size as u32,
            length: length as u32,
            placement,
            sensitivity,
            init,
            pos,
        })
    }

    fn input(&mut self) -> Result<Input, IrError> {
        let pos = self.pos();
        self.next();
        let name = self.ident()?;
        self.expect_kw("width")?;
        let width = self.number()?;
        if !(1..=32).contains(&width) {
            return Err(IrError::Invalid {
                line: pos.line,
                msg: format!("input `{name}` width must be 1..=32 bits"),
            });
        }
        let sensitivity = if self.eat_kw("secret") {
            Sensitivity::Secret
        } else if self.eat_kw("public") {
            self.expect_sym("=")?;
            Sensitivity::Public(self.number()?)
        } else {
            return self.err("expected `secret` or `public = <const>`");
        };
        Ok(Input {
            name,
            width: width as u32,
            sensitivity,
            pos,
        })
    }

    fn thread(&mut self) -> Result<Thread, IrError> {
        let pos = self.pos();
        self.next();
        let tid = self.number()?;
        let mut critical = false;
        let mut adversary = false;
        loop {
            if self.eat_kw("critical") {
                critical = true;
            } else if self.eat_kw("adversary") {
                adversary = true;
            } else {
                break;
            }
        }
        let body = self.block()?;
        Ok(Thread {
            tid: tid as u32,
            critical,
            adversary,
            body,
            pos,
        })
    }

    fn block(&mut self) -> Result<Vec<Stmt>, IrError> {
        self.expect_sym("{")?;
        let mut body = Vec::new();
        loop {
            while self.eat_sym(";") {}
            if self.eat_sym("}") {
                return Ok(body);
            }
            if self.peek().is_none() {
                return self.err("unclosed `{`");
            }
            body.push(self.stmt()?);
        }
    }

    fn access(&mut self) -> Result<(String, IrExpr), IrError> {
        let name = self.ident()?;
        let index = if self.eat_sym("[") {
            let e = self.expr()?;
            self.expect_sym("]")?;
            e
        } else {
            IrExpr::Lit(0)
        };
        Ok((name, index))
    }

    fn stmt(&mut self) -> Result<Stmt, IrError> {
        let pos = self.pos();
        if self.eat_kw("load") {
            let dst = self.ident()?;
            self.expect_sym(",")?;
            let (array, index) = self.access()?;
            return Ok(Stmt::Load {
                dst,
                array,
                index,
                pos,
            });
        }
        if self.eat_kw("store") {
            let (array, index) = self.access()?;
            self.expect_sym(",")?;
            let value = self.expr()?;
            return Ok(Stmt::Store {
                array,
                index,
                value,
                pos,
            });
        }
        if self.eat_kw("if") {
            let cond = self.expr()?;
            let then_body = self.block()?;
            let else_body = if self.eat_kw("else") {
                if matches!(self.peek(), Some(Tok::Ident(k)) if k == "if") {
                    vec![self.stmt()?]
                } else {
                    self.block()?
                }
            } else {
                Vec::new()
            };
            return Ok(Stmt::If {
                cond,
                then_body,
                else_body,
                pos,
            });
        }
        if self.eat_kw("for") {
            let var = self.ident()?;
            self.expect_kw("in")?;
            let lo = self.number()?;
            self.expect_sym("..")?;
            let hi = self.number()?;
            let body = self.block()?;
            return Ok(Stmt::For {
                var,
                lo,
                hi,
                body,
                pos,
            });
        }
        if self.eat_kw("while") {
            let cond = self.expr()?;
            let max = if self.eat_kw("max") {
                Some(self.number()? as u32)
            } else {
                None
            };
            let body = self.block()?;
            return Ok(Stmt::While {
                cond,
                max,
                body,
                pos,
            });
        }
        if self.eat_kw("assume") {
            let cond = self.expr()?;
            return Ok(Stmt::Assume { cond, pos });
        }
        let dst = self.ident()?;
        self.expect_sym(":=")?;
        let value = self.expr()?;
        Ok(Stmt::Assign { dst, value, pos })
    }

    fn expr(&mut self) -> Result<IrExpr, IrError> {
        self.binary(0)
    }

    fn binop(&self) -> Option<IrBinOp> {
        let Some(Tok::Sym(s)) = self.peek() else {
            return None;
        };
        Some(match *s {
            "+" => IrBinOp::Add,
            "-" => IrBinOp::Sub,
            "*" => IrBinOp::Mul,
            "&" => IrBinOp::And,
            "|" => IrBinOp::Or,
            "^" => IrBinOp::Xor,
            "<<" => IrBinOp::Shl,
            ">>" => IrBinOp::Shr,
            "==" => IrBinOp::Eq,
            "!=" => IrBinOp::Ne,
            "<" => IrBinOp::Lt,
            "<=" => IrBinOp::Le,
            ">" => IrBinOp::Gt,
            ">=" => IrBinOp::Ge,
            _ => return None,
        })
    }

    fn binary(&mut self, min_prec: u8) -> Result<IrExpr, IrError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binop() {
            let p = op.precedence();
            if p < min_prec {
                break;
            }
            self.at += 1;
            let rhs = self.binary(p + 1)?;
            lhs = IrExpr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<IrExpr, IrError> {
        for (sym, op) in [("~", IrUnOp::Not), ("!", IrUnOp::LNot), ("-", IrUnOp::Neg)] {
            if self.eat_sym(sym) {
                return Ok(IrExpr::Un(op, Box::new(self.unary()?)));
            }
        }
        if self.eat_sym("(") {
            let e = self.expr()?;
            self.expect_sym(")")?;
            return Ok(e);
        }
        match self.peek() {
            Some(Tok::Num(_)) => Ok(IrExpr::Lit(self.number()?)),
            Some(Tok::Ident(_)) => Ok(IrExpr::Ident(self.ident()?)),
            _ => self.err(format!("expected expression, found {}", self.describe())),
        }
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(
        s,
        "array"
            | "scalar"
            | "input"
            | "thread"
            | "load"
            | "store"
            | "if"
            | "else"
            | "for"
            | "while"
            | "assume"
            | "in"
            | "at"
            | "elem"
            | "width"
            | "secret"
            | "public"
            | "derived"
            | "symbolic"
            | "critical"
            | "adversary"
            | "max"
            | "within"
    )
}

/// Parses and validates a program.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let toks = lex(text)?;
    let last_line = toks.last().map(|t| t.line).unwrap_or(0);
    let mut p = Parser {
        toks,
        at: 0,
        last_line,
    };
    let mut prog = Program::default();
    loop {
        while p.eat_sym(";") {}
        match p.peek() {
            None => break,
            Some(Tok::Ident(k)) if k == "array" => prog.decls.push(p.decl(DeclKind::Array)?),
            Some(Tok::Ident(k)) if k == "scalar" => prog.decls.push(p.decl(DeclKind::Scalar)?),
            Some(Tok::Ident(k)) if k == "input" => prog.inputs.push(p.input()?),
            Some(Tok::Ident(k)) if k == "thread" => prog.threads.push(p.thread()?),
            _ => {
                return p.err(format!(
                    "expected declaration or thread, found {}",
                    p.describe()
                ))
            }
        }
    }
    validate(&mut prog)?;
    Ok(prog)
}

/// Checks names, layout and thread structure. A lone thread with no
/// `critical` marker becomes the critical thread.
pub(super) fn validate(prog: &mut Program) -> Result<(), IrError> {
    let mut names: HashMap<&str, u32> = HashMap::new();
    for (name, line) in prog
        .decls
        .iter()
        .map(|d| (d.name.as_str(), d.pos.line))
        .chain(prog.inputs.iter().map(|i| (i.name.as_str(), i.pos.line)))
    {
        if names.insert(name, line).is_some() {
            return Err(IrError::Duplicate {
                name: name.to_string(),
                line,
            });
        }
    }
    let fixed: Vec<(&Declaration, u64)> = prog
        .decls
        .iter()
        .filter_map(|d| d.fixed_base().map(|b| (d, b)))
        .collect();
    for (i, (a, ab)) in fixed.iter().enumerate() {
        for (b, bb) in &fixed[i + 1..] {
            let lo = (*ab).max(*bb);
            let hi = (ab + a.bytes()).min(bb + b.bytes());
            if lo < hi {
                return Err(IrError::Overlap {
                    a: a.name.clone(),
                    b: b.name.clone(),
                    byte: lo,
                });
            }
        }
    }

    let mut tids = HashSet::new();
    for t in &prog.threads {
        if !tids.insert(t.tid) {
            return Err(IrError::Invalid {
                line: t.pos.line,
                msg: format!("duplicate thread id {}", t.tid),
            });
        }
    }
    let criticals = prog.threads.iter().filter(|t| t.critical).count();
    if criticals == 0 && prog.threads.len() == 1 {
        prog.threads[0].critical = true;
    } else if criticals != 1 {
        let line = prog.threads.first().map(|t| t.pos.line).unwrap_or(1);
        return Err(IrError::Invalid {
            line,
            msg: format!("expected exactly one critical thread, found {criticals}"),
        });
    }

    // Identifiers readable in expressions: inputs and secret/public scalars.
    let values: HashSet<String> = prog
        .inputs
        .iter()
        .map(|i| i.name.clone())
        .chain(
            prog.decls
                .iter()
                .filter(|d| d.kind == DeclKind::Scalar && d.sensitivity != Sensitivity::Derived)
                .map(|d| d.name.clone()),
        )
        .collect();
    for t in &prog.threads {
        let mut regs = HashSet::new();
        check_body(prog, &t.body, &values, &mut regs, &mut Vec::new())?;
    }
    Ok(())
}

fn check_body(
    prog: &Program,
    body: &[Stmt],
    values: &HashSet<String>,
    regs: &mut HashSet<String>,
    loop_vars: &mut Vec<String>,
) -> Result<(), IrError> {
    let check_expr = |e: &IrExpr, pos: Pos, regs: &HashSet<String>, loop_vars: &[String]| {
        let mut ids = Vec::new();
        e.idents(&mut ids);
        for id in ids {
            if !(regs.contains(&id) || values.contains(&id) || loop_vars.contains(&id)) {
                return Err(IrError::Undeclared {
                    name: id,
                    line: pos.line,
                    col: pos.col,
                });
            }
        }
        Ok(())
    };
    let check_target = |name: &str, pos: Pos| {
        if prog.decl(name).is_none() {
            Err(IrError::Undeclared {
                name: name.to_string(),
                line: pos.line,
                col: pos.col,
            })
        } else {
            Ok(())
        }
    };
    let check_dst = |name: &str, pos: Pos| {
        if values.contains(name) || prog.decl(name).is_some() {
            Err(IrError::Invalid {
                line: pos.line,
                msg: format!("`{name}` is a declaration, not a register"),
            })
        } else {
            Ok(())
        }
    };
    for s in body {
        match s {
            Stmt::Assign { dst, value, pos } => {
                check_expr(value, *pos, regs, loop_vars)?;
                check_dst(dst, *pos)?;
                regs.insert(dst.clone());
            }
            Stmt::Load {
                dst,
                array,
                index,
                pos,
            } => {
                check_target(array, *pos)?;
                check_expr(index, *pos, regs, loop_vars)?;
                check_dst(dst, *pos)?;
                regs.insert(dst.clone());
            }
            Stmt::Store {
                array,
                index,
                value,
                pos,
            } => {
                check_target(array, *pos)?;
                check_expr(index, *pos, regs, loop_vars)?;
                check_expr(value, *pos, regs, loop_vars)?;
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
                pos,
            } => {
                check_expr(cond, *pos, regs, loop_vars)?;
                check_body(prog, then_body, values, regs, loop_vars)?;
                check_body(prog, else_body, values, regs, loop_vars)?;
            }
            Stmt::For {
                var,
                lo,
                hi,
                body,
                pos,
            } => {
                if lo > hi {
                    return Err(IrError::Invalid {
                        line: pos.line,
                        msg: format!("empty range {lo}..{hi} is reversed"),
                    });
                }
                loop_vars.push(var.clone());
                check_body(prog, body, values, regs, loop_vars)?;
                loop_vars.pop();
            }
            Stmt::While {
                cond, body, pos, ..
            } => {
                check_expr(cond, *pos, regs, loop_vars)?;
                check_body(prog, body, values, regs, loop_vars)?;
            }
            Stmt::Assume { cond, pos } => check_expr(cond, *pos, regs, loop_vars)?,
        }
    }
    Ok(())
}
