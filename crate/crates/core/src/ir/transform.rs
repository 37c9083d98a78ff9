use std::collections::HashMap;

use super::*;

/// Name of the declaration read by a synthesized adversary thread.
pub const ADVERSARY_DECL: &str = "adv_probe";

fn subst_stmt(s: &Stmt, var: &str, v: u64) -> Stmt {
    let e = |x: &IrExpr| x.substitute(var, v);
    let b = |xs: &[Stmt]| xs.iter().map(|s| subst_stmt(s, var, v)).collect::<Vec<_>>();
    match s {
        Stmt::Assign { dst, value, pos } => Stmt::Assign {
            dst: dst.clone(),
            value: e(value),
            pos: *pos,
        },
        Stmt::Load {
            dst,
            array,
            index,
            pos,
        } => Stmt::Load {
            dst: dst.clone(),
            array: array.clone(),
            index: e(index),
            pos: *pos,
        },
        Stmt::Store {
            array,
            index,
            value,
            pos,
        } => Stmt::Store {
            array: array.clone(),
            index: e(index),
            value: e(value),
            pos: *pos,
        },
        Stmt::If {
            cond,
            then_body,
            else_body,
            pos,
        } => Stmt::If {
            cond: e(cond),
            then_body: b(then_body),
            else_body: b(else_body),
            pos: *pos,
        },
        // An inner loop rebinding the same name shadows it.
        Stmt::For { var: inner, .. } if inner == var => s.clone(),
        Stmt::For {
            var: inner,
            lo,
            hi,
            body,
            pos,
        } => Stmt::For {
            var: inner.clone(),
            lo: *lo,
            hi: *hi,
            body: b(body),
            pos: *pos,
        },
        Stmt::While {
            cond,
            max,
            body,
            pos,
        } => Stmt::While {
            cond: e(cond),
            max: *max,
            body: b(body),
            pos: *pos,
        },
        Stmt::Assume { cond, pos } => Stmt::Assume {
            cond: e(cond),
            pos: *pos,
        },
    }
}

struct Unroller {
    bound: u32,
    copies: HashMap<u32, u32>,
}

impl Unroller {
    fn stamp(&mut self, mut pos: Pos, in_loop: bool) -> Pos {
        if in_loop {
            let n = self.copies.entry(pos.line).or_insert(0);
            *n += 1;
            pos.instance = *n;
        }
        pos
    }

    fn body(&mut self, stmts: &[Stmt], in_loop: bool) -> Result<Vec<Stmt>, IrError> {
        let mut out = Vec::new();
        for s in stmts {
            match s {
                Stmt::For {
                    var,
                    lo,
                    hi,
                    body,
                    pos,
                } => {
                    let trips = hi - lo;
                    if trips > self.bound as u64 {
                        return Err(IrError::BoundExceeded {
                            line: pos.line,
                            trips,
                            bound: self.bound,
                        });
                    }
                    for i in *lo..*hi {
                        let copy: Vec<Stmt> = body.iter().map(|s| subst_stmt(s, var, i)).collect();
                        out.extend(self.body(&copy, true)?);
                    }
                }
                Stmt::While {
                    cond,
                    max,
                    body,
                    pos,
                } => {
                    let Some(max) = *max else {
                        return Err(IrError::Unbounded { line: pos.line });
                    };
                    if max > self.bound {
                        return Err(IrError::BoundExceeded {
                            line: pos.line,
                            trips: max as u64,
                            bound: self.bound,
                        });
                    }
                    out.push(self.while_chain(cond, max, body, *pos)?);
                }
                Stmt::If {
                    cond,
                    then_body,
                    else_body,
                    pos,
                } => {
                    let pos = self.stamp(*pos, in_loop);
                    out.push(Stmt::If {
                        cond: cond.clone(),
                        then_body: self.body(then_body, in_loop)?,
                        else_body: self.body(else_body, in_loop)?,
                        pos,
                    });
                }
                other => {
                    let mut s = other.clone();
                    *s.pos_mut() = self.stamp(s.pos(), in_loop);
                    out.push(s);
                }
            }
        }
        Ok(out)
    }

    /// `while c max n { b }` becomes `if c { b; if c { b; ... assume !c } }`.
    fn while_chain(
        &mut self,
        cond: &IrExpr,
        left: u32,
        body: &[Stmt],
        pos: Pos,
    ) -> Result<Stmt, IrError> {
        let pos_here = self.stamp(pos, true);
        if left == 0 {
            return Ok(Stmt::Assume {
                cond: IrExpr::Un(IrUnOp::LNot, Box::new(cond.clone())),
                pos: pos_here,
            });
        }
        let mut then_body = self.body(body, true)?;
        then_body.push(self.while_chain(cond, left - 1, body, pos)?);
        Ok(Stmt::If {
            cond: cond.clone(),
            then_body,
            else_body: Vec::new(),
            pos: pos_here,
        })
    }
}

/// Fully unrolls `for` loops and `while ... max n` loops. Loop-free
/// programs come back unchanged.
pub fn unroll_loops(p: &Program, bound: u32) -> Result<Program, IrError> {
    let mut u = Unroller {
        bound,
        copies: HashMap::new(),
    };
    let mut out = p.clone();
    for t in &mut out.threads {
        t.body = u.body(&t.body, false)?;
    }
    Ok(out)
}

/// Adds a thread that loads from one line-sized buffer at a solver-chosen,
/// line-aligned address in `[0, 4 * cache_size)`.
pub fn synthesize_adversary(
    p: &Program,
    line_size: u32,
    cache_size: u64,
) -> Result<Program, IrError> {
    if p.threads.iter().any(|t| !t.critical || t.adversary) {
        return Err(IrError::AdversaryExists);
    }
    let mut out = p.clone();
    let mut name = ADVERSARY_DECL.to_string();
    while out.decl(&name).is_some() || out.inputs.iter().any(|i| i.name == name) {
        name.push('_');
    }
    out.decls.push(Declaration {
        name: name.clone(),
        kind: DeclKind::Scalar,
        elem_size: line_size,
        length: 1,
        placement: Placement::Symbolic {
            window: Some((0, 4 * cache_size)),
        },
        sensitivity: Sensitivity::Derived,
        init: None,
        pos: Pos::default(),
    });
    let tid = out.threads.iter().map(|t| t.tid).max().unwrap_or(0) + 1;
    out.threads.push(Thread {
        tid,
        critical: false,
        adversary: true,
        body: vec![Stmt::Load {
            dst: "adv_r".into(),
            array: name,
            index: IrExpr::Lit(0),
            pos: Pos::default(),
        }],
        pos: Pos::default(),
    });
    Ok(out)
}
