use std::fmt::Write;

use super::*;

fn expr(e: &IrExpr, out: &mut String) {
    match e {
        IrExpr::Lit(v) => write!(out, "{v}").unwrap(),
        IrExpr::Ident(n) => out.push_str(n),
        IrExpr::Un(op, a) => {
            out.push(match op {
                IrUnOp::Not => '~',
                IrUnOp::LNot => '!',
                IrUnOp::Neg => '-',
            });
            atom(a, out);
        }
        IrExpr::Bin(op, a, b) => {
            atom(a, out);
            write!(out, " {} ", op.symbol()).unwrap();
            atom(b, out);
        }
    }
}

fn atom(e: &IrExpr, out: &mut String) {
    if matches!(e, IrExpr::Bin(..)) {
        out.push('(');
        expr(e, out);
        out.push(')');
    } else {
        expr(e, out);
    }
}

fn sensitivity(s: &Sensitivity, out: &mut String) {
    match s {
        Sensitivity::Secret => out.push_str(" secret"),
        Sensitivity::Public(v) => write!(out, " public = {v}").unwrap(),
        Sensitivity::Derived => {}
    }
}

fn body(stmts: &[Stmt], depth: usize, out: &mut String) {
    for s in stmts {
        stmt(s, depth, out);
    }
}

fn stmt(s: &Stmt, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    out.push_str(&pad);
    match s {
        Stmt::Assign { dst, value, .. } => {
            write!(out, "{dst} := ").unwrap();
            expr(value, out);
        }
        Stmt::Load {
            dst, array, index, ..
        } => {
            write!(out, "load {dst}, {array}[").unwrap();
            expr(index, out);
            out.push(']');
        }
        Stmt::Store {
            array,
            index,
            value,
            ..
        } => {
            write!(out, "store {array}[").unwrap();
            expr(index, out);
            out.push_str("], ");
            expr(value, out);
        }
        Stmt::If {
            cond,
            then_body,
            else_body,
            ..
        } => {
            out.push_str("if ");
            atom(cond, out);
            out.push_str(" {\n");
            body(then_body, depth + 1, out);
            write!(out, "{pad}}}").unwrap();
            if !else_body.is_empty() {
                out.push_str(" else {\n");
                body(else_body, depth + 1, out);
                write!(out, "{pad}}}").unwrap();
            }
        }
        Stmt::For {
            var,
            lo,
            hi,
            body: b,
            ..
        } => {
            writeln!(out, "for {var} in {lo}..{hi} {{").unwrap();
            body(b, depth + 1, out);
            write!(out, "{pad}}}").unwrap();
        }
        Stmt::While {
            cond, max, body: b, ..
        } => {
            out.push_str("while ");
            atom(cond, out);
            if let Some(m) = max {
                write!(out, " max {m}").unwrap();
            }
            out.push_str(" {\n");
            body(b, depth + 1, out);
            write!(out, "{pad}}}").unwrap();
        }
        Stmt::Assume { cond, .. } => {
            out.push_str("assume ");
            atom(cond, out);
        }
    }
    out.push('\n');
}

/// Renders a program in the concrete syntax accepted by `parse_program`.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for d in &p.decls {
        match d.kind {
            DeclKind::Array => write!(out, "array {} [{}]", d.name, d.length).unwrap(),
            DeclKind::Scalar => write!(out, "scalar {}", d.name).unwrap(),
        }
        write!(out, " elem {} at ", d.elem_size).unwrap();
        match d.placement {
            Placement::Fixed(b) => write!(out, "{b}").unwrap(),
            Placement::Symbolic { window: None } => out.push_str("symbolic"),
            Placement::Symbolic {
                window: Some((lo, hi)),
            } => write!(out, "symbolic within {lo}..{hi}").unwrap(),
        }
        sensitivity(&d.sensitivity, &mut out);
        if let Some(init) = &d.init {
            let vals: Vec<String> = init.iter().map(|v| v.to_string()).collect();
            write!(out, " = {{ {} }}", vals.join(", ")).unwrap();
        }
        out.push('\n');
    }
    for i in &p.inputs {
        write!(out, "input {} width {}", i.name, i.width).unwrap();
        sensitivity(&i.sensitivity, &mut out);
        out.push('\n');
    }
    for t in &p.threads {
        write!(out, "thread {}", t.tid).unwrap();
        if t.critical {
            out.push_str(" critical");
        }
        if t.adversary {
            out.push_str(" adversary");
        }
        out.push_str(" {\n");
        body(&t.body, 1, &mut out);
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn round_trips_nested_program() {
        let src = "\
array S [4] elem 1 at 0 = { 3, 1, 2, 0 }
scalar adv elem 8 at symbolic within 0..128
input key width 4 secret
input n width 8 public = 7
thread 1 critical {
  for i in 0..2 {
    load t, S[(key ^ i) & 3]
  }
  if !(key == 2) { x := -t } else { if n > 1 { store S[1], ~x } }
  while t < 3 max 2 { t := t + 1 }
  assume t >= 0
}
thread 2 { load r, adv[0] }
";
        let p = parse_program(src).unwrap();
        let printed = print_program(&p);
        let q = parse_program(&printed).unwrap();
        assert_eq!(p.without_positions(), q.without_positions(), "{printed}");
        assert_eq!(print_program(&q), printed);
    }
}
