use std::collections::BTreeMap;
use std::fmt::Write;

use super::{Expr, Instr, JumpTarget, Operand, Program, SecretAnnotation};

fn expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Leaf(Operand::Reg(r)) => out.push_str(r.as_str()),
        Expr::Leaf(Operand::Lit(n)) => write!(out, "{n}").unwrap(),
        Expr::Bin(op, a, b) => {
            for (i, side) in [a, b].into_iter().enumerate() {
                if i == 1 {
                    write!(out, " {} ", op.ir_symbol()).unwrap();
                }
                if matches!(side.as_ref(), Expr::Bin(..)) {
                    out.push('(');
                    expr(side, out);
                    out.push(')');
                } else {
                    expr(side, out);
                }
            }
        }
    }
}

fn instr(i: &Instr, out: &mut String) {
    out.push_str(i.opcode());
    match i {
        Instr::Assign { dst, rhs } => {
            write!(out, " {dst}, ").unwrap();
            expr(rhs, out);
        }
        Instr::Load { dst, addr } => write!(out, " {dst}, {addr}").unwrap(),
        Instr::Store { src, addr } => write!(out, " {src}, {addr}").unwrap(),
        Instr::IsZero { dst, src } => write!(out, " {dst}, {src}").unwrap(),
        Instr::Jcc { cond, target } => match target {
            JumpTarget::Label { name, .. } => write!(out, " {cond}, {name}").unwrap(),
            JumpTarget::Register { reg, labels } => {
                let names: Vec<&str> = labels.iter().map(|(n, _)| n.as_str()).collect();
                write!(out, " {cond}, {reg} [{}]", names.join(", ")).unwrap();
            }
        },
        Instr::Call { callee } => write!(out, " {callee}").unwrap(),
        Instr::Ret => {}
    }
}

/// Renders a program in the textual IR format; the output reparses to an equal program.
pub(super) fn pretty(p: &Program) -> String {
    let mut out = String::new();
    if p.functions.first().is_some_and(|f| f.name != p.entry) {
        writeln!(out, "@entry {}", p.entry).unwrap();
    }
    for f in &p.functions {
        writeln!(out, "func {} params={}", f.name, f.param_count).unwrap();
        for a in p.annotations_of(&f.name) {
            match a {
                SecretAnnotation::RegisterSecret { reg, .. } => writeln!(out, "  @secret {reg}").unwrap(),
                SecretAnnotation::SecretRegion { reg, size, .. } => {
                    writeln!(out, "  @secret_region {reg} size={size}").unwrap()
                }
            }
        }
        let mut by_pc: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (name, pc) in &f.labels {
            by_pc.entry(*pc).or_default().push(name);
        }
        for pc in f.body.clone() {
            for name in by_pc.get(&pc).into_iter().flatten() {
                writeln!(out, "{name}:").unwrap();
            }
            out.push_str("  ");
            instr(&p.instrs[pc], &mut out);
            out.push('\n');
        }
    }
    out
}
