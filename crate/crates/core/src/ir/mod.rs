//! Three-address intermediate representation: types, control flow and validation.

mod parse;
mod print;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

pub use parse::{parse_program, parse_program_with_width};

pub const DEFAULT_WIDTH: u32 = 32;
pub const STACK_REGISTER: &str = "esp";
/// Byte distance between consecutive stack-passed parameters.
pub const PARAM_STRIDE: u64 = 4;
/// Prefix reserved for registers introduced when desugaring non-register operands.
pub const TEMP_PREFIX: &str = "__t";

/// Register name. Cheap to clone; compares by content.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(Arc<str>);

impl Reg {
    pub fn new(name: &str) -> Self {
        Reg(Arc::from(name))
    }

    pub fn stack() -> Self {
        Reg::new(STACK_REGISTER)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_stack(&self) -> bool {
        &*self.0 == STACK_REGISTER
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Reg {
    fn from(s: &str) -> Self {
        Reg::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    /// Bidirectional shift: a non-negative amount shifts left, a negative one shifts right.
    Bsh,
}

impl BinOp {
    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Mod,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Bsh,
    ];

    pub fn is_commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul | BinOp::And | BinOp::Or | BinOp::Xor)
    }

    /// W-bit machine semantics. Division and remainder are unsigned with the
    /// bitvector conventions `x / 0 = 2^W - 1` and `x % 0 = x`.
    pub fn apply(self, a: u64, b: u64, width: u32) -> u64 {
        let m = mask(width);
        let (a, b) = (a & m, b & m);
        let r = match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => a.checked_div(b).unwrap_or(m),
            BinOp::Mod => a.checked_rem(b).unwrap_or(a),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Bsh => {
                let amount = to_signed(b, width);
                if amount >= 0 {
                    if amount >= i64::from(width) {
                        0
                    } else {
                        a << amount
                    }
                } else {
                    let k = amount.unsigned_abs();
                    if k >= u64::from(width) {
                        0
                    } else {
                        a >> k
                    }
                }
            }
        };
        r & m
    }

    /// Surface syntax used by the IR text format.
    pub fn ir_symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
            BinOp::Bsh => "<<>>",
        }
    }
}

/// All-ones mask of the given width (1..=64).
pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Two's-complement reading of a W-bit value.
pub fn to_signed(v: u64, width: u32) -> i64 {
    let v = v & mask(width);
    if width >= 64 {
        v as i64
    } else if v >> (width - 1) & 1 == 1 {
        (v as i64) - (1i64 << width)
    } else {
        v as i64
    }
}

/// W-bit encoding of a signed offset.
pub fn from_signed(v: i64, width: u32) -> u64 {
    (v as u64) & mask(width)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Lit(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Leaf(Operand),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn reg(name: &str) -> Expr {
        Expr::Leaf(Operand::Reg(Reg::new(name)))
    }

    pub fn lit(n: u64) -> Expr {
        Expr::Leaf(Operand::Lit(n))
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn for_each_operand(&self, f: &mut impl FnMut(&Operand)) {
        match self {
            Expr::Leaf(o) => f(o),
            Expr::Bin(_, a, b) => {
                a.for_each_operand(f);
                b.for_each_operand(f);
            }
        }
    }

    /// `r`, `r + c`, `c + r` or `r - c`, as a base register and signed offset.
    pub fn as_reg_offset(&self, width: u32) -> Option<(Reg, i64)> {
        match self {
            Expr::Leaf(Operand::Reg(r)) => Some((r.clone(), 0)),
            Expr::Bin(op, a, b) => match (op, a.as_ref(), b.as_ref()) {
                (BinOp::Add, Expr::Leaf(Operand::Reg(r)), Expr::Leaf(Operand::Lit(c)))
                | (BinOp::Add, Expr::Leaf(Operand::Lit(c)), Expr::Leaf(Operand::Reg(r))) => {
                    Some((r.clone(), to_signed(*c, width)))
                }
                (BinOp::Sub, Expr::Leaf(Operand::Reg(r)), Expr::Leaf(Operand::Lit(c))) => {
                    Some((r.clone(), to_signed(c.wrapping_neg(), width)))
                }
                _ => None,
            },
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum JumpTarget {
    Label { name: String, pc: usize },
    /// Indirect jump through a register whose value must be one of the listed label pcs.
    Register { reg: Reg, labels: Vec<(String, usize)> },
}

impl JumpTarget {
    pub fn pcs(&self) -> Vec<usize> {
        match self {
            JumpTarget::Label { pc, .. } => vec![*pc],
            JumpTarget::Register { labels, .. } => labels.iter().map(|(_, pc)| *pc).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Assign { dst: Reg, rhs: Expr },
    Load { dst: Reg, addr: Reg },
    Store { src: Reg, addr: Reg },
    IsZero { dst: Reg, src: Reg },
    Jcc { cond: Reg, target: JumpTarget },
    Call { callee: String },
    Ret,
}

impl Instr {
    pub fn opcode(&self) -> &'static str {
        match self {
            Instr::Assign { .. } => "assign",
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::IsZero { .. } => "iszero",
            Instr::Jcc { .. } => "jcc",
            Instr::Call { .. } => "call",
            Instr::Ret => "ret",
        }
    }

    /// Registers read or written by the instruction.
    pub fn registers(&self) -> Vec<Reg> {
        let mut out = Vec::new();
        match self {
            Instr::Assign { dst, rhs } => {
                out.push(dst.clone());
                rhs.for_each_operand(&mut |o| {
                    if let Operand::Reg(r) = o {
                        out.push(r.clone());
                    }
                });
            }
            Instr::Load { dst, addr } => out.extend([dst.clone(), addr.clone()]),
            Instr::Store { src, addr } => out.extend([src.clone(), addr.clone()]),
            Instr::IsZero { dst, src } => out.extend([dst.clone(), src.clone()]),
            Instr::Jcc { cond, target } => {
                out.push(cond.clone());
                if let JumpTarget::Register { reg, .. } = target {
                    out.push(reg.clone());
                }
            }
            Instr::Call { .. } | Instr::Ret => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub param_count: usize,
    pub entry_pc: usize,
    pub body: Range<usize>,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SecretAnnotation {
    /// The register holds a fresh secret at function entry.
    RegisterSecret { function: String, reg: Reg },
    /// The register holds the base of a secret memory region of `size` bytes.
    SecretRegion { function: String, reg: Reg, size: u64 },
}

impl SecretAnnotation {
    pub fn function(&self) -> &str {
        match self {
            SecretAnnotation::RegisterSecret { function, .. }
            | SecretAnnotation::SecretRegion { function, .. } => function,
        }
    }

    pub fn reg(&self) -> &Reg {
        match self {
            SecretAnnotation::RegisterSecret { reg, .. }
            | SecretAnnotation::SecretRegion { reg, .. } => reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub instrs: Vec<Instr>,
    pub functions: Vec<Function>,
    pub entry: String,
    pub annotations: Vec<SecretAnnotation>,
    pub width: u32,
}

impl Program {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn instr(&self, pc: usize) -> &Instr {
        &self.instrs[pc]
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn entry_function(&self) -> &Function {
        self.function(&self.entry).expect("validated program has an entry function")
    }

    pub fn function_at(&self, pc: usize) -> Option<&Function> {
        self.functions.iter().find(|f| f.body.contains(&pc))
    }

    /// CFG successors within the enclosing function. Falling off the end of a
    /// body is an implicit return, so the last pc has no fall-through successor.
    pub fn successors(&self, pc: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let end = self.function_at(pc).map(|f| f.body.end).unwrap_or(pc + 1);
        match &self.instrs[pc] {
            Instr::Ret => {}
            Instr::Jcc { target, .. } => {
                if pc + 1 < end {
                    out.insert(pc + 1);
                }
                out.extend(target.pcs());
            }
            _ => {
                if pc + 1 < end {
                    out.insert(pc + 1);
                }
            }
        }
        out
    }

    /// True when control can leave the function from `pc` without a `ret`.
    pub fn falls_off_end(&self, pc: usize) -> bool {
        !matches!(self.instrs[pc], Instr::Ret)
            && self.function_at(pc).is_some_and(|f| pc + 1 == f.body.end)
    }

    pub fn annotations_of<'a>(&'a self, function: &'a str) -> impl Iterator<Item = &'a SecretAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.function() == function)
    }

    /// Secret ids of register annotations, numbered from 1 in program order.
    pub fn annotation_secret_ids(&self) -> Vec<(u32, &SecretAnnotation)> {
        self.annotations
            .iter()
            .filter(|a| matches!(a, SecretAnnotation::RegisterSecret { .. }))
            .enumerate()
            .map(|(i, a)| (i as u32 + 1, a))
            .collect()
    }

    pub fn secret_id_for(&self, function: &str, reg: &Reg) -> Option<u32> {
        self.annotation_secret_ids()
            .into_iter()
            .find(|(_, a)| a.function() == function && a.reg() == reg)
            .map(|(id, _)| id)
    }

    /// Region annotations in program order; the index is the region number.
    pub fn secret_regions(&self) -> Vec<&SecretAnnotation> {
        self.annotations
            .iter()
            .filter(|a| matches!(a, SecretAnnotation::SecretRegion { .. }))
            .collect()
    }

    /// Every literal occurring in the program.
    pub fn literals(&self) -> BTreeSet<u64> {
        let mut out = BTreeSet::new();
        for i in &self.instrs {
            if let Instr::Assign { rhs, .. } = i {
                rhs.for_each_operand(&mut |o| {
                    if let Operand::Lit(n) = o {
                        out.insert(*n);
                    }
                });
            }
        }
        out
    }

    pub fn pretty(&self) -> String {
        print::pretty(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub pc: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn error_at(line: usize, column: usize, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, line: Some(line), column: Some(column), pc: None, message: message.into() }
    }

    pub fn error_pc(pc: Option<usize>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, line: None, column: None, pc, message: message.into() }
    }

    pub fn warning_pc(pc: usize, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, line: None, column: None, pc: Some(pc), message: message.into() }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match (self.line, self.column, self.pc) {
            (Some(l), Some(c), _) => write!(f, "{sev} at {l}:{c}: {}", self.message),
            (_, _, Some(pc)) => write!(f, "{sev} at pc {pc}: {}", self.message),
            _ => write!(f, "{sev}: {}", self.message),
        }
    }
}

/// Checks structural invariants. Errors make the program unusable; warnings
/// (dead code) are informational.
pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let w = program.width;
    if !(1..=64).contains(&w) {
        diags.push(Diagnostic::error_pc(None, format!("width {w} outside 1..=64")));
        return diags;
    }
    if program.function(&program.entry).is_none() {
        diags.push(Diagnostic::error_pc(None, format!("entry function `{}` not defined", program.entry)));
    }

    let mut names = BTreeSet::new();
    let mut next = 0;
    for f in &program.functions {
        if !names.insert(f.name.as_str()) {
            diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("duplicate function `{}`", f.name)));
        }
        if f.body.start != next {
            diags.push(Diagnostic::error_pc(Some(f.body.start), format!("function `{}` body is not contiguous", f.name)));
        }
        next = f.body.end;
        if f.body.is_empty() {
            diags.push(Diagnostic::error_pc(None, format!("function `{}` has an empty body", f.name)));
        } else if !f.body.contains(&f.entry_pc) {
            diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("entry of `{}` lies outside its body", f.name)));
        }
        for (label, pc) in &f.labels {
            if !f.body.contains(pc) {
                diags.push(Diagnostic::error_pc(Some(*pc), format!("label `{label}` outside function `{}`", f.name)));
            }
        }
    }
    if next != program.instrs.len() {
        diags.push(Diagnostic::error_pc(None, "instructions outside any function"));
    }

    for (pc, instr) in program.instrs.iter().enumerate() {
        let body = program.function_at(pc).map(|f| f.body.clone()).unwrap_or(0..0);
        match instr {
            Instr::Assign { rhs, .. } => rhs.for_each_operand(&mut |o| {
                if let Operand::Lit(n) = o {
                    if *n > mask(w) {
                        diags.push(Diagnostic::error_pc(Some(pc), format!("literal {n} does not fit in {w} bits")));
                    }
                }
            }),
            Instr::Jcc { target, .. } => match target {
                JumpTarget::Label { name, pc: t } => {
                    if !body.contains(t) {
                        diags.push(Diagnostic::error_pc(Some(pc), format!("jump target `{name}` outside the function")));
                    }
                }
                JumpTarget::Register { reg, labels } => {
                    if labels.is_empty() {
                        diags.push(Diagnostic::error_pc(
                            Some(pc),
                            format!("indirect jump through `{reg}` has no declared label set"),
                        ));
                    }
                    for (name, t) in labels {
                        if !body.contains(t) {
                            diags.push(Diagnostic::error_pc(Some(pc), format!("jump target `{name}` outside the function")));
                        }
                    }
                }
            },
            Instr::Call { callee } if program.function(callee).is_none() => {
                diags.push(Diagnostic::error_pc(Some(pc), format!("call to unknown function `{callee}`")));
            }
            _ => {}
        }
    }

    let mut regions = BTreeSet::new();
    let mut secrets = BTreeSet::new();
    for a in &program.annotations {
        let Some(f) = program.function(a.function()) else {
            diags.push(Diagnostic::error_pc(None, format!("annotation for unknown function `{}`", a.function())));
            continue;
        };
        let reg = a.reg();
        if reg.is_stack() {
            diags.push(Diagnostic::error_pc(Some(f.entry_pc), "the stack register cannot be annotated"));
        }
        let used = program.instrs[f.body.clone()].iter().any(|i| i.registers().contains(reg));
        if !used {
            diags.push(Diagnostic::error_pc(
                Some(f.entry_pc),
                format!("annotated register `{reg}` does not occur in `{}`", f.name),
            ));
        }
        let key = (a.function().to_string(), reg.clone());
        match a {
            SecretAnnotation::SecretRegion { size, .. } => {
                if *size == 0 {
                    diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("secret region `{reg}` has size 0")));
                }
                if !regions.insert(key.clone()) {
                    diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("region base `{reg}` annotated twice")));
                }
                if secrets.contains(&key) {
                    diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("`{reg}` is both a secret and a region base")));
                }
            }
            SecretAnnotation::RegisterSecret { .. } => {
                if !secrets.insert(key.clone()) {
                    diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("secret `{reg}` annotated twice")));
                }
                if regions.contains(&key) {
                    diags.push(Diagnostic::error_pc(Some(f.entry_pc), format!("`{reg}` is both a secret and a region base")));
                }
            }
        }
    }

    if diags.iter().any(Diagnostic::is_error) {
        return diags;
    }
    for f in &program.functions {
        let mut seen = BTreeSet::from([f.entry_pc]);
        let mut stack = vec![f.entry_pc];
        while let Some(pc) = stack.pop() {
            for s in program.successors(pc) {
                if seen.insert(s) {
                    stack.push(s);
                }
            }
        }
        for pc in f.body.clone() {
            if !seen.contains(&pc) {
                diags.push(Diagnostic::warning_pc(pc, format!("unreachable instruction in `{}`", f.name)));
            }
        }
    }
    diags
}
