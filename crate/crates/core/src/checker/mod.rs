//! Leak constraints over W-bit bitvectors and a built-in enumerative solver.
//!
//! An address formula `f` leaks through the cache when two secrets can put
//! `f` on different lines, i.e. `(f >> L) != (f' >> L)` is satisfiable, where
//! `f'` renames every secret and keeps the public, stack and header variables.

pub mod smtlib;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::absint::{SiteKind, SiteRecord};
use crate::domain::{AbsValue, SecretId};
use crate::ir::{mask, to_signed, BinOp};

pub const DEFAULT_LINE_BITS: u32 = 6;
pub const DEFAULT_EXHAUSTIVE_CAP: u32 = 24;
pub const DEFAULT_ENUM_BUDGET: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BvVar {
    Secret(SecretId),
    /// Renamed copy of a secret.
    SecretPrime(SecretId),
    Public,
    Stack,
    Header,
}

impl BvVar {
    pub fn name(&self) -> String {
        match self {
            BvVar::Secret(i) => format!("s{i}"),
            BvVar::SecretPrime(i) => format!("sp{i}"),
            BvVar::Public => "pub".into(),
            BvVar::Stack => "stk".into(),
            BvVar::Header => "hdr".into(),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, BvVar::Public | BvVar::Stack | BvVar::Header)
    }

    /// Declaration order: each secret next to its copy, then shared variables.
    fn decl_key(&self) -> (u8, SecretId, u8) {
        match self {
            BvVar::Secret(i) => (0, *i, 0),
            BvVar::SecretPrime(i) => (0, *i, 1),
            BvVar::Public => (1, 0, 0),
            BvVar::Stack => (2, 0, 0),
            BvVar::Header => (3, 0, 0),
        }
    }
}

impl fmt::Display for BvVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BvExpr {
    Var(BvVar),
    Const(u64),
    Bin(BinOp, Box<BvExpr>, Box<BvExpr>),
}

impl BvExpr {
    pub fn vars(&self) -> BTreeSet<BvVar> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<BvVar>) {
        match self {
            BvExpr::Var(v) => {
                out.insert(*v);
            }
            BvExpr::Const(_) => {}
            BvExpr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn has_secret(&self) -> bool {
        self.vars().iter().any(|v| matches!(v, BvVar::Secret(_)))
    }

    /// Replaces every secret with its renamed copy.
    pub fn rename(&self) -> BvExpr {
        match self {
            BvExpr::Var(BvVar::Secret(i)) => BvExpr::Var(BvVar::SecretPrime(*i)),
            BvExpr::Var(_) | BvExpr::Const(_) => self.clone(),
            BvExpr::Bin(op, a, b) => BvExpr::Bin(*op, Box::new(a.rename()), Box::new(b.rename())),
        }
    }

    /// Tree-walking evaluation; unassigned variables read as 0.
    pub fn eval(&self, env: &BTreeMap<BvVar, u64>, width: u32) -> u64 {
        match self {
            BvExpr::Var(v) => env.get(v).copied().unwrap_or(0) & mask(width),
            BvExpr::Const(n) => n & mask(width),
            BvExpr::Bin(op, a, b) => op.apply(a.eval(env, width), b.eval(env, width), width),
        }
    }
}

impl fmt::Display for BvExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BvExpr::Var(v) => write!(f, "{v}"),
            BvExpr::Const(n) => write!(f, "{n}"),
            BvExpr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.ir_symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckerError {
    #[error("⊤ has no bitvector translation")]
    TopLeaf,
}

/// Bitvector translation of an abstract value. `p`, `e` and `u` become shared
/// free variables; secrets become one variable per id.
pub fn translate(av: &AbsValue, width: u32) -> Result<BvExpr, CheckerError> {
    Ok(match av {
        AbsValue::Top => return Err(CheckerError::TopLeaf),
        AbsValue::Public => BvExpr::Var(BvVar::Public),
        AbsValue::Secret(i) => BvExpr::Var(BvVar::Secret(*i)),
        AbsValue::Header => BvExpr::Var(BvVar::Header),
        AbsValue::Stack => BvExpr::Var(BvVar::Stack),
        AbsValue::Const(n) => BvExpr::Const(n & mask(width)),
        AbsValue::Node(n) => BvExpr::Bin(n.op(), Box::new(translate(n.lhs(), width)?), Box::new(translate(n.rhs(), width)?)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeakKind {
    CacheLine { line_bits: u32 },
    Branch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakConstraint {
    pub kind: LeakKind,
    pub width: u32,
    pub original: BvExpr,
    pub renamed: BvExpr,
}

impl LeakConstraint {
    /// All variables of both copies, in declaration order.
    pub fn vars(&self) -> Vec<BvVar> {
        let mut v: Vec<BvVar> = self.original.vars().union(&self.renamed.vars()).copied().collect();
        v.sort_by_key(BvVar::decl_key);
        v
    }

    fn distinguishes(&self, a: u64, b: u64) -> bool {
        match self.kind {
            LeakKind::CacheLine { line_bits } => a >> line_bits != b >> line_bits,
            LeakKind::Branch => a != b,
        }
    }

    /// Whether the assignment satisfies the constraint, by tree evaluation.
    pub fn holds(&self, env: &BTreeMap<BvVar, u64>) -> bool {
        self.distinguishes(self.original.eval(env, self.width), self.renamed.eval(env, self.width))
    }
}

/// `(f >> L) != (f' >> L)`; `None` when `f` mentions no secret.
pub fn make_cache_constraint(f: &BvExpr, width: u32, line_bits: u32) -> Option<LeakConstraint> {
    assert!(line_bits < width, "line bits must be below the width");
    f.has_secret().then(|| LeakConstraint {
        kind: LeakKind::CacheLine { line_bits },
        width,
        original: f.clone(),
        renamed: f.rename(),
    })
}

/// `f != f'`; `None` when `f` mentions no secret.
pub fn make_branch_constraint(f: &BvExpr, width: u32) -> Option<LeakConstraint> {
    f.has_secret().then(|| LeakConstraint { kind: LeakKind::Branch, width, original: f.clone(), renamed: f.rename() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Sat { witness: BTreeMap<String, u64> },
    Unsat,
    TopAccess,
    NotApplicable,
    Unknown { reason: String },
}

impl Verdict {
    /// Ranking used to pick the reported verdict of a site.
    pub fn strength(&self) -> u8 {
        match self {
            Verdict::Sat { .. } => 4,
            Verdict::TopAccess => 3,
            Verdict::Unknown { .. } => 2,
            Verdict::Unsat => 1,
            Verdict::NotApplicable => 0,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Verdict::Sat { .. } => "SAT",
            Verdict::Unsat => "UNSAT",
            Verdict::TopAccess => "TOP_ACCESS",
            Verdict::NotApplicable => "NOT_APPLICABLE",
            Verdict::Unknown { .. } => "UNKNOWN",
        }
    }

    pub fn is_leak(&self) -> bool {
        matches!(self, Verdict::Sat { .. } | Verdict::TopAccess)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Sat { witness } => {
                f.write_str("SAT")?;
                for (k, v) in witness {
                    write!(f, " {k}={v}")?;
                }
                Ok(())
            }
            Verdict::Unknown { reason } => write!(f, "UNKNOWN ({reason})"),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolverConfig {
    pub budget: u64,
    pub seed: u64,
    pub exhaustive_cap_bits: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { budget: DEFAULT_ENUM_BUDGET, seed: 0, exhaustive_cap_bits: DEFAULT_EXHAUSTIVE_CAP }
    }
}

#[derive(Clone, Copy)]
enum Op {
    Var(usize),
    Const(u64),
    Bin(BinOp),
}

/// Postfix form of one side of a constraint, with variables as indices.
struct Compiled {
    ops: Vec<Op>,
}

impl Compiled {
    fn new(e: &BvExpr, vars: &[BvVar]) -> Self {
        fn go(e: &BvExpr, vars: &[BvVar], out: &mut Vec<Op>) {
            match e {
                BvExpr::Var(v) => out.push(Op::Var(vars.iter().position(|x| x == v).expect("known variable"))),
                BvExpr::Const(n) => out.push(Op::Const(*n)),
                BvExpr::Bin(op, a, b) => {
                    go(a, vars, out);
                    go(b, vars, out);
                    out.push(Op::Bin(*op));
                }
            }
        }
        let mut ops = Vec::new();
        go(e, vars, &mut ops);
        Compiled { ops }
    }

    fn eval(&self, vals: &[u64], width: u32, stack: &mut Vec<u64>) -> u64 {
        stack.clear();
        for op in &self.ops {
            match op {
                Op::Var(i) => stack.push(vals[*i]),
                Op::Const(n) => stack.push(*n),
                Op::Bin(b) => {
                    let y = stack.pop().expect("operand");
                    let x = stack.pop().expect("operand");
                    stack.push(b.apply(x, y, width));
                }
            }
        }
        stack.pop().expect("result")
    }
}

/// Unsigned range `[lo, hi]` of a formula over all variable values.
fn interval(e: &BvExpr, width: u32) -> (u64, u64) {
    let max = mask(width);
    let full = (0, max);
    let pow2_cover = |x: u64| if x == 0 { 0 } else { (u64::MAX >> x.leading_zeros()) & max };
    match e {
        BvExpr::Var(_) => full,
        BvExpr::Const(n) => (*n, *n),
        BvExpr::Bin(op, a, b) => {
            let (l1, h1) = interval(a, width);
            let (l2, h2) = interval(b, width);
            let fits = |v: u128| v <= max as u128;
            match op {
                BinOp::Add if fits(h1 as u128 + h2 as u128) => (l1 + l2, h1 + h2),
                BinOp::Sub if l1 >= h2 => (l1 - h2, h1 - l2),
                BinOp::Mul if fits(h1 as u128 * h2 as u128) => (l1 * l2, h1 * h2),
                BinOp::Div if l2 > 0 => (l1 / h2, h1 / l2),
                BinOp::Mod if l2 > 0 => (0, h1.min(h2 - 1)),
                BinOp::Mod => (0, h1),
                BinOp::And => (0, h1.min(h2)),
                BinOp::Or => (l1.max(l2), pow2_cover(h1.max(h2))),
                BinOp::Xor => (0, pow2_cover(h1.max(h2))),
                BinOp::Bsh if l2 == h2 => {
                    let amount = to_signed(l2, width);
                    if amount >= 0 {
                        let k = amount as u32;
                        if k >= width {
                            (0, 0)
                        } else if fits((h1 as u128) << k) {
                            (l1 << k, h1 << k)
                        } else {
                            full
                        }
                    } else {
                        let k = amount.unsigned_abs();
                        if k >= u64::from(width) {
                            (0, 0)
                        } else {
                            (l1 >> k, h1 >> k)
                        }
                    }
                }
                _ => full,
            }
        }
    }
}

/// True when the compared quantity is provably the same for every assignment.
fn refuted_by_interval(c: &LeakConstraint) -> bool {
    let (lo, hi) = interval(&c.original, c.width);
    match c.kind {
        LeakKind::CacheLine { line_bits } => lo >> line_bits == hi >> line_bits,
        LeakKind::Branch => lo == hi,
    }
}

fn structured_values(kind: LeakKind, width: u32) -> Vec<u64> {
    let m = mask(width);
    let mut out = Vec::new();
    let mut push = |v: u64| {
        let v = v & m;
        if v != 0 && !out.contains(&v) {
            out.push(v);
        }
    };
    if let LeakKind::CacheLine { line_bits } = kind {
        for k in 1..=16u64 {
            push(k << line_bits);
        }
    }
    for b in 0..width {
        push(1 << b);
    }
    push(m);
    out
}

struct Search<'c> {
    c: &'c LeakConstraint,
    vars: Vec<BvVar>,
    lhs: Compiled,
    rhs: Compiled,
    stack: Vec<u64>,
}

impl<'c> Search<'c> {
    fn new(c: &'c LeakConstraint) -> Self {
        let vars = c.vars();
        Search { lhs: Compiled::new(&c.original, &vars), rhs: Compiled::new(&c.renamed, &vars), vars, c, stack: Vec::new() }
    }

    fn test(&mut self, vals: &[u64]) -> bool {
        let a = self.lhs.eval(vals, self.c.width, &mut self.stack);
        let b = self.rhs.eval(vals, self.c.width, &mut self.stack);
        self.c.distinguishes(a, b)
    }

    fn witness(&self, vals: &[u64]) -> Verdict {
        let env: BTreeMap<BvVar, u64> = self.vars.iter().copied().zip(vals.iter().copied()).collect();
        assert!(self.c.holds(&env), "solver produced a witness that does not satisfy the constraint");
        Verdict::Sat { witness: env.iter().map(|(k, v)| (k.name(), *v)).collect() }
    }

    /// Secrets at 0 and one renamed secret (or all of them) swept over the
    /// candidate values, under a few choices of the shared variables.
    fn structured(&mut self) -> Option<Vec<u64>> {
        let cands = structured_values(self.c.kind, self.c.width);
        let shared: Vec<usize> = (0..self.vars.len()).filter(|&i| self.vars[i].is_shared()).collect();
        let primes: Vec<usize> =
            (0..self.vars.len()).filter(|&i| matches!(self.vars[i], BvVar::SecretPrime(_))).collect();
        let mut bases = vec![vec![0u64; self.vars.len()]];
        for &i in &shared {
            for &v in cands.iter().chain(std::iter::once(&1)) {
                let mut b = vec![0u64; self.vars.len()];
                b[i] = v;
                bases.push(b);
            }
        }
        for base in &bases {
            for &c in &cands {
                let mut groups: Vec<Vec<usize>> = primes.iter().map(|&p| vec![p]).collect();
                if primes.len() > 1 {
                    groups.push(primes.clone());
                }
                for g in groups {
                    let mut vals = base.clone();
                    for &p in &g {
                        vals[p] = c;
                    }
                    if self.test(&vals) {
                        return Some(vals);
                    }
                }
            }
        }
        None
    }

    fn random(&mut self, budget: u64, seed: u64) -> Option<Vec<u64>> {
        let m = mask(self.c.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals = vec![0u64; self.vars.len()];
        for _ in 0..budget {
            for v in vals.iter_mut() {
                *v = rng.random::<u64>() & m;
            }
            if self.test(&vals) {
                return Some(vals);
            }
        }
        None
    }

    fn exhaustive(&mut self) -> Option<Vec<u64>> {
        let m = mask(self.c.width);
        let mut vals = vec![0u64; self.vars.len()];
        loop {
            if self.test(&vals) {
                return Some(vals);
            }
            let mut i = 0;
            loop {
                if i == vals.len() {
                    return None;
                }
                if vals[i] == m {
                    vals[i] = 0;
                    i += 1;
                } else {
                    vals[i] += 1;
                    break;
                }
            }
        }
    }
}

/// Decides a leak constraint: interval refutation, structured candidates,
/// seeded random sampling, then exhaustive enumeration when the total
/// variable width is within the cap.
pub fn solve_enum(c: &LeakConstraint, cfg: &SolverConfig) -> Verdict {
    if refuted_by_interval(c) {
        return Verdict::Unsat;
    }
    let mut s = Search::new(c);
    if let Some(v) = s.structured() {
        return s.witness(&v);
    }
    if let Some(v) = s.random(cfg.budget, cfg.seed) {
        return s.witness(&v);
    }
    let bits = s.vars.len() as u64 * u64::from(c.width);
    if bits <= u64::from(cfg.exhaustive_cap_bits) {
        return match s.exhaustive() {
            Some(v) => s.witness(&v),
            None => Verdict::Unsat,
        };
    }
    Verdict::Unknown { reason: format!("no witness in {} samples over {bits} bits", cfg.budget) }
}

fn smt_const(n: u64, width: u32) -> String {
    if width.is_multiple_of(4) {
        format!("#x{:0w$x}", n & mask(width), w = (width / 4) as usize)
    } else {
        format!("#b{:0w$b}", n & mask(width), w = width as usize)
    }
}

fn smt_term(e: &BvExpr, width: u32) -> String {
    match e {
        BvExpr::Var(v) => v.name(),
        BvExpr::Const(n) => smt_const(*n, width),
        BvExpr::Bin(op, a, b) => {
            let x = smt_term(a, width);
            let name = match op {
                BinOp::Add => "bvadd",
                BinOp::Sub => "bvsub",
                BinOp::Mul => "bvmul",
                BinOp::Div => "bvudiv",
                BinOp::Mod => "bvurem",
                BinOp::And => "bvand",
                BinOp::Or => "bvor",
                BinOp::Xor => "bvxor",
                BinOp::Bsh => {
                    return match b.as_ref() {
                        BvExpr::Const(k) => {
                            let amount = to_signed(*k, width);
                            if amount >= 0 {
                                format!("(bvshl {x} {})", smt_const(*k, width))
                            } else {
                                format!("(bvlshr {x} {})", smt_const(amount.unsigned_abs(), width))
                            }
                        }
                        _ => {
                            let y = smt_term(b, width);
                            format!(
                                "(ite (bvslt {y} {zero}) (bvlshr {x} (bvneg {y})) (bvshl {x} {y}))",
                                zero = smt_const(0, width)
                            )
                        }
                    }
                }
            };
            format!("({name} {x} {})", smt_term(b, width))
        }
    }
}

fn smt_distinct(c: &LeakConstraint) -> String {
    let f = smt_term(&c.original, c.width);
    let g = smt_term(&c.renamed, c.width);
    match c.kind {
        LeakKind::CacheLine { line_bits } => {
            let l = smt_const(u64::from(line_bits), c.width);
            format!("(distinct (bvlshr {f} {l}) (bvlshr {g} {l}))")
        }
        LeakKind::Branch => format!("(distinct {f} {g})"),
    }
}

/// SMT-LIB 2 script whose satisfiability matches the constraint.
pub fn emit_smtlib(c: &LeakConstraint) -> String {
    emit_smtlib_any(std::slice::from_ref(c))
}

/// Script that is satisfiable iff one of the constraints is. All constraints
/// must share one width.
pub fn emit_smtlib_any(cs: &[LeakConstraint]) -> String {
    assert!(!cs.is_empty(), "no constraint to emit");
    let width = cs[0].width;
    assert!(cs.iter().all(|c| c.width == width), "constraints of different widths");
    let mut vars: Vec<BvVar> = cs.iter().flat_map(LeakConstraint::vars).collect::<BTreeSet<_>>().into_iter().collect();
    vars.sort_by_key(BvVar::decl_key);
    let mut out = String::from("(set-logic QF_BV)\n");
    for v in vars {
        out.push_str(&format!("(declare-const {v} (_ BitVec {width}))\n"));
    }
    let body: Vec<String> = cs.iter().map(smt_distinct).collect();
    if body.len() == 1 {
        out.push_str(&format!("(assert {})\n", body[0]));
    } else {
        out.push_str(&format!("(assert (or {}))\n", body.join(" ")));
    }
    out.push_str("(check-sat)\n(get-model)\n");
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckConfig {
    pub width: u32,
    pub line_bits: u32,
    pub solver: SolverConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { width: crate::ir::DEFAULT_WIDTH, line_bits: DEFAULT_LINE_BITS, solver: SolverConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormulaCheck {
    pub formula: AbsValue,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteVerdict {
    pub pc: usize,
    pub kind: SiteKind,
    pub function: String,
    pub verdict: Verdict,
    pub formulas: Vec<FormulaCheck>,
}

/// Constraint for one formula of a site, if it mentions a secret.
pub fn site_constraint(kind: SiteKind, formula: &AbsValue, cfg: &CheckConfig) -> Option<LeakConstraint> {
    if formula.is_top() || !formula.has_secret() {
        return None;
    }
    let f = translate(formula, cfg.width).ok()?;
    match kind {
        SiteKind::MemLoad | SiteKind::MemStore => make_cache_constraint(&f, cfg.width, cfg.line_bits),
        SiteKind::Branch => make_branch_constraint(&f, cfg.width),
    }
}

/// Checks every formula of a site and reports the strongest verdict.
pub fn check_site(site: &SiteRecord, cfg: &CheckConfig) -> SiteVerdict {
    let mut formulas = Vec::new();
    for f in &site.formulas {
        let verdict = if f.is_top() {
            Verdict::TopAccess
        } else {
            match site_constraint(site.kind, f, cfg) {
                Some(c) => solve_enum(&c, &cfg.solver),
                None => continue,
            }
        };
        formulas.push(FormulaCheck { formula: f.clone(), verdict });
    }
    let verdict = formulas
        .iter()
        .map(|f| &f.verdict)
        .fold(None::<&Verdict>, |best, v| match best {
            Some(b) if b.strength() >= v.strength() => Some(b),
            _ => Some(v),
        })
        .cloned()
        .unwrap_or(Verdict::NotApplicable);
    SiteVerdict { pc: site.pc, kind: site.kind, function: site.function.clone(), verdict, formulas }
}
