//! Concrete interpreter with hi/lo labels, and the differential soundness
//! harness that checks analyzer fixpoints against concrete runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::absint::{AbsState, AnalysisResult, StateKey, Termination};
use crate::domain::{AbsValue, SecretId, ValueSet};
use crate::ir::{mask, Expr, Instr, JumpTarget, Operand, Program, Reg, SecretAnnotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Lo,
    Hi,
}

impl Label {
    pub fn join(self, o: Label) -> Label {
        self.max(o)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CVal {
    pub n: u64,
    pub label: Label,
}

impl CVal {
    pub fn lo(n: u64) -> Self {
        CVal { n, label: Label::Lo }
    }

    pub fn hi(n: u64) -> Self {
        CVal { n, label: Label::Hi }
    }
}

impl fmt::Display for CVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = match self.label {
            Label::Lo => "lo",
            Label::Hi => "hi",
        };
        write!(f, "{}/{l}", self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("the oracle needs a width of at least 8 bits, got {0}")]
    WidthTooSmall(u32),
    #[error("at most {max} secret regions fit the address layout, program declares {found}")]
    TooManyRegions { max: usize, found: usize },
    #[error("region {name} of size {size} exceeds the {limit}-cell slot")]
    RegionTooLarge { name: String, size: u64, limit: u64 },
    #[error("no value assigned to secret s{0}")]
    MissingSecret(SecretId),
    #[error("region {name} needs {expected} values, assignment has {found}")]
    RegionSize { name: String, expected: u64, found: usize },
}

/// Concrete placement of the stack and the secret regions.
///
/// The stack occupies the top quarter of the address space and starts with
/// `esp` one sixteenth below the top; regions start at half the address space,
/// each in its own eighth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub width: u32,
    pub stack_start: u64,
    pub initial_esp: u64,
    /// `(name, base, size)` per region annotation, in program order.
    pub regions: Vec<(String, u64, u64)>,
    /// Addresses at or above this limit fault; `None` allows the whole space.
    pub mem_limit: Option<u64>,
}

pub const MAX_REGIONS: usize = 2;

pub fn region_name(function: &str, reg: &Reg) -> String {
    format!("{function}.{reg}")
}

impl Layout {
    pub fn new(program: &Program) -> Result<Self, OracleError> {
        let w = program.width;
        if w < 8 {
            return Err(OracleError::WidthTooSmall(w));
        }
        let full = 1u128 << w;
        let stack_start = (full - (full >> 2)) as u64;
        let initial_esp = (full - (full >> 4)) as u64;
        let slot = 1u64 << (w - 3);
        let half = 1u64 << (w - 1);
        let decls = program.secret_regions();
        if decls.len() > MAX_REGIONS {
            return Err(OracleError::TooManyRegions { max: MAX_REGIONS, found: decls.len() });
        }
        let mut regions = Vec::new();
        for (k, a) in decls.into_iter().enumerate() {
            if let SecretAnnotation::SecretRegion { function, reg, size } = a {
                let name = region_name(function, reg);
                if *size > slot {
                    return Err(OracleError::RegionTooLarge { name, size: *size, limit: slot });
                }
                regions.push((name, half + k as u64 * slot, *size));
            }
        }
        Ok(Layout { width: w, stack_start, initial_esp, regions, mem_limit: None })
    }

    pub fn in_stack(&self, a: u64) -> bool {
        a >= self.stack_start && a <= mask(self.width)
    }

    pub fn in_region(&self, a: u64) -> bool {
        self.regions.iter().any(|(_, base, size)| a >= *base && a - base < *size)
    }

    pub fn region_bases(&self) -> Vec<u64> {
        self.regions.iter().map(|(_, b, _)| *b).collect()
    }

    pub fn region_base(&self, function: &str, reg: &Reg) -> Option<u64> {
        let name = region_name(function, reg);
        self.regions.iter().find(|(n, _, _)| *n == name).map(|(_, b, _)| *b)
    }
}

/// Concrete values for annotated secrets and secret-region contents.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretAssignment {
    pub secrets: BTreeMap<SecretId, u64>,
    /// Region contents keyed by `function.register`.
    #[serde(default)]
    pub regions: BTreeMap<String, Vec<u64>>,
}

impl SecretAssignment {
    pub fn random(program: &Program, layout: &Layout, rng: &mut impl Rng) -> Self {
        let m = mask(program.width);
        let secrets = program.annotation_secret_ids().into_iter().map(|(id, _)| (id, rng.random::<u64>() & m)).collect();
        let regions = layout
            .regions
            .iter()
            .map(|(name, _, size)| (name.clone(), (0..*size).map(|_| rng.random::<u64>() & m).collect()))
            .collect();
        SecretAssignment { secrets, regions }
    }

    fn check(&self, program: &Program, layout: &Layout) -> Result<(), OracleError> {
        for (id, _) in program.annotation_secret_ids() {
            if !self.secrets.contains_key(&id) {
                return Err(OracleError::MissingSecret(id));
            }
        }
        for (name, _, size) in &layout.regions {
            let found = self.regions.get(name).map_or(0, Vec::len);
            if found as u64 != *size {
                return Err(OracleError::RegionSize { name: name.clone(), expected: *size, found });
            }
        }
        Ok(())
    }
}

/// Public initial contents. Cells and registers not listed read as values
/// drawn from a generator seeded with `seed`, labeled lo.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryImage {
    pub seed: u64,
    pub memory: BTreeMap<u64, u64>,
    pub registers: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fault {
    OutOfBounds { pc: usize, addr: u64 },
    BadJumpTarget { pc: usize, value: u64 },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::OutOfBounds { pc, addr } => write!(f, "pc {pc}: access to {addr:#x} is out of bounds"),
            Fault::BadJumpTarget { pc, value } => write!(f, "pc {pc}: jump target {value} is not a declared label"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Location {
    Register(Reg),
    Memory(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Register(r) => write!(f, "{r}"),
            Location::Memory(a) => write!(f, "mem[{a:#x}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub pc: usize,
    pub writes: Vec<(Location, CVal)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunEnd {
    Finished,
    Fault(Fault),
    FuelExhausted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub end: RunEnd,
    pub final_registers: BTreeMap<Reg, CVal>,
}

impl Trace {
    /// One line per step: `pc=<n> <key>=<value>/<label> ...`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!("pc={}", s.pc));
            for (loc, v) in &s.writes {
                out.push_str(&format!(" {loc}={v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Frame {
    return_pc: usize,
    saved_esp: CVal,
    entry_esp: u64,
    defined: BTreeSet<Reg>,
    written: BTreeSet<u64>,
}

enum Flow {
    Next,
    Jump(usize),
    Call(String),
    Return,
}

/// Labeled concrete machine. One instance owns one run.
pub struct Machine<'p> {
    program: &'p Program,
    layout: Layout,
    secrets: BTreeMap<SecretId, u64>,
    regs: BTreeMap<Reg, CVal>,
    mem: BTreeMap<u64, CVal>,
    frames: Vec<Frame>,
    pc: usize,
    rng: ChaCha8Rng,
    finished: bool,
}

impl<'p> Machine<'p> {
    pub fn new(
        program: &'p Program,
        layout: Layout,
        secrets: &SecretAssignment,
        image: &MemoryImage,
    ) -> Result<Self, OracleError> {
        secrets.check(program, &layout)?;
        let m = mask(program.width);
        let mut mem: BTreeMap<u64, CVal> = image.memory.iter().map(|(a, v)| (*a & m, CVal::lo(*v & m))).collect();
        for (name, base, _) in &layout.regions {
            for (i, v) in secrets.regions[name].iter().enumerate() {
                mem.insert(base.wrapping_add(i as u64) & m, CVal::hi(*v & m));
            }
        }
        let regs = image.registers.iter().map(|(r, v)| (Reg::new(r), CVal::lo(*v & m))).collect();
        let mut machine = Machine {
            program,
            secrets: secrets.secrets.clone(),
            regs,
            mem,
            frames: Vec::new(),
            pc: 0,
            rng: ChaCha8Rng::seed_from_u64(image.seed),
            finished: false,
            layout,
        };
        let esp = CVal::lo(machine.layout.initial_esp);
        machine.regs.insert(Reg::stack(), esp);
        let entry = program.entry.clone();
        machine.enter(&entry, usize::MAX, esp);
        Ok(machine)
    }

    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn registers(&self) -> &BTreeMap<Reg, CVal> {
        &self.regs
    }

    fn mask(&self) -> u64 {
        mask(self.program.width)
    }

    fn enter(&mut self, name: &str, return_pc: usize, saved_esp: CVal) {
        let f = self.program.function(name).expect("validated callee");
        let mut defined = BTreeSet::from([Reg::stack()]);
        for a in self.program.annotations_of(name) {
            let v = match a {
                SecretAnnotation::RegisterSecret { reg, .. } => {
                    let id = self.program.secret_id_for(name, reg).expect("annotation has an id");
                    CVal::hi(self.secrets[&id])
                }
                SecretAnnotation::SecretRegion { reg, .. } => {
                    CVal::lo(self.layout.region_base(name, reg).expect("layout covers every region"))
                }
            };
            self.regs.insert(a.reg().clone(), v);
            defined.insert(a.reg().clone());
        }
        self.frames.push(Frame {
            return_pc,
            saved_esp,
            entry_esp: self.regs[&Reg::stack()].n,
            defined,
            written: BTreeSet::new(),
        });
        self.pc = f.entry_pc;
    }

    fn leave(&mut self) {
        let frame = self.frames.pop().expect("active frame");
        self.regs.insert(Reg::stack(), frame.saved_esp);
        match self.frames.last_mut() {
            Some(parent) => {
                parent.defined.extend(frame.defined);
                parent.written.extend(frame.written);
                self.pc = frame.return_pc;
            }
            None => {
                self.frames.push(frame);
                self.finished = true;
            }
        }
    }

    fn read_reg(&mut self, r: &Reg) -> CVal {
        if let Some(v) = self.regs.get(r) {
            return *v;
        }
        let v = CVal::lo(self.rng.random::<u64>() & self.mask());
        self.regs.insert(r.clone(), v);
        v
    }

    fn read_mem(&mut self, addr: u64) -> CVal {
        if let Some(v) = self.mem.get(&addr) {
            return *v;
        }
        let v = CVal::lo(self.rng.random::<u64>() & self.mask());
        self.mem.insert(addr, v);
        v
    }

    /// Peeks at memory without drawing fresh values for unset cells.
    pub fn memory_at(&self, addr: u64) -> Option<CVal> {
        self.mem.get(&addr).copied()
    }

    fn operand(&mut self, o: &Operand) -> CVal {
        match o {
            Operand::Reg(r) => self.read_reg(r),
            Operand::Lit(n) => CVal::lo(n & self.mask()),
        }
    }

    pub fn eval(&mut self, e: &Expr) -> CVal {
        match e {
            Expr::Leaf(o) => self.operand(o),
            Expr::Bin(op, a, b) => {
                let x = self.eval(a);
                let y = self.eval(b);
                CVal { n: op.apply(x.n, y.n, self.program.width), label: x.label.join(y.label) }
            }
        }
    }

    fn write_reg(&mut self, r: &Reg, v: CVal, writes: &mut Vec<(Location, CVal)>) {
        self.regs.insert(r.clone(), v);
        self.frames.last_mut().expect("active frame").defined.insert(r.clone());
        writes.push((Location::Register(r.clone()), v));
    }

    fn check_addr(&self, pc: usize, addr: u64) -> Result<(), Fault> {
        match self.layout.mem_limit {
            Some(limit) if addr >= limit => Err(Fault::OutOfBounds { pc, addr }),
            _ => Ok(()),
        }
    }

    /// Executes one instruction. Returns the trace record of the step.
    pub fn step(&mut self) -> Result<TraceStep, Fault> {
        debug_assert!(!self.finished);
        let pc = self.pc;
        let mut writes = Vec::new();
        let flow = match self.program.instr(pc) {
            Instr::Assign { dst, rhs } => {
                let v = self.eval(rhs);
                self.write_reg(dst, v, &mut writes);
                Flow::Next
            }
            Instr::Load { dst, addr } => {
                let a = self.read_reg(addr);
                self.check_addr(pc, a.n)?;
                let cell = self.read_mem(a.n);
                let label = if self.layout.in_region(a.n) || a.label == Label::Hi { Label::Hi } else { cell.label };
                self.write_reg(dst, CVal { n: cell.n, label }, &mut writes);
                Flow::Next
            }
            Instr::Store { src, addr } => {
                let a = self.read_reg(addr);
                self.check_addr(pc, a.n)?;
                let v = self.read_reg(src);
                self.mem.insert(a.n, v);
                self.frames.last_mut().expect("active frame").written.insert(a.n);
                writes.push((Location::Memory(a.n), v));
                Flow::Next
            }
            Instr::IsZero { dst, src } => {
                let v = self.read_reg(src);
                self.write_reg(dst, CVal::lo(u64::from(v.n == 0)), &mut writes);
                Flow::Next
            }
            Instr::Jcc { cond, target } => {
                let c = self.read_reg(cond);
                if c.n == 0 {
                    Flow::Next
                } else {
                    match target {
                        JumpTarget::Label { pc: t, .. } => Flow::Jump(*t),
                        JumpTarget::Register { reg, labels } => {
                            let v = self.read_reg(reg).n;
                            match labels.iter().find(|(_, t)| *t as u64 == v) {
                                Some((_, t)) => Flow::Jump(*t),
                                None => return Err(Fault::BadJumpTarget { pc, value: v }),
                            }
                        }
                    }
                }
            }
            Instr::Call { callee } => Flow::Call(callee.clone()),
            Instr::Ret => Flow::Return,
        };
        match flow {
            Flow::Next => {
                if self.program.falls_off_end(pc) {
                    self.leave();
                } else {
                    self.pc = pc + 1;
                }
            }
            Flow::Jump(t) => self.pc = t,
            Flow::Call(callee) => {
                let esp = self.read_reg(&Reg::stack());
                self.enter(&callee, pc + 1, esp);
            }
            Flow::Return => self.leave(),
        }
        Ok(TraceStep { pc, writes })
    }

    fn frame(&self) -> &Frame {
        self.frames.last().expect("active frame")
    }
}

/// Runs the program from its entry until it returns, faults or runs out of fuel.
pub fn crun(
    program: &Program,
    secrets: &SecretAssignment,
    image: &MemoryImage,
    fuel: usize,
) -> Result<Trace, OracleError> {
    let mut m = Machine::new(program, Layout::new(program)?, secrets, image)?;
    let mut steps = Vec::new();
    let end = loop {
        if m.is_finished() {
            break RunEnd::Finished;
        }
        if steps.len() >= fuel {
            break RunEnd::FuelExhausted;
        }
        match m.step() {
            Ok(s) => steps.push(s),
            Err(f) => break RunEnd::Fault(f),
        }
    };
    Ok(Trace { steps, end, final_registers: m.regs })
}

/// Concrete interpretation of the symbolic atoms for one activation.
pub struct Valuation<'a> {
    pub width: u32,
    pub secrets: &'a BTreeMap<SecretId, u64>,
    /// Secrets minted by the analyzer; their values are unconstrained.
    pub unconstrained: &'a BTreeSet<SecretId>,
    /// Concrete value of `e`: the stack pointer at entry of the activation.
    pub stack: u64,
    pub layout: &'a Layout,
}

fn eval_abs(av: &AbsValue, val: &Valuation<'_>, header: u64) -> Option<u64> {
    Some(match av {
        AbsValue::Top | AbsValue::Public => return None,
        AbsValue::Secret(i) => *val.secrets.get(i)?,
        AbsValue::Header => header,
        AbsValue::Stack => val.stack,
        AbsValue::Const(n) => *n,
        AbsValue::Node(n) => n.op().apply(eval_abs(n.lhs(), val, header)?, eval_abs(n.rhs(), val, header)?, val.width),
    })
}

/// Whether the concrete value `v` is described by the abstract value `av`.
pub fn gamma_member(av: &AbsValue, v: CVal, val: &Valuation<'_>) -> Result<bool, OracleError> {
    let lo = v.label == Label::Lo;
    Ok(match av {
        AbsValue::Top => true,
        AbsValue::Public => lo,
        AbsValue::Secret(i) => {
            if val.unconstrained.contains(i) {
                !lo
            } else {
                let s = val.secrets.get(i).ok_or(OracleError::MissingSecret(*i))?;
                !lo && *s == v.n
            }
        }
        AbsValue::Header => lo && val.layout.in_region(v.n),
        AbsValue::Stack => lo && val.layout.in_stack(v.n),
        AbsValue::Const(n) => lo && *n == v.n,
        AbsValue::Node(_) => {
            let expect = if av.has_secret() { Label::Hi } else { Label::Lo };
            if v.label != expect {
                return Ok(false);
            }
            let ids = av.secrets();
            if ids.iter().any(|i| val.unconstrained.contains(i)) {
                return Ok(true);
            }
            if let Some(i) = ids.iter().find(|i| !val.secrets.contains_key(i)) {
                return Err(OracleError::MissingSecret(*i));
            }
            let bases = if av.has_header() { val.layout.region_bases() } else { vec![0] };
            bases.into_iter().any(|h| eval_abs(av, val, h) == Some(v.n))
        }
    })
}

/// Whether some element of the set describes `v`. An absent key reads as `{p}`.
pub fn set_member(set: Option<&ValueSet>, v: CVal, val: &Valuation<'_>) -> Result<bool, OracleError> {
    match set {
        None => Ok(v.label == Label::Lo),
        Some(s) => {
            for a in s.iter() {
                if gamma_member(a, v, val)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// Abstraction of a single concrete value. `next_secret` supplies ids for hi values.
pub fn alpha(v: CVal, layout: &Layout, literals: &BTreeSet<u64>, next_secret: &mut SecretId) -> AbsValue {
    if v.label == Label::Hi {
        let id = *next_secret;
        *next_secret += 1;
        AbsValue::Secret(id)
    } else if layout.in_region(v.n) {
        AbsValue::Header
    } else if layout.in_stack(v.n) {
        AbsValue::Stack
    } else if literals.contains(&v.n) {
        AbsValue::Const(v.n)
    } else {
        AbsValue::Public
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SoundnessConfig {
    pub runs: usize,
    pub seed: u64,
    pub fuel: usize,
}

impl Default for SoundnessConfig {
    fn default() -> Self {
        SoundnessConfig { runs: 100, seed: 7, fuel: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub run: usize,
    /// `None` for the check of the final state against the exit state.
    pub pc: Option<usize>,
    pub location: String,
    pub concrete: CVal,
    pub abstract_set: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pc {
            Some(pc) => write!(f, "run {} pc {}: ", self.run, pc)?,
            None => write!(f, "run {} exit: ", self.run)?,
        }
        write!(f, "{} = {} not in {}", self.location, self.concrete, self.abstract_set)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SoundnessReport {
    pub runs: usize,
    pub points_checked: usize,
    pub values_checked: usize,
    pub violations: Vec<Violation>,
    pub faults: Vec<(usize, Fault)>,
    pub fuel_exhausted: usize,
    /// Set when the analysis did not reach a fixpoint and nothing was checked.
    pub skipped: Option<String>,
}

struct Checker<'a> {
    layout: &'a Layout,
    width: u32,
    unconstrained: BTreeSet<SecretId>,
    report: SoundnessReport,
}

impl Checker<'_> {
    fn check_state(
        &mut self,
        run: usize,
        pc: Option<usize>,
        state: &AbsState,
        m: &Machine<'_>,
        secrets: &SecretAssignment,
    ) -> Result<(), OracleError> {
        let frame = m.frame();
        let val = Valuation {
            width: self.width,
            secrets: &secrets.secrets,
            unconstrained: &self.unconstrained,
            stack: frame.entry_esp,
            layout: self.layout,
        };
        let mut failures = Vec::new();
        for r in &frame.defined {
            let v = m.regs[r];
            self.report.values_checked += 1;
            let set = state.get(&StateKey::Register(r.clone()));
            if !set_member(set, v, &val)? {
                failures.push((Location::Register(r.clone()), v, set));
            }
        }
        let m_mask = mask(self.width);
        for (key, set) in state.entries() {
            let addr = match key {
                StateKey::Register(_) => continue,
                StateKey::StackSlot(o) => frame.entry_esp.wrapping_add(*o as u64) & m_mask,
                StateKey::AccessExpr(r, o) => match m.regs.get(r) {
                    Some(b) if frame.defined.contains(r) => b.n.wrapping_add(*o as u64) & m_mask,
                    _ => continue,
                },
            };
            if !frame.written.contains(&addr) {
                continue;
            }
            let v = m.memory_at(addr).expect("written cell");
            self.report.values_checked += 1;
            if !set_member(Some(set), v, &val)? {
                failures.push((Location::Memory(addr), v, Some(set)));
            }
        }
        for (loc, v, set) in failures {
            self.report.violations.push(Violation {
                run,
                pc,
                location: match loc {
                    Location::Memory(a) => format!("{loc} ({})", key_hint(state, a, frame.entry_esp, m_mask)),
                    _ => loc.to_string(),
                },
                concrete: v,
                abstract_set: set.map_or_else(|| "{p}".to_string(), |s| s.to_string()),
            });
        }
        Ok(())
    }
}

fn key_hint(state: &AbsState, addr: u64, esp: u64, m: u64) -> String {
    state
        .keys()
        .find(|k| matches!(k, StateKey::StackSlot(o) if esp.wrapping_add(*o as u64) & m == addr))
        .map(|k| k.to_string())
        .unwrap_or_else(|| "access".to_string())
}

/// Runs the program with random secrets and checks every executed pc against
/// the fixpoint state recorded for it.
pub fn check_soundness(
    program: &Program,
    analysis: &AnalysisResult,
    cfg: &SoundnessConfig,
) -> Result<SoundnessReport, OracleError> {
    if !matches!(analysis.termination, Termination::Fixpoint) {
        return Ok(SoundnessReport {
            skipped: Some(format!("analysis did not reach a fixpoint: {:?}", analysis.termination)),
            ..SoundnessReport::default()
        });
    }
    let layout = Layout::new(program)?;
    let mut chk = Checker {
        layout: &layout,
        width: program.width,
        unconstrained: analysis.minted_secrets.keys().copied().collect(),
        report: SoundnessReport { runs: cfg.runs, ..SoundnessReport::default() },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for run in 0..cfg.runs {
        let secrets = SecretAssignment::random(program, &layout, &mut rng);
        let image = MemoryImage { seed: rng.random(), ..MemoryImage::default() };
        let mut m = Machine::new(program, layout.clone(), &secrets, &image)?;
        let mut steps = 0;
        loop {
            if m.is_finished() {
                match &analysis.exit_state {
                    Some(exit) => chk.check_state(run, None, exit, &m, &secrets)?,
                    None => chk.report.violations.push(Violation {
                        run,
                        pc: None,
                        location: "exit".into(),
                        concrete: CVal::lo(0),
                        abstract_set: "unreachable".into(),
                    }),
                }
                break;
            }
            if steps >= cfg.fuel {
                chk.report.fuel_exhausted += 1;
                break;
            }
            let pc = m.pc();
            chk.report.points_checked += 1;
            match analysis.states.get(&pc) {
                Some(st) => chk.check_state(run, Some(pc), st, &m, &secrets)?,
                None => chk.report.violations.push(Violation {
                    run,
                    pc: Some(pc),
                    location: "pc".into(),
                    concrete: CVal::lo(pc as u64),
                    abstract_set: "unreachable".into(),
                }),
            }
            if let Err(f) = m.step() {
                chk.report.faults.push((run, f));
                break;
            }
            steps += 1;
        }
    }
    Ok(chk.report)
}
