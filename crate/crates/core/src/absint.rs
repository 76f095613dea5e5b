//! Worklist fixpoint engine with context-sensitive function summaries.
//!
//! Registers are updated strongly, memory weakly. Memory is keyed either by a
//! stack offset (addresses of the shape `e + c`) or syntactically by the base
//! register and constant offset used to form the address.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{leq_vs, AbsValue, Category, Domain, SecretId, ValueSet, DEFAULT_BOUND};
use crate::ir::{from_signed, to_signed, validate, Diagnostic, Expr, Function, Instr, Operand, Program, Reg, PARAM_STRIDE};

/// Register that carries a function's return value.
pub const RETURN_REGISTER: &str = "eax";

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateKey {
    Register(Reg),
    /// Memory at `e + offset` in the current frame.
    StackSlot(i64),
    /// Memory at `reg + offset`, compared syntactically.
    AccessExpr(Reg, i64),
}

impl StateKey {
    pub fn reg(name: &str) -> Self {
        StateKey::Register(Reg::new(name))
    }
}

fn fmt_offset(f: &mut fmt::Formatter<'_>, base: &str, off: i64) -> fmt::Result {
    match off {
        0 => f.write_str(base),
        o if o < 0 => write!(f, "{base}-{}", o.unsigned_abs()),
        o => write!(f, "{base}+{o}"),
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateKey::Register(r) => write!(f, "{r}"),
            StateKey::StackSlot(o) => {
                f.write_str("[")?;
                fmt_offset(f, "e", *o)?;
                f.write_str("]")
            }
            StateKey::AccessExpr(r, o) => {
                f.write_str("!(")?;
                fmt_offset(f, r.as_str(), *o)?;
                f.write_str(")")
            }
        }
    }
}

impl fmt::Debug for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Lookup table from state keys to value sets; an absent key is ⊥.
///
/// Alongside the table the state remembers, for registers last assigned
/// `base ± c`, which base register and offset they denote, so that accesses
/// through different temporaries hit the same memory key.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct AbsState {
    entries: BTreeMap<StateKey, ValueSet>,
    addr_defs: BTreeMap<Reg, (Reg, i64)>,
}

impl AbsState {
    pub fn get(&self, key: &StateKey) -> Option<&ValueSet> {
        self.entries.get(key)
    }

    pub fn reg(&self, name: &str) -> Option<&ValueSet> {
        self.entries.get(&StateKey::reg(name))
    }

    pub fn set(&mut self, key: StateKey, v: ValueSet) {
        self.entries.insert(key, v);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&StateKey, &ValueSet)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &StateKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Strong register update, dropping memory keys and address definitions
    /// that referred to the old register value.
    pub fn assign_register(&mut self, dst: &Reg, v: ValueSet, def: Option<(Reg, i64)>) {
        self.entries.insert(StateKey::Register(dst.clone()), v);
        self.entries.retain(|k, _| !matches!(k, StateKey::AccessExpr(r, _) if r == dst));
        self.addr_defs.remove(dst);
        self.addr_defs.retain(|_, (base, _)| base != dst);
        if let Some((base, off)) = def {
            if &base != dst {
                self.addr_defs.insert(dst.clone(), (base, off));
            }
        }
    }

    pub fn weak_update(&mut self, dom: &Domain, key: StateKey, v: &ValueSet) {
        let joined = match self.entries.get(&key) {
            Some(old) => dom.join(old, v),
            None => v.clone(),
        };
        self.entries.insert(key, joined);
    }

    /// Memory key used for an access through `addr`.
    pub fn access_key(&self, addr: &Reg) -> StateKey {
        match self.addr_defs.get(addr) {
            Some((base, off)) => StateKey::AccessExpr(base.clone(), *off),
            None => StateKey::AccessExpr(addr.clone(), 0),
        }
    }

    fn resolve_def(&self, reg: Reg, off: i64, width: u32) -> (Reg, i64) {
        match self.addr_defs.get(&reg) {
            Some((base, o)) => (base.clone(), to_signed(from_signed(o.wrapping_add(off), width), width)),
            None => (reg, off),
        }
    }
}

impl fmt::Display for AbsState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k} ↦ {v}")?;
        }
        f.write_str("}")
    }
}

impl fmt::Debug for AbsState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Key-wise join; an address definition survives only if both sides agree on it.
pub fn merge_states(dom: &Domain, t1: &AbsState, t2: &AbsState) -> AbsState {
    let mut out = t1.clone();
    for (k, v) in &t2.entries {
        out.weak_update(dom, k.clone(), v);
    }
    out.addr_defs.retain(|r, d| t2.addr_defs.get(r) == Some(d));
    out
}

/// `t1 ⊑ t2`: every value set of `t1` is covered by the one in `t2`, and `t2`
/// assumes no address definition that `t1` lacks.
pub fn state_leq(t1: &AbsState, t2: &AbsState) -> bool {
    let empty = ValueSet::bottom();
    t1.entries.iter().all(|(k, v)| leq_vs(v, t2.entries.get(k).unwrap_or(&empty)))
        && t2.addr_defs.iter().all(|(r, d)| t1.addr_defs.get(r) == Some(d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    MemLoad,
    MemStore,
    Branch,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiteKind::MemLoad => "load",
            SiteKind::MemStore => "store",
            SiteKind::Branch => "branch",
        })
    }
}

/// A memory access or branch whose address or condition depends on a secret or is ⊤.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteRecord {
    pub pc: usize,
    pub kind: SiteKind,
    pub function: String,
    pub formulas: Vec<AbsValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationCause {
    StoreThroughPublic,
    StoreThroughTop,
}

impl fmt::Display for TerminationCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationCause::StoreThroughPublic => "store through a public pointer",
            TerminationCause::StoreThroughTop => "store through an unknown pointer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    Fixpoint,
    /// A store could overwrite arbitrary memory; analysis stopped at `pc`.
    Terminated { pc: usize, cause: TerminationCause },
    /// The iteration budget ran out while these pcs were still pending.
    Inconclusive { pcs: Vec<usize> },
}

impl Termination {
    pub fn is_fixpoint(&self) -> bool {
        matches!(self, Termination::Fixpoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[allow(clippy::manual_non_exhaustive)]
pub enum MergePolicy {
    Join,
    /// Overwrites the stored state instead of joining. Unsound; exists so the
    /// differential harness can be shown to catch a broken engine.
    #[doc(hidden)]
    Replace,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisConfig {
    pub width: u32,
    pub bound: usize,
    pub check_branches: bool,
    pub call_depth_budget: usize,
    pub iteration_budget: u64,
    pub merge_policy: MergePolicy,
    /// Re-checks monotonicity and the local fixpoint condition after the run.
    pub audit: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            width: crate::ir::DEFAULT_WIDTH,
            bound: DEFAULT_BOUND,
            check_branches: true,
            call_depth_budget: 16,
            iteration_budget: 1_000_000,
            merge_policy: MergePolicy::Join,
            audit: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statistics {
    pub functions_analyzed: usize,
    pub contexts_analyzed: usize,
    pub summary_hits: usize,
    pub instructions_processed: usize,
    pub iterations: u64,
    pub peak_state_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Context {
    pub callee: String,
    pub caller: Option<String>,
    pub args: Vec<ValueSet>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub ret: ValueSet,
    /// Join of the states at every return; `None` if the callee never returns.
    pub exit: Option<AbsState>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextReport {
    pub context: Context,
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    pub non_monotone_updates: u64,
    /// `(context, pc, successor)` edges whose transferred state is not below the stored one.
    pub fixpoint_violations: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisResult {
    /// In-state of every reached pc, joined over all contexts.
    pub states: BTreeMap<usize, AbsState>,
    /// Join of the entry function's return states.
    pub exit_state: Option<AbsState>,
    pub sites: Vec<SiteRecord>,
    pub termination: Termination,
    pub stats: Statistics,
    pub contexts: Vec<ContextReport>,
    /// Secrets minted at loads, with the `(pc, context)` that minted them.
    pub minted_secrets: BTreeMap<SecretId, (usize, usize)>,
    pub audit: Option<Audit>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("program is invalid: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("configuration width {config} differs from program width {program}")]
    WidthMismatch { config: u32, program: u32 },
}

enum Halt {
    Terminated { pc: usize, cause: TerminationCause },
    Budget { pcs: BTreeSet<usize> },
}

enum CallOutcome {
    Summary(usize),
    /// Recursion could not be cut by degrading arguments; assume nothing.
    Havoc,
}

struct ContextRecord {
    context: Context,
    states: BTreeMap<usize, AbsState>,
    summary: Option<Summary>,
}

pub struct Analyzer<'p> {
    program: &'p Program,
    config: AnalysisConfig,
    dom: Domain,
    contexts: Vec<ContextRecord>,
    active: Vec<usize>,
    fresh: BTreeMap<(usize, usize), SecretId>,
    next_secret: SecretId,
    stats: Statistics,
    audit: Audit,
}

/// Analyzes the program from its entry function.
pub fn run_worklist(program: &Program, config: &AnalysisConfig) -> Result<AnalysisResult, AnalysisError> {
    Ok(Analyzer::new(program, config.clone())?.run())
}

impl<'p> Analyzer<'p> {
    pub fn new(program: &'p Program, config: AnalysisConfig) -> Result<Self, AnalysisError> {
        let errors: Vec<Diagnostic> = validate(program).into_iter().filter(Diagnostic::is_error).collect();
        if !errors.is_empty() {
            return Err(AnalysisError::Invalid(errors));
        }
        if config.width != program.width {
            return Err(AnalysisError::WidthMismatch { config: config.width, program: program.width });
        }
        let annotated = program.annotation_secret_ids().len() as SecretId;
        Ok(Analyzer {
            program,
            dom: Domain::new(config.width, config.bound),
            config,
            contexts: Vec::new(),
            active: Vec::new(),
            fresh: BTreeMap::new(),
            next_secret: annotated + 1,
            stats: Statistics::default(),
            audit: Audit::default(),
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.dom
    }

    pub fn run(mut self) -> AnalysisResult {
        let entry = self.program.entry_function();
        let args = vec![ValueSet::public(); entry.param_count];
        let name = entry.name.clone();
        let termination = match self.analyze_call(&name, None, args) {
            Ok(_) => Termination::Fixpoint,
            Err(Halt::Terminated { pc, cause }) => Termination::Terminated { pc, cause },
            Err(Halt::Budget { pcs }) => Termination::Inconclusive { pcs: pcs.into_iter().collect() },
        };
        let mut stats = self.stats.clone();
        stats.contexts_analyzed = self.contexts.len();
        stats.functions_analyzed =
            self.contexts.iter().map(|c| c.context.callee.as_str()).collect::<BTreeSet<_>>().len();
        stats.instructions_processed = self.contexts.iter().map(|c| c.states.len()).sum();

        let audit = if self.config.audit {
            if termination.is_fixpoint() {
                self.check_local_fixpoint();
            }
            Some(self.audit.clone())
        } else {
            None
        };

        let mut states: BTreeMap<usize, AbsState> = BTreeMap::new();
        for rec in &self.contexts {
            for (pc, st) in &rec.states {
                match states.get_mut(pc) {
                    Some(acc) => *acc = merge_states(&self.dom, acc, st),
                    None => {
                        states.insert(*pc, st.clone());
                    }
                }
            }
        }
        let exit_state = self.contexts.first().and_then(|c| c.summary.as_ref()).and_then(|s| s.exit.clone());
        let minted_secrets = self.fresh.iter().map(|(&key, &id)| (id, key)).collect();
        AnalysisResult {
            sites: self.collect_sites(),
            states,
            exit_state,
            termination,
            stats,
            contexts: self
                .contexts
                .iter()
                .map(|c| ContextReport { context: c.context.clone(), summary: c.summary.clone() })
                .collect(),
            minted_secrets,
            audit,
        }
    }

    /// Entry state of `function` for the given stack-passed arguments.
    pub fn init_state(&self, function: &Function, args: &[ValueSet]) -> AbsState {
        let mut st = AbsState::default();
        st.set(StateKey::Register(Reg::stack()), ValueSet::singleton(AbsValue::Stack));
        for (i, a) in args.iter().enumerate() {
            if !a.is_empty() {
                st.set(StateKey::StackSlot(i as i64 * PARAM_STRIDE as i64), a.clone());
            }
        }
        for a in self.program.annotations_of(&function.name) {
            let v = match a {
                crate::ir::SecretAnnotation::RegisterSecret { reg, .. } => {
                    let id = self.program.secret_id_for(&function.name, reg).expect("annotation has an id");
                    AbsValue::Secret(id)
                }
                crate::ir::SecretAnnotation::SecretRegion { .. } => AbsValue::Header,
            };
            st.assign_register(a.reg(), ValueSet::singleton(v), None);
        }
        st
    }

    fn read(&self, st: &AbsState, r: &Reg) -> ValueSet {
        st.get(&StateKey::Register(r.clone())).cloned().unwrap_or_else(ValueSet::public)
    }

    pub fn eval_expr(&self, e: &Expr, st: &AbsState) -> ValueSet {
        match e {
            Expr::Leaf(Operand::Reg(r)) => self.read(st, r),
            Expr::Leaf(Operand::Lit(n)) => ValueSet::singleton(self.dom.constant(*n)),
            Expr::Bin(op, a, b) => self.dom.lift(*op, &self.eval_expr(a, st), &self.eval_expr(b, st)),
        }
    }

    fn fresh_secret(&mut self, pc: usize, ctx: usize) -> SecretId {
        if let Some(&id) = self.fresh.get(&(pc, ctx)) {
            return id;
        }
        let id = self.next_secret;
        self.next_secret += 1;
        self.fresh.insert((pc, ctx), id);
        id
    }

    fn stack_slot_key(&self, v: &AbsValue) -> Option<StateKey> {
        v.stack_offset().map(|c| StateKey::StackSlot(self.dom.signed(c)))
    }

    fn load(&mut self, pc: usize, ctx: usize, st: &AbsState, addr: &Reg) -> ValueSet {
        let a = self.read(st, addr);
        if a.is_top() || a.has_public() {
            return ValueSet::top();
        }
        let key = st.access_key(addr);
        let mut parts = BTreeSet::new();
        let mut fresh = false;
        for v in a.iter() {
            let found = match self.stack_slot_key(v) {
                Some(slot) => st.get(&slot),
                None => st.get(&key),
            };
            match found {
                Some(x) => parts.extend(x.iter().cloned()),
                None if matches!(v.category(), Category::S | Category::U) => fresh = true,
                None => {
                    parts.insert(AbsValue::Public);
                }
            }
        }
        if fresh {
            parts.insert(AbsValue::Secret(self.fresh_secret(pc, ctx)));
        }
        self.dom.canon(parts)
    }

    fn store(&self, st: &AbsState, src: &Reg, addr: &Reg) -> Result<AbsState, TerminationCause> {
        let a = self.read(st, addr);
        if a.is_top() {
            return Err(TerminationCause::StoreThroughTop);
        }
        if a.has_public() {
            return Err(TerminationCause::StoreThroughPublic);
        }
        let v = self.read(st, src);
        let mut out = st.clone();
        let mut keyed = false;
        for x in a.iter() {
            match self.stack_slot_key(x) {
                Some(slot) => out.weak_update(&self.dom, slot, &v),
                None => keyed = true,
            }
        }
        if keyed {
            out.weak_update(&self.dom, st.access_key(addr), &v);
        }
        Ok(out)
    }

    fn is_zero(&self, x: &ValueSet) -> ValueSet {
        let zero = AbsValue::Const(0);
        let one = AbsValue::Const(1);
        let consts = !x.is_empty() && x.iter().all(|v| matches!(v, AbsValue::Const(_)));
        if consts && x.len() == 1 && x.contains(&zero) {
            ValueSet::singleton(one)
        } else if consts && !x.contains(&zero) {
            ValueSet::singleton(zero)
        } else {
            self.dom.canon(BTreeSet::from([zero, one]))
        }
    }

    /// Abstract effect of the instruction at `pc`. `Ok(None)` means control
    /// does not continue (a call that never returns).
    pub fn transfer(&mut self, pc: usize, st: &AbsState, ctx: usize) -> Result<Option<AbsState>, (usize, TerminationCause)> {
        self.transfer_inner(pc, st, ctx).map_err(|h| match h {
            Halt::Terminated { pc, cause } => (pc, cause),
            Halt::Budget { pcs } => (pcs.first().copied().unwrap_or(pc), TerminationCause::StoreThroughTop),
        })
    }

    fn transfer_inner(&mut self, pc: usize, st: &AbsState, ctx: usize) -> Result<Option<AbsState>, Halt> {
        let w = self.dom.width;
        let instr = self.program.instr(pc).clone();
        let mut out = st.clone();
        match instr {
            Instr::Assign { dst, rhs } => {
                let v = self.eval_expr(&rhs, st);
                let def = rhs.as_reg_offset(w).map(|(r, o)| st.resolve_def(r, o, w));
                out.assign_register(&dst, v, def);
            }
            Instr::Load { dst, addr } => {
                let v = self.load(pc, ctx, st, &addr);
                out.assign_register(&dst, v, None);
            }
            Instr::Store { src, addr } => {
                out = self.store(st, &src, &addr).map_err(|cause| Halt::Terminated { pc, cause })?;
            }
            Instr::IsZero { dst, src } => {
                let v = self.is_zero(&self.read(st, &src));
                out.assign_register(&dst, v, None);
            }
            Instr::Jcc { .. } | Instr::Ret => {}
            Instr::Call { callee } => return self.transfer_call(pc, st, &callee),
        }
        Ok(Some(out))
    }

    fn transfer_call(&mut self, pc: usize, st: &AbsState, callee: &str) -> Result<Option<AbsState>, Halt> {
        let program = self.program;
        let f = program.function(callee).expect("validated callee");
        let caller = program.function_at(pc).map(|f| f.name.clone());
        let esp = self.read(st, &Reg::stack());
        let esp_off = match esp.iter().collect::<Vec<_>>().as_slice() {
            [v] => v.stack_offset(),
            _ => None,
        };
        let dom = self.dom;
        let args: Vec<ValueSet> = (0..f.param_count)
            .map(|i| {
                let Some(c) = esp_off else { return ValueSet::public() };
                let slot = StateKey::StackSlot(dom.signed(c.wrapping_add(i as u64 * PARAM_STRIDE)));
                match st.get(&slot) {
                    Some(v) => dom.substitute_stack_set(v, &dom.stack_plus(c.wrapping_neg())),
                    None => ValueSet::public(),
                }
            })
            .collect();
        let summary = match self.analyze_call(callee, caller.as_deref(), args)? {
            CallOutcome::Summary(id) => self.contexts[id].summary.clone().expect("finished context has a summary"),
            CallOutcome::Havoc => {
                let mut out = st.clone();
                let keys: Vec<StateKey> = out.keys().filter(|k| **k != StateKey::Register(Reg::stack())).cloned().collect();
                for k in keys {
                    out.set(k, ValueSet::top());
                }
                out.addr_defs.clear();
                out.set(StateKey::reg(RETURN_REGISTER), ValueSet::top());
                return Ok(Some(out));
            }
        };
        let Some(exit) = summary.exit else { return Ok(None) };
        let rebase = match esp_off {
            Some(c) => dom.stack_plus(c),
            None => AbsValue::Public,
        };
        let mut out = st.clone();
        for (k, v) in exit.entries() {
            match k {
                StateKey::Register(r) if r.is_stack() => {}
                StateKey::Register(r) => out.assign_register(r, dom.substitute_stack_set(v, &rebase), None),
                StateKey::StackSlot(o) if *o >= 0 => {
                    if let Some(c) = esp_off {
                        let key = StateKey::StackSlot(dom.signed(c.wrapping_add(from_signed(*o, dom.width))));
                        out.weak_update(&dom, key, &dom.substitute_stack_set(v, &rebase));
                    }
                }
                _ => {}
            }
        }
        Ok(Some(out))
    }

    fn find_summary(&self, callee: &str, caller: Option<&str>, args: &[ValueSet]) -> Option<usize> {
        self.contexts.iter().position(|rec| {
            rec.summary.is_some()
                && rec.context.callee == callee
                && rec.context.caller.as_deref() == caller
                && rec.context.args.len() == args.len()
                && args.iter().zip(&rec.context.args).all(|(a, b)| leq_vs(a, b))
        })
    }

    fn analyze_call(&mut self, callee: &str, caller: Option<&str>, mut args: Vec<ValueSet>) -> Result<CallOutcome, Halt> {
        if let Some(id) = self.find_summary(callee, caller, &args) {
            self.stats.summary_hits += 1;
            return Ok(CallOutcome::Summary(id));
        }
        if self.active.len() >= self.config.call_depth_budget {
            args = args.iter().map(|a| self.dom.degrade(a)).collect();
            if let Some(id) = self.find_summary(callee, caller, &args) {
                self.stats.summary_hits += 1;
                return Ok(CallOutcome::Summary(id));
            }
            let cyclic = self.active.iter().any(|&id| {
                let c = &self.contexts[id].context;
                c.callee == callee && c.caller.as_deref() == caller && c.args == args
            });
            if cyclic {
                log::debug!("recursive call to {callee} cut at depth {}", self.active.len());
                return Ok(CallOutcome::Havoc);
            }
        }
        let id = self.contexts.len();
        log::debug!("analyzing {callee} in context {id}");
        self.contexts.push(ContextRecord {
            context: Context { callee: callee.to_string(), caller: caller.map(str::to_string), args },
            states: BTreeMap::new(),
            summary: None,
        });
        self.active.push(id);
        let r = self.run_context(id);
        self.active.pop();
        r.map(|_| CallOutcome::Summary(id))
    }

    fn run_context(&mut self, id: usize) -> Result<(), Halt> {
        let program = self.program;
        let func = program.function(&self.contexts[id].context.callee).expect("validated callee");
        let init = self.init_state(func, &self.contexts[id].context.args);
        let mut states = BTreeMap::from([(func.entry_pc, init)]);
        let mut work = BTreeSet::from([func.entry_pc]);
        let mut exit: Option<AbsState> = None;
        let result = loop {
            let Some(pc) = work.pop_first() else { break Ok(()) };
            self.stats.iterations += 1;
            if self.stats.iterations > self.config.iteration_budget {
                work.insert(pc);
                break Err(Halt::Budget { pcs: work });
            }
            let st = states[&pc].clone();
            self.stats.peak_state_entries = self.stats.peak_state_entries.max(st.len());
            let out = match self.transfer_inner(pc, &st, id) {
                Ok(Some(out)) => out,
                Ok(None) => continue,
                Err(h) => break Err(h),
            };
            if matches!(program.instr(pc), Instr::Ret) || program.falls_off_end(pc) {
                exit = Some(match exit {
                    Some(e) => merge_states(&self.dom, &e, &out),
                    None => out.clone(),
                });
            }
            for s in program.successors(pc) {
                match states.get_mut(&s) {
                    None => {
                        states.insert(s, out.clone());
                        work.insert(s);
                    }
                    Some(stored) => {
                        if !state_leq(&out, stored) {
                            let next = match self.config.merge_policy {
                                MergePolicy::Join => merge_states(&self.dom, stored, &out),
                                MergePolicy::Replace => out.clone(),
                            };
                            if self.config.audit && !state_leq(stored, &next) {
                                self.audit.non_monotone_updates += 1;
                            }
                            *stored = next;
                            work.insert(s);
                        }
                    }
                }
            }
        };
        self.contexts[id].states = states;
        if result.is_ok() {
            let ret = exit
                .as_ref()
                .and_then(|e| e.reg(RETURN_REGISTER).cloned())
                .unwrap_or_else(ValueSet::bottom);
            self.contexts[id].summary = Some(Summary { ret, exit });
        }
        result
    }

    fn check_local_fixpoint(&mut self) {
        let program = self.program;
        for id in 0..self.contexts.len() {
            let states = self.contexts[id].states.clone();
            for (pc, st) in &states {
                let Ok(Some(out)) = self.transfer_inner(*pc, st, id) else { continue };
                for s in program.successors(*pc) {
                    if !states.get(&s).is_some_and(|stored| state_leq(&out, stored)) {
                        self.audit.fixpoint_violations.push((id, *pc, s));
                    }
                }
            }
        }
    }

    fn collect_sites(&self) -> Vec<SiteRecord> {
        let mut found: BTreeMap<(usize, SiteKind), BTreeSet<AbsValue>> = BTreeMap::new();
        for rec in &self.contexts {
            for (pc, st) in &rec.states {
                let (reg, kind) = match self.program.instr(*pc) {
                    Instr::Load { addr, .. } => (addr, SiteKind::MemLoad),
                    Instr::Store { addr, .. } => (addr, SiteKind::MemStore),
                    Instr::Jcc { cond, .. } if self.config.check_branches => (cond, SiteKind::Branch),
                    _ => continue,
                };
                let v = self.read(st, reg);
                if v.is_top() || v.has_secret() {
                    found.entry((*pc, kind)).or_default().extend(v.iter().cloned());
                }
            }
        }
        found
            .into_iter()
            .map(|((pc, kind), formulas)| SiteRecord {
                pc,
                kind,
                function: self.program.function_at(pc).map(|f| f.name.clone()).unwrap_or_default(),
                formulas: formulas.into_iter().collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn analyze(src: &str) -> AnalysisResult {
        let p = parse_program(src).unwrap();
        run_worklist(&p, &AnalysisConfig { audit: true, ..AnalysisConfig::default() }).unwrap()
    }

    fn show(v: Option<&ValueSet>) -> String {
        v.map(|v| v.to_string()).unwrap_or_else(|| "absent".into())
    }

    #[test]
    fn init_state_examples() {
        let p = parse_program("func f\n  @secret ebx\n  @secret_region esi size=4\n  assign a, ebx\n  load b, esi\n").unwrap();
        let an = Analyzer::new(&p, AnalysisConfig::default()).unwrap();
        let st = an.init_state(&p.functions[0], &[]);
        assert_eq!(st.to_string(), "{ebx ↦ {s1}, esi ↦ {u}, esp ↦ {e}}");
        let q = parse_program("func f\n  ret\n").unwrap();
        let an = Analyzer::new(&q, AnalysisConfig::default()).unwrap();
        assert_eq!(an.init_state(&q.functions[0], &[]).to_string(), "{esp ↦ {e}}");
    }

    #[test]
    fn eval_expr_examples() {
        let p = parse_program("func f\n  @secret ebx\n  assign eax, ebx\n").unwrap();
        let an = Analyzer::new(&p, AnalysisConfig::default()).unwrap();
        let d = *an.domain();
        let mut st = an.init_state(&p.functions[0], &[]);
        assert_eq!(an.eval_expr(&Expr::reg("ebx"), &st).to_string(), "{s1}");
        assert_eq!(an.eval_expr(&Expr::reg("edi"), &st).to_string(), "{p}");
        let s1p1 = d.reduce(crate::ir::BinOp::Add, &AbsValue::Secret(1), &AbsValue::Const(1));
        st.set(StateKey::reg("eax"), ValueSet::singleton(s1p1));
        st.set(StateKey::reg("ecx"), ValueSet::public());
        let e = Expr::bin(crate::ir::BinOp::Add, Expr::reg("eax"), Expr::reg("ecx"));
        assert_eq!(an.eval_expr(&e, &st).to_string(), "{⊤}");
    }

    #[test]
    fn motivating_example_final_state() {
        let r = analyze(
            "func foo\n  @secret ebx\n  assign esi, 0x40\n  assign eax, ebx\n  assign eax, eax + 1\n  load ecx, esi\n  assign ecx, ecx + 0x12\n  assign edx, edi\n  assign eax, eax + ecx\n",
        );
        assert_eq!(r.termination, Termination::Fixpoint);
        let exit = r.exit_state.unwrap();
        assert_eq!(show(exit.reg("ebx")), "{s1}");
        assert_eq!(show(exit.reg("eax")), "{⊤}");
        assert_eq!(show(exit.reg("ecx")), "{p}");
        assert_eq!(show(exit.reg("edx")), "{p}");
        assert_eq!(show(r.states[&3].reg("eax")), "{(+ s1 1)}");
    }

    #[test]
    fn store_then_load_through_secret_pointer() {
        let src = "func f\n  @secret ebx\n  assign eax, (ebx * 4) + 8\n  store v, eax\n  load ebx, eax\n";
        let p = parse_program(src).unwrap();
        let mut an = Analyzer::new(&p, AnalysisConfig::default()).unwrap();
        let mut st = an.init_state(&p.functions[0], &[]);
        st = an.transfer(0, &st, 0).unwrap().unwrap();
        assert_eq!(show(st.reg("eax")), "{(+ (× s1 4) 8)}");
        st.set(StateKey::reg("v"), ValueSet::singleton(AbsValue::Const(14)));
        st = an.transfer(1, &st, 0).unwrap().unwrap();
        assert_eq!(show(st.get(&StateKey::AccessExpr(Reg::new("eax"), 0))), "{14}");
        st = an.transfer(2, &st, 0).unwrap().unwrap();
        assert_eq!(show(st.reg("ebx")), "{14}");
    }

    #[test]
    fn load_through_secret_mints_memoized_secret() {
        let r = analyze("func f\n  @secret ebx\n  assign a, ebx & 15\n  loop: load x, a\n  jcc x, loop\n");
        assert_eq!(show(r.states[&2].reg("x")), "{s2}");
        assert_eq!(r.minted_secrets.len(), 1);
        assert_eq!(r.sites.len(), 2);
        assert_eq!(r.sites[0].kind, SiteKind::MemLoad);
        assert_eq!(r.sites[1].kind, SiteKind::Branch);
    }

    #[test]
    fn load_through_public_pointer_is_top_but_not_a_site() {
        let r = analyze("func f\n  load x, edi\n  load y, x\n");
        assert_eq!(show(r.states[&1].reg("x")), "{⊤}");
        assert_eq!(r.sites.iter().map(|s| s.pc).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn store_through_public_pointer_terminates() {
        let r = analyze("func f\n  assign v, 1\n  store v, edi\n  assign w, 2\n");
        assert_eq!(r.termination, Termination::Terminated { pc: 1, cause: TerminationCause::StoreThroughPublic });
    }

    #[test]
    fn is_zero_cases() {
        let r = analyze("func f\n  @secret k\n  assign a, 0\n  iszero b, a\n  iszero c, b\n  iszero d, k\n  assign m, b + c\n  ret\n");
        let st = &r.states[&5];
        assert_eq!(show(st.reg("b")), "{1}");
        assert_eq!(show(st.reg("c")), "{0}");
        assert_eq!(show(st.reg("d")), "{0, 1}");
    }

    #[test]
    fn merge_examples() {
        let d = Domain::new(32, 50);
        let mk = |k: &str, v: ValueSet| {
            let mut s = AbsState::default();
            s.set(StateKey::reg(k), v);
            s
        };
        let one = mk("eax", ValueSet::singleton(AbsValue::Const(1)));
        let two = mk("eax", ValueSet::singleton(AbsValue::Const(2)));
        assert_eq!(merge_states(&d, &one, &two).to_string(), "{eax ↦ {1, 2}}");
        let sec = mk("eax", ValueSet::singleton(AbsValue::Secret(1)));
        assert_eq!(merge_states(&d, &sec, &AbsState::default()), sec);
        assert_eq!(merge_states(&d, &one, &one), one);
    }

    #[test]
    fn state_order_examples() {
        let mk = |v: ValueSet| {
            let mut s = AbsState::default();
            s.set(StateKey::reg("eax"), v);
            s
        };
        assert!(state_leq(&mk(ValueSet::singleton(AbsValue::Const(4))), &mk(ValueSet::public())));
        assert!(!state_leq(&mk(ValueSet::singleton(AbsValue::Secret(1))), &mk(ValueSet::public())));
        assert!(state_leq(&AbsState::default(), &mk(ValueSet::public())));
    }

    #[test]
    fn assignment_drops_access_keys_on_the_register() {
        let r = analyze("func f\n  assign a, 16\n  assign v, 3\n  store v, a + 4\n  assign a, 0\n  ret\n");
        let before = &r.states[&4];
        assert!(before.keys().any(|k| matches!(k, StateKey::AccessExpr(r, 4) if r.as_str() == "a")));
        let after = &r.states[&5];
        assert!(!after.keys().any(|k| matches!(k, StateKey::AccessExpr(r, _) if r.as_str() == "a")));
    }

    #[test]
    fn temporaries_resolve_to_the_same_access_key() {
        let r = analyze("func f\n  assign a, 16\n  assign v, 7\n  store v, a + 4\n  load w, a + 4\n  ret\n");
        assert_eq!(show(r.exit_state.unwrap().reg("w")), "{7}");
    }

    #[test]
    fn identity_function_returns_its_argument() {
        let r = analyze(
            "func main\n  @secret ebx\n  assign esp, esp - 4\n  store ebx, esp\n  call bar\n  assign esp, esp + 4\n  ret\nfunc bar params=1\n  assign t, esp + 0\n  load eax, t\n  ret\n",
        );
        assert_eq!(r.contexts.len(), 2);
        let bar = &r.contexts[1];
        assert_eq!(bar.context.args[0].to_string(), "{s1}");
        assert_eq!(bar.summary.as_ref().unwrap().ret.to_string(), "{s1}");
        assert_eq!(show(r.exit_state.unwrap().reg("eax")), "{s1}");
    }

    #[test]
    fn repeated_call_hits_the_summary() {
        let r = analyze(
            "func main\n  assign esp, esp - 4\n  assign v, 3\n  store v, esp\n  call bar\n  call bar\n  ret\nfunc bar params=1\n  load eax, esp\n  ret\n",
        );
        assert_eq!(r.stats.contexts_analyzed, 2);
        assert_eq!(r.stats.summary_hits, 1);
    }

    #[test]
    fn covered_arguments_reuse_a_wider_summary() {
        let src = "func foo\n  @secret k\n  assign t, k + edi\n  assign esp, esp - 4\n  store t, esp\n  call bar\n  assign a, eax\n  assign c, 12\n  store c, esp\n  call bar\n  assign b, eax\n  ret\nfunc bar params=1\n  load eax, esp\n  ret\n";
        let r = analyze(src);
        assert_eq!(r.stats.contexts_analyzed, 2);
        assert_eq!(r.contexts[1].context.args[0].to_string(), "{⊤}");
        let exit = r.exit_state.unwrap();
        assert_eq!(show(exit.reg("b")), "{⊤}");
    }

    #[test]
    fn stack_counter_loop_is_bounded() {
        let src = "func f\n  assign esp, esp - 4\n  assign z, 0\n  store z, esp\nloop:\n  load i, esp\n  assign i, i + 1\n  store i, esp\n  jcc i, loop\n  ret\n";
        let p = parse_program(src).unwrap();
        for bound in [1usize, 3, 50] {
            let r = run_worklist(&p, &AnalysisConfig { bound, audit: true, ..AnalysisConfig::default() }).unwrap();
            assert!(r.termination.is_fixpoint());
            let slot = r.exit_state.as_ref().unwrap().get(&StateKey::StackSlot(-4)).unwrap().clone();
            assert_eq!(slot, ValueSet::public(), "bound {bound}");
            assert_eq!(r.audit.as_ref().unwrap(), &Audit::default());
        }
        let r = run_worklist(&p, &AnalysisConfig { bound: 50, ..AnalysisConfig::default() }).unwrap();
        let r1 = run_worklist(&p, &AnalysisConfig { bound: 1, ..AnalysisConfig::default() }).unwrap();
        assert!(r.stats.iterations > r1.stats.iterations);
    }

    #[test]
    fn recursion_is_cut() {
        let src = "func f\n  assign esp, esp - 4\n  store eax, esp\n  call f\n  assign esp, esp + 4\n  ret\n";
        let p = parse_program(src).unwrap();
        let r = run_worklist(&p, &AnalysisConfig { call_depth_budget: 3, ..AnalysisConfig::default() }).unwrap();
        assert!(r.termination.is_fixpoint());
        assert_eq!(show(r.exit_state.unwrap().reg("eax")), "{⊤}");
    }

    #[test]
    fn iteration_budget_marks_result_inconclusive() {
        let src = "func f\n  assign i, 0\nloop:\n  assign i, i + 1\n  jcc i, loop\n";
        let p = parse_program(src).unwrap();
        let r = run_worklist(&p, &AnalysisConfig { iteration_budget: 5, ..AnalysisConfig::default() }).unwrap();
        assert!(matches!(r.termination, Termination::Inconclusive { .. }));
    }

    #[test]
    fn runs_are_deterministic() {
        let src = "func f\n  @secret k\n  assign a, k & 7\n  load b, a\n  load c, b\n  jcc c, f2\nf2:\n  call g\n  ret\nfunc g\n  @secret_region r size=8\n  load eax, r\n  ret\n";
        assert_eq!(analyze(src), analyze(src));
    }
}
