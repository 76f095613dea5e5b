//! Abstract values and the bounded powerset lattice over them.
//!
//! Public data collapses into the single symbol `p`; secrets stay symbolic as
//! `s<i>` so that address formulas can later be handed to the constraint checker.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::ir::{mask, to_signed, BinOp};

pub type SecretId = u32;

pub const DEFAULT_BOUND: usize = 50;

/// A formula over the atoms ⊤, `p`, `s<i>`, `u` (secret region base), `e`
/// (initial stack pointer) and constants.
///
/// Variant order is the term order used to canonicalize commutative operands.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AbsValue {
    Top,
    Public,
    Secret(SecretId),
    Header,
    Stack,
    Node(Arc<Node>),
    Const(u64),
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Node {
    op: BinOp,
    lhs: AbsValue,
    rhs: AbsValue,
    atoms: Atoms,
}

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Atoms {
    secret: bool,
    header: bool,
    stack: bool,
    opaque: bool,
}

impl Atoms {
    fn of(v: &AbsValue) -> Atoms {
        match v {
            AbsValue::Secret(_) => Atoms { secret: true, ..Atoms::default() },
            AbsValue::Header => Atoms { header: true, ..Atoms::default() },
            AbsValue::Stack => Atoms { stack: true, ..Atoms::default() },
            AbsValue::Top | AbsValue::Public => Atoms { opaque: true, ..Atoms::default() },
            AbsValue::Const(_) => Atoms::default(),
            AbsValue::Node(n) => n.atoms,
        }
    }

    fn union(self, o: Atoms) -> Atoms {
        Atoms {
            secret: self.secret || o.secret,
            header: self.header || o.header,
            stack: self.stack || o.stack,
            opaque: self.opaque || o.opaque,
        }
    }
}

impl Node {
    pub fn op(&self) -> BinOp {
        self.op
    }

    pub fn lhs(&self) -> &AbsValue {
        &self.lhs
    }

    pub fn rhs(&self) -> &AbsValue {
        &self.rhs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Top,
    P,
    S,
    U,
    E,
    N,
    Sym,
}

impl AbsValue {
    /// Builds a node without any reduction. Use [`Domain::reduce`] for canonical values.
    pub fn node(op: BinOp, lhs: AbsValue, rhs: AbsValue) -> AbsValue {
        let atoms = Atoms::of(&lhs).union(Atoms::of(&rhs));
        AbsValue::Node(Arc::new(Node { op, lhs, rhs, atoms }))
    }

    pub fn has_secret(&self) -> bool {
        Atoms::of(self).secret
    }

    pub fn has_header(&self) -> bool {
        Atoms::of(self).header
    }

    pub fn has_stack(&self) -> bool {
        Atoms::of(self).stack
    }

    pub fn is_top(&self) -> bool {
        matches!(self, AbsValue::Top)
    }

    pub fn is_public(&self) -> bool {
        matches!(self, AbsValue::Public)
    }

    /// The offset `c` when the value has the shape `e` or `e + c`.
    pub fn stack_offset(&self) -> Option<u64> {
        match self {
            AbsValue::Stack => Some(0),
            AbsValue::Node(n) => match (n.op, &n.lhs, &n.rhs) {
                (BinOp::Add, AbsValue::Stack, AbsValue::Const(c)) => Some(*c),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            AbsValue::Top => Category::Top,
            AbsValue::Public => Category::P,
            AbsValue::Secret(_) => Category::S,
            AbsValue::Header => Category::U,
            AbsValue::Stack => Category::E,
            AbsValue::Const(_) => Category::N,
            AbsValue::Node(n) => {
                let a = n.atoms;
                if a.secret {
                    Category::S
                } else if a.opaque {
                    Category::Sym
                } else if self.stack_offset().is_some() {
                    Category::E
                } else if a.header && !a.stack {
                    Category::U
                } else if !a.header && !a.stack {
                    Category::N
                } else {
                    Category::Sym
                }
            }
        }
    }

    /// Secret ids occurring in the value.
    pub fn secrets(&self) -> BTreeSet<SecretId> {
        let mut out = BTreeSet::new();
        self.collect_secrets(&mut out);
        out
    }

    fn collect_secrets(&self, out: &mut BTreeSet<SecretId>) {
        match self {
            AbsValue::Secret(i) => {
                out.insert(*i);
            }
            AbsValue::Node(n) if n.atoms.secret => {
                n.lhs.collect_secrets(out);
                n.rhs.collect_secrets(out);
            }
            _ => {}
        }
    }

    /// Number of atoms in the tree.
    pub fn size(&self) -> usize {
        match self {
            AbsValue::Node(n) => n.lhs.size() + n.rhs.size(),
            _ => 1,
        }
    }
}

/// Prefix-notation symbol of an abstract operator.
pub fn op_symbol(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "×",
        BinOp::Div => "÷",
        BinOp::Mod => "%",
        BinOp::And => "AND",
        BinOp::Or => "OR",
        BinOp::Xor => "XOR",
        BinOp::Bsh => "SHIFT",
    }
}

impl fmt::Display for AbsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbsValue::Top => f.write_str("⊤"),
            AbsValue::Public => f.write_str("p"),
            AbsValue::Secret(i) => write!(f, "s{i}"),
            AbsValue::Header => f.write_str("u"),
            AbsValue::Stack => f.write_str("e"),
            AbsValue::Const(n) => write!(f, "{n}"),
            AbsValue::Node(n) => write!(f, "({} {} {})", op_symbol(n.op), n.lhs, n.rhs),
        }
    }
}

impl fmt::Debug for AbsValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// `{⊤}` if ⊤ is present or `p` meets a secret, `{p}` if `p` meets only
/// non-secret values, otherwise the set unchanged.
pub fn col(x: BTreeSet<AbsValue>) -> BTreeSet<AbsValue> {
    if x.contains(&AbsValue::Top) {
        return BTreeSet::from([AbsValue::Top]);
    }
    if x.contains(&AbsValue::Public) {
        return if x.iter().any(AbsValue::has_secret) {
            BTreeSet::from([AbsValue::Top])
        } else {
            BTreeSet::from([AbsValue::Public])
        };
    }
    x
}

/// Collapses sets larger than `n` to `{⊤}` when they hold a secret, else `{p}`.
pub fn bou(x: BTreeSet<AbsValue>, n: usize) -> BTreeSet<AbsValue> {
    if x.len() <= n {
        x
    } else if x.iter().any(AbsValue::has_secret) {
        BTreeSet::from([AbsValue::Top])
    } else {
        BTreeSet::from([AbsValue::Public])
    }
}

/// A canonical (collapsed and bounded) set of abstract values. The empty set is ⊥.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueSet(BTreeSet<AbsValue>);

impl ValueSet {
    pub fn bottom() -> Self {
        ValueSet(BTreeSet::new())
    }

    pub fn singleton(v: AbsValue) -> Self {
        ValueSet(BTreeSet::from([v]))
    }

    pub fn top() -> Self {
        ValueSet::singleton(AbsValue::Top)
    }

    pub fn public() -> Self {
        ValueSet::singleton(AbsValue::Public)
    }

    /// Canonicalizes an arbitrary collection with bound `n`.
    pub fn new(values: impl IntoIterator<Item = AbsValue>, n: usize) -> Self {
        ValueSet(bou(col(values.into_iter().collect()), n))
    }

    pub fn iter(&self) -> impl Iterator<Item = &AbsValue> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: &AbsValue) -> bool {
        self.0.contains(v)
    }

    pub fn is_top(&self) -> bool {
        self.0.contains(&AbsValue::Top)
    }

    pub fn has_public(&self) -> bool {
        self.0.contains(&AbsValue::Public)
    }

    pub fn has_secret(&self) -> bool {
        self.0.iter().any(AbsValue::has_secret)
    }

    pub fn as_set(&self) -> &BTreeSet<AbsValue> {
        &self.0
    }

    /// Single constant member, if that is all the set holds.
    pub fn as_const(&self) -> Option<u64> {
        match self.0.iter().collect::<Vec<_>>().as_slice() {
            [AbsValue::Const(n)] => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for ValueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("}")
    }
}

impl fmt::Debug for ValueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// `x` is covered by `y`: it is a member, or `y` holds ⊤, or `y` holds `p`
/// and `x` is neither ⊤ nor carries a secret.
pub fn covers(y: &ValueSet, x: &AbsValue) -> bool {
    y.is_top() || y.contains(x) || (y.has_public() && !x.is_top() && !x.has_secret())
}

/// Every member of `x` is covered by `y`.
pub fn leq_vs(x: &ValueSet, y: &ValueSet) -> bool {
    x.iter().all(|v| covers(y, v))
}

/// Width and bound parameters shared by every domain operation of one analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Domain {
    pub width: u32,
    pub bound: usize,
}

impl Domain {
    pub fn new(width: u32, bound: usize) -> Self {
        assert!((1..=64).contains(&width), "width must be in 1..=64");
        assert!(bound >= 1, "bound must be at least 1");
        Domain { width, bound }
    }

    pub fn constant(&self, n: u64) -> AbsValue {
        AbsValue::Const(n & mask(self.width))
    }

    /// `e + c`, normalized so that a zero offset is plain `e`.
    pub fn stack_plus(&self, c: u64) -> AbsValue {
        let c = c & mask(self.width);
        if c == 0 {
            AbsValue::Stack
        } else {
            AbsValue::node(BinOp::Add, AbsValue::Stack, AbsValue::Const(c))
        }
    }

    /// Signed reading of a stack offset.
    pub fn signed(&self, c: u64) -> i64 {
        to_signed(c, self.width)
    }

    /// Abstract binary operation.
    pub fn reduce(&self, op: BinOp, a: &AbsValue, b: &AbsValue) -> AbsValue {
        use AbsValue::*;
        if a.is_top() || b.is_top() {
            return Top;
        }
        if a.is_public() || b.is_public() {
            let other = if a.is_public() { b } else { a };
            return if other.has_secret() { Top } else { Public };
        }
        if matches!(op, BinOp::Div | BinOp::Mod) && *b == Const(0) {
            return Top;
        }
        if let (Const(x), Const(y)) = (a, b) {
            return Const(op.apply(*x, *y, self.width));
        }
        if a.has_secret() || b.has_secret() {
            return self.canonical_node(op, a.clone(), b.clone());
        }
        let (ca, cb) = (a.category(), b.category());
        match (ca, cb) {
            (Category::E, Category::N) | (Category::N, Category::E) => {
                let (ev, n, e_left) = if ca == Category::E { (a, b, true) } else { (b, a, false) };
                let Const(n) = n else { return Public };
                let off = ev.stack_offset().expect("E-value has a stack offset");
                match (op, e_left) {
                    (BinOp::Add, _) => self.stack_plus(off.wrapping_add(*n)),
                    (BinOp::Sub, true) => self.stack_plus(off.wrapping_sub(*n)),
                    _ => Public,
                }
            }
            (Category::U, Category::N) => self.canonical_node(op, a.clone(), b.clone()),
            (Category::N, Category::U) if op.is_commutative() => self.canonical_node(op, a.clone(), b.clone()),
            (Category::N, Category::N) => self.canonical_node(op, a.clone(), b.clone()),
            _ => Public,
        }
    }

    fn canonical_node(&self, op: BinOp, a: AbsValue, b: AbsValue) -> AbsValue {
        if op.is_commutative() && b < a {
            AbsValue::node(op, b, a)
        } else {
            AbsValue::node(op, a, b)
        }
    }

    pub fn canon(&self, x: BTreeSet<AbsValue>) -> ValueSet {
        ValueSet(bou(col(x), self.bound))
    }

    pub fn join(&self, x: &ValueSet, y: &ValueSet) -> ValueSet {
        if y.is_empty() {
            return x.clone();
        }
        if x.is_empty() {
            return y.clone();
        }
        let mut u = x.0.clone();
        u.extend(y.0.iter().cloned());
        self.canon(u)
    }

    /// Pointwise lifting of [`Domain::reduce`] to value sets.
    pub fn lift(&self, op: BinOp, x: &ValueSet, y: &ValueSet) -> ValueSet {
        let mut out = BTreeSet::new();
        for a in x.iter() {
            for b in y.iter() {
                let r = self.reduce(op, a, b);
                if r.is_top() {
                    return ValueSet::top();
                }
                out.insert(r);
            }
        }
        self.canon(out)
    }

    /// Replaces every `e` leaf with `with` and re-reduces the tree.
    pub fn substitute_stack(&self, v: &AbsValue, with: &AbsValue) -> AbsValue {
        match v {
            AbsValue::Stack => with.clone(),
            AbsValue::Node(n) if n.atoms.stack => {
                let l = self.substitute_stack(&n.lhs, with);
                let r = self.substitute_stack(&n.rhs, with);
                self.reduce(n.op, &l, &r)
            }
            _ => v.clone(),
        }
    }

    pub fn substitute_stack_set(&self, x: &ValueSet, with: &AbsValue) -> ValueSet {
        if !x.iter().any(AbsValue::has_stack) {
            return x.clone();
        }
        self.canon(x.iter().map(|v| self.substitute_stack(v, with)).collect())
    }

    /// Collapses a non-empty set to the single least value covering it.
    pub fn degrade(&self, x: &ValueSet) -> ValueSet {
        if x.is_empty() {
            x.clone()
        } else if x.has_secret() || x.is_top() {
            ValueSet::top()
        } else {
            ValueSet::public()
        }
    }
}
