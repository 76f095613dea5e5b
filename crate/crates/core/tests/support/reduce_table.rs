//! Expected `reduce` results per category pair, written from the reduction
//! rules rather than from the implementation, plus W-bit machine arithmetic
//! computed in 128-bit integers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasleak_core::domain::{AbsValue, Category, Domain};
use sasleak_core::ir::BinOp;

pub const COMMUTATIVE: [BinOp; 5] = [BinOp::Add, BinOp::Mul, BinOp::And, BinOp::Or, BinOp::Xor];

/// Representatives of every category, including nested nodes.
pub fn representatives(d: Domain) -> Vec<(Category, AbsValue)> {
    use AbsValue::*;
    vec![
        (Category::Top, Top),
        (Category::P, Public),
        (Category::S, Secret(1)),
        (Category::S, AbsValue::node(BinOp::Mul, Secret(2), Const(4))),
        (Category::U, Header),
        (Category::U, AbsValue::node(BinOp::Add, Header, Const(4))),
        (Category::E, Stack),
        (Category::E, d.stack_plus(8)),
        (Category::N, Const(0)),
        (Category::N, Const(5)),
        (Category::N, Const((1 << d.width) - 1)),
        (Category::Sym, AbsValue::node(BinOp::Add, Header, Stack)),
    ]
}

#[derive(Debug, PartialEq)]
pub enum Expect {
    Top,
    Public,
    Fold(u64),
    /// A node with the operator over exactly the two operands.
    Node,
    Stack(u64),
}

fn stack_offset(v: &AbsValue) -> u64 {
    match v {
        AbsValue::Stack => 0,
        AbsValue::Node(n) => match n.rhs() {
            AbsValue::Const(c) => *c,
            _ => unreachable!(),
        },
        _ => unreachable!(),
    }
}

pub fn machine(op: BinOp, a: u64, b: u64, w: u32) -> u64 {
    let m = (1u128 << w) - 1;
    let (a, b) = (a as u128 & m, b as u128 & m);
    let r: u128 = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a + (m + 1) - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Mod => a % b,
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Bsh => {
            let amount = if b >= 1 << (w - 1) { b as i128 - (1i128 << w) } else { b as i128 };
            if amount.unsigned_abs() >= w as u128 {
                0
            } else if amount >= 0 {
                a << amount
            } else {
                a >> (-amount)
            }
        }
    };
    (r & m) as u64
}

pub fn expected(w: u32, op: BinOp, (ca, a): &(Category, AbsValue), (cb, b): &(Category, AbsValue)) -> Expect {
    use Category as C;
    if *ca == C::Top || *cb == C::Top {
        return Expect::Top;
    }
    if *ca == C::P || *cb == C::P {
        return if *ca == C::S || *cb == C::S { Expect::Top } else { Expect::Public };
    }
    if matches!(op, BinOp::Div | BinOp::Mod) && *b == AbsValue::Const(0) {
        return Expect::Top;
    }
    let m = (1u64 << w) - 1;
    match (ca, cb) {
        (C::N, C::N) => {
            let (AbsValue::Const(x), AbsValue::Const(y)) = (a, b) else { unreachable!() };
            Expect::Fold(machine(op, *x, *y, w))
        }
        (C::S, _) | (_, C::S) => Expect::Node,
        (C::E, C::N) => {
            let AbsValue::Const(n) = b else { unreachable!() };
            match op {
                BinOp::Add => Expect::Stack((stack_offset(a) + n) & m),
                BinOp::Sub => Expect::Stack((stack_offset(a) + (m + 1) - n) & m),
                _ => Expect::Public,
            }
        }
        (C::N, C::E) => {
            let AbsValue::Const(n) = a else { unreachable!() };
            match op {
                BinOp::Add => Expect::Stack((stack_offset(b) + n) & m),
                _ => Expect::Public,
            }
        }
        (C::U, C::N) => Expect::Node,
        (C::N, C::U) if COMMUTATIVE.contains(&op) => Expect::Node,
        _ => Expect::Public,
    }
}

pub fn matches(op: BinOp, a: &AbsValue, b: &AbsValue, got: &AbsValue, want: &Expect) -> bool {
    match want {
        Expect::Top => got.is_top(),
        Expect::Public => got.is_public(),
        Expect::Fold(n) => *got == AbsValue::Const(*n),
        Expect::Stack(0) => *got == AbsValue::Stack,
        Expect::Stack(c) => match got {
            AbsValue::Node(n) => n.op() == BinOp::Add && *n.lhs() == AbsValue::Stack && *n.rhs() == AbsValue::Const(*c),
            _ => false,
        },
        Expect::Node => match got {
            AbsValue::Node(n) if n.op() == op => {
                (n.lhs() == a && n.rhs() == b) || (COMMUTATIVE.contains(&op) && n.lhs() == b && n.rhs() == a)
            }
            _ => false,
        },
    }
}

/// Every (category, category, operator) cell; returns the cell count and the mismatches.
pub fn table_mismatches(d: Domain) -> (usize, Vec<String>) {
    let reps = representatives(d);
    let mut cells = 0;
    let mut bad = Vec::new();
    for l in &reps {
        if l.1.category() != l.0 {
            bad.push(format!("representative {:?} classified {:?}", l.1, l.1.category()));
        }
        for r in &reps {
            for op in BinOp::ALL {
                let got = d.reduce(op, &l.1, &r.1);
                let want = expected(d.width, op, l, r);
                cells += 1;
                if !matches(op, &l.1, &r.1, &got, &want) {
                    bad.push(format!("{op:?} {:?} {:?}: got {got:?}, want {want:?}", l.1, r.1));
                }
            }
        }
    }
    (cells, bad)
}

/// Random constant pairs through every operator.
pub fn folding_mismatches(d: Domain, pairs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = if d.width >= 64 { u64::MAX } else { (1u64 << d.width) - 1 };
    let mut bad = Vec::new();
    for _ in 0..pairs {
        let (x, y) = (rng.random::<u64>() & m, rng.random::<u64>() & m);
        for op in BinOp::ALL {
            let got = d.reduce(op, &AbsValue::Const(x), &AbsValue::Const(y));
            let ok = if matches!(op, BinOp::Div | BinOp::Mod) && y == 0 {
                got.is_top()
            } else {
                got == AbsValue::Const(machine(op, x, y, d.width))
            };
            if !ok {
                bad.push(format!("{op:?} {x} {y}: got {got:?}"));
            }
        }
    }
    bad
}
