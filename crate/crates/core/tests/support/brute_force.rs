//! Naive evaluation of leak constraints over every assignment.

#![allow(dead_code)]

use std::collections::BTreeMap;

use sasleak_core::checker::{BvExpr, BvVar, LeakConstraint, LeakKind};
use sasleak_core::ir::BinOp;

pub fn eval(e: &BvExpr, env: &BTreeMap<BvVar, u64>, w: u32) -> u64 {
    let m = (1u64 << w) - 1;
    match e {
        BvExpr::Var(v) => env[v],
        BvExpr::Const(n) => n & m,
        BvExpr::Bin(op, a, b) => {
            let (x, y) = (eval(a, env, w), eval(b, env, w));
            let r = match op {
                BinOp::Add => x.wrapping_add(y),
                BinOp::Sub => x.wrapping_sub(y),
                BinOp::Mul => x.wrapping_mul(y),
                BinOp::Div => x.checked_div(y).unwrap_or(m),
                BinOp::Mod => x.checked_rem(y).unwrap_or(x),
                BinOp::And => x & y,
                BinOp::Or => x | y,
                BinOp::Xor => x ^ y,
                BinOp::Bsh => {
                    let signed = if y >> (w - 1) == 1 { y as i64 - (1i64 << w) } else { y as i64 };
                    match signed {
                        k if k >= w as i64 || k <= -(w as i64) => 0,
                        k if k >= 0 => x << k,
                        k => x >> -k,
                    }
                }
            };
            r & m
        }
    }
}

fn distinguishes(c: &LeakConstraint, env: &BTreeMap<BvVar, u64>) -> bool {
    let (a, b) = (eval(&c.original, env, c.width), eval(&c.renamed, env, c.width));
    match c.kind {
        LeakKind::CacheLine { line_bits } => a >> line_bits != b >> line_bits,
        LeakKind::Branch => a != b,
    }
}

pub fn search_bits(c: &LeakConstraint) -> u32 {
    c.vars().len() as u32 * c.width
}

pub fn brute_force(c: &LeakConstraint) -> bool {
    let vars = c.vars();
    let w = c.width;
    (0..1u64 << search_bits(c)).any(|code| {
        let env = vars.iter().enumerate().map(|(i, v)| (*v, (code >> (i as u32 * w)) & ((1 << w) - 1))).collect();
        distinguishes(c, &env)
    })
}

fn var_by_name(name: &str) -> BvVar {
    match name {
        "pub" => BvVar::Public,
        "stk" => BvVar::Stack,
        "hdr" => BvVar::Header,
        n if n.starts_with("sp") => BvVar::SecretPrime(n[2..].parse().unwrap()),
        n => BvVar::Secret(n[1..].parse().unwrap()),
    }
}

pub fn witness_holds(c: &LeakConstraint, witness: &BTreeMap<String, u64>) -> bool {
    let mut env: BTreeMap<BvVar, u64> = c.vars().into_iter().map(|v| (v, 0)).collect();
    for (k, v) in witness {
        env.insert(var_by_name(k), *v);
    }
    distinguishes(c, &env)
}
