#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use sasleak_core::domain::{AbsValue, Domain, ValueSet};
use sasleak_core::ir::BinOp;

pub fn op() -> impl Strategy<Value = BinOp> {
    proptest::sample::select(BinOp::ALL.to_vec())
}

/// Canonical abstract values built through `reduce`, so they are the shapes
/// the engine can actually produce.
pub fn abs_value(dom: Domain) -> impl Strategy<Value = AbsValue> {
    let leaf = prop_oneof![
        1 => Just(AbsValue::Top),
        2 => Just(AbsValue::Public),
        4 => (1u32..4).prop_map(AbsValue::Secret),
        1 => Just(AbsValue::Header),
        2 => Just(AbsValue::Stack),
        4 => (0u64..64).prop_map(AbsValue::Const),
    ];
    leaf.prop_recursive(3, 12, 2, move |inner| {
        (op(), inner.clone(), inner).prop_map(move |(o, a, b)| dom.reduce(o, &a, &b))
    })
}

pub fn raw_set(dom: Domain, max: usize) -> impl Strategy<Value = BTreeSet<AbsValue>> {
    proptest::collection::btree_set(abs_value(dom), 0..max)
}

pub fn value_set(dom: Domain, max: usize) -> impl Strategy<Value = ValueSet> {
    raw_set(dom, max).prop_map(move |s| dom.canon(s))
}
