//! Engine properties over randomly generated programs: the post-run audit
//! finds a local fixpoint, concrete runs stay inside the abstract states, and
//! runs are reproducible.

use std::fmt::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasleak_core::absint::{run_worklist, AnalysisConfig, MergePolicy, Termination};
use sasleak_core::domain::{AbsValue, ValueSet};
use sasleak_core::ir::parse_program_with_width;
use sasleak_core::oracle::{check_soundness, SoundnessConfig};

const REGS: [&str; 4] = ["a", "b", "c", "d"];
const OPS: [&str; 9] = ["+", "-", "*", "/", "%", "&", "|", "^", "<<>>"];

fn operand(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.6) {
        REGS.choose(rng).unwrap().to_string()
    } else {
        rng.random_range(0..16u32).to_string()
    }
}

/// Straight-line code with forward jumps and stack traffic. Every register is
/// defined before the first branch so no value is defined on one path only.
fn random_program(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::from("func f\n  @secret ebx\n  assign esp, esp - 16\n");
    writeln!(out, "  assign a, ebx + {}", rng.random_range(0..4u32)).unwrap();
    for r in &REGS[1..] {
        if rng.random_bool(0.4) {
            writeln!(out, "  assign {r}, ebx").unwrap();
        } else {
            writeln!(out, "  assign {r}, {}", rng.random_range(0..8u32)).unwrap();
        }
    }
    let n = rng.random_range(4..14);
    let mut labels = 0;
    for i in 0..n {
        match rng.random_range(0..10) {
            0..=4 => {
                let op = OPS.choose(rng).unwrap();
                let rhs = if *op == "<<>>" { rng.random_range(-3..4i32).to_string() } else { operand(rng) };
                writeln!(out, "  assign {}, {} {op} {rhs}", REGS.choose(rng).unwrap(), operand(rng)).unwrap();
            }
            5 | 6 => writeln!(out, "  store {}, esp + {}", REGS.choose(rng).unwrap(), 4 * rng.random_range(0..4)).unwrap(),
            7 => writeln!(out, "  load {}, esp + {}", REGS.choose(rng).unwrap(), 4 * rng.random_range(0..4)).unwrap(),
            8 => writeln!(out, "  iszero {}, {}", REGS.choose(rng).unwrap(), REGS.choose(rng).unwrap()).unwrap(),
            _ if i + 1 < n => {
                writeln!(out, "  jcc {}, l{labels}", REGS.choose(rng).unwrap()).unwrap();
                writeln!(out, "  assign {}, {}", REGS.choose(rng).unwrap(), operand(rng)).unwrap();
                writeln!(out, "l{labels}:").unwrap();
                labels += 1;
            }
            _ => {}
        }
    }
    out.push_str("  assign esp, esp + 16\n  ret\n");
    out
}

fn config(bound: usize) -> AnalysisConfig {
    AnalysisConfig { width: 8, bound, audit: true, ..AnalysisConfig::default() }
}

#[test]
fn audit_and_oracle_agree_on_random_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for case in 0..150 {
        let src = random_program(&mut rng);
        let p = parse_program_with_width(&src, 8).unwrap();
        for bound in [1, 4, 50] {
            let r = run_worklist(&p, &config(bound)).unwrap();
            assert_eq!(r.termination, Termination::Fixpoint, "case {case}\n{src}");
            let audit = r.audit.as_ref().unwrap();
            assert_eq!(audit.non_monotone_updates, 0, "case {case} N={bound}\n{src}");
            assert!(audit.fixpoint_violations.is_empty(), "case {case} N={bound}: {:?}\n{src}", audit.fixpoint_violations);
            let rep = check_soundness(&p, &r, &SoundnessConfig { runs: 20, seed: case, ..SoundnessConfig::default() }).unwrap();
            assert!(rep.violations.is_empty(), "case {case} N={bound}: {}\n{src}", rep.violations[0]);
            checked += rep.values_checked;
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn analysis_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let p = parse_program_with_width(&random_program(&mut rng), 8).unwrap();
        assert_eq!(run_worklist(&p, &config(50)).unwrap(), run_worklist(&p, &config(50)).unwrap());
    }
}

#[test]
fn tighter_bound_only_coarsens_register_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..80 {
        let src = random_program(&mut rng);
        let p = parse_program_with_width(&src, 8).unwrap();
        let wide = run_worklist(&p, &config(50)).unwrap();
        let narrow = run_worklist(&p, &config(1)).unwrap();
        for (pc, st) in &wide.states {
            let coarse = &narrow.states[pc];
            for (k, v) in st.entries() {
                let c = coarse.get(k).cloned().unwrap_or_else(ValueSet::public);
                let ok = v.iter().all(|x| sasleak_core::domain::covers(&c, x) || (c.has_secret() && x.has_secret()));
                assert!(ok, "pc {pc} {k}: {v} vs {c}\n{src}");
            }
        }
    }
}

/// A broken merge that overwrites instead of joining must be caught.
#[test]
fn replace_merge_is_caught_by_the_oracle() {
    let src = "func f\n  @secret ebx\n  assign a, 1\n  jcc ebx, skip\n  assign a, 2\nskip:\n  assign c, a\n  ret\n";
    let p = parse_program_with_width(src, 8).unwrap();
    let broken = AnalysisConfig { merge_policy: MergePolicy::Replace, ..config(50) };
    let r = run_worklist(&p, &broken).unwrap();
    let rep = check_soundness(&p, &r, &SoundnessConfig::default()).unwrap();
    assert!(!rep.violations.is_empty());
    let good = run_worklist(&p, &config(50)).unwrap();
    assert_eq!(good.states[&4].reg("a").unwrap().len(), 2);
    assert!(check_soundness(&p, &good, &SoundnessConfig::default()).unwrap().violations.is_empty());
    assert!(good.states[&4].reg("a").unwrap().iter().all(|v| matches!(v, AbsValue::Const(1 | 2))));
}
