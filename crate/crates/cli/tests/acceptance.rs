//! Acceptance suite: one pass/fail line per criterion. Runs without the
//! libtest harness so the lines are always printed.

#[path = "../../core/tests/support/reduce_table.rs"]
mod reduce_table;

#[path = "../../core/tests/support/brute_force.rs"]
mod brute_force;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasleak::commands::{analyze, emit_smt, Source};
use sasleak::config::Config;
use sasleak::corpus::{fixture, golden_config, golden_path, golden_summary, FIXTURES};
use sasleak_core::absint::{run_worklist, MergePolicy, Termination, TerminationCause};
use sasleak_core::checker::smtlib::validate_script;
use sasleak_core::checker::{make_branch_constraint, make_cache_constraint, solve_enum, BvExpr, BvVar, SolverConfig, Verdict};
use sasleak_core::domain::{bou, col, leq_vs, AbsValue, Domain, ValueSet};
use sasleak_core::ir::{parse_program_with_width, BinOp};
use sasleak_core::oracle::check_soundness;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

fn c1_motivating_example() -> Outcome {
    let start = Instant::now();
    let f = fixture("motivating_example").unwrap();
    let a = analyze(&f.source(), &Config::default(), false).map_err(|e| e.to_string())?;
    let st = a.result.exit_state.as_ref().ok_or("no exit state")?;
    let want = [
        ("ebx", ValueSet::singleton(AbsValue::Secret(1))),
        ("eax", ValueSet::top()),
        ("ecx", ValueSet::public()),
        ("edx", ValueSet::public()),
    ];
    for (r, v) in &want {
        let got = st.reg(r).cloned().unwrap_or_else(ValueSet::public);
        ensure!(got == *v, "{r} = {got}, want {v}");
    }
    within(start, Duration::from_secs(1))?;
    Ok("ebx={s1} eax={⊤} ecx={p} edx={p}".into())
}

fn random_value(rng: &mut ChaCha8Rng, d: &Domain, depth: u32) -> AbsValue {
    let leaf = |rng: &mut ChaCha8Rng| match rng.random_range(0..13) {
        0 => AbsValue::Top,
        1 | 2 => AbsValue::Public,
        3..=6 => AbsValue::Secret(rng.random_range(1..4)),
        7 => AbsValue::Header,
        8 | 9 => AbsValue::Stack,
        _ => AbsValue::Const(rng.random_range(0..32)),
    };
    if depth == 0 || rng.random_bool(0.5) {
        return leaf(rng);
    }
    let op = *BinOp::ALL.choose(rng).unwrap();
    let a = random_value(rng, d, depth - 1);
    let b = random_value(rng, d, depth - 1);
    d.reduce(op, &a, &b)
}

fn random_raw(rng: &mut ChaCha8Rng, d: &Domain) -> BTreeSet<AbsValue> {
    let n = rng.random_range(0..8);
    (0..n).map(|_| random_value(rng, d, 3)).collect()
}

fn c2_lattice() -> Outcome {
    let start = Instant::now();
    let d = Domain::new(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 10_000;
    for i in 0..cases {
        let x = random_raw(&mut rng, &d);
        let c = col(x.clone());
        ensure!(col(c.clone()) == c, "case {i}: col not idempotent on {x:?}");
        let n = rng.random_range(1..6);
        let b = bou(x.clone(), n);
        ensure!(bou(b.clone(), n) == b, "case {i}: bou not idempotent on {x:?}");
        let (vx, vy) = (d.canon(x), d.canon(random_raw(&mut rng, &d)));
        let j = d.join(&vx, &vy);
        ensure!(j == d.join(&vy, &vx), "case {i}: join not commutative on {vx:?} {vy:?}");
        ensure!(d.join(&vx, &vx) == vx, "case {i}: join not idempotent on {vx:?}");
        ensure!(leq_vs(&vx, &j) && leq_vs(&vy, &j), "case {i}: {vx:?} ⊔ {vy:?} = {j:?} is not an upper bound");
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("{cases} seeded cases, {} random sets", 2 * cases))
}

fn c3_reduction() -> Outcome {
    let d = Domain::new(8, 50);
    let (cells, bad) = reduce_table::table_mismatches(d);
    ensure!(bad.is_empty(), "{} table mismatches, first: {}", bad.len(), bad[0]);
    let mut folds = 0;
    for (w, seed) in [(8, 31), (32, 32)] {
        let bad = reduce_table::folding_mismatches(Domain::new(w, 50), 1_000, seed);
        ensure!(bad.is_empty(), "W={w}: {} folding mismatches, first: {}", bad.len(), bad[0]);
        folds += 1_000 * BinOp::ALL.len();
    }
    Ok(format!("{cells} table cells, {folds} constant folds"))
}

fn c4_soundness() -> Outcome {
    let start = Instant::now();
    let mut values = 0;
    let mut skipped = Vec::new();
    for seed in [7, 8] {
        for f in FIXTURES {
            let cfg = Config { oracle_runs: 100, seed, ..Config::default() };
            let a = analyze(&f.source(), &cfg, false).map_err(|e| e.to_string())?;
            let rep = check_soundness(&a.program, &a.result, &cfg.soundness()).map_err(|e| e.to_string())?;
            ensure!(rep.violations.is_empty(), "{} seed {seed}: {}", f.name, rep.violations[0]);
            if rep.skipped.is_some() {
                skipped.push(f.name);
                continue;
            }
            ensure!(rep.runs == 100, "{}: only {} runs", f.name, rep.runs);
            values += rep.values_checked;
        }
    }
    // A merge that overwrites instead of joining must be caught.
    let f = fixture("secret_branch").unwrap();
    let cfg = Config { seed: 7, ..golden_config() };
    let p = parse_program_with_width(f.source, cfg.width).map_err(|e| format!("{e:?}"))?;
    let broken = run_worklist(&p, &sasleak_core::absint::AnalysisConfig { merge_policy: MergePolicy::Replace, ..cfg.analysis() })
        .map_err(|e| e.to_string())?;
    let rep = check_soundness(&p, &broken, &cfg.soundness()).map_err(|e| e.to_string())?;
    ensure!(!rep.violations.is_empty(), "a replacing merge went unnoticed");
    within(start, Duration::from_secs(60))?;
    skipped.dedup();
    Ok(format!(
        "0 violations over {values} values, seeds 7 and 8; mutant caught ({} violations); not at a fixpoint, skipped: {}",
        rep.violations.len(),
        skipped.join(", ")
    ))
}

fn c5_corpus_verdicts() -> Outcome {
    let start = Instant::now();
    let cfg = golden_config();
    let mut reports = BTreeMap::new();
    for f in FIXTURES {
        let r = analyze(&f.source(), &cfg, false).map_err(|e| e.to_string())?.report;
        let want = std::fs::read_to_string(golden_path(f.name)).map_err(|e| format!("{}: {e}", f.name))?;
        ensure!(golden_summary(&r) == want, "{}: golden mismatch\n{}", f.name, golden_summary(&r));
        reports.insert(f.name, r);
    }
    let site = |name: &str, kind: &str, verdict: &str| {
        reports[name].sites.iter().any(|s| s.kind == kind && s.result.verdict == verdict)
    };
    ensure!(site("aes_like", "load", "SAT"), "aes_like: no SAT load");
    ensure!(
        reports["masked_index"].sites.iter().all(|s| s.result.verdict == "UNSAT") && !reports["masked_index"].sites.is_empty(),
        "masked_index: not UNSAT"
    );
    ensure!(site("secret_branch", "branch", "SAT"), "secret_branch: no SAT branch");
    ensure!(site("scatter_gather_aligned", "load", "SAT"), "scatter_gather_aligned: not flagged");
    ensure!(site("modexp_window", "load", "SAT"), "modexp_window: no SAT dereference");
    let t = &reports["store_via_p"].termination;
    ensure!(t.status == "terminated" && t.cause.is_some(), "store_via_p: {t:?}");
    ensure!(
        site("summary_fp", "branch", "TOP_ACCESS") && reports["summary_fp"].statistics.summary_hits > 0,
        "summary_fp: branch not flagged through a summary hit"
    );
    within(start, Duration::from_secs(30))?;
    Ok(format!("{} fixtures match their golden files at W=8, L=2", FIXTURES.len()))
}

fn random_formula(rng: &mut ChaCha8Rng, w: u32, depth: u32) -> BvExpr {
    if depth == 0 || rng.random_bool(0.35) {
        return match rng.random_range(0..7) {
            0..=2 => BvExpr::Var(BvVar::Secret(1)),
            3 => BvExpr::Var(BvVar::Public),
            _ => BvExpr::Const(rng.random_range(0..1u64 << w)),
        };
    }
    let op = *BinOp::ALL.choose(rng).unwrap();
    BvExpr::Bin(op, Box::new(random_formula(rng, w, depth - 1)), Box::new(random_formula(rng, w, depth - 1)))
}

fn c6_checker() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SolverConfig { budget: 64, ..SolverConfig::default() };
    let mut counts = [0usize; 2];
    let mut sat = 0;
    let mut tries = 0;
    while counts.iter().any(|&c| c < 100) && tries < 100_000 {
        tries += 1;
        let w = *[4u32, 8].choose(&mut rng).unwrap();
        let f = random_formula(&mut rng, w, 4);
        let kind = rng.random_range(0..2usize);
        let c = if kind == 0 {
            make_cache_constraint(&f, w, rng.random_range(0..w))
        } else {
            make_branch_constraint(&f, w)
        };
        let Some(c) = c else { continue };
        if brute_force::search_bits(&c) > 16 {
            continue;
        }
        let truth = brute_force::brute_force(&c);
        match solve_enum(&c, &cfg) {
            Verdict::Sat { witness } => {
                ensure!(truth, "SAT without a brute-force witness: {f}");
                ensure!(brute_force::witness_holds(&c, &witness), "bad witness {witness:?} for {f}");
                sat += 1;
            }
            Verdict::Unsat => ensure!(!truth, "UNSAT but brute force finds a witness: {f}"),
            other => return Err(format!("undecided {other:?} for {f}")),
        }
        counts[kind] += 1;
    }
    ensure!(counts.iter().all(|&c| c >= 50), "too few formulas: {counts:?}");
    Ok(format!("{} cache-line and {} branch formulas agree ({sat} SAT)", counts[0], counts[1]))
}

fn c7_bound_study() -> Outcome {
    let bounds = [1usize, 10, 50];
    let mut runs: BTreeMap<&str, Vec<(Termination, u64)>> = BTreeMap::new();
    for f in FIXTURES {
        for &n in &bounds {
            let a = analyze(&f.source(), &Config { bound: n, ..golden_config() }, false).map_err(|e| e.to_string())?;
            runs.entry(f.name).or_default().push((a.result.termination.clone(), a.result.stats.iterations));
        }
    }
    let early: Vec<&str> = runs
        .iter()
        .filter(|(name, r)| {
            **name != "store_via_p"
                && matches!(r[0].0, Termination::Terminated { cause: TerminationCause::StoreThroughPublic, .. })
        })
        .map(|(n, _)| *n)
        .collect();
    ensure!(!early.is_empty(), "no fixture terminates early at N=1");
    for (name, r) in &runs {
        if *name != "store_via_p" {
            ensure!(r[2].0.is_fixpoint(), "{name} does not complete at N=50: {:?}", r[2].0);
        }
        if r.iter().all(|(t, _)| t.is_fixpoint()) {
            let its: Vec<u64> = r.iter().map(|(_, i)| *i).collect();
            ensure!(its.windows(2).all(|p| p[0] <= p[1]), "{name}: iterations {its:?} decrease with N");
        }
    }
    Ok(format!("N=1 terminates early on {}; iterations non-decreasing in N elsewhere", early.join(", ")))
}

fn c8_determinism() -> Outcome {
    let mut files = 0;
    for f in FIXTURES {
        let cfg = Config { seed: 11, ..golden_config() };
        let a = analyze(&f.source(), &cfg, true).map_err(|e| e.to_string())?.report.to_json();
        let b = analyze(&f.source(), &cfg, true).map_err(|e| e.to_string())?.report.to_json();
        ensure!(a == b, "{}: reports differ", f.name);
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus").join(f.file_name());
        let run = || {
            Command::new(env!("CARGO_BIN_EXE_sasleak"))
                .args(["analyze", "--seed", "11", path.to_str().unwrap()])
                .output()
                .map(|o| o.stdout)
                .map_err(|e| e.to_string())
        };
        ensure!(run()? == run()?, "{}: binary output differs", f.name);
        files += 1;
    }
    Ok(format!("{files} fixtures, library and binary reports byte-identical"))
}

fn find_solver() -> Option<(&'static str, Vec<&'static str>)> {
    [("z3", vec!["-smt2"]), ("cvc5", vec!["--lang=smt2"]), ("bitwuzla", vec![])].into_iter().find(|(bin, _)| {
        Command::new(bin).arg("--version").output().is_ok_and(|o| o.status.success())
    })
}

fn c9_smtlib() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = golden_config();
    let solver = find_solver();
    let mut scripts = 0;
    let mut agreed = 0;
    for f in FIXTURES {
        let out = dir.path().join(f.name);
        let src: Source = f.source();
        let written = emit_smt(&src, &cfg, &out).map_err(|e| e.to_string())?;
        let report = analyze(&src, &cfg, false).map_err(|e| e.to_string())?.report;
        for path in written.iter().filter(|p| p.extension().is_some_and(|e| e == "smt2")) {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            let summary = validate_script(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure!(summary.check_sat == 1 && summary.assertions == 1, "{}: unexpected shape", path.display());
            scripts += 1;
            if let Some((bin, args)) = &solver {
                let o = Command::new(bin).args(args).arg(path).output().map_err(|e| e.to_string())?;
                let answer = String::from_utf8_lossy(&o.stdout).lines().next().unwrap_or("").trim().to_string();
                let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                let pc: usize = stem.split('_').nth(1).unwrap().parse().unwrap();
                let site = report.sites.iter().find(|s| s.pc == pc).ok_or("no site for script")?;
                let sat = site.formulas.iter().any(|f| f.result.verdict == "SAT");
                ensure!(answer == if sat { "sat" } else { "unsat" }, "{}: solver says {answer}", path.display());
                agreed += 1;
            }
        }
    }
    ensure!(scripts > 0, "no scripts emitted");
    Ok(match solver {
        Some((bin, _)) => format!("{scripts} scripts valid; {bin} agrees on {agreed}"),
        None => format!("{scripts} scripts valid; no external solver found, agreement check skipped"),
    })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("motivating example final state", c1_motivating_example),
        ("lattice laws", c2_lattice),
        ("reduction table", c3_reduction),
        ("differential soundness", c4_soundness),
        ("corpus verdicts", c5_corpus_verdicts),
        ("checker equivalence", c6_checker),
        ("bound study", c7_bound_study),
        ("determinism", c8_determinism),
        ("SMT-LIB emission", c9_smtlib),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
