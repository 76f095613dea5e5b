//! Bundled fixture programs with their expected verdicts.

use std::fmt::Write;

use serde::Serialize;

use crate::commands::Source;
use crate::config::Config;
use crate::report::Report;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Fixture {
    pub name: &'static str,
    #[serde(skip)]
    pub source: &'static str,
    pub description: &'static str,
    /// The real-world pattern the fixture stands for.
    pub analogue: &'static str,
    pub expected: &'static str,
}

impl Fixture {
    pub fn file_name(&self) -> String {
        format!("{}.sir", self.name)
    }

    pub fn source(&self) -> Source {
        Source { name: self.file_name(), text: self.source.to_string() }
    }
}

pub const FIXTURES: &[Fixture] = &[
    Fixture {
        name: "motivating_example",
        source: include_str!("../corpus/motivating_example.sir"),
        description: "secret plus public load: eax becomes ⊤, no secret-dependent access",
        analogue: "register-level walkthrough of a secret flowing into arithmetic",
        expected: "fixpoint, no sites",
    },
    Fixture {
        name: "aes_like",
        source: include_str!("../corpus/aes_like.sir"),
        description: "16-entry table load indexed by a secret key byte",
        analogue: "T-table lookups in table-based AES",
        expected: "SAT at the table load",
    },
    Fixture {
        name: "modexp_window",
        source: include_str!("../corpus/modexp_window.sir"),
        description: "secret window selects a table pointer which is then dereferenced",
        analogue: "window selection of precomputed powers in modular exponentiation",
        expected: "SAT at the pointer loads",
    },
    Fixture {
        name: "scatter_gather_aligned",
        source: include_str!("../corpus/scatter_gather_aligned.sir"),
        description: "aligned base plus stride access whose secret offset stays inside a line",
        analogue: "scatter-gather table layout; a known false positive",
        expected: "SAT at the gather load (false positive); terminated at N=1",
    },
    Fixture {
        name: "masked_index",
        source: include_str!("../corpus/masked_index.sir"),
        description: "secret masked to an offset inside one cache bank line",
        analogue: "constant-time table access confined to one line",
        expected: "UNSAT",
    },
    Fixture {
        name: "secret_branch",
        source: include_str!("../corpus/secret_branch.sir"),
        description: "conditional jump on the low bit of a secret",
        analogue: "square-and-multiply branching on an exponent bit",
        expected: "branch SAT",
    },
    Fixture {
        name: "store_via_p",
        source: include_str!("../corpus/store_via_p.sir"),
        description: "store through a pointer of unknown public value",
        analogue: "analysis giving up on an unconstrained write",
        expected: "terminated at the store",
    },
    Fixture {
        name: "summary_fp",
        source: include_str!("../corpus/summary_fp.sir"),
        description: "a constant argument reuses a summary computed for an unknown one",
        analogue: "context subsumption across two call sites; a known false positive",
        expected: "branch TOP_ACCESS after the second call",
    },
];

pub fn fixture(name: &str) -> Option<&'static Fixture> {
    FIXTURES.iter().find(|f| f.name == name || f.file_name() == name)
}

/// Configuration the golden files are computed under: 8-bit words and 4-byte
/// lines, small enough for every verdict to be decided exhaustively.
pub fn golden_config() -> Config {
    Config { width: 8, line_bits: 2, enum_budget: 2_000, ..Config::default() }
}

/// Verdict summary compared against the committed golden files.
pub fn golden_summary(report: &Report) -> String {
    let mut out = String::new();
    let t = &report.termination;
    write!(out, "termination {}", t.status).unwrap();
    if let Some(pc) = t.pc {
        write!(out, " pc={pc}").unwrap();
    }
    if let Some(cause) = &t.cause {
        write!(out, " cause={cause}").unwrap();
    }
    out.push('\n');
    for s in &report.sites {
        writeln!(out, "site pc={} {} {} {}", s.pc, s.kind, s.function, s.result.verdict).unwrap();
        for f in &s.formulas {
            writeln!(out, "  {} {}", f.result.verdict, f.formula).unwrap();
        }
    }
    out
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join("golden").join(format!("{name}.golden"))
}

pub fn listing_text() -> String {
    let mut out = String::new();
    for f in FIXTURES {
        writeln!(out, "{:<24} {}", f.file_name(), f.description).unwrap();
        writeln!(out, "{:<24} pattern:  {}", "", f.analogue).unwrap();
        writeln!(out, "{:<24} expected: {}", "", f.expected).unwrap();
    }
    out
}
