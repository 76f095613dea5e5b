use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use sasleak_core::absint::{AnalysisResult, Statistics, Termination};
use sasleak_core::checker::{SiteVerdict, Verdict};

use crate::config::Config;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub program: String,
    pub config: Config,
    pub termination: TerminationReport,
    pub sites: Vec<SiteReport>,
    pub statistics: Statistics,
    pub secrets: SecretInventory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<BTreeMap<usize, BTreeMap<String, String>>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationReport {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Vec<usize>>,
}

impl From<&Termination> for TerminationReport {
    fn from(t: &Termination) -> Self {
        match t {
            Termination::Fixpoint => TerminationReport { status: "fixpoint".into(), pc: None, cause: None, pending: None },
            Termination::Terminated { pc, cause } => TerminationReport {
                status: "terminated".into(),
                pc: Some(*pc),
                cause: Some(cause.to_string()),
                pending: None,
            },
            Termination::Inconclusive { pcs } => TerminationReport {
                status: "inconclusive".into(),
                pc: None,
                cause: Some("iteration budget exhausted".into()),
                pending: Some(pcs.clone()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<BTreeMap<String, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl From<&Verdict> for VerdictReport {
    fn from(v: &Verdict) -> Self {
        VerdictReport {
            verdict: v.tag().to_string(),
            witness: match v {
                Verdict::Sat { witness } => Some(witness.clone()),
                _ => None,
            },
            reason: match v {
                Verdict::Unknown { reason } => Some(reason.clone()),
                _ => None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaReport {
    pub formula: String,
    #[serde(flatten)]
    pub result: VerdictReport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteReport {
    pub pc: usize,
    pub kind: String,
    pub function: String,
    #[serde(flatten)]
    pub result: VerdictReport,
    pub formulas: Vec<FormulaReport>,
}

impl From<&SiteVerdict> for SiteReport {
    fn from(s: &SiteVerdict) -> Self {
        SiteReport {
            pc: s.pc,
            kind: s.kind.to_string(),
            function: s.function.clone(),
            result: (&s.verdict).into(),
            formulas: s
                .formulas
                .iter()
                .map(|f| FormulaReport { formula: f.formula.to_string(), result: (&f.verdict).into() })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MintedSecret {
    pub pc: usize,
    pub context: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretInventory {
    /// `s<i>` to the annotated `function.register`.
    pub annotated: BTreeMap<String, String>,
    /// `s<i>` minted by loads through secret or region addresses.
    pub minted: BTreeMap<String, MintedSecret>,
}

impl Report {
    pub fn new(
        program: &str,
        config: &Config,
        result: &AnalysisResult,
        verdicts: &[SiteVerdict],
        annotated: BTreeMap<String, String>,
        dump_states: bool,
    ) -> Self {
        let states = dump_states.then(|| {
            result
                .states
                .iter()
                .map(|(pc, st)| (*pc, st.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect()))
                .collect()
        });
        Report {
            schema: SCHEMA_VERSION,
            program: program.to_string(),
            config: config.clone(),
            termination: (&result.termination).into(),
            sites: verdicts.iter().map(SiteReport::from).collect(),
            statistics: result.stats.clone(),
            secrets: SecretInventory {
                annotated,
                minted: result
                    .minted_secrets
                    .iter()
                    .map(|(id, (pc, ctx))| (format!("s{id}"), MintedSecret { pc: *pc, context: *ctx }))
                    .collect(),
            },
            states,
        }
    }

    pub fn has_leaks(&self) -> bool {
        self.sites.iter().any(|s| matches!(s.result.verdict.as_str(), "SAT" | "TOP_ACCESS"))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        writeln!(out, "program     {} (W={}, L={}, N={})", self.program, c.width, c.line_bits, c.bound).unwrap();
        let t = &self.termination;
        match (&t.pc, &t.cause) {
            (Some(pc), Some(cause)) => writeln!(out, "termination {} at pc {pc}: {cause}", t.status).unwrap(),
            _ => writeln!(out, "termination {}", t.status).unwrap(),
        }
        if self.sites.is_empty() {
            writeln!(out, "sites       none").unwrap();
        }
        for s in &self.sites {
            write!(out, "site        pc {} {} in {}: {}", s.pc, s.kind, s.function, s.result.verdict).unwrap();
            for (k, v) in s.result.witness.iter().flatten() {
                write!(out, " {k}={v}").unwrap();
            }
            out.push('\n');
            for f in &s.formulas {
                writeln!(out, "              {} {}", f.result.verdict, f.formula).unwrap();
            }
        }
        let st = &self.statistics;
        writeln!(
            out,
            "statistics  functions {}, contexts {}, summary hits {}, instructions {}, iterations {}, peak entries {}",
            st.functions_analyzed,
            st.contexts_analyzed,
            st.summary_hits,
            st.instructions_processed,
            st.iterations,
            st.peak_state_entries
        )
        .unwrap();
        if let Some(states) = &self.states {
            for (pc, entries) in states {
                let body: Vec<String> = entries.iter().map(|(k, v)| format!("{k} ↦ {v}")).collect();
                writeln!(out, "state {pc:>4}  {}", body.join(", ")).unwrap();
            }
        }
        out
    }
}
