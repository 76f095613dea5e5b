use serde::{Deserialize, Serialize};

use sasleak_core::absint::{AnalysisConfig, MergePolicy};
use sasleak_core::checker::{CheckConfig, SolverConfig, DEFAULT_ENUM_BUDGET, DEFAULT_EXHAUSTIVE_CAP, DEFAULT_LINE_BITS};
use sasleak_core::domain::DEFAULT_BOUND;
use sasleak_core::ir::DEFAULT_WIDTH;
use sasleak_core::oracle::SoundnessConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    pub width: u32,
    pub line_bits: u32,
    pub bound: usize,
    pub check_branches: bool,
    pub exhaustive_cap_bits: u32,
    pub enum_budget: u64,
    pub seed: u64,
    pub oracle_runs: usize,
    pub call_depth_budget: usize,
    pub iteration_budget: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            width: DEFAULT_WIDTH,
            line_bits: DEFAULT_LINE_BITS,
            bound: DEFAULT_BOUND,
            check_branches: true,
            exhaustive_cap_bits: DEFAULT_EXHAUSTIVE_CAP,
            enum_budget: DEFAULT_ENUM_BUDGET,
            seed: 0,
            oracle_runs: 100,
            call_depth_budget: 16,
            iteration_budget: 1_000_000,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(1..=64).contains(&self.width) {
            return Err(CliError::Config(format!("width must be in 1..=64, got {}", self.width)));
        }
        if self.line_bits >= self.width {
            return Err(CliError::Config(format!(
                "line bits must be below the width ({} >= {})",
                self.line_bits, self.width
            )));
        }
        if self.bound == 0 {
            return Err(CliError::Config("bound must be at least 1".into()));
        }
        Ok(())
    }

    pub fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            width: self.width,
            bound: self.bound,
            check_branches: self.check_branches,
            call_depth_budget: self.call_depth_budget,
            iteration_budget: self.iteration_budget,
            merge_policy: MergePolicy::Join,
            audit: false,
        }
    }

    pub fn check(&self) -> CheckConfig {
        CheckConfig {
            width: self.width,
            line_bits: self.line_bits,
            solver: SolverConfig {
                budget: self.enum_budget,
                seed: self.seed,
                exhaustive_cap_bits: self.exhaustive_cap_bits,
            },
        }
    }

    pub fn soundness(&self) -> SoundnessConfig {
        SoundnessConfig { runs: self.oracle_runs, seed: self.seed, ..SoundnessConfig::default() }
    }
}
