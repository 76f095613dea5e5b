//! Report invariants over random configurations of the bundled fixtures.

use proptest::prelude::*;
use sasleak::commands::{analyze, analyze_exit_code};
use sasleak::config::Config;
use sasleak::corpus::FIXTURES;
use sasleak::report::Report;

fn config() -> impl Strategy<Value = Config> {
    (8u32..=32, 0u32..8, 1usize..60, any::<bool>(), any::<u64>()).prop_map(|(width, line_bits, bound, branches, seed)| {
        Config { width, line_bits, bound, check_branches: branches, seed, enum_budget: 200, ..Config::default() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn reports_round_trip_and_exit_codes_are_total(cfg in config(), idx in 0..FIXTURES.len()) {
        let f = &FIXTURES[idx];
        let a = analyze(&f.source(), &cfg, false).unwrap();
        let json = a.report.to_json();
        let back: Report = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.to_json(), json);
        prop_assert_eq!(a.report.sites.len(), a.result.sites.len());
        prop_assert!(matches!(analyze_exit_code(&a.report), 0 | 2));
        prop_assert_eq!(&analyze(&f.source(), &cfg, false).unwrap().report, &a.report);
        if !cfg.check_branches {
            prop_assert!(a.report.sites.iter().all(|s| s.kind != "branch"));
        }
    }

    #[test]
    fn invalid_configs_are_rejected(width in 1u32..16, line_bits in 0u32..20) {
        let cfg = Config { width, line_bits, ..Config::default() };
        let r = analyze(&FIXTURES[1].source(), &cfg, false);
        if line_bits >= width {
            prop_assert!(r.is_err());
        }
    }
}
