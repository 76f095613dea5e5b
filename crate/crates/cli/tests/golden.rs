//! Corpus verdicts against the committed golden files.
//! Regenerate with `SASLEAK_BLESS=1 cargo test -p sasleak --test golden`.

use std::fs;

use sasleak::commands::analyze;
use sasleak::corpus::{golden_config, golden_path, golden_summary, FIXTURES};

#[test]
fn corpus_matches_golden_files() {
    let bless = std::env::var_os("SASLEAK_BLESS").is_some();
    let cfg = golden_config();
    let mut mismatches = Vec::new();
    for f in FIXTURES {
        let got = golden_summary(&analyze(&f.source(), &cfg, false).unwrap().report);
        let path = golden_path(f.name);
        if bless {
            fs::write(&path, &got).unwrap();
            continue;
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        if got != want {
            mismatches.push(format!("{}:\n--- want\n{want}--- got\n{got}", f.name));
        }
    }
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}
