use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sasleak_core::absint::{run_worklist, AnalysisResult};
use sasleak_core::checker::{check_site, emit_smtlib_any, site_constraint, Verdict};
use sasleak_core::ir::{parse_program_with_width, validate, Program};
use sasleak_core::oracle::{check_soundness, crun, Layout, MemoryImage, SecretAssignment, SoundnessReport, Trace};

use crate::config::Config;
use crate::report::Report;
use crate::CliError;

/// Program text together with the name it is reported under.
pub struct Source {
    pub name: String,
    pub text: String,
}

impl Source {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Source { name, text })
    }
}

pub fn load(src: &Source, config: &Config) -> Result<Program, CliError> {
    config.validate()?;
    let program = parse_program_with_width(&src.text, config.width).map_err(CliError::Parse)?;
    let diags = validate(&program);
    for d in diags.iter().filter(|d| !d.is_error()) {
        log::warn!("{}: {d}", src.name);
    }
    let errors: Vec<_> = diags.into_iter().filter(|d| d.is_error()).collect();
    if !errors.is_empty() {
        return Err(CliError::Parse(errors));
    }
    Ok(program)
}

fn annotated_secrets(program: &Program) -> BTreeMap<String, String> {
    program
        .annotation_secret_ids()
        .into_iter()
        .map(|(id, a)| (format!("s{id}"), format!("{}.{}", a.function(), a.reg())))
        .collect()
}

pub struct Analysis {
    pub program: Program,
    pub result: AnalysisResult,
    pub report: Report,
}

/// Parse, analyze and check every site.
pub fn analyze(src: &Source, config: &Config, dump_states: bool) -> Result<Analysis, CliError> {
    let program = load(src, config)?;
    let result = run_worklist(&program, &config.analysis())?;
    log::info!("{}: {} sites, {:?}", src.name, result.sites.len(), result.termination);
    let check = config.check();
    let verdicts: Vec<_> = result.sites.iter().map(|s| check_site(s, &check)).collect();
    let report = Report::new(&src.name, config, &result, &verdicts, annotated_secrets(&program), dump_states);
    Ok(Analysis { program, result, report })
}

pub fn analyze_exit_code(report: &Report) -> u8 {
    if report.has_leaks() {
        2
    } else {
        0
    }
}

pub fn oracle(src: &Source, config: &Config) -> Result<SoundnessReport, CliError> {
    let a = analyze(src, config, false)?;
    if config.oracle_runs == 0 {
        log::warn!("{}: zero oracle runs requested, nothing is checked", src.name);
    }
    let rep = check_soundness(&a.program, &a.result, &config.soundness())?;
    if let Some(why) = &rep.skipped {
        log::warn!("{}: soundness check skipped: {why}", src.name);
    }
    Ok(rep)
}

pub fn soundness_text(name: &str, rep: &SoundnessReport) -> String {
    let mut out = String::new();
    writeln!(out, "program     {name}").unwrap();
    if let Some(why) = &rep.skipped {
        writeln!(out, "skipped     {why}").unwrap();
    }
    writeln!(
        out,
        "runs        {} ({} points, {} values checked, {} faults, {} out of fuel)",
        rep.runs,
        rep.points_checked,
        rep.values_checked,
        rep.faults.len(),
        rep.fuel_exhausted
    )
    .unwrap();
    writeln!(out, "violations  {}", rep.violations.len()).unwrap();
    for v in &rep.violations {
        writeln!(out, "  {v}").unwrap();
    }
    for (run, f) in &rep.faults {
        writeln!(out, "fault       run {run}: {f}").unwrap();
    }
    out
}

#[derive(Serialize)]
struct WitnessFile<'a> {
    pc: usize,
    kind: String,
    assignment: &'a BTreeMap<String, u64>,
}

/// Writes one SMT-LIB script per site whose formulas mention a secret, plus
/// a witness file for sites the built-in solver found satisfiable.
pub fn emit_smt(src: &Source, config: &Config, outdir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let a = analyze(src, config, false)?;
    let check = config.check();
    fs::create_dir_all(outdir).map_err(|source| CliError::Io { path: outdir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let write = |path: PathBuf, text: &str, written: &mut Vec<PathBuf>| -> Result<(), CliError> {
        fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
        written.push(path);
        Ok(())
    };
    for site in &a.result.sites {
        let constraints: Vec<_> = site.formulas.iter().filter_map(|f| site_constraint(site.kind, f, &check)).collect();
        if constraints.is_empty() {
            continue;
        }
        let stem = format!("site_{}_{}", site.pc, site.kind);
        write(outdir.join(format!("{stem}.smt2")), &emit_smtlib_any(&constraints), &mut written)?;
        if let Verdict::Sat { witness } = &check_site(site, &check).verdict {
            let w = WitnessFile { pc: site.pc, kind: site.kind.to_string(), assignment: witness };
            let text = serde_json::to_string_pretty(&w).expect("witness serializes") + "\n";
            write(outdir.join(format!("{stem}.witness.json")), &text, &mut written)?;
        }
    }
    Ok(written)
}

/// One concrete run. Without an assignment, secrets are drawn from `seed`.
pub fn trace(
    src: &Source,
    config: &Config,
    secrets: Option<SecretAssignment>,
    fuel: usize,
) -> Result<(SecretAssignment, Trace), CliError> {
    let program = load(src, config)?;
    let layout = Layout::new(&program)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let secrets = secrets.unwrap_or_else(|| SecretAssignment::random(&program, &layout, &mut rng));
    let image = MemoryImage { seed: config.seed, ..MemoryImage::default() };
    let t = crun(&program, &secrets, &image, fuel)?;
    Ok((secrets, t))
}
