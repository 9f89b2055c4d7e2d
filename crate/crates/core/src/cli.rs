//! Command layer shared by the `seamstress` binary: flag/config merging,
//! backend selection, subcommand bodies, and the exit-code policy.
//!
//! Everything lives here as plain library code so precedence rules,
//! validation, rendering, and exit codes are testable without spawning the
//! binary. The binary only parses argv, hands the values over, prints what
//! comes back, and exits with the returned code.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::c_model::{self, CModelError, ElementKind};
use crate::llm_backend::{
    builtin_profile, builtin_profiles, Backend, BackendError, BackendProfile, HttpBackend,
    ReplayBackend,
};
use crate::orchestrator::{
    render_report_text, run_pipeline, validate_dirs, write_preprocess_outputs, CoverageReport,
    OrchestratorError, RunConfig, DEFAULT_MAX_REPAIR_ATTEMPTS,
};
use crate::preprocess::{apply_defines, preprocess_project, PreprocessError};
use crate::prompts::RulesProfile;
use crate::segment::{initial_cap, plan_modules, CapEvent, Plan, DEFAULT_FLOOR};

/// The run finished and every unit compiled.
pub const EXIT_OK: i32 = 0;
/// The run finished but at least one unit was abandoned.
pub const EXIT_COMPLETED_WITH_ABORTS: i32 = 1;
/// Bad invocation or environment: unusable flags or config file, unknown
/// backend, missing credentials, held lock, occupied workspace, broken
/// toolchain.
pub const EXIT_USAGE: i32 = 2;

/// Backend used when neither a flag nor the config file picks one.
pub const DEFAULT_BACKEND: &str = "claude-3.5-sonnet";

/// A failure the command layer reports to the user, with the process exit
/// code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub exit: i32,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            exit: EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CModelError> for CliError {
    fn from(e: CModelError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::usage(e.to_string())
    }
}

/// Output format for tables and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(CliError::usage(format!(
                "unknown report format {other:?} (expected text or json)"
            ))),
        }
    }
}

/// `seamstress.toml`, mirroring the command-line flags under the same
/// kebab-case names. Flag values win over file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub project: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: Option<String>,
    pub cap: Option<usize>,
    pub max_repair: Option<usize>,
    pub define: Option<Vec<String>>,
    pub rules: Option<PathBuf>,
    pub report_format: Option<String>,
    pub force: Option<bool>,
}

/// Read a config file if it exists; a missing file is not an error.
pub fn load_file_config(path: &Path) -> Result<Option<FileConfig>, CliError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(CliError::usage(format!("{}: {e}", path.display()))),
    };
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Command-line values as parsed, before merging with the config file.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    pub project: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: Option<String>,
    pub cap: Option<usize>,
    pub max_repair: Option<usize>,
    pub define: Vec<String>,
    pub rules: Option<PathBuf>,
    pub report_format: Option<String>,
    pub force: bool,
}

/// Effective option values: flags over config file over defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub project: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: String,
    pub cap: Option<usize>,
    pub max_repair: usize,
    pub defines: Vec<String>,
    pub rules: Option<PathBuf>,
    pub report_format: ReportFormat,
    pub force: bool,
}

impl Settings {
    pub fn resolve(flags: Flags, file: Option<FileConfig>) -> Result<Settings, CliError> {
        let file = file.unwrap_or_default();
        let report_format = match flags.report_format.or(file.report_format) {
            Some(s) => s.parse()?,
            None => ReportFormat::default(),
        };
        let cap = flags.cap.or(file.cap);
        if cap == Some(0) {
            return Err(CliError::usage("--cap must be at least 1"));
        }
        let max_repair = flags
            .max_repair
            .or(file.max_repair)
            .unwrap_or(DEFAULT_MAX_REPAIR_ATTEMPTS);
        if max_repair == 0 {
            return Err(CliError::usage("--max-repair must be at least 1"));
        }
        let defines = if flags.define.is_empty() {
            file.define.unwrap_or_default()
        } else {
            flags.define
        };
        Ok(Settings {
            project: flags.project.or(file.project),
            out: flags.out.or(file.out),
            backend: flags
                .backend
                .or(file.backend)
                .unwrap_or_else(|| DEFAULT_BACKEND.to_string()),
            cap,
            max_repair,
            defines,
            rules: flags.rules.or(file.rules),
            report_format,
            force: flags.force || file.force.unwrap_or(false),
        })
    }

    fn project(&self) -> Result<&Path, CliError> {
        self.project.as_deref().ok_or_else(|| {
            CliError::usage("--project is required (or set project in seamstress.toml)")
        })
    }

    fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::usage("--out is required (or set out in seamstress.toml)"))
    }
}

/// What `--backend` selects: a built-in model profile for live calls, or a
/// recorded transcript directory replayed verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Profile(String),
    Replay(PathBuf),
}

impl BackendChoice {
    pub fn parse(spec: &str) -> Result<BackendChoice, CliError> {
        if let Some(dir) = spec.strip_prefix("replay:") {
            if dir.is_empty() {
                return Err(CliError::usage(
                    "replay: needs a transcript directory, e.g. replay:out/transcript",
                ));
            }
            return Ok(BackendChoice::Replay(PathBuf::from(dir)));
        }
        Ok(BackendChoice::Profile(spec.to_string()))
    }

    /// The model profile this choice runs with, without opening a live
    /// connection. Replay directories carry their recorded profile.
    pub fn profile(&self) -> Result<BackendProfile, CliError> {
        match self {
            BackendChoice::Profile(name) => builtin_profile(name).ok_or_else(|| {
                let known: Vec<String> =
                    builtin_profiles().into_iter().map(|p| p.name).collect();
                CliError::usage(format!(
                    "unknown backend profile {name:?} (known: {})",
                    known.join(", ")
                ))
            }),
            BackendChoice::Replay(dir) => {
                let replay = ReplayBackend::load(dir, None)?;
                Ok(replay.profile().clone())
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Backend>, CliError> {
        match self {
            BackendChoice::Profile(_) => {
                let profile = self.profile()?;
                Ok(Box::new(HttpBackend::new(profile)?))
            }
            BackendChoice::Replay(dir) => Ok(Box::new(ReplayBackend::load(dir, None)?)),
        }
    }
}

/// What a subcommand hands back: text to print and the process exit code.
#[derive(Debug)]
pub struct CmdOutput {
    pub stdout: String,
    pub exit: i32,
}

impl CmdOutput {
    fn ok(stdout: String) -> Self {
        CmdOutput {
            stdout,
            exit: EXIT_OK,
        }
    }
}

const KIND_ORDER: [ElementKind; 6] = [
    ElementKind::Function,
    ElementKind::MacroFunction,
    ElementKind::TypeDef,
    ElementKind::MacroVariable,
    ElementKind::Variable,
    ElementKind::Other,
];

fn to_pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::usage(format!("could not serialize output: {e}")))
}

#[derive(Debug, Serialize)]
struct AnalyzeRow {
    path: String,
    lines: usize,
    elements: usize,
    by_kind: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize)]
struct AnalyzeSummary {
    root: String,
    files: Vec<AnalyzeRow>,
    total_files: usize,
    total_lines: usize,
    total_elements: usize,
    by_kind: BTreeMap<String, usize>,
}

/// Scan the project and report files, line counts, and defined elements.
pub fn cmd_analyze(settings: &Settings) -> Result<CmdOutput, CliError> {
    let project = c_model::load_project(settings.project()?)?;
    let mut rows = Vec::new();
    let mut total_lines = 0usize;
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for f in &project.files {
        let mut file_kinds: BTreeMap<String, usize> = BTreeMap::new();
        let mut elements = 0usize;
        for e in f.elements.iter().filter(|e| !e.is_declaration) {
            elements += 1;
            *file_kinds.entry(e.kind.as_str().to_string()).or_default() += 1;
            *by_kind.entry(e.kind.as_str().to_string()).or_default() += 1;
        }
        total_lines += f.line_count();
        rows.push(AnalyzeRow {
            path: f.display_path(),
            lines: f.line_count(),
            elements,
            by_kind: file_kinds,
        });
    }
    let total_files = rows.len();
    let total_elements = rows.iter().map(|r| r.elements).sum();
    let summary = AnalyzeSummary {
        root: project.root.display().to_string(),
        files: rows,
        total_files,
        total_lines,
        total_elements,
        by_kind,
    };

    match settings.report_format {
        ReportFormat::Json => Ok(CmdOutput::ok(to_pretty(&summary)?)),
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!("{:<32} {:>8} {:>9}\n", "file", "lines", "elements"));
            for r in &summary.files {
                out.push_str(&format!("{:<32} {:>8} {:>9}\n", r.path, r.lines, r.elements));
            }
            out.push_str(&format!(
                "total: {} file(s), {} lines, {} elements\n",
                summary.total_files, summary.total_lines, summary.total_elements
            ));
            if !summary.by_kind.is_empty() {
                let parts: Vec<String> = KIND_ORDER
                    .iter()
                    .filter_map(|k| {
                        summary
                            .by_kind
                            .get(k.as_str())
                            .map(|n| format!("{} {}", k.as_str(), n))
                    })
                    .collect();
                out.push_str(&format!("by kind: {}\n", parts.join(", ")));
            }
            Ok(CmdOutput::ok(out))
        }
    }
}

/// Merge, clean up, and reorder the project's modules, writing the results
/// and a summary under `<out>/preprocessed/`.
pub fn cmd_preprocess(settings: &Settings) -> Result<CmdOutput, CliError> {
    let project_root = settings.project()?;
    let out_dir = settings.out()?;
    validate_dirs(project_root, out_dir)?;
    let project = c_model::load_project(project_root)?;
    let mut pre = preprocess_project(&project, &[])?;
    apply_defines(&mut pre, &settings.defines);
    let summary = write_preprocess_outputs(out_dir, &pre)?;

    match settings.report_format {
        ReportFormat::Json => Ok(CmdOutput::ok(to_pretty(&summary)?)),
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<24} {:>8} {:>9} {:>9} {:>8}\n",
                "module", "lines", "elements", "externs", "renames"
            ));
            for m in &summary.modules {
                out.push_str(&format!(
                    "{:<24} {:>8} {:>9} {:>9} {:>8}\n",
                    m.name,
                    m.lines,
                    m.elements,
                    m.kept_externals.len(),
                    m.renames.len()
                ));
            }
            if summary.features.is_empty() {
                out.push_str("features: (none)\n");
            } else {
                let parts: Vec<String> = summary
                    .features
                    .iter()
                    .map(|f| {
                        format!("{}={}", f.name, if f.originally_defined { "on" } else { "off" })
                    })
                    .collect();
                out.push_str(&format!("features: {}\n", parts.join(", ")));
            }
            if !summary.warnings.is_empty() {
                out.push_str(&format!("warnings ({}):\n", summary.warnings.len()));
                for w in &summary.warnings {
                    out.push_str(&format!("  - {w}\n"));
                }
            }
            out.push_str(&format!("wrote {}\n", out_dir.join("preprocessed").display()));
            Ok(CmdOutput::ok(out))
        }
    }
}

/// Plan translation units at the effective line cap without translating.
pub fn cmd_segment(settings: &Settings) -> Result<CmdOutput, CliError> {
    let project_root = settings.project()?;
    let profile = BackendChoice::parse(&settings.backend)?.profile()?;
    let cap = initial_cap(settings.cap, profile.context_window);
    let project = c_model::load_project(project_root)?;
    let mut pre = preprocess_project(&project, &[])?;
    apply_defines(&mut pre, &settings.defines);
    let plan = Plan {
        cap_lines: cap,
        floor: DEFAULT_FLOOR,
        history: vec![CapEvent {
            cap,
            trigger: "initial".to_string(),
        }],
        modules: plan_modules(&pre.modules, cap),
    };

    match settings.report_format {
        ReportFormat::Json => Ok(CmdOutput::ok(to_pretty(&plan)?)),
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "cap: {} lines (window {}, floor {})\n",
                plan.cap_lines, profile.context_window, plan.floor
            ));
            let mut total_units = 0usize;
            for m in &plan.modules {
                total_units += m.units.len();
                let spans: Vec<String> = m
                    .units
                    .iter()
                    .map(|u| format!("{}-{}", u.start_line, u.end_line))
                    .collect();
                out.push_str(&format!(
                    "{:<24} {:>2} unit(s): {}\n",
                    m.name,
                    m.units.len(),
                    spans.join(", ")
                ));
            }
            out.push_str(&format!(
                "total: {} unit(s) across {} module(s)\n",
                total_units,
                plan.modules.len()
            ));
            Ok(CmdOutput::ok(out))
        }
    }
}

/// Run the full translate/repair pipeline and print the coverage report.
pub fn cmd_translate(settings: &Settings) -> Result<CmdOutput, CliError> {
    let project_root = settings.project()?;
    let out_dir = settings.out()?;
    let mut backend = BackendChoice::parse(&settings.backend)?.build()?;

    let mut config = RunConfig::new(project_root, out_dir);
    config.cap = settings.cap;
    config.max_repair_attempts = settings.max_repair;
    config.defines = settings.defines.clone();
    config.force = settings.force;
    if let Some(path) = &settings.rules {
        config.rules = RulesProfile::load(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }

    let outcome = run_pipeline(&config, backend.as_mut())?;
    let stdout = match settings.report_format {
        ReportFormat::Json => to_pretty(&outcome.report)?,
        ReportFormat::Text => {
            let mut s = render_report_text(&outcome.report);
            s.push_str(&format!(
                "workspace: {}\n",
                outcome.out_dir.join("rust").display()
            ));
            s
        }
    };
    let exit = if outcome.aborted_units > 0 {
        EXIT_COMPLETED_WITH_ABORTS
    } else {
        EXIT_OK
    };
    Ok(CmdOutput { stdout, exit })
}

/// Re-render the coverage report of a finished run.
pub fn cmd_report(settings: &Settings) -> Result<CmdOutput, CliError> {
    let out_dir = settings.out()?;
    let path = out_dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::usage(format!(
            "{}: {e} (run `seamstress translate` first)",
            path.display()
        ))
    })?;
    let report: CoverageReport = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match settings.report_format {
        ReportFormat::Json => Ok(CmdOutput::ok(to_pretty(&report)?)),
        ReportFormat::Text => Ok(CmdOutput::ok(render_report_text(&report))),
    }
}
