//! End-to-end translation pipeline: output workspace scaffolding, the
//! compile driver, rustc error classification, the line-patch engine, the
//! repair loop, and coverage reporting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::c_model::{self, CProject};
use crate::llm_backend::{
    send_once, send_validated, with_correction, Backend, BackendError, ConversationMemory,
    TranscriptWriter,
};
use crate::metadata::{
    apply_mapping, imports_needed, parse_rust_elements, select_context, ContextMode, ElementIndex,
    MetadataStore, RustIndex,
};
use crate::preprocess::{preprocess_project, FeatureRecord, MergedModule, Preprocessed};
use crate::prompts::{
    build_file_selection_prompt, build_mapping_prompt, build_repair_prompt,
    build_translation_prompt, Answer, FormatError, PatchSpec, PromptEnvelope, PromptError,
    RulesProfile, TemplateSet, TokenBudget,
};
use crate::segment::{
    initial_cap, plan_module_from, plan_modules, CapEvent, ModulePlan, Resizer, ShrinkOutcome,
    ShrinkTrigger, UnitId, UnitPlan, DEFAULT_FLOOR,
};

/// Repair attempts per unit before the unit is abandoned.
pub const DEFAULT_MAX_REPAIR_ATTEMPTS: usize = 20;
/// Consecutive failed units that trigger one halving of the line cap.
pub const STALL_THRESHOLD: usize = 10;
/// Wall-clock limit for one compiler invocation.
pub const DEFAULT_COMPILE_TIMEOUT_SECS: u64 = 300;
/// Fraction of the prompt allowance offered to the definition context block.
pub const CONTEXT_BUDGET_DIVISOR: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("output workspace already exists at {path} (pass --force to replace it)")]
    WorkspaceExists { path: PathBuf },
    #[error("another run holds the lock file {path}")]
    LockHeld { path: PathBuf },
    #[error("output directory {out} must be disjoint from the project root {project}")]
    BadOutDir { out: PathBuf, project: PathBuf },
    #[error("cargo could not be run: {message}")]
    ToolchainMissing { message: String },
    #[error("compile step exceeded {seconds}s and was killed")]
    CompileTimeout { seconds: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] c_model::CModelError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Metadata(#[from] crate::metadata::MetadataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn io_err(path: &Path, source: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Error classification
// ---------------------------------------------------------------------------

/// Compiler error families used for repair bookkeeping and reporting.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Syntax,
    Type,
    Traits,
    Ownership,
    Lifetime,
    NameResolution,
    Modules,
    Generics,
    Constants,
    Attributes,
}

impl ErrorCategory {
    pub fn display_name(self) -> &'static str {
        match self {
            ErrorCategory::Syntax => "Syntax",
            ErrorCategory::Type => "Type",
            ErrorCategory::Traits => "Traits",
            ErrorCategory::Ownership => "Ownership",
            ErrorCategory::Lifetime => "Lifetime",
            ErrorCategory::NameResolution => "Name Resolution",
            ErrorCategory::Modules => "Modules",
            ErrorCategory::Generics => "Generics",
            ErrorCategory::Constants => "Constants",
            ErrorCategory::Attributes => "Attributes",
        }
    }

    pub fn all() -> [ErrorCategory; 10] {
        [
            ErrorCategory::Syntax,
            ErrorCategory::Type,
            ErrorCategory::Traits,
            ErrorCategory::Ownership,
            ErrorCategory::Lifetime,
            ErrorCategory::NameResolution,
            ErrorCategory::Modules,
            ErrorCategory::Generics,
            ErrorCategory::Constants,
            ErrorCategory::Attributes,
        ]
    }
}

/// Map a rustc error code to its category. Diagnostics without a code are
/// parse-level and count as `Syntax`; codes outside the table fall back to
/// `Type` and are flagged as unmapped so callers can log them.
pub fn classify_code(code: Option<&str>) -> (ErrorCategory, bool) {
    let Some(code) = code else {
        return (ErrorCategory::Syntax, true);
    };
    let category = match code {
        "E0432" | "E0433" | "E0603" | "E0583" => ErrorCategory::Modules,
        "E0425" | "E0412" | "E0422" | "E0428" | "E0405" => ErrorCategory::NameResolution,
        "E0502" | "E0382" | "E0499" | "E0505" | "E0507" => ErrorCategory::Ownership,
        "E0106" | "E0621" | "E0495" | "E0623" | "E0597" => ErrorCategory::Lifetime,
        "E0107" | "E0207" | "E0109" => ErrorCategory::Generics,
        "E0015" | "E0010" | "E0435" => ErrorCategory::Constants,
        "E0452" | "E0453" | "E0518" | "E0536" | "E0537" | "E0658" => ErrorCategory::Attributes,
        "E0308" | "E0606" | "E0600" | "E0614" | "E0282" => ErrorCategory::Type,
        "E0277" | "E0119" | "E0038" | "E0046" => ErrorCategory::Traits,
        _ => return (ErrorCategory::Type, false),
    };
    (category, true)
}

/// One error-level compiler diagnostic, reduced to what the pipeline needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: Option<String>,
    pub message: String,
    /// Workspace-relative path of the primary span, when one exists.
    pub file: Option<String>,
    pub line: Option<usize>,
    /// The human-readable rendering used in repair prompts.
    pub rendered: String,
    pub category: ErrorCategory,
    /// False when the code fell through the classification table.
    pub mapped_code: bool,
}

/// Count diagnostics per category.
pub fn categorize(errors: &[Diagnostic]) -> BTreeMap<ErrorCategory, usize> {
    let mut out = BTreeMap::new();
    for e in errors {
        *out.entry(e.category).or_insert(0) += 1;
    }
    out
}

fn histogram_names(h: &BTreeMap<ErrorCategory, usize>) -> BTreeMap<String, usize> {
    h.iter()
        .map(|(k, v)| (k.display_name().to_string(), *v))
        .collect()
}

// ---------------------------------------------------------------------------
// Compile driver
// ---------------------------------------------------------------------------

/// Result of one compiler invocation over the output workspace.
#[derive(Debug, Clone)]
pub struct CompileOutcome {
    pub success: bool,
    pub errors: Vec<Diagnostic>,
    /// Human-readable log: the rendered diagnostics, or raw stderr when the
    /// build failed before producing any.
    pub raw_log: String,
    pub duration: Duration,
}

fn run_cargo(
    dir: &Path,
    args: &[&str],
    timeout: Duration,
) -> Result<(bool, String, String, Duration), OrchestratorError> {
    let started = Instant::now();
    let mut child = Command::new("cargo")
        .args(args)
        .current_dir(dir)
        .env("CARGO_TERM_COLOR", "never")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| OrchestratorError::ToolchainMissing {
            message: e.to_string(),
        })?;

    let mut stdout_pipe = child.stdout.take().expect("stdout piped");
    let mut stderr_pipe = child.stderr.take().expect("stderr piped");
    let out_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout_pipe.read_to_string(&mut buf);
        buf
    });
    let err_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr_pipe.read_to_string(&mut buf);
        buf
    });

    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if started.elapsed() >= timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(OrchestratorError::CompileTimeout {
                        seconds: timeout.as_secs(),
                    });
                }
                std::thread::sleep(Duration::from_millis(25));
            }
            Err(e) => return Err(io_err(dir, e)),
        }
    };
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();
    Ok((status.success(), stdout, stderr, started.elapsed()))
}

fn parse_check_output(
    status_ok: bool,
    stdout: &str,
    stderr: &str,
    duration: Duration,
) -> CompileOutcome {
    let mut errors = Vec::new();
    let mut rendered_parts = Vec::new();
    for line in stdout.lines() {
        let Ok(value) = serde_json::from_str::<serde_json::Value>(line) else {
            continue;
        };
        if value.get("reason").and_then(|r| r.as_str()) != Some("compiler-message") {
            continue;
        }
        let Some(message) = value.get("message") else {
            continue;
        };
        if message.get("level").and_then(|l| l.as_str()) != Some("error") {
            continue;
        }
        let code = message
            .pointer("/code/code")
            .and_then(|c| c.as_str())
            .map(|c| c.to_string());
        let text = message
            .get("message")
            .and_then(|m| m.as_str())
            .unwrap_or_default()
            .to_string();
        // Skip the trailing "aborting due to N previous errors" summary.
        if code.is_none()
            && (text.starts_with("aborting due to") || text.starts_with("could not compile"))
        {
            continue;
        }
        let primary = message
            .get("spans")
            .and_then(|s| s.as_array())
            .and_then(|spans| {
                spans
                    .iter()
                    .find(|s| s.get("is_primary").and_then(|p| p.as_bool()) == Some(true))
            });
        let file = primary
            .and_then(|s| s.get("file_name"))
            .and_then(|f| f.as_str())
            .map(normalize_rel);
        let line_no = primary
            .and_then(|s| s.get("line_start"))
            .and_then(|l| l.as_u64())
            .map(|l| l as usize);
        let rendered = message
            .get("rendered")
            .and_then(|r| r.as_str())
            .unwrap_or_default()
            .to_string();
        if !rendered.is_empty() {
            rendered_parts.push(rendered.clone());
        }
        let (category, mapped_code) = classify_code(code.as_deref());
        errors.push(Diagnostic {
            code,
            message: text,
            file,
            line: line_no,
            rendered,
            category,
            mapped_code,
        });
    }
    let mut raw_log = rendered_parts.concat();
    if raw_log.trim().is_empty() && !status_ok {
        raw_log = stderr.to_string();
        if errors.is_empty() {
            let file = stderr.contains("Cargo.toml").then(|| "Cargo.toml".to_string());
            let (category, mapped_code) = classify_code(None);
            errors.push(Diagnostic {
                code: None,
                message: stderr.lines().next().unwrap_or("build failed").to_string(),
                file,
                line: None,
                rendered: stderr.to_string(),
                category,
                mapped_code,
            });
        }
    }
    CompileOutcome {
        success: status_ok && errors.is_empty(),
        errors,
        raw_log,
        duration,
    }
}

/// Fast type-check pass used inside the translate/repair loop.
pub fn check_workspace(dir: &Path, timeout: Duration) -> Result<CompileOutcome, OrchestratorError> {
    let (ok, stdout, stderr, duration) =
        run_cargo(dir, &["check", "--quiet", "--message-format=json"], timeout)?;
    Ok(parse_check_output(ok, &stdout, &stderr, duration))
}

/// Full build run once at the end of a pipeline.
pub fn build_workspace(dir: &Path, timeout: Duration) -> Result<CompileOutcome, OrchestratorError> {
    let (ok, stdout, stderr, duration) =
        run_cargo(dir, &["build", "--quiet", "--message-format=json"], timeout)?;
    Ok(parse_check_output(ok, &stdout, &stderr, duration))
}

fn normalize_rel(path: &str) -> String {
    let p = path.replace('\\', "/");
    p.strip_prefix("./").unwrap_or(&p).to_string()
}

// ---------------------------------------------------------------------------
// Patch engine
// ---------------------------------------------------------------------------

fn split_replacement(replacement: &str) -> Vec<String> {
    if replacement.is_empty() {
        return Vec::new();
    }
    let trimmed = replacement.strip_suffix('\n').unwrap_or(replacement);
    trimmed.split('\n').map(|s| s.to_string()).collect()
}

/// Apply one response's patches to a single file's text.
///
/// Line numbers are 1-based and inclusive. `start == end == line count + 1`
/// appends at the end of the file; an empty replacement deletes the range.
/// Out-of-range and overlapping ranges are rejected so the caller can feed
/// the problem back to the model.
pub fn apply_patches(text: &str, patches: &[PatchSpec]) -> Result<String, FormatError> {
    let lines: Vec<&str> = text.lines().collect();
    let len = lines.len();

    for p in patches {
        let insertion = p.start_line == len + 1 && p.end_line == len + 1;
        if p.start_line < 1 || p.end_line < p.start_line || (p.end_line > len && !insertion) {
            return Err(FormatError::new(format!(
                "patch range {}..{} is invalid for {} which has {} lines (use start = end = {} to append)",
                p.start_line,
                p.end_line,
                p.file,
                len,
                len + 1
            )));
        }
    }
    let mut spans: Vec<(usize, usize)> = patches.iter().map(|p| (p.start_line, p.end_line)).collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 <= w[0].1 {
            return Err(FormatError::new(format!(
                "patch ranges {}..{} and {}..{} overlap in {}",
                w[0].0, w[0].1, w[1].0, w[1].1, patches[0].file
            )));
        }
    }

    let mut out: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    let mut descending: Vec<&PatchSpec> = patches.iter().collect();
    descending.sort_by(|a, b| b.start_line.cmp(&a.start_line));
    for p in descending {
        let replacement = split_replacement(&p.replacement);
        if p.start_line == len + 1 {
            out.extend(replacement);
        } else {
            out.splice(p.start_line - 1..p.end_line, replacement);
        }
    }
    let mut joined = out.join("\n");
    if !out.is_empty() {
        joined.push('\n');
    }
    Ok(joined)
}

/// Check that a manifest only declares permitted dependencies.
pub fn validate_manifest(text: &str, allowed_deps: &[String]) -> Result<(), FormatError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| FormatError::new(format!("Cargo.toml would not parse after the patch: {e}")))?;
    for section in ["dependencies", "dev-dependencies", "build-dependencies"] {
        let Some(deps) = table.get(section).and_then(|d| d.as_table()) else {
            continue;
        };
        for name in deps.keys() {
            if !allowed_deps.iter().any(|a| a == name) {
                return Err(FormatError::new(format!(
                    "the patch adds dependency `{name}` to Cargo.toml; external crates are not \
                     permitted, use only the standard library"
                )));
            }
        }
    }
    Ok(())
}

/// Validate and apply a full patch set across files.
///
/// `files` holds the current text of every patchable file; patches that name
/// anything else are rejected. Nothing is written here — the returned map
/// holds only the files whose text changed, so a validation failure leaves
/// the workspace untouched.
pub fn apply_patch_set(
    files: &BTreeMap<String, String>,
    patches: &[PatchSpec],
    allowed_deps: &[String],
) -> Result<BTreeMap<String, String>, FormatError> {
    if patches.is_empty() {
        return Err(FormatError::new("the repair listed no patches"));
    }
    let mut by_file: BTreeMap<String, Vec<PatchSpec>> = BTreeMap::new();
    for p in patches {
        let file = normalize_rel(&p.file);
        if !files.contains_key(&file) {
            return Err(FormatError::new(format!(
                "patch targets {file}, which is not one of the files offered for repair"
            )));
        }
        let mut spec = p.clone();
        spec.file = file.clone();
        by_file.entry(file).or_default().push(spec);
    }
    let mut changed = BTreeMap::new();
    for (file, group) in &by_file {
        let new_text = apply_patches(&files[file], group)?;
        if file == "Cargo.toml" {
            validate_manifest(&new_text, allowed_deps)?;
        }
        if new_text != files[file] {
            changed.insert(file.clone(), new_text);
        }
    }
    Ok(changed)
}

// ---------------------------------------------------------------------------
// Output workspace
// ---------------------------------------------------------------------------

/// Paths inside the generated Rust workspace.
#[derive(Debug, Clone)]
pub struct WorkspaceLayout {
    pub root: PathBuf,
}

impl WorkspaceLayout {
    pub fn new(out_dir: &Path) -> Self {
        WorkspaceLayout {
            root: out_dir.join("rust"),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("Cargo.toml")
    }

    pub fn lib_rs(&self) -> PathBuf {
        self.root.join("src/lib.rs")
    }

    pub fn module_mod(&self, module: &str) -> PathBuf {
        self.root.join("src").join(module).join("mod.rs")
    }

    /// Workspace-relative path of one unit's file, with forward slashes.
    pub fn unit_rel(&self, module: &str, ordinal: usize) -> String {
        format!("src/{module}/unit{ordinal}.rs")
    }

    pub fn unit_path(&self, module: &str, ordinal: usize) -> PathBuf {
        self.root.join("src").join(module).join(format!("unit{ordinal}.rs"))
    }
}

fn write_atomic(path: &Path, content: &str) -> Result<(), OrchestratorError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, content).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn package_name(project_root: &Path) -> String {
    let stem = project_root
        .file_name()
        .map(|s| s.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let mut out = String::new();
    for ch in stem.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch);
        } else {
            out.push('_');
        }
    }
    if out.is_empty() {
        return "translated".to_string();
    }
    if out.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        out.insert(0, 'p');
    }
    out
}

fn feature_name(record: &FeatureRecord) -> String {
    record.name.to_lowercase()
}

fn build_script(features: &[FeatureRecord]) -> Option<String> {
    if !features.iter().any(|f| f.originally_defined) {
        return None;
    }
    let mut body = String::from("fn main() {\n");
    for f in features {
        body.push_str(&format!(
            "    println!(\"cargo:rustc-check-cfg=cfg(feature, values(\\\"{}\\\"))\");\n",
            feature_name(f)
        ));
    }
    for f in features.iter().filter(|f| f.originally_defined) {
        body.push_str(&format!(
            "    println!(\"cargo:rustc-cfg=feature=\\\"{}\\\"\");\n",
            feature_name(f)
        ));
    }
    body.push_str("}\n");
    Some(body)
}

/// Create the output workspace skeleton: manifest, optional build script,
/// library root with one declared module per translation module, and empty
/// module directories. The skeleton compiles on its own.
pub fn scaffold_workspace(
    out_dir: &Path,
    package: &str,
    modules: &[String],
    features: &[FeatureRecord],
    force: bool,
) -> Result<WorkspaceLayout, OrchestratorError> {
    let layout = WorkspaceLayout::new(out_dir);
    if layout.root.exists() {
        if !force {
            return Err(OrchestratorError::WorkspaceExists {
                path: layout.root.clone(),
            });
        }
        fs::remove_dir_all(&layout.root).map_err(|e| io_err(&layout.root, e))?;
    }
    fs::create_dir_all(layout.root.join("src")).map_err(|e| io_err(&layout.root, e))?;

    let manifest = format!(
        "[package]\nname = \"{package}\"\nversion = \"0.1.0\"\nedition = \"2021\"\n\n[workspace]\n\n[dependencies]\n"
    );
    write_atomic(&layout.manifest(), &manifest)?;

    if let Some(script) = build_script(features) {
        write_atomic(&layout.root.join("build.rs"), &script)?;
    }

    let mut lib = String::new();
    for m in modules {
        lib.push_str(&format!("pub mod {m};\n"));
    }
    write_atomic(&layout.lib_rs(), &lib)?;
    for m in modules {
        write_atomic(&layout.module_mod(m), "")?;
    }
    Ok(layout)
}

fn module_mod_text(ordinals: &BTreeSet<usize>) -> String {
    let mut text = String::new();
    for o in ordinals {
        text.push_str(&format!("pub mod unit{o};\npub use self::unit{o}::*;\n"));
    }
    text
}

// ---------------------------------------------------------------------------
// Run log and lock
// ---------------------------------------------------------------------------

/// Append-only event log (`run.jsonl`): one JSON object per line, stamped
/// with a monotonically increasing sequence number.
pub struct RunLog {
    file: fs::File,
    seq: usize,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self, OrchestratorError> {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        Ok(RunLog { file, seq: 0 })
    }

    pub fn event(&mut self, mut value: serde_json::Value) {
        self.seq += 1;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("seq".to_string(), json!(self.seq));
        }
        if let Ok(line) = serde_json::to_string(&value) {
            let _ = writeln!(self.file, "{line}");
        }
    }
}

/// Exclusive lock on an output directory for the lifetime of a run.
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, OrchestratorError> {
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(OrchestratorError::LockHeld { path })
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Plan file and coverage report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Pending,
    Compiled,
    Aborted,
}

/// Contents of `plan.json`: the live segmentation plus unit outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub cap_lines: usize,
    pub floor: usize,
    pub history: Vec<CapEvent>,
    pub modules: Vec<ModulePlan>,
    pub statuses: BTreeMap<String, UnitStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuleCoverage {
    pub module: String,
    pub lines_total: usize,
    pub lines_compiled: usize,
    pub elements_total: usize,
    pub elements_mapped: usize,
    pub line_coverage: f64,
    pub element_coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub modules: Vec<ModuleCoverage>,
    pub lines_total: usize,
    pub lines_compiled: usize,
    pub elements_total: usize,
    pub elements_mapped: usize,
    pub line_coverage: f64,
    pub element_coverage: f64,
    pub units_total: usize,
    pub units_compiled: usize,
    pub units_aborted: usize,
    pub error_histogram: BTreeMap<String, usize>,
    pub final_build_ok: Option<bool>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Line and element coverage over the planned units, from exact integer
/// counts.
pub fn compute_coverage(
    plans: &[ModulePlan],
    statuses: &BTreeMap<String, UnitStatus>,
    store: &MetadataStore,
    histogram: &BTreeMap<ErrorCategory, usize>,
    final_build_ok: Option<bool>,
) -> CoverageReport {
    let status_of = |module: &str, index: usize| -> UnitStatus {
        statuses
            .get(&UnitId::new(module, index).to_string())
            .copied()
            .unwrap_or(UnitStatus::Pending)
    };
    let mut modules = Vec::new();
    let (mut lt, mut lc, mut et, mut em) = (0usize, 0usize, 0usize, 0usize);
    let (mut ut, mut uc, mut ua) = (0usize, 0usize, 0usize);
    for plan in plans {
        let mut lines_total = 0;
        let mut lines_compiled = 0;
        for unit in &plan.units {
            lines_total += unit.line_count();
            ut += 1;
            match status_of(&plan.name, unit.index) {
                UnitStatus::Compiled => {
                    lines_compiled += unit.line_count();
                    uc += 1;
                }
                UnitStatus::Aborted => ua += 1,
                UnitStatus::Pending => {}
            }
        }
        let mut elements_total = 0;
        let mut elements_mapped = 0;
        for record in store.module_records(&plan.name) {
            elements_total += 1;
            let in_compiled_unit = record
                .unit
                .is_some_and(|u| status_of(&plan.name, u) == UnitStatus::Compiled);
            if record.is_mapped() && in_compiled_unit {
                elements_mapped += 1;
            }
        }
        lt += lines_total;
        lc += lines_compiled;
        et += elements_total;
        em += elements_mapped;
        modules.push(ModuleCoverage {
            module: plan.name.clone(),
            lines_total,
            lines_compiled,
            elements_total,
            elements_mapped,
            line_coverage: ratio(lines_compiled, lines_total),
            element_coverage: ratio(elements_mapped, elements_total),
        });
    }
    CoverageReport {
        modules,
        lines_total: lt,
        lines_compiled: lc,
        elements_total: et,
        elements_mapped: em,
        line_coverage: ratio(lc, lt),
        element_coverage: ratio(em, et),
        units_total: ut,
        units_compiled: uc,
        units_aborted: ua,
        error_histogram: histogram_names(histogram),
        final_build_ok,
    }
}

/// Plain-text rendering of a coverage report for terminal output.
pub fn render_report_text(report: &CoverageReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>12} {:>8} {:>12} {:>8}\n",
        "module", "lines", "LCov", "elements", "ElemCov"
    ));
    for m in &report.modules {
        out.push_str(&format!(
            "{:<20} {:>12} {:>7.1}% {:>12} {:>7.1}%\n",
            m.module,
            format!("{}/{}", m.lines_compiled, m.lines_total),
            100.0 * m.line_coverage,
            format!("{}/{}", m.elements_mapped, m.elements_total),
            100.0 * m.element_coverage,
        ));
    }
    out.push_str(&format!(
        "{:<20} {:>12} {:>7.1}% {:>12} {:>7.1}%\n",
        "project",
        format!("{}/{}", report.lines_compiled, report.lines_total),
        100.0 * report.line_coverage,
        format!("{}/{}", report.elements_mapped, report.elements_total),
        100.0 * report.element_coverage,
    ));
    out.push_str(&format!(
        "units: {} compiled, {} aborted, {} total\n",
        report.units_compiled, report.units_aborted, report.units_total
    ));
    if !report.error_histogram.is_empty() {
        let parts: Vec<String> = report
            .error_histogram
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect();
        out.push_str(&format!("errors seen: {}\n", parts.join(", ")));
    }
    if let Some(ok) = report.final_build_ok {
        out.push_str(&format!(
            "final build: {}\n",
            if ok { "ok" } else { "failed" }
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Preprocess artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessModuleSummary {
    pub name: String,
    pub lines: usize,
    pub elements: usize,
    pub kept_externals: Vec<String>,
    pub renames: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub modules: Vec<PreprocessModuleSummary>,
    pub features: Vec<FeatureRecord>,
    pub warnings: Vec<String>,
}

/// Write merged module sources and the preprocessing summary under
/// `<out>/preprocessed/`.
pub fn write_preprocess_outputs(
    out_dir: &Path,
    pre: &Preprocessed,
) -> Result<PreprocessSummary, OrchestratorError> {
    let dir = out_dir.join("preprocessed");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut summary = PreprocessSummary {
        modules: Vec::new(),
        features: pre.features.clone(),
        warnings: pre.warnings.clone(),
    };
    for m in &pre.modules {
        write_atomic(&dir.join(format!("{}.c", m.name)), m.text())?;
        let origin = serde_json::to_string_pretty(&m.origin).unwrap_or_default();
        write_atomic(&dir.join(format!("{}.origin.json", m.name)), &(origin + "\n"))?;
        summary.modules.push(PreprocessModuleSummary {
            name: m.name.clone(),
            lines: m.file.line_count(),
            elements: m.file.elements.iter().filter(|e| !e.is_declaration).count(),
            kept_externals: m.kept_externals.clone(),
            renames: m.renames.clone(),
        });
    }
    let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
    write_atomic(&dir.join("preprocess.json"), &(text + "\n"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Everything a translation run needs besides the backend.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub project_root: PathBuf,
    pub out_dir: PathBuf,
    /// Upper bound on the line cap; the profile window may lower it.
    pub cap: Option<usize>,
    pub floor: usize,
    pub max_repair_attempts: usize,
    pub max_format_retries: usize,
    pub compile_timeout: Duration,
    /// Crate names the generated manifest may depend on (empty = std only).
    pub allowed_deps: Vec<String>,
    /// Macro names treated as defined when deciding feature defaults.
    pub defines: Vec<String>,
    pub rules: RulesProfile,
    pub templates: TemplateSet,
    pub force: bool,
}

impl RunConfig {
    pub fn new(project_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            project_root: project_root.into(),
            out_dir: out_dir.into(),
            cap: None,
            floor: DEFAULT_FLOOR,
            max_repair_attempts: DEFAULT_MAX_REPAIR_ATTEMPTS,
            max_format_retries: crate::llm_backend::DEFAULT_MAX_FORMAT_RETRIES,
            compile_timeout: Duration::from_secs(DEFAULT_COMPILE_TIMEOUT_SECS),
            allowed_deps: Vec::new(),
            defines: Vec::new(),
            rules: RulesProfile::default(),
            templates: TemplateSet::default(),
            force: false,
        }
    }
}

/// What a finished run hands back to the command layer.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: CoverageReport,
    pub aborted_units: usize,
    pub out_dir: PathBuf,
}

enum UnitOutcome {
    Compiled,
    Aborted(String),
    /// The unit cannot fit the window at the current cap.
    Resize,
}

/// Order modules so that definitions used across module boundaries come
/// before their users; reference cycles keep their original relative order.
pub fn module_order(modules: &[MergedModule]) -> Vec<usize> {
    let names: Vec<Vec<String>> = modules
        .iter()
        .map(|m| {
            m.file
                .elements
                .iter()
                .filter(|e| !e.is_declaration && !e.name.starts_with("anon@"))
                .map(|e| e.name.clone())
                .collect()
        })
        .collect();
    let texts: Vec<&str> = modules.iter().map(|m| m.file.source.masked.as_str()).collect();
    let refs = c_model::reference_edges(&names, &texts);
    let n = modules.len();
    let sccs = c_model::tarjan(n, |v| refs.edges[v].iter().copied());
    let mut comp_of = vec![0usize; n];
    for (ci, comp) in sccs.iter().enumerate() {
        for &v in comp {
            comp_of[v] = ci;
        }
    }
    // Condensation edges: component of a user depends on the component of
    // the definition it references.
    let mut comp_deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); sccs.len()];
    for (v, outs) in refs.edges.iter().enumerate() {
        for &d in outs {
            if comp_of[v] != comp_of[d] {
                comp_deps[comp_of[v]].insert(comp_of[d]);
            }
        }
    }
    // Emit components dependencies-first; ties resolve by the smallest
    // original module index so the order is stable.
    let comp_min: Vec<usize> = sccs.iter().map(|c| *c.iter().min().unwrap()).collect();
    let mut emitted = vec![false; sccs.len()];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let mut best: Option<usize> = None;
        for ci in 0..sccs.len() {
            if emitted[ci] {
                continue;
            }
            if comp_deps[ci].iter().any(|&d| !emitted[d]) {
                continue;
            }
            if best.is_none_or(|b| comp_min[ci] < comp_min[b]) {
                best = Some(ci);
            }
        }
        // A dependency cycle among components cannot happen after
        // condensation; guard anyway so a bug cannot hang the run.
        let Some(ci) = best.or_else(|| (0..sccs.len()).find(|&c| !emitted[c])) else {
            break;
        };
        emitted[ci] = true;
        let mut members = sccs[ci].clone();
        members.sort_unstable();
        order.extend(members);
    }
    order
}

/// Canonicalize the project and output directories (creating the output
/// directory first), rejecting equal or nested pairs: writing generated
/// sources inside the project would poison a later re-scan, and running
/// inside the output would read our own artifacts back as input.
pub fn validate_dirs(
    project_root: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), OrchestratorError> {
    let project = fs::canonicalize(project_root).map_err(|e| io_err(project_root, e))?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let out = fs::canonicalize(out_dir).map_err(|e| io_err(out_dir, e))?;
    if out == project || out.starts_with(&project) || project.starts_with(&out) {
        return Err(OrchestratorError::BadOutDir { out, project });
    }
    Ok((project, out))
}

struct Pipeline<'a> {
    config: &'a RunConfig,
    backend: &'a mut dyn Backend,
    layout: WorkspaceLayout,
    modules: Vec<MergedModule>,
    synthetic: CProject,
    index: ElementIndex,
    store: MetadataStore,
    rust_index: RustIndex,
    resizer: Resizer,
    plans: Vec<ModulePlan>,
    order: Vec<usize>,
    statuses: BTreeMap<String, UnitStatus>,
    written: BTreeMap<String, BTreeSet<usize>>,
    run_log: RunLog,
    transcript: TranscriptWriter,
    window: usize,
    reserved: usize,
    stall_count: usize,
    histogram: BTreeMap<ErrorCategory, usize>,
    aborted: Vec<String>,
    out_dir: PathBuf,
}

/// Run the whole translation pipeline against `backend`.
pub fn run_pipeline(
    config: &RunConfig,
    backend: &mut dyn Backend,
) -> Result<PipelineOutcome, OrchestratorError> {
    let (project_root, out_dir) = validate_dirs(&config.project_root, &config.out_dir)?;
    let _lock = OutLock::acquire(&out_dir)?;

    let project = c_model::load_project(&project_root)?;
    let mut pre = preprocess_project(&project, &[])?;
    crate::preprocess::apply_defines(&mut pre, &config.defines);
    write_preprocess_outputs(&out_dir, &pre)?;

    let mut run_log = RunLog::create(&out_dir.join("run.jsonl"))?;
    let transcript = TranscriptWriter::create(&out_dir.join("transcript"))?;
    transcript.record_profile(backend.profile())?;

    let profile = backend.profile().clone();
    let cap = initial_cap(config.cap, profile.context_window);
    let resizer = Resizer::new(cap, config.floor);

    // Synthetic project over the merged modules, with file paths equal to
    // module names so the metadata store, element index, and prompts agree
    // on module keys.
    let mut files = Vec::new();
    for m in &pre.modules {
        let mut f = m.file.clone();
        f.path = PathBuf::from(&m.name);
        files.push(f);
    }
    let synthetic = CProject {
        root: project_root.clone(),
        files,
    };
    let store = MetadataStore::seed(&synthetic);
    let index = ElementIndex::build(&synthetic);

    let module_names: Vec<String> = pre.modules.iter().map(|m| m.name.clone()).collect();
    let layout = scaffold_workspace(
        &out_dir,
        &package_name(&project_root),
        &module_names,
        &pre.features,
        config.force,
    )?;

    let plans = plan_modules(&pre.modules, cap);
    let order = module_order(&pre.modules);

    run_log.event(json!({
        "event": "run_start",
        "project": project_root.display().to_string(),
        "out": out_dir.display().to_string(),
        "profile": profile.name,
        "cap": cap,
        "modules": module_names,
    }));
    for w in &pre.warnings {
        run_log.event(json!({"event": "warning", "message": w}));
    }

    let mut pipeline = Pipeline {
        config,
        backend,
        layout,
        modules: pre.modules,
        synthetic,
        index,
        store,
        rust_index: RustIndex::new(),
        resizer,
        plans,
        order,
        statuses: BTreeMap::new(),
        written: BTreeMap::new(),
        run_log,
        transcript,
        window: profile.context_window,
        reserved: profile.output_limit,
        stall_count: 0,
        histogram: BTreeMap::new(),
        aborted: Vec::new(),
        out_dir: out_dir.clone(),
    };
    pipeline.run()
}

impl<'a> Pipeline<'a> {
    fn run(&mut self) -> Result<PipelineOutcome, OrchestratorError> {
        self.write_plan()?;
        for pos in 0..self.order.len() {
            self.run_module(pos)?;
        }
        let final_build = build_workspace(&self.layout.root, self.config.compile_timeout)?;
        self.run_log.event(json!({
            "event": "final_build",
            "success": final_build.success,
        }));
        let report = compute_coverage(
            &self.plans,
            &self.statuses,
            &self.store,
            &self.histogram,
            Some(final_build.success),
        );
        let text = serde_json::to_string_pretty(&report).unwrap_or_default();
        write_atomic(&self.out_dir.join("report.json"), &(text + "\n"))?;
        self.store.save(&self.out_dir.join("metadata.json"))?;
        self.write_plan()?;
        self.run_log.event(json!({
            "event": "run_end",
            "aborted_units": self.aborted.len(),
        }));
        Ok(PipelineOutcome {
            report,
            aborted_units: self.aborted.len(),
            out_dir: self.out_dir.clone(),
        })
    }

    fn run_module(&mut self, pos: usize) -> Result<(), OrchestratorError> {
        let mi = self.order[pos];
        let mut ui = 0usize;
        let mut module_aborted = false;
        while ui < self.plans[mi].units.len() {
            let unit = self.plans[mi].units[ui].clone();
            let uid = UnitId::new(&self.modules[mi].name.clone(), unit.index);
            if module_aborted {
                self.mark_abort(&uid, "an earlier unit of this module was aborted", true);
                ui += 1;
                continue;
            }
            match self.translate_unit(mi, &unit, &uid)? {
                UnitOutcome::Compiled => {
                    self.statuses.insert(uid.to_string(), UnitStatus::Compiled);
                    self.stall_count = 0;
                    self.write_plan()?;
                    ui += 1;
                }
                UnitOutcome::Aborted(reason) => {
                    self.mark_abort(&uid, &reason, false);
                    module_aborted = true;
                    self.note_unit_failure(pos)?;
                    ui += 1;
                }
                UnitOutcome::Resize => match self.resizer.try_shrink(ShrinkTrigger::Overflow) {
                    ShrinkOutcome::Shrunk(new_cap) => {
                        self.run_log.event(json!({
                            "event": "shrink",
                            "trigger": "overflow",
                            "cap": new_cap,
                            "unit": uid.to_string(),
                        }));
                        self.stall_count = 0;
                        self.replan_module_from(mi, ui, unit.start_line, unit.index);
                        self.replan_following(pos);
                        self.write_plan()?;
                    }
                    ShrinkOutcome::FloorReached => {
                        self.mark_abort(
                            &uid,
                            "the unit cannot fit the context window even at the floor cap",
                            false,
                        );
                        module_aborted = true;
                        self.note_unit_failure(pos)?;
                        ui += 1;
                    }
                },
            }
        }
        Ok(())
    }

    /// Bump the consecutive-failure counter and halve the cap once when it
    /// reaches the stall threshold.
    fn note_unit_failure(&mut self, pos: usize) -> Result<(), OrchestratorError> {
        self.stall_count += 1;
        if self.stall_count < STALL_THRESHOLD {
            return Ok(());
        }
        self.run_log.event(json!({
            "event": "stall",
            "consecutive_failures": self.stall_count,
        }));
        match self.resizer.try_shrink(ShrinkTrigger::Stall) {
            ShrinkOutcome::Shrunk(new_cap) => {
                self.run_log.event(json!({
                    "event": "shrink",
                    "trigger": "stall",
                    "cap": new_cap,
                }));
                self.replan_following(pos);
                self.write_plan()?;
            }
            ShrinkOutcome::FloorReached => {
                self.run_log.event(json!({
                    "event": "shrink_floor",
                    "trigger": "stall",
                }));
            }
        }
        self.stall_count = 0;
        Ok(())
    }

    fn mark_abort(&mut self, uid: &UnitId, reason: &str, propagated: bool) {
        self.statuses.insert(uid.to_string(), UnitStatus::Aborted);
        self.aborted.push(uid.to_string());
        self.run_log.event(json!({
            "event": "abort",
            "unit": uid.to_string(),
            "reason": reason,
            "propagated": propagated,
        }));
        let _ = self.write_plan();
    }

    /// Replan the untranslated tail of module `mi` at the current cap,
    /// keeping the units before position `ui` untouched.
    fn replan_module_from(&mut self, mi: usize, ui: usize, from_line: usize, first_index: usize) {
        let cap = self.resizer.cap();
        let name = self.modules[mi].name.clone();
        let tail = plan_module_from(&self.modules[mi].file, &name, cap, from_line, first_index);
        let mut units: Vec<UnitPlan> = self.plans[mi].units[..ui].to_vec();
        units.extend(tail.units);
        self.plans[mi].units = units;
        self.run_log.event(json!({
            "event": "replan",
            "module": name,
            "from_line": from_line,
        }));
    }

    /// Replan every module after processing position `pos` at the current cap.
    fn replan_following(&mut self, pos: usize) {
        let cap = self.resizer.cap();
        for &mj in &self.order[pos + 1..] {
            let name = self.modules[mj].name.clone();
            self.plans[mj] = crate::segment::plan_module(&self.modules[mj].file, &name, cap);
        }
    }

    fn write_plan(&mut self) -> Result<(), OrchestratorError> {
        let file = PlanFile {
            cap_lines: self.resizer.cap(),
            floor: self.resizer.floor(),
            history: self.resizer.history().to_vec(),
            modules: self.plans.clone(),
            statuses: self.statuses.clone(),
        };
        let text = serde_json::to_string_pretty(&file).unwrap_or_default();
        write_atomic(&self.out_dir.join("plan.json"), &(text + "\n"))
    }

    fn context_budget(&self) -> usize {
        TokenBudget::new(self.window, self.reserved).allowance() / CONTEXT_BUDGET_DIVISOR
    }

    fn unit_text(&self, mi: usize, unit: &UnitPlan) -> String {
        let text = self.modules[mi].text();
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if n >= unit.start_line && n <= unit.end_line {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    fn unit_elements(&self, mi: usize, unit: &UnitPlan) -> Vec<usize> {
        self.modules[mi]
            .file
            .elements
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                !e.is_declaration
                    && !e.name.starts_with("anon@")
                    && e.start_line >= unit.start_line
                    && e.end_line <= unit.end_line
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn send_answer(
        &mut self,
        env: &PromptEnvelope,
        memory: &mut ConversationMemory,
    ) -> Result<Answer, BackendError> {
        let transcript = &mut self.transcript;
        let run_log = &mut self.run_log;
        send_validated(
            &mut *self.backend,
            env,
            memory,
            self.config.max_format_retries,
            &mut |e, p| {
                let seq = transcript.record(e, p).ok();
                run_log.event(json!({
                    "event": "exchange",
                    "unit": e.unit.to_string(),
                    "schema": e.schema_id,
                    "transcript_seq": seq,
                    "est_tokens": e.est_tokens,
                    "digest": e.digest(),
                }));
            },
        )
    }

    fn send_one(
        &mut self,
        env: &PromptEnvelope,
        memory: &mut ConversationMemory,
    ) -> Result<Result<Answer, FormatError>, BackendError> {
        let transcript = &mut self.transcript;
        let run_log = &mut self.run_log;
        send_once(&mut *self.backend, env, memory, &mut |e, p| {
            let seq = transcript.record(e, p).ok();
            run_log.event(json!({
                "event": "exchange",
                "unit": e.unit.to_string(),
                "schema": e.schema_id,
                "transcript_seq": seq,
                "est_tokens": e.est_tokens,
                "digest": e.digest(),
            }));
        })
    }

    /// Snapshot every source file the repair loop could touch.
    fn snapshot_sources(&self) -> Result<BTreeMap<PathBuf, String>, OrchestratorError> {
        let mut snap = BTreeMap::new();
        let manifest = self.layout.manifest();
        snap.insert(
            manifest.clone(),
            fs::read_to_string(&manifest).map_err(|e| io_err(&manifest, e))?,
        );
        let build_rs = self.layout.root.join("build.rs");
        if build_rs.exists() {
            snap.insert(
                build_rs.clone(),
                fs::read_to_string(&build_rs).map_err(|e| io_err(&build_rs, e))?,
            );
        }
        let src = self.layout.root.join("src");
        let mut stack = vec![src];
        while let Some(dir) = stack.pop() {
            let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| io_err(&dir, e))?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|x| x == "rs") {
                    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                    snap.insert(path, text);
                }
            }
        }
        Ok(snap)
    }

    /// Restore the workspace sources to a snapshot, deleting files created
    /// after it was taken.
    fn restore_sources(
        &self,
        snapshot: &BTreeMap<PathBuf, String>,
    ) -> Result<(), OrchestratorError> {
        let current = self.snapshot_sources()?;
        for path in current.keys() {
            if !snapshot.contains_key(path) {
                fs::remove_file(path).map_err(|e| io_err(path, e))?;
            }
        }
        for (path, text) in snapshot {
            write_atomic(path, text)?;
        }
        Ok(())
    }

    fn write_unit_file(
        &mut self,
        module: &str,
        ordinal: usize,
        text: &str,
    ) -> Result<(), OrchestratorError> {
        write_atomic(&self.layout.unit_path(module, ordinal), text)?;
        let set = self.written.entry(module.to_string()).or_default();
        set.insert(ordinal);
        let mod_text = module_mod_text(set);
        write_atomic(&self.layout.module_mod(module), &mod_text)
    }

    fn remove_unit_file(&mut self, module: &str, ordinal: usize) {
        if let Some(set) = self.written.get_mut(module) {
            set.remove(&ordinal);
        }
    }

    fn check(&mut self, uid: &UnitId) -> Result<CompileOutcome, OrchestratorError> {
        let outcome = check_workspace(&self.layout.root, self.config.compile_timeout)?;
        for e in &outcome.errors {
            *self.histogram.entry(e.category).or_insert(0) += 1;
            if !e.mapped_code {
                self.run_log.event(json!({
                    "event": "unmapped_error_code",
                    "unit": uid.to_string(),
                    "code": e.code,
                }));
            }
        }
        self.run_log.event(json!({
            "event": "compile",
            "unit": uid.to_string(),
            "success": outcome.success,
            "errors": outcome.errors.len(),
            "categories": histogram_names(&categorize(&outcome.errors)),
        }));
        Ok(outcome)
    }

    fn translate_unit(
        &mut self,
        mi: usize,
        unit: &UnitPlan,
        uid: &UnitId,
    ) -> Result<UnitOutcome, OrchestratorError> {
        let module_name = self.modules[mi].name.clone();
        let text = self.unit_text(mi, unit);
        let element_ids = self.unit_elements(mi, unit);
        let names: Vec<String> = element_ids
            .iter()
            .map(|&i| self.modules[mi].file.elements[i].name.clone())
            .collect();
        let kinds: Vec<(String, String)> = element_ids
            .iter()
            .map(|&i| {
                let e = &self.modules[mi].file.elements[i];
                (e.kind.as_str().to_string(), e.name.clone())
            })
            .collect();
        let imports = imports_needed(&text, &names, &self.index);
        let rel = self.layout.unit_rel(&module_name, unit.index);
        let mut memory = ConversationMemory::fresh(uid.clone());
        let snapshot = self.snapshot_sources()?;

        // -- translate --
        let bundle = select_context(
            &imports,
            &self.synthetic,
            &self.index,
            &self.store,
            &self.rust_index,
            ContextMode::Translate,
            self.context_budget(),
        );
        let budget =
            TokenBudget::new(self.window, self.reserved).with_memory(memory.est_tokens_total);
        let env = match build_translation_prompt(
            &self.config.templates,
            uid,
            &text,
            &bundle.render(),
            &self.config.rules,
            &budget,
        ) {
            Ok(env) => env,
            Err(PromptError::BudgetExceeded { .. }) => return Ok(UnitOutcome::Resize),
        };
        let answer = match self.send_answer(&env, &mut memory) {
            Ok(a) => a,
            Err(BackendError::ContextOverflow { .. }) => return Ok(UnitOutcome::Resize),
            Err(BackendError::GiveUp {
                attempts,
                last_error,
                ..
            }) => {
                let _ = self.transcript.record_memory(&memory);
                return Ok(UnitOutcome::Aborted(format!(
                    "no usable translation after {attempts} attempts: {last_error}"
                )));
            }
            Err(fatal) => return Err(fatal.into()),
        };
        let Answer::Translate(t) = answer else {
            return Ok(UnitOutcome::Aborted(
                "the translation response had the wrong shape".to_string(),
            ));
        };
        let mut rust_text = t.rust;
        if !rust_text.ends_with('\n') {
            rust_text.push('\n');
        }
        self.write_unit_file(&module_name, unit.index, &rust_text)?;
        self.run_log.event(json!({
            "event": "translate",
            "unit": uid.to_string(),
            "file": rel,
            "lines": rust_text.lines().count(),
        }));

        // -- compile + repair --
        let mut outcome = self.check(uid)?;
        if !outcome.success {
            let fixed = self.repair_loop(uid, &rel, &imports, &mut memory, &mut outcome)?;
            if !fixed {
                self.restore_sources(&snapshot)?;
                self.remove_unit_file(&module_name, unit.index);
                let _ = self.transcript.record_memory(&memory);
                return Ok(UnitOutcome::Aborted(format!(
                    "still failing after {} repair attempts",
                    self.config.max_repair_attempts
                )));
            }
        }

        // -- map --
        let unit_path = self.layout.unit_path(&module_name, unit.index);
        let final_text = fs::read_to_string(&unit_path).map_err(|e| io_err(&unit_path, e))?;
        let rust_elements = parse_rust_elements(&rel, &final_text)?;
        self.rust_index.set_file(&rel, &rust_elements);
        let budget =
            TokenBudget::new(self.window, self.reserved).with_memory(memory.est_tokens_total);
        match build_mapping_prompt(
            &self.config.templates,
            uid,
            &text,
            &rel,
            &final_text,
            &kinds,
            &budget,
        ) {
            Ok(map_env) => match self.send_answer(&map_env, &mut memory) {
                Ok(Answer::Map(entries)) => {
                    let entries: Vec<crate::metadata::MapEntry> = entries
                        .into_iter()
                        .map(|e| crate::metadata::MapEntry {
                            c_name: e.c_name,
                            rust_name: e.rust_name,
                            rust_file: e.rust_file,
                            removed: e.removed,
                        })
                        .collect();
                    let outcome = apply_mapping(
                        &mut self.store,
                        &module_name,
                        unit.index,
                        &rel,
                        &names,
                        &entries,
                        &rust_elements,
                    );
                    self.run_log.event(json!({
                        "event": "map",
                        "unit": uid.to_string(),
                        "updated": outcome.updated,
                        "warnings": outcome.warnings,
                    }));
                }
                Ok(_) => {
                    self.run_log.event(json!({
                        "event": "map_skipped",
                        "unit": uid.to_string(),
                        "reason": "response had the wrong shape",
                    }));
                }
                Err(BackendError::GiveUp { last_error, .. }) => {
                    self.run_log.event(json!({
                        "event": "map_skipped",
                        "unit": uid.to_string(),
                        "reason": last_error,
                    }));
                }
                Err(BackendError::ContextOverflow { .. }) => {
                    self.run_log.event(json!({
                        "event": "map_skipped",
                        "unit": uid.to_string(),
                        "reason": "mapping prompt exceeded the context window",
                    }));
                }
                Err(fatal) => return Err(fatal.into()),
            },
            Err(PromptError::BudgetExceeded { .. }) => {
                self.run_log.event(json!({
                    "event": "map_skipped",
                    "unit": uid.to_string(),
                    "reason": "mapping prompt exceeded the token budget",
                }));
            }
        }
        self.store.save(&self.out_dir.join("metadata.json"))?;
        let _ = self.transcript.record_memory(&memory);
        Ok(UnitOutcome::Compiled)
    }

    /// Files named by the diagnostics, normalized, existing, deduplicated.
    fn diagnostic_files(&self, errors: &[Diagnostic]) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in errors {
            let Some(f) = &e.file else { continue };
            let rel = normalize_rel(f);
            if !self.layout.root.join(&rel).exists() {
                continue;
            }
            if seen.insert(rel.clone()) {
                out.push(rel);
            }
        }
        out
    }

    /// Ask which candidate files to show for repair; fall back to the
    /// diagnostic files when the answer is unusable.
    fn choose_files(
        &mut self,
        uid: &UnitId,
        memory: &mut ConversationMemory,
        raw_log: &str,
        candidates: &[String],
        diag_files: &[String],
        unit_rel: &str,
    ) -> Result<Vec<String>, OrchestratorError> {
        let fallback = || {
            if diag_files.is_empty() {
                vec![unit_rel.to_string()]
            } else {
                diag_files.to_vec()
            }
        };
        if candidates.len() <= 1 {
            return Ok(candidates.to_vec());
        }
        let budget =
            TokenBudget::new(self.window, self.reserved).with_memory(memory.est_tokens_total);
        let env = match build_file_selection_prompt(
            &self.config.templates,
            uid,
            raw_log,
            candidates,
            &budget,
        ) {
            Ok(env) => env,
            Err(PromptError::BudgetExceeded { .. }) => return Ok(fallback()),
        };
        let chosen = match self.send_one(&env, memory) {
            Ok(Ok(Answer::Files(f))) => {
                let allowed: HashSet<&String> = candidates.iter().collect();
                let mut seen = HashSet::new();
                let mut chosen = Vec::new();
                let mut dropped = Vec::new();
                for file in &f.files {
                    let rel = normalize_rel(file);
                    if allowed.contains(&rel) {
                        if seen.insert(rel.clone()) {
                            chosen.push(rel);
                        }
                    } else {
                        dropped.push(rel);
                    }
                }
                if !dropped.is_empty() {
                    self.run_log.event(json!({
                        "event": "file_selection_dropped",
                        "unit": uid.to_string(),
                        "files": dropped,
                    }));
                }
                chosen
            }
            Ok(Ok(_)) | Ok(Err(_)) => Vec::new(),
            Err(BackendError::ContextOverflow { .. }) => Vec::new(),
            Err(fatal) => return Err(fatal.into()),
        };
        let chosen = if chosen.is_empty() { fallback() } else { chosen };
        self.run_log.event(json!({
            "event": "file_selection",
            "unit": uid.to_string(),
            "candidates": candidates,
            "chosen": chosen,
        }));
        Ok(chosen)
    }

    /// Drive repair attempts until the workspace checks again or the
    /// attempt budget runs out. Returns whether the unit was fixed.
    fn repair_loop(
        &mut self,
        uid: &UnitId,
        unit_rel: &str,
        imports: &[String],
        memory: &mut ConversationMemory,
        outcome: &mut CompileOutcome,
    ) -> Result<bool, OrchestratorError> {
        for attempt in 1..=self.config.max_repair_attempts {
            let before = categorize(&outcome.errors);
            let diag_files = self.diagnostic_files(&outcome.errors);
            let mut candidates = diag_files.clone();
            for extra in ["Cargo.toml", unit_rel] {
                if !candidates.iter().any(|c| c == extra) {
                    candidates.push(extra.to_string());
                }
            }
            let chosen = self.choose_files(
                uid,
                memory,
                &outcome.raw_log,
                &candidates,
                &diag_files,
                unit_rel,
            )?;

            // Current text of everything a patch may touch: the chosen
            // files plus the manifest, which repairs may always edit.
            let mut files = BTreeMap::new();
            for rel in chosen.iter().map(String::as_str).chain(["Cargo.toml"]) {
                let path = self.layout.root.join(rel);
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                files.insert(rel.to_string(), text);
            }

            let rust_context = select_context(
                imports,
                &self.synthetic,
                &self.index,
                &self.store,
                &self.rust_index,
                ContextMode::Repair,
                self.context_budget(),
            )
            .render();
            let shown = chosen.join(", ");
            let sections: String = chosen
                .iter()
                .map(|rel| {
                    let text = &files[rel];
                    format!("=== {rel} ({} lines) ===\n{text}\n", text.lines().count())
                })
                .collect();
            let budget =
                TokenBudget::new(self.window, self.reserved).with_memory(memory.est_tokens_total);
            let env = match build_repair_prompt(
                &self.config.templates,
                uid,
                &outcome.raw_log,
                &shown,
                &sections,
                &rust_context,
                &budget,
            ) {
                Ok(env) => env,
                Err(PromptError::BudgetExceeded { .. }) => {
                    self.run_log.event(json!({
                        "event": "repair_overflow",
                        "unit": uid.to_string(),
                        "attempt": attempt,
                    }));
                    return Ok(false);
                }
            };

            // Send; format problems and bad patch sets both go back to the
            // model as corrections, up to the format-retry budget.
            let mut current = env.clone();
            let mut applied: Option<Vec<String>> = None;
            for _ in 0..self.config.max_format_retries.max(1) {
                let parsed = match self.send_one(&current, memory) {
                    Ok(r) => r,
                    Err(BackendError::ContextOverflow { .. }) => {
                        self.run_log.event(json!({
                            "event": "repair_overflow",
                            "unit": uid.to_string(),
                            "attempt": attempt,
                        }));
                        return Ok(false);
                    }
                    Err(fatal) => return Err(fatal.into()),
                };
                let format_problem = match parsed {
                    Ok(Answer::Repair(r)) => {
                        match apply_patch_set(&files, &r.repairs, &self.config.allowed_deps) {
                            Ok(changed) => {
                                let mut touched: Vec<String> = changed.keys().cloned().collect();
                                touched.sort();
                                for (rel, text) in &changed {
                                    write_atomic(&self.layout.root.join(rel), text)?;
                                }
                                self.run_log.event(json!({
                                    "event": "patched",
                                    "unit": uid.to_string(),
                                    "attempt": attempt,
                                    "files": touched,
                                }));
                                applied = Some(touched);
                                None
                            }
                            Err(fmt) => Some(fmt),
                        }
                    }
                    Ok(_) => Some(FormatError::new(
                        "the repair response had the wrong shape",
                    )),
                    Err(fmt) => Some(fmt),
                };
                match format_problem {
                    None => break,
                    Some(fmt) => current = with_correction(&env, &fmt),
                }
            }
            let Some(_) = applied else {
                self.run_log.event(json!({
                    "event": "repair_giveup",
                    "unit": uid.to_string(),
                    "attempt": attempt,
                }));
                return Ok(false);
            };

            *outcome = self.check(uid)?;
            let after = categorize(&outcome.errors);
            self.run_log.event(json!({
                "event": "repair",
                "unit": uid.to_string(),
                "attempt": attempt,
                "before": histogram_names(&before),
                "after": histogram_names(&after),
                "success": outcome.success,
            }));
            if outcome.success {
                return Ok(true);
            }
        }
        Ok(false)
    }
}
