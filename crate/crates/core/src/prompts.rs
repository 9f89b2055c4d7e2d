//! Prompt construction: token estimation, the three prompt families
//! (translate, repair, map) plus repair-file selection, template handling,
//! and multi-part response assembly/validation.
//!
//! Templates are plain text files with `{{slot}}` placeholders. The
//! bundled set is compiled in; a directory of overrides can replace any of
//! them at runtime so prompt wording is tunable without a rebuild.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::segment::UnitId;

/// Estimated token count for `text`: a quarter of the byte length, but
/// never less than five tokens per line. Deliberately high — an estimate
/// that errs upward causes an early shrink, never a blown window.
pub fn estimate_tokens(text: &str) -> usize {
    if text.is_empty() {
        return 0;
    }
    let bytes = text.len();
    let lines = text.lines().count();
    (bytes.div_ceil(4)).max(5 * lines)
}

/// Window accounting for one request: the full context window, the output
/// room that must stay free, and tokens already spent on retained
/// conversation memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    pub context_window: usize,
    pub reserved_output: usize,
    pub memory_tokens: usize,
}

impl TokenBudget {
    pub fn new(context_window: usize, reserved_output: usize) -> Self {
        TokenBudget {
            context_window,
            reserved_output,
            memory_tokens: 0,
        }
    }

    pub fn with_memory(mut self, memory_tokens: usize) -> Self {
        self.memory_tokens = memory_tokens;
        self
    }

    /// Tokens a new prompt may use.
    pub fn allowance(&self) -> usize {
        self.context_window
            .saturating_sub(self.reserved_output)
            .saturating_sub(self.memory_tokens)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unit {unit}: prompt needs ~{est} tokens but only {budget} fit in the window")]
    BudgetExceeded {
        unit: String,
        est: usize,
        budget: usize,
    },
}

/// Which prompt family an envelope belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Translate,
    Repair,
    Map,
}

/// A fully rendered prompt ready for a backend, with enough structure
/// kept around for transcripts and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub kind: PromptKind,
    pub unit: UnitId,
    /// The rules in force, in rendering order.
    pub system_rules: Vec<String>,
    /// Labeled sections in rendering order (inspection/testing aid; the
    /// authoritative text is `text`).
    pub sections: Vec<(String, String)>,
    /// Registered id of the schema the response must satisfy.
    pub schema_id: String,
    /// The exact prompt text sent to the backend.
    pub text: String,
    pub est_tokens: usize,
}

impl PromptEnvelope {
    /// Content digest of the rendered text; the replay key.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.text.as_bytes());
        let out = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in out {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Response schema ids.
pub const TRANSLATE_SCHEMA: &str = "translate.v1";
pub const REPAIR_SCHEMA: &str = "repair.v1";
pub const MAP_SCHEMA: &str = "map.v1";
pub const FILES_SCHEMA: &str = "files.v1";

/// The descriptive JSON schema documents shipped with the tool, keyed by
/// id. Validation itself is the typed parsing in [`validate_response`];
/// these documents are for operators and transcripts.
pub fn schema_document(id: &str) -> Option<&'static str> {
    match id {
        TRANSLATE_SCHEMA => Some(include_str!("../schemas/translate.v1.json")),
        REPAIR_SCHEMA => Some(include_str!("../schemas/repair.v1.json")),
        MAP_SCHEMA => Some(include_str!("../schemas/map.v1.json")),
        FILES_SCHEMA => Some(include_str!("../schemas/files.v1.json")),
        _ => None,
    }
}

/// The prompt templates in force. Each is plain text with `{{slot}}`
/// placeholders.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub translate: String,
    pub repair: String,
    pub map: String,
    pub files: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            translate: include_str!("../templates/translate.tmpl").to_string(),
            repair: include_str!("../templates/repair.tmpl").to_string(),
            map: include_str!("../templates/map.tmpl").to_string(),
            files: include_str!("../templates/files.tmpl").to_string(),
        }
    }
}

impl TemplateSet {
    /// Load overrides from `dir`; any of `translate.tmpl`, `repair.tmpl`,
    /// `map.tmpl`, `files.tmpl` present there replaces the bundled text.
    pub fn load(dir: &Path) -> io::Result<Self> {
        let mut set = TemplateSet::default();
        for (name, slot) in [
            ("translate.tmpl", &mut set.translate),
            ("repair.tmpl", &mut set.repair),
            ("map.tmpl", &mut set.map),
            ("files.tmpl", &mut set.files),
        ] {
            let path = dir.join(name);
            if path.is_file() {
                *slot = fs::read_to_string(&path)?;
            }
        }
        Ok(set)
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// The always-on translation rules.
#[derive(Debug, Clone)]
pub struct RulesProfile {
    pub rules: Vec<String>,
}

impl Default for RulesProfile {
    fn default() -> Self {
        RulesProfile {
            rules: vec![
                "Declare all elements as public.".to_string(),
                "Use wildcards to import all modules (for example `use crate::module::*;`)."
                    .to_string(),
                "Avoid using unsafe whenever possible.".to_string(),
            ],
        }
    }
}

impl RulesProfile {
    /// One rule per non-empty, non-`#` line.
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let rules: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Ok(RulesProfile { rules })
    }

    fn numbered(&self) -> String {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {r}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn check_budget(unit: &UnitId, text: &str, budget: &TokenBudget) -> Result<usize, PromptError> {
    let est = estimate_tokens(text);
    if est > budget.allowance() {
        return Err(PromptError::BudgetExceeded {
            unit: unit.to_string(),
            est,
            budget: budget.allowance(),
        });
    }
    Ok(est)
}

/// Build the prompt that translates one unit.
pub fn build_translation_prompt(
    templates: &TemplateSet,
    unit: &UnitId,
    c_code: &str,
    context: &str,
    rules: &RulesProfile,
    budget: &TokenBudget,
) -> Result<PromptEnvelope, PromptError> {
    let text = fill(
        &templates.translate,
        &[
            ("rules", &rules.numbered()),
            ("context", context),
            ("code", c_code),
        ],
    );
    let est = check_budget(unit, &text, budget)?;
    Ok(PromptEnvelope {
        kind: PromptKind::Translate,
        unit: unit.clone(),
        system_rules: rules.rules.clone(),
        sections: vec![
            ("context".to_string(), context.to_string()),
            ("code".to_string(), c_code.to_string()),
        ],
        schema_id: TRANSLATE_SCHEMA.to_string(),
        text,
        est_tokens: est,
    })
}

/// Trim `log` to its last `keep` lines, prefixing a marker when anything
/// was cut.
fn tail_lines(log: &str, keep: usize) -> String {
    let total = log.lines().count();
    if keep >= total {
        return log.to_string();
    }
    let tail = log
        .lines()
        .skip(total - keep)
        .collect::<Vec<_>>()
        .join("\n");
    format!("[log truncated: showing the last {keep} of {total} lines]\n{tail}")
}

/// Build the prompt that repairs a failed compile. The raw log goes in
/// verbatim when it fits; otherwise the longest tail that fits, marked as
/// truncated.
pub fn build_repair_prompt(
    templates: &TemplateSet,
    unit: &UnitId,
    raw_log: &str,
    file_path: &str,
    file_text: &str,
    rust_context: &str,
    budget: &TokenBudget,
) -> Result<PromptEnvelope, PromptError> {
    let render = |log: &str| {
        fill(
            &templates.repair,
            &[
                ("log", log),
                ("file_path", file_path),
                ("file_text", file_text),
                ("context", rust_context),
            ],
        )
    };

    let full = render(raw_log);
    let (text, log_used) = if estimate_tokens(&full) <= budget.allowance() {
        (full, raw_log.to_string())
    } else {
        // Largest tail of the log that still fits.
        let total = raw_log.lines().count();
        let mut lo = 0usize;
        let mut hi = total.saturating_sub(1);
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if estimate_tokens(&render(&tail_lines(raw_log, mid))) <= budget.allowance() {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let log = tail_lines(raw_log, lo);
        let text = render(&log);
        (text, log)
    };
    let est = check_budget(unit, &text, budget)?;
    Ok(PromptEnvelope {
        kind: PromptKind::Repair,
        unit: unit.clone(),
        system_rules: Vec::new(),
        sections: vec![
            ("log".to_string(), log_used),
            ("file_path".to_string(), file_path.to_string()),
            ("file_text".to_string(), file_text.to_string()),
            ("context".to_string(), rust_context.to_string()),
        ],
        schema_id: REPAIR_SCHEMA.to_string(),
        text,
        est_tokens: est,
    })
}

/// Build the prompt that asks which files a repair should touch.
pub fn build_file_selection_prompt(
    templates: &TemplateSet,
    unit: &UnitId,
    raw_log: &str,
    candidates: &[String],
    budget: &TokenBudget,
) -> Result<PromptEnvelope, PromptError> {
    let listing = candidates
        .iter()
        .map(|c| format!("- {c}"))
        .collect::<Vec<_>>()
        .join("\n");
    let render = |log: &str| fill(&templates.files, &[("log", log), ("candidates", &listing)]);
    let full = render(raw_log);
    let text = if estimate_tokens(&full) <= budget.allowance() {
        full
    } else {
        let total = raw_log.lines().count();
        let mut lo = 0usize;
        let mut hi = total.saturating_sub(1);
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if estimate_tokens(&render(&tail_lines(raw_log, mid))) <= budget.allowance() {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        render(&tail_lines(raw_log, lo))
    };
    let est = check_budget(unit, &text, budget)?;
    Ok(PromptEnvelope {
        kind: PromptKind::Repair,
        unit: unit.clone(),
        system_rules: Vec::new(),
        sections: vec![("candidates".to_string(), listing)],
        schema_id: FILES_SCHEMA.to_string(),
        text,
        est_tokens: est,
    })
}

/// Build the prompt that maps a unit's C elements to the Rust items of
/// its just-compiled translation. `elements` are `(kind, name)` pairs in
/// unit order.
pub fn build_mapping_prompt(
    templates: &TemplateSet,
    unit: &UnitId,
    c_code: &str,
    rust_file: &str,
    rust_code: &str,
    elements: &[(String, String)],
    budget: &TokenBudget,
) -> Result<PromptEnvelope, PromptError> {
    let listing = if elements.is_empty() {
        "(none)".to_string()
    } else {
        elements
            .iter()
            .map(|(kind, name)| format!("- {name} ({kind})"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let text = fill(
        &templates.map,
        &[
            ("elements", &listing),
            ("c_code", c_code),
            ("rust_file", rust_file),
            ("rust_code", rust_code),
        ],
    );
    let est = check_budget(unit, &text, budget)?;
    Ok(PromptEnvelope {
        kind: PromptKind::Map,
        unit: unit.clone(),
        system_rules: Vec::new(),
        sections: vec![
            ("elements".to_string(), listing),
            ("c_code".to_string(), c_code.to_string()),
            ("rust_code".to_string(), rust_code.to_string()),
        ],
        schema_id: MAP_SCHEMA.to_string(),
        text,
        est_tokens: est,
    })
}

/// One piece of a (possibly chunked) backend response.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LlmResponsePart {
    pub part_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_parts: Option<usize>,
    pub payload_fragment: String,
}

impl LlmResponsePart {
    pub fn single(payload: &str) -> Vec<LlmResponsePart> {
        vec![LlmResponsePart {
            part_index: 1,
            total_parts: Some(1),
            payload_fragment: payload.to_string(),
        }]
    }
}

/// A response that failed to decode or validate; fed back to the model as
/// a correction, never treated as a compile error.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub struct FormatError {
    pub reason: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "response format error: {}", self.reason)
    }
}

impl FormatError {
    pub fn new(reason: impl Into<String>) -> Self {
        FormatError {
            reason: reason.into(),
        }
    }
}

/// Strip a Markdown code fence if the whole payload is wrapped in one.
fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    let rest = rest.strip_prefix('\n').unwrap_or(rest);
    rest.strip_suffix("```").map(str::trim_end).unwrap_or(t)
}

/// Concatenate response parts (in `part_index` order) and parse the
/// result as one JSON document.
pub fn assemble_multipart(parts: &[LlmResponsePart]) -> Result<serde_json::Value, FormatError> {
    if parts.is_empty() {
        return Err(FormatError::new("empty response"));
    }
    let mut ordered: Vec<&LlmResponsePart> = parts.iter().collect();
    ordered.sort_by_key(|p| p.part_index);
    let mut payload = String::new();
    for part in ordered {
        payload.push_str(&part.payload_fragment);
    }
    serde_json::from_str(strip_fence(&payload))
        .map_err(|e| FormatError::new(format!("invalid JSON: {e}")))
}

/// Validated response payloads, one variant per schema.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Translate(TranslateAnswer),
    Repair(RepairAnswer),
    Map(Vec<MapAnswerEntry>),
    Files(FilesAnswer),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct TranslateAnswer {
    pub rust: String,
}

/// One line-range replacement requested by a repair response.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatchSpec {
    pub file: String,
    pub start_line: usize,
    pub end_line: usize,
    pub replacement: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct RepairAnswer {
    pub repairs: Vec<PatchSpec>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct MapAnswerEntry {
    pub c_name: String,
    #[serde(default)]
    pub rust_name: Option<String>,
    #[serde(default)]
    pub rust_file: Option<String>,
    #[serde(default)]
    pub removed: bool,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
pub struct FilesAnswer {
    pub files: Vec<String>,
}

/// Check an assembled document against the envelope's schema and lift it
/// into the typed [`Answer`].
pub fn validate_response(schema_id: &str, value: serde_json::Value) -> Result<Answer, FormatError> {
    let wrong = |e: serde_json::Error| {
        FormatError::new(format!("response does not match schema {schema_id}: {e}"))
    };
    match schema_id {
        TRANSLATE_SCHEMA => Ok(Answer::Translate(
            serde_json::from_value(value).map_err(wrong)?,
        )),
        REPAIR_SCHEMA => Ok(Answer::Repair(serde_json::from_value(value).map_err(wrong)?)),
        MAP_SCHEMA => Ok(Answer::Map(serde_json::from_value(value).map_err(wrong)?)),
        FILES_SCHEMA => Ok(Answer::Files(serde_json::from_value(value).map_err(wrong)?)),
        other => Err(FormatError::new(format!("unknown response schema {other}"))),
    }
}
