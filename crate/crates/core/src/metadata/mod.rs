//! Translation metadata: the persistent C-element → Rust-element mapping
//! store, plus the helpers that mine it for prompt context.
//!
//! The store lives as `metadata.json` in the output directory and survives
//! across runs so repairs and later units can see what earlier units
//! produced. Records are keyed by `(module, c_name)`; re-mapping a pair
//! replaces the old record, and a mapping that names no Rust element
//! tombstones it.

mod rust_scan;

pub use rust_scan::{parse_rust_elements, RustElement, RustItemKind};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::c_model::{CProject, ElementKind};
use crate::text;
use crate::MaskedSource;

/// Schema revision this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MetadataError {
    #[error("{file}: could not determine item structure near line {line}")]
    ScanFailure { file: String, line: usize },
    #[error("metadata file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("metadata file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("metadata file {path} has schema version {found}, this build supports {supported}")]
    UnsupportedSchema {
        path: String,
        found: u32,
        supported: u32,
    },
}

/// How a C→Rust name pairing was established.
pub mod confidence {
    /// The Rust name is literally (or after case-convention normalization)
    /// the C name.
    pub const EXACT_NAME: &str = "exact-name";
    /// The model asserted the pairing and the names differ.
    pub const LLM: &str = "llm";
}

/// One C element's translation status.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ElementRecord {
    /// Name of the C element (as scanned from the merged module).
    pub c_name: String,
    /// Module the element belongs to.
    pub module: String,
    /// Kind of the C element.
    pub kind: ElementKind,
    /// Translation unit (1-based, within the module) that produced the
    /// mapping, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<usize>,
    /// Name of the Rust item it became, if translated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rust_name: Option<String>,
    /// File (relative to the generated workspace) holding the Rust item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rust_file: Option<String>,
    /// True when the translation deliberately dropped the element
    /// (e.g. a macro folded into a constant elsewhere).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub removed: bool,
    /// How the pairing was established; see [`confidence`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<String>,
    /// Fields written by other tool versions, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ElementRecord {
    pub fn new(module: &str, c_name: &str, kind: ElementKind) -> Self {
        ElementRecord {
            c_name: c_name.to_string(),
            module: module.to_string(),
            kind,
            unit: None,
            rust_name: None,
            rust_file: None,
            removed: false,
            confidence: None,
            extra: BTreeMap::new(),
        }
    }

    /// True once the record carries a usable Rust-side target.
    pub fn is_mapped(&self) -> bool {
        !self.removed && self.rust_name.is_some()
    }
}

/// On-disk mapping store.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetadataStore {
    pub schema: u32,
    pub elements: Vec<ElementRecord>,
    /// Top-level fields from other tool versions, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl MetadataStore {
    pub fn new() -> Self {
        MetadataStore {
            schema: SCHEMA_VERSION,
            elements: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Seed a store with one unmapped record per element of every module.
    pub fn seed(project: &CProject) -> Self {
        let mut store = MetadataStore::new();
        for file in &project.files {
            let module = file.display_path();
            for elem in &file.elements {
                if elem.is_declaration {
                    continue;
                }
                store
                    .elements
                    .push(ElementRecord::new(&module, &elem.name, elem.kind));
            }
        }
        store
    }

    pub fn load(path: &Path) -> Result<Self, MetadataError> {
        let text = fs::read_to_string(path).map_err(|source| MetadataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let store: MetadataStore =
            serde_json::from_str(&text).map_err(|source| MetadataError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        if store.schema != SCHEMA_VERSION {
            return Err(MetadataError::UnsupportedSchema {
                path: path.display().to_string(),
                found: store.schema,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetadataError> {
        let mut text = serde_json::to_string_pretty(self).expect("store serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| MetadataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Index of the record for `(module, c_name)`, if present.
    pub fn find(&self, module: &str, c_name: &str) -> Option<usize> {
        self.elements
            .iter()
            .position(|r| r.module == module && r.c_name == c_name)
    }

    /// Records belonging to one module, in store order.
    pub fn module_records<'a>(
        &'a self,
        module: &'a str,
    ) -> impl Iterator<Item = &'a ElementRecord> + 'a {
        self.elements.iter().filter(move |r| r.module == module)
    }

    /// Mapped (translated, not removed) records across all modules.
    pub fn mapped(&self) -> impl Iterator<Item = &ElementRecord> {
        self.elements.iter().filter(|r| r.is_mapped())
    }
}

/// One pairing reported by the model for a just-translated unit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct MapEntry {
    /// C element the entry is about.
    pub c_name: String,
    /// Rust item it became; `None` means the element was removed.
    #[serde(default)]
    pub rust_name: Option<String>,
    /// File the model says holds the item; defaults to the unit's file.
    #[serde(default)]
    pub rust_file: Option<String>,
    /// Explicit removal marker; `rust_name: null` implies it too.
    #[serde(default)]
    pub removed: bool,
}

/// Outcome of folding one unit's reported mapping into the store.
#[derive(Debug, Default)]
pub struct MappingOutcome {
    /// Records updated (index into `store.elements`).
    pub updated: Vec<usize>,
    /// Diagnostics for entries that could not be applied.
    pub warnings: Vec<String>,
}

/// Fold the model-reported mapping for one unit into the store.
///
/// `unit_c_names` are the C elements the unit actually contains (the only
/// ones the model may legitimately report on), `rust_elements` the items
/// parsed out of the unit's generated file.
///
/// Rules:
/// * an entry naming a C element outside `unit_c_names` is skipped with a
///   warning;
/// * an entry whose `rust_name` matches no parsed Rust item is skipped
///   with a warning (the model asserted an item that is not there);
/// * `rust_name == c_name` records `exact-name` confidence, a differing
///   name records `llm`;
/// * `rust_name: None` tombstones the element as removed;
/// * unit elements the model did not mention are auto-paired when a parsed
///   Rust item matches their name literally or after snake_case
///   normalization (recorded as `exact-name`);
/// * the newest report wins: earlier data for the same `(module, c_name)`
///   is overwritten.
pub fn apply_mapping(
    store: &mut MetadataStore,
    module: &str,
    unit: usize,
    rust_file: &str,
    unit_c_names: &[String],
    entries: &[MapEntry],
    rust_elements: &[RustElement],
) -> MappingOutcome {
    let mut outcome = MappingOutcome::default();
    let mut reported: Vec<&str> = Vec::new();

    for entry in entries {
        if !unit_c_names.iter().any(|n| n == &entry.c_name) {
            outcome.warnings.push(format!(
                "mapping for unknown C element `{}` (not in {module} unit {unit}); skipped",
                entry.c_name
            ));
            continue;
        }
        reported.push(&entry.c_name);
        let idx = match store.find(module, &entry.c_name) {
            Some(i) => i,
            None => {
                store.elements.push(ElementRecord::new(
                    module,
                    &entry.c_name,
                    ElementKind::Other,
                ));
                store.elements.len() - 1
            }
        };
        let record = &mut store.elements[idx];
        record.unit = Some(unit);
        match &entry.rust_name {
            _ if entry.removed => {
                record.removed = true;
                record.rust_name = None;
                record.rust_file = None;
                record.confidence = None;
            }
            None => {
                record.removed = true;
                record.rust_name = None;
                record.rust_file = None;
                record.confidence = None;
            }
            Some(rust_name) => {
                if !rust_elements.iter().any(|e| &e.name == rust_name) {
                    outcome.warnings.push(format!(
                        "mapping `{}` -> `{}` names no item in {rust_file}; skipped",
                        entry.c_name, rust_name
                    ));
                    continue;
                }
                record.removed = false;
                record.rust_name = Some(rust_name.clone());
                record.rust_file =
                    Some(entry.rust_file.clone().unwrap_or_else(|| rust_file.to_string()));
                record.confidence = Some(if rust_name == &entry.c_name {
                    confidence::EXACT_NAME.to_string()
                } else {
                    confidence::LLM.to_string()
                });
            }
        }
        outcome.updated.push(idx);
    }

    // Auto-pair unit elements the report left out when an item with the
    // same (possibly case-normalized) name exists.
    for c_name in unit_c_names {
        if reported.iter().any(|n| n == c_name) {
            continue;
        }
        let normalized = snake_case(c_name);
        let hit = rust_elements
            .iter()
            .find(|e| &e.name == c_name)
            .or_else(|| rust_elements.iter().find(|e| e.name == normalized));
        let Some(hit) = hit else { continue };
        let idx = match store.find(module, c_name) {
            Some(i) => i,
            None => {
                store
                    .elements
                    .push(ElementRecord::new(module, c_name, ElementKind::Other));
                store.elements.len() - 1
            }
        };
        let record = &mut store.elements[idx];
        record.unit = Some(unit);
        record.removed = false;
        record.rust_name = Some(hit.name.clone());
        record.rust_file = Some(rust_file.to_string());
        record.confidence = Some(confidence::EXACT_NAME.to_string());
        outcome.updated.push(idx);
    }

    outcome
}

/// Lower an identifier to the snake_case spelling rustc would suggest:
/// an underscore at each lower→upper boundary, then everything lowercased.
pub fn snake_case(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut prev_lower = false;
    for ch in name.chars() {
        if ch.is_ascii_uppercase() {
            if prev_lower {
                out.push('_');
            }
            out.push(ch.to_ascii_lowercase());
            prev_lower = false;
        } else {
            prev_lower = ch.is_ascii_lowercase() || ch.is_ascii_digit();
            out.push(ch);
        }
    }
    out
}

/// Where every named C element of the project lives, for cross-module
/// lookup while building prompts.
#[derive(Debug, Default)]
pub struct ElementIndex {
    /// name → list of (module, file index, element index).
    by_name: BTreeMap<String, Vec<(String, usize, usize)>>,
}

impl ElementIndex {
    pub fn build(project: &CProject) -> Self {
        let mut by_name: BTreeMap<String, Vec<(String, usize, usize)>> = BTreeMap::new();
        for (fi, file) in project.files.iter().enumerate() {
            let module = file.display_path();
            for (ei, elem) in file.elements.iter().enumerate() {
                if elem.name.starts_with("anon@") {
                    continue;
                }
                by_name
                    .entry(elem.name.clone())
                    .or_default()
                    .push((module.clone(), fi, ei));
            }
        }
        ElementIndex { by_name }
    }

    pub fn lookup(&self, name: &str) -> &[(String, usize, usize)] {
        self.by_name.get(name).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

/// Project element names a unit's text mentions but does not itself
/// define, in first-occurrence order. These are the elements whose
/// definitions or signatures belong in the unit's prompt context.
pub fn imports_needed(unit_text: &str, unit_c_names: &[String], index: &ElementIndex) -> Vec<String> {
    let masked = MaskedSource::c(unit_text);
    let mut seen: Vec<String> = Vec::new();
    for (_, ident) in text::identifiers(&masked.masked) {
        if unit_c_names.iter().any(|n| n == ident) {
            continue;
        }
        if !index.contains(ident) {
            continue;
        }
        if seen.iter().any(|s| s == ident) {
            continue;
        }
        seen.push(ident.to_string());
    }
    seen
}

/// Context text for one referenced element: functions contribute their
/// signature (definition text cut at the body, `;`-terminated), everything
/// else its full definition text.
pub fn element_context(project: &CProject, file_idx: usize, elem_idx: usize) -> String {
    let file = &project.files[file_idx];
    let elem = &file.elements[elem_idx];
    let text = file.element_text(elem);
    if elem.kind == ElementKind::Function && !elem.is_declaration {
        let masked = MaskedSource::c(text);
        if let Some(brace) = masked.masked.find('{') {
            let mut sig = text[..brace].trim_end().to_string();
            sig.push(';');
            return sig;
        }
    }
    text.trim_end().to_string()
}

/// Items parsed out of every generated Rust file so far, addressable by
/// `(file, name)`.
#[derive(Debug, Default)]
pub struct RustIndex {
    items: BTreeMap<(String, String), RustElement>,
}

impl RustIndex {
    pub fn new() -> Self {
        RustIndex::default()
    }

    /// Record (or re-record, replacing) the items of one generated file.
    pub fn set_file(&mut self, file: &str, elements: &[RustElement]) {
        self.items.retain(|(f, _), _| f != file);
        for elem in elements {
            self.items
                .insert((file.to_string(), elem.name.clone()), elem.clone());
        }
    }

    pub fn get(&self, file: &str, name: &str) -> Option<&RustElement> {
        self.items.get(&(file.to_string(), name.to_string()))
    }
}

/// What side of the pipeline a context bundle feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// Translation prompts mix Rust signatures (for already-translated
    /// elements) with C definitions (for not-yet-translated ones).
    Translate,
    /// Repair prompts stay inside Rust: only already-translated elements
    /// appear, C text never does.
    Repair,
}

/// One referenced definition carried into a prompt.
#[derive(Debug, Clone)]
pub struct ContextItem {
    pub name: String,
    /// Signature or full definition text.
    pub text: String,
    /// Provenance note rendered alongside (`defined in src/...`).
    pub note: String,
    /// Truncation priority: lower ranks are kept longest.
    pub rank: u8,
}

/// Ordered context selection plus a record of what the token budget
/// forced out.
#[derive(Debug, Clone, Default)]
pub struct ContextBundle {
    pub items: Vec<ContextItem>,
    pub dropped: Vec<String>,
}

impl ContextBundle {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Render the bundle as a prompt section; empty bundles render to an
    /// empty string so the template collapses cleanly.
    pub fn render(&self) -> String {
        if self.items.is_empty() {
            return String::new();
        }
        let mut out =
            String::from("Definitions you may reference (do not re-translate them):\n");
        for item in &self.items {
            out.push_str("// ");
            out.push_str(&item.note);
            out.push('\n');
            out.push_str(item.text.trim_end());
            out.push_str("\n\n");
        }
        out
    }
}

fn context_rank(kind: ElementKind) -> u8 {
    match kind {
        ElementKind::Function | ElementKind::MacroFunction => 0,
        ElementKind::TypeDef => 1,
        _ => 2,
    }
}

/// Assemble the context bundle for one unit.
///
/// `imports` is the [`imports_needed`] result (first-occurrence order).
/// Elements with a live mapping contribute their Rust signature; in
/// [`ContextMode::Translate`] unmapped elements fall back to their C
/// signature/definition, while [`ContextMode::Repair`] omits them. When
/// the rendered bundle would exceed `max_tokens` (estimated as
/// `max(bytes/4, 5·lines)` of the rendered text), lowest-priority items
/// are dropped from the back until it fits, and their names recorded.
pub fn select_context(
    imports: &[String],
    project: &CProject,
    index: &ElementIndex,
    store: &MetadataStore,
    rust_index: &RustIndex,
    mode: ContextMode,
    max_tokens: usize,
) -> ContextBundle {
    let mut bundle = ContextBundle::default();
    for name in imports {
        let sites = index.lookup(name);
        let Some(&(ref module, fi, ei)) = sites.first() else {
            continue;
        };
        let kind = project.files[fi].elements[ei].kind;
        let mapped = store
            .find(module, name)
            .map(|i| &store.elements[i])
            .filter(|r| r.is_mapped());
        if let Some(record) = mapped {
            let rust_name = record.rust_name.as_deref().unwrap_or_default();
            let rust_file = record.rust_file.as_deref().unwrap_or_default();
            if let Some(item) = rust_index.get(rust_file, rust_name) {
                let text = match item.kind {
                    RustItemKind::Fn => {
                        let mut sig = item.signature.clone();
                        sig.push(';');
                        sig
                    }
                    _ => item.signature.clone(),
                };
                bundle.items.push(ContextItem {
                    name: name.clone(),
                    text,
                    note: format!("defined in {rust_file}"),
                    rank: context_rank(kind),
                });
                continue;
            }
        }
        if mode == ContextMode::Repair {
            continue;
        }
        bundle.items.push(ContextItem {
            name: name.clone(),
            text: element_context(project, fi, ei),
            note: format!("C definition from {module} (not yet translated)"),
            rank: context_rank(kind),
        });
    }

    // Fit the rendered bundle into the budget, shedding the lowest
    // priority (highest rank) items from the back first.
    loop {
        let rendered = bundle.render();
        if crate::prompts::estimate_tokens(&rendered) <= max_tokens {
            break;
        }
        let Some(worst) = bundle.items.iter().map(|i| i.rank).max() else {
            break;
        };
        let pos = bundle
            .items
            .iter()
            .rposition(|i| i.rank == worst)
            .expect("max rank present");
        let removed = bundle.items.remove(pos);
        bundle.dropped.push(removed.name);
    }
    bundle
}
