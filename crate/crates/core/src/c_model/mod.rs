//! A lexical model of a C project: files, top-level elements, conditional
//! blocks, include directives, and the graphs built over them.
//!
//! The model is deliberately token-based rather than a real C parse. The
//! pipeline only needs element boundaries, names, and name references — not
//! types or semantics — and a tolerant scanner keeps working on code that a
//! strict grammar would reject (missing headers, unexpanded macros).

mod graph;
mod scan;

use std::path::{Path, PathBuf};

use crate::text::MaskedSource;

pub use graph::{
    build_call_graph, build_include_graph, reference_edges, tarjan, CallGraph, IncludeEdge,
    IncludeGraph, MissingInclude, RefGraph,
};
pub use scan::scan_source;

/// The six element categories tracked through translation and coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Function,
    MacroFunction,
    TypeDef,
    MacroVariable,
    Variable,
    Other,
}

impl ElementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementKind::Function => "function",
            ElementKind::MacroFunction => "macro_function",
            ElementKind::TypeDef => "type_def",
            ElementKind::MacroVariable => "macro_variable",
            ElementKind::Variable => "variable",
            ElementKind::Other => "other",
        }
    }
}

/// One top-level construct in a C file. Lines are 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CElement {
    pub kind: ElementKind,
    pub name: String,
    pub start_line: usize,
    pub end_line: usize,
    /// Prototype or `extern` declaration rather than a definition.
    pub is_declaration: bool,
    pub is_static: bool,
}

/// A `#if`/`#ifdef` region, including any `#elif`/`#else` arms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionalBlock {
    /// Line of the opening directive.
    pub start_line: usize,
    /// Line of the closing `#endif`.
    pub end_line: usize,
    /// 0 for top-level blocks, +1 per enclosing conditional.
    pub depth: usize,
    /// Macro names the block's condition tests (all arms).
    pub guards: Vec<String>,
    /// Indices into the file's element list, for elements fully inside.
    pub contained_elements: Vec<usize>,
}

/// A single `#include` directive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncludeDirective {
    pub line: usize,
    pub target: String,
    /// `"name"` rather than `<name>`.
    pub quoted: bool,
}

/// One scanned source file.
#[derive(Debug, Clone)]
pub struct CFile {
    /// Path relative to the project root.
    pub path: PathBuf,
    pub source: MaskedSource,
    pub elements: Vec<CElement>,
    pub conditionals: Vec<ConditionalBlock>,
    pub includes: Vec<IncludeDirective>,
    /// Names hit by `#undef` anywhere in the file.
    pub undefs: Vec<String>,
}

impl CFile {
    /// Raw line count of the file.
    pub fn line_count(&self) -> usize {
        self.source.line_count()
    }

    /// Original text of an element.
    pub fn element_text(&self, e: &CElement) -> &str {
        self.source.lines_text(e.start_line, e.end_line)
    }

    pub fn display_path(&self) -> String {
        self.path.to_string_lossy().replace('\\', "/")
    }
}

/// A scanned project: every `.c` and `.h` under the root.
#[derive(Debug, Clone)]
pub struct CProject {
    pub root: PathBuf,
    pub files: Vec<CFile>,
}

impl CProject {
    /// Indices of the `.c` files — the project's compilation units.
    pub fn module_indices(&self) -> Vec<usize> {
        (0..self.files.len())
            .filter(|&i| self.files[i].path.extension().is_some_and(|e| e == "c"))
            .collect()
    }

    pub fn find_file(&self, rel: &Path) -> Option<usize> {
        self.files.iter().position(|f| f.path == rel)
    }

    pub fn total_lines(&self) -> usize {
        self.files.iter().map(|f| f.line_count()).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.files.iter().map(|f| f.elements.len()).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CModelError {
    #[error("unbalanced braces in {file} near line {line}")]
    UnbalancedBraces { file: String, line: usize },
    #[error("#endif without matching #if in {file} at line {line}")]
    DanglingEndif { file: String, line: usize },
    #[error("unterminated conditional opened in {file} at line {line}")]
    UnterminatedConditional { file: String, line: usize },
    #[error("conflicting non-static definitions of `{name}` in {}", files.join(", "))]
    AmbiguousDefinition { name: String, files: Vec<String> },
    #[error("failed to read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Scan every `.c`/`.h` file under `root`.
///
/// Files are ordered by relative path so later stages are deterministic.
pub fn load_project(root: &Path) -> Result<CProject, CModelError> {
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CModelError::Io {
            path: root.display().to_string(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry.path().extension().and_then(|e| e.to_str());
        if matches!(ext, Some("c") | Some("h")) {
            paths.push(entry.path().to_path_buf());
        }
    }
    paths.sort();

    let mut files = Vec::new();
    for path in paths {
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        let bytes = std::fs::read(&path).map_err(|e| CModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        files.push(scan_source(rel, &text)?);
    }
    Ok(CProject { root: root.to_path_buf(), files })
}

/// A (file index, element index) reference into a project.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElemRef {
    pub file: usize,
    pub element: usize,
}

/// A declaration matched to the definition it announces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeclPair {
    pub decl: ElemRef,
    pub def: ElemRef,
}

#[derive(Debug, Clone, Default)]
pub struct PairReport {
    pub pairs: Vec<DeclPair>,
    /// Declarations with no project definition (libc prototypes, vendored
    /// externs). These must survive stripping.
    pub externals: Vec<ElemRef>,
}

/// Match each declaration to its definition.
///
/// `static` definitions are file-scoped: they satisfy only declarations in
/// the same file. Non-static definitions are project-wide, and two of them
/// sharing a name is an error — the C link step would reject it too.
pub fn pair_decls_defs(project: &CProject) -> Result<PairReport, CModelError> {
    use std::collections::HashMap;

    // name -> non-static definitions anywhere in the project
    let mut global_defs: HashMap<&str, Vec<ElemRef>> = HashMap::new();
    // (file, name) -> static definitions in that file
    let mut static_defs: HashMap<(usize, &str), ElemRef> = HashMap::new();

    for (fi, file) in project.files.iter().enumerate() {
        for (ei, el) in file.elements.iter().enumerate() {
            if el.is_declaration {
                continue;
            }
            let r = ElemRef { file: fi, element: ei };
            if el.is_static {
                static_defs.entry((fi, el.name.as_str())).or_insert(r);
            } else {
                global_defs.entry(el.name.as_str()).or_default().push(r);
            }
        }
    }

    for (name, defs) in &global_defs {
        // A type and a variable sharing a name live in different C
        // namespaces, so only same-kind clashes count. Duplicates within one
        // file sit in exclusive `#if` arms (the C build accepted them), so
        // only cross-file collisions are fatal.
        let mut by_kind: HashMap<ElementKind, Vec<ElemRef>> = HashMap::new();
        for &d in defs {
            let kind = project.files[d.file].elements[d.element].kind;
            by_kind.entry(kind).or_default().push(d);
        }
        for defs in by_kind.values() {
            let mut files: Vec<String> =
                defs.iter().map(|d| project.files[d.file].display_path()).collect();
            files.dedup();
            if files.len() > 1 {
                return Err(CModelError::AmbiguousDefinition {
                    name: (*name).to_string(),
                    files,
                });
            }
        }
    }

    let mut report = PairReport::default();
    for (fi, file) in project.files.iter().enumerate() {
        for (ei, el) in file.elements.iter().enumerate() {
            if !el.is_declaration {
                continue;
            }
            let decl = ElemRef { file: fi, element: ei };
            let def = static_defs
                .get(&(fi, el.name.as_str()))
                .copied()
                .or_else(|| {
                    global_defs
                        .get(el.name.as_str())
                        .and_then(|defs| defs.first())
                        .copied()
                });
            match def {
                Some(def) => report.pairs.push(DeclPair { decl, def }),
                None => report.externals.push(decl),
            }
        }
    }
    Ok(report)
}
