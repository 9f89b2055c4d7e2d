//! The preprocessing phase: turn a multi-file C project into self-contained
//! per-module texts that translate cleanly one module at a time.
//!
//! Five steps, each rescanning its output so later steps always work on a
//! fresh model:
//!
//! 1. merge — inline quoted includes into each `.c` file
//! 2. uniquify — rename `static` definitions whose names collide across
//!    modules
//! 3. strip — delete declarations whose definition lives in the same module
//! 4. reorder — move definitions above their references
//! 5. extract — lift conditional-compilation macros into feature records
//!
//! The pipeline never interprets C semantics; every step is a line-level
//! rewrite guided by the token scanner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use crate::c_model::{
    self, build_include_graph, reference_edges, CFile, CModelError, CProject, ElementKind,
    IncludeGraph,
};
use crate::text;

/// Where a merged line came from.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineOrigin {
    Source { file: PathBuf, line: usize },
    /// Added by the tool rather than copied from the project.
    Synthetic,
}

/// One `.c` compilation unit after preprocessing steps have run on it.
#[derive(Debug, Clone)]
pub struct MergedModule {
    /// Rust-safe module name derived from the file stem.
    pub name: String,
    /// Rescanned model of the current text.
    pub file: CFile,
    /// Per-line provenance, parallel to the text's lines.
    pub origin: Vec<LineOrigin>,
    /// Declarations kept because their definition is outside this module.
    pub kept_externals: Vec<String>,
    /// Static renames applied here: `(old, new)`.
    pub renames: Vec<(String, String)>,
}

impl MergedModule {
    pub fn text(&self) -> &str {
        &self.file.source.original
    }
}

/// A conditional-compilation macro lifted out of the C text.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureRecord {
    /// The C macro name, as guarded on.
    pub name: String,
    /// Whether any module defined it (feature defaults on) or the project
    /// only tested it (defaults off).
    pub originally_defined: bool,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub modules: Vec<MergedModule>,
    pub features: Vec<FeatureRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Model(#[from] CModelError),
}

/// Run the whole preprocessing phase over a scanned project.
pub fn preprocess_project(
    project: &CProject,
    include_dirs: &[PathBuf],
) -> Result<Preprocessed, PreprocessError> {
    let graph = build_include_graph(project, include_dirs);
    let mut warnings = Vec::new();
    for cycle in graph.cycles(project.files.len()) {
        let names: Vec<String> =
            cycle.iter().map(|&i| project.files[i].display_path()).collect();
        warnings.push(format!("include cycle: {}", names.join(" -> ")));
    }

    let mut modules = Vec::new();
    let names = module_names(project);
    for (&idx, name) in project.module_indices().iter().zip(&names) {
        modules.push(merge_module(project, &graph, idx, name.clone(), &mut warnings)?);
    }

    uniquify_statics(&mut modules)?;
    for m in &mut modules {
        strip_declarations(m, &mut warnings)?;
        reorder_module(m)?;
    }
    let features = extract_cfg_macros(&mut modules, &mut warnings)?;

    Ok(Preprocessed { modules, features, warnings })
}

/// Treat the given macro names as defined: any matching feature record has
/// its default switched on. Names that match no record only draw a warning,
/// since a macro the project never tests cannot change the output.
pub fn apply_defines(pre: &mut Preprocessed, defines: &[String]) {
    for name in defines {
        match pre.features.iter_mut().find(|f| &f.name == name) {
            Some(feature) => feature.originally_defined = true,
            None => pre.warnings.push(format!(
                "defined macro {name} matches no feature macro in this project"
            )),
        }
    }
}

/// Module names from file stems, made identifier-safe and unique. When two
/// stems collide the full relative path is used instead.
pub fn module_names(project: &CProject) -> Vec<String> {
    let indices = project.module_indices();
    let stems: Vec<String> = indices
        .iter()
        .map(|&i| {
            let p = &project.files[i].path;
            sanitize(&p.file_stem().unwrap_or_default().to_string_lossy())
        })
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &stems {
        *counts.entry(s.as_str()).or_default() += 1;
    }
    indices
        .iter()
        .zip(&stems)
        .map(|(&i, stem)| {
            if counts[stem.as_str()] > 1 {
                let p = &project.files[i].path;
                sanitize(&p.with_extension("").to_string_lossy())
            } else {
                stem.clone()
            }
        })
        .collect()
}

fn sanitize(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() || out.as_bytes()[0].is_ascii_digit() {
        out.insert(0, 'm');
    }
    out.to_lowercase()
}

// --- step 1: merge ------------------------------------------------------

/// Lines of an inlined header to drop: a classic include guard's three
/// directive lines plus any `#pragma once`.
fn guard_lines(file: &CFile) -> HashSet<usize> {
    let mut skip = HashSet::new();
    let n = file.line_count();
    for line in 1..=n {
        let t = file.source.lines_text(line, line).trim();
        if t.starts_with("#pragma") && t[7..].trim_start().starts_with("once") {
            skip.insert(line);
        }
    }

    // Guard shape: first non-filler line `#ifndef G`, next `#define G`,
    // last non-filler line the matching `#endif`.
    let mut meaningful = (1..=n).filter(|&l| {
        !file.source.flags(l).is_filler() && !skip.contains(&l)
    });
    let (first, second) = match (meaningful.next(), meaningful.next()) {
        (Some(a), Some(b)) => (a, b),
        _ => return skip,
    };
    let last = match (1..=n)
        .rev()
        .find(|&l| !file.source.flags(l).is_filler() && !skip.contains(&l))
    {
        Some(l) => l,
        None => return skip,
    };
    let block = file
        .conditionals
        .iter()
        .find(|b| b.depth == 0 && b.start_line == first && b.end_line == last);
    if block.is_none() {
        return skip;
    }
    let open = file.source.lines_text(first, first);
    let guard = match open.trim().strip_prefix("#ifndef") {
        Some(rest) => rest.trim().to_string(),
        None => return skip,
    };
    let def = file.source.lines_text(second, second);
    let def_ok = def
        .trim()
        .strip_prefix("#define")
        .map(|rest| rest.trim() == guard || rest.trim().starts_with(&format!("{guard} ")))
        .unwrap_or(false);
    if !def_ok || guard.is_empty() || !guard.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
    {
        return skip;
    }
    skip.insert(first);
    skip.insert(second);
    skip.insert(last);
    skip
}

fn merge_module(
    project: &CProject,
    graph: &IncludeGraph,
    module_idx: usize,
    name: String,
    warnings: &mut Vec<String>,
) -> Result<MergedModule, PreprocessError> {
    let mut lines: Vec<String> = Vec::new();
    let mut origin: Vec<LineOrigin> = Vec::new();
    let mut visited = HashSet::new();
    visited.insert(module_idx);
    inline_file(project, graph, module_idx, false, &mut visited, &mut lines, &mut origin, warnings);

    let text = to_text(&lines);
    let file = c_model::scan_source(project.files[module_idx].path.clone(), &text)?;
    Ok(MergedModule { name, file, origin, kept_externals: Vec::new(), renames: Vec::new() })
}

#[allow(clippy::too_many_arguments)]
fn inline_file(
    project: &CProject,
    graph: &IncludeGraph,
    idx: usize,
    stripping: bool,
    visited: &mut HashSet<usize>,
    lines: &mut Vec<String>,
    origin: &mut Vec<LineOrigin>,
    warnings: &mut Vec<String>,
) {
    let file = &project.files[idx];
    let skip = if stripping { guard_lines(file) } else { HashSet::new() };
    let resolved: HashMap<usize, usize> =
        graph.includes_of(idx).map(|e| (e.line, e.to)).collect();

    for line_no in 1..=file.line_count() {
        if skip.contains(&line_no) {
            continue;
        }
        if let Some(&target) = resolved.get(&line_no) {
            if visited.insert(target) {
                inline_file(project, graph, target, true, visited, lines, origin, warnings);
            }
            // Repeat includes vanish — the text is already here.
            continue;
        }
        if let Some(inc) = file.includes.iter().find(|i| i.line == line_no && i.quoted) {
            if graph.missing.iter().any(|m| m.from == idx && m.line == line_no) {
                warnings.push(format!(
                    "{}:{}: include \"{}\" not found; kept verbatim",
                    file.display_path(),
                    line_no,
                    inc.target
                ));
            }
        }
        let text_line = file.source.lines_text(line_no, line_no);
        lines.push(text_line.trim_end_matches('\n').to_string());
        origin.push(LineOrigin::Source { file: file.path.clone(), line: line_no });
    }
}

fn to_text(lines: &[String]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

fn lines_of(module: &MergedModule) -> Vec<String> {
    module
        .text()
        .split_inclusive('\n')
        .map(|l| l.trim_end_matches('\n').to_string())
        .collect()
}

// --- step 2: uniquify statics ------------------------------------------

/// Rename `static` definitions whose name is also defined in another
/// module to `NAME__MODULE`, rewriting every token occurrence in the
/// owning module.
pub fn uniquify_statics(modules: &mut [MergedModule]) -> Result<(), PreprocessError> {
    // name -> modules defining it (any linkage, definitions only)
    let mut def_sites: HashMap<String, HashSet<usize>> = HashMap::new();
    for (mi, m) in modules.iter().enumerate() {
        for el in &m.file.elements {
            if !el.is_declaration {
                def_sites.entry(el.name.clone()).or_default().insert(mi);
            }
        }
    }

    for mi in 0..modules.len() {
        let mut renames: Vec<(String, String)> = Vec::new();
        for el in &modules[mi].file.elements {
            if el.is_declaration || !el.is_static {
                continue;
            }
            let elsewhere = def_sites
                .get(&el.name)
                .map(|s| s.iter().any(|&o| o != mi))
                .unwrap_or(false);
            if elsewhere && !renames.iter().any(|(o, _)| *o == el.name) {
                renames.push((el.name.clone(), format!("{}__{}", el.name, modules[mi].name)));
            }
        }
        if renames.is_empty() {
            continue;
        }
        let renamed = rename_tokens(&modules[mi].file.source, &renames);
        let path = modules[mi].file.path.clone();
        modules[mi].file = c_model::scan_source(path, &renamed)?;
        modules[mi].renames.extend(renames);
        // Line count is unchanged, so the origin map still lines up.
    }
    Ok(())
}

/// Replace whole-token occurrences of each old name, using the masked text
/// to skip comments and strings.
fn rename_tokens(source: &crate::text::MaskedSource, renames: &[(String, String)]) -> String {
    let map: HashMap<&str, &str> =
        renames.iter().map(|(o, n)| (o.as_str(), n.as_str())).collect();
    let mut out = String::with_capacity(source.original.len());
    let mut last = 0;
    for (off, ident) in text::identifiers(&source.masked) {
        if let Some(new) = map.get(ident) {
            out.push_str(&source.original[last..off]);
            out.push_str(new);
            last = off + ident.len();
        }
    }
    out.push_str(&source.original[last..]);
    out
}

// --- step 3: strip declarations ----------------------------------------

fn kind_satisfies(decl: ElementKind, def: ElementKind) -> bool {
    match decl {
        // Old-style definitions scan as `other`; they still satisfy a
        // prototype of the same name.
        ElementKind::Function => matches!(def, ElementKind::Function | ElementKind::Other),
        ElementKind::Variable => def == ElementKind::Variable,
        ElementKind::TypeDef => def == ElementKind::TypeDef,
        _ => decl == def,
    }
}

/// Delete declarations whose definition lives in this module; keep (and
/// record) the rest.
pub fn strip_declarations(
    module: &mut MergedModule,
    warnings: &mut Vec<String>,
) -> Result<(), PreprocessError> {
    let file = &module.file;
    let mut drop_lines: HashSet<usize> = HashSet::new();
    let mut kept: Vec<String> = Vec::new();

    for (ei, el) in file.elements.iter().enumerate() {
        if !el.is_declaration {
            continue;
        }
        let has_def = file
            .elements
            .iter()
            .any(|d| !d.is_declaration && d.name == el.name && kind_satisfies(el.kind, d.kind));
        if !has_def {
            if !kept.contains(&el.name) {
                kept.push(el.name.clone());
            }
            continue;
        }
        let shares_line = file.elements.iter().enumerate().any(|(oi, o)| {
            oi != ei && o.start_line <= el.end_line && o.end_line >= el.start_line
        });
        if shares_line {
            warnings.push(format!(
                "{}: declaration of `{}` shares lines with another element; kept",
                file.display_path(),
                el.name
            ));
            continue;
        }
        drop_lines.extend(el.start_line..=el.end_line);
    }

    if !drop_lines.is_empty() {
        let lines = lines_of(module);
        let mut new_lines = Vec::with_capacity(lines.len());
        let mut new_origin = Vec::with_capacity(lines.len());
        for (i, l) in lines.into_iter().enumerate() {
            if !drop_lines.contains(&(i + 1)) {
                new_lines.push(l);
                new_origin.push(module.origin[i].clone());
            }
        }
        let path = module.file.path.clone();
        module.file = c_model::scan_source(path, &to_text(&new_lines))?;
        module.origin = new_origin;
    }
    module.kept_externals = kept;
    Ok(())
}

// --- step 4: reorder ----------------------------------------------------

/// A contiguous run of lines that moves as one block: an element, a
/// top-level conditional region (unioned with anything it overlaps), or a
/// verbatim run of unclassified lines. Atoms tile the module exactly.
#[derive(Debug, Clone)]
pub struct Atom {
    pub start_line: usize,
    pub end_line: usize,
    /// Names defined (or declared) inside — empty for verbatim runs.
    pub names: Vec<String>,
    /// Indices into the file's element list.
    pub elements: Vec<usize>,
}

/// Build the atom tiling for a scanned file.
pub fn module_atoms(file: &CFile) -> Vec<Atom> {
    let n = file.line_count();
    if n == 0 {
        return Vec::new();
    }

    // Seed intervals from elements and top-level conditional blocks, then
    // union everything that overlaps.
    let mut intervals: Vec<(usize, usize, Vec<usize>)> = file
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| (e.start_line, e.end_line, vec![i]))
        .collect();
    for block in file.conditionals.iter().filter(|b| b.depth == 0) {
        intervals.push((block.start_line, block.end_line, Vec::new()));
    }
    intervals.sort_by_key(|&(s, e, _)| (s, e));
    let mut merged: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (s, e, els) in intervals {
        match merged.last_mut() {
            Some(last) if s <= last.1 => {
                last.1 = last.1.max(e);
                last.2.extend(els);
            }
            _ => merged.push((s, e, els)),
        }
    }

    // Tile the gaps. Filler attaches to the following atom, except the
    // module-leading run, which stays its own atom so a moving first
    // element doesn't drag the file header along. Non-filler gap lines
    // (system includes, stray directives) become verbatim atoms.
    let mut atoms: Vec<Atom> = Vec::new();
    let mut cursor = 1usize;
    let mut pending_filler: Option<usize> = None; // start of filler run

    let push_atom = |atoms: &mut Vec<Atom>, start: usize, end: usize, elements: Vec<usize>| {
        let names = elements
            .iter()
            .map(|&i| file.elements[i].name.clone())
            .collect();
        atoms.push(Atom { start_line: start, end_line: end, names, elements });
    };

    for (s, e, els) in merged {
        // Gap lines cursor..s-1.
        let mut g = cursor;
        while g < s {
            if file.source.flags(g).is_filler() {
                if pending_filler.is_none() {
                    pending_filler = Some(g);
                }
                g += 1;
            } else {
                // Leading filler before a verbatim run joins the run.
                let run_start = pending_filler.take().unwrap_or(g);
                let mut run_end = g;
                while run_end + 1 < s && !file.source.flags(run_end + 1).is_filler() {
                    run_end += 1;
                }
                push_atom(&mut atoms, run_start, run_end, Vec::new());
                g = run_end + 1;
            }
        }
        let start = if atoms.is_empty() {
            // Module-leading filler forms its own pinned atom.
            if let Some(f) = pending_filler.take() {
                push_atom(&mut atoms, f, s.saturating_sub(1).max(f), Vec::new());
            }
            s
        } else {
            pending_filler.take().unwrap_or(s)
        };
        push_atom(&mut atoms, start, e, els);
        cursor = e + 1;
    }

    // Trailing lines: filler joins the last atom; anything else is one
    // final verbatim atom.
    if cursor <= n {
        let all_filler = (cursor..=n).all(|l| file.source.flags(l).is_filler());
        if all_filler && !atoms.is_empty() {
            atoms.last_mut().unwrap().end_line = n;
        } else {
            let start = pending_filler.take().unwrap_or(cursor);
            push_atom(&mut atoms, start, n, Vec::new());
        }
    } else if let Some(f) = pending_filler.take() {
        if !atoms.is_empty() {
            atoms.last_mut().unwrap().end_line = n.max(f);
        } else {
            push_atom(&mut atoms, f, n, Vec::new());
        }
    }

    atoms
}

/// Topologically reorder a module so definitions precede references.
/// Mutually recursive groups stay contiguous in their original order, and
/// atoms with no constraints keep their source positions.
pub fn reorder_module(module: &mut MergedModule) -> Result<(), PreprocessError> {
    let atoms = module_atoms(&module.file);
    if atoms.len() <= 1 {
        return Ok(());
    }

    let names: Vec<Vec<String>> = atoms.iter().map(|a| a.names.clone()).collect();
    let texts: Vec<&str> = atoms
        .iter()
        .map(|a| {
            let span = module.file.source.line_span(a.start_line, a.end_line);
            &module.file.source.masked[span]
        })
        .collect();
    let refs = reference_edges(&names, &texts);

    // Condense cycles, then Kahn's algorithm. An atom's dependencies must
    // come out first, so DAG edges run provider -> user.
    let sccs = c_model::tarjan(atoms.len(), |v| refs.edges[v].iter().copied());
    let mut comp_of = vec![0usize; atoms.len()];
    for (ci, scc) in sccs.iter().enumerate() {
        for &a in scc {
            comp_of[a] = ci;
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sccs.len()];
    for (ci, scc) in sccs.iter().enumerate() {
        let mut m = scc.clone();
        m.sort();
        members[ci] = m;
    }
    let mut succs: Vec<HashSet<usize>> = vec![HashSet::new(); sccs.len()];
    let mut indegree = vec![0usize; sccs.len()];
    for (user, deps) in refs.edges.iter().enumerate() {
        for &dep in deps {
            let (cu, cd) = (comp_of[user], comp_of[dep]);
            if cu != cd && succs[cd].insert(cu) {
                indegree[cu] += 1;
            }
        }
    }

    // Ready components keyed by their first atom's source position, so the
    // order is stable where no dependency forces a move.
    let mut ready: BTreeMap<usize, usize> = (0..sccs.len())
        .filter(|&c| indegree[c] == 0)
        .map(|c| (members[c][0], c))
        .collect();
    let mut atom_order = Vec::with_capacity(atoms.len());
    while let Some((&key, &comp)) = ready.iter().next().map(|(k, v)| (k, v)) {
        ready.remove(&key);
        for &a in &members[comp] {
            atom_order.push(a);
        }
        for &s in &succs[comp] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert(members[s][0], s);
            }
        }
    }
    debug_assert_eq!(atom_order.len(), atoms.len());

    if atom_order.iter().enumerate().all(|(i, &a)| i == a) {
        return Ok(()); // already in order — don't touch the text
    }

    let lines = lines_of(module);
    let mut new_lines = Vec::with_capacity(lines.len());
    let mut new_origin = Vec::with_capacity(lines.len());
    for &ai in &atom_order {
        let a = &atoms[ai];
        for line in a.start_line..=a.end_line {
            new_lines.push(lines[line - 1].clone());
            new_origin.push(module.origin[line - 1].clone());
        }
    }
    let path = module.file.path.clone();
    module.file = c_model::scan_source(path, &to_text(&new_lines))?;
    module.origin = new_origin;
    Ok(())
}

// --- step 5: extract cfg macros ----------------------------------------

/// Lift valueless guard macros out of the text into feature records. A
/// macro qualifies when some conditional in the project tests it and the
/// defining module never uses it outside conditionals. Guards tested but
/// never defined get a record too, switched off.
pub fn extract_cfg_macros(
    modules: &mut [MergedModule],
    warnings: &mut Vec<String>,
) -> Result<Vec<FeatureRecord>, PreprocessError> {
    let mut guard_names: HashSet<String> = HashSet::new();
    for m in modules.iter() {
        for block in &m.file.conditionals {
            guard_names.extend(block.guards.iter().cloned());
        }
    }

    let mut defined: HashSet<String> = HashSet::new();
    for mi in 0..modules.len() {
        let module = &modules[mi];
        if let Some(name) = module.file.undefs.iter().find(|u| guard_names.contains(*u)) {
            warnings.push(format!(
                "{}: #undef {} — leaving this module's guard macros in place",
                module.file.display_path(),
                name
            ));
            // Still note definitions so the project-level record is right.
            for el in &module.file.elements {
                if el.kind == ElementKind::MacroVariable
                    && guard_names.contains(&el.name)
                    && macro_value(module, el.start_line, el.end_line).is_empty()
                {
                    defined.insert(el.name.clone());
                }
            }
            continue;
        }

        let mut drop_lines: HashSet<usize> = HashSet::new();
        for el in &module.file.elements {
            if el.kind != ElementKind::MacroVariable || !guard_names.contains(&el.name) {
                continue;
            }
            if !macro_value(module, el.start_line, el.end_line).is_empty() {
                continue; // value-bearing macros always stay
            }
            if used_outside_conditionals(module, el) {
                continue;
            }
            defined.insert(el.name.clone());
            drop_lines.extend(el.start_line..=el.end_line);
        }
        if drop_lines.is_empty() {
            continue;
        }
        let module = &mut modules[mi];
        let lines = lines_of(module);
        let mut new_lines = Vec::new();
        let mut new_origin = Vec::new();
        for (i, l) in lines.into_iter().enumerate() {
            if !drop_lines.contains(&(i + 1)) {
                new_lines.push(l);
                new_origin.push(module.origin[i].clone());
            }
        }
        let path = module.file.path.clone();
        module.file = c_model::scan_source(path, &to_text(&new_lines))?;
        module.origin = new_origin;
    }

    let mut names: Vec<&String> = guard_names.iter().collect();
    names.sort();
    Ok(names
        .into_iter()
        .map(|n| FeatureRecord { name: n.clone(), originally_defined: defined.contains(n) })
        .collect())
}

/// The replacement text of a `#define NAME ...`, empty for bare guards.
/// Comments after the name don't count as a value; a string literal does.
fn macro_value(module: &MergedModule, start: usize, end: usize) -> String {
    let original = module.file.source.lines_text(start, end);
    let blanked = text::c_comments_blanked(original);
    let body = blanked.trim_start();
    let body = body.strip_prefix('#').unwrap_or(body).trim_start();
    let body = body.strip_prefix("define").unwrap_or(body).trim_start();
    let name_len = body
        .bytes()
        .position(|b| !text::is_ident_byte(b))
        .unwrap_or(body.len());
    body[name_len..].replace('\\', " ").trim().to_string()
}

/// Is the guard macro's name mentioned anywhere besides conditional
/// directives and its own definition?
fn used_outside_conditionals(module: &MergedModule, def: &crate::c_model::CElement) -> bool {
    let src = &module.file.source;
    for line in 1..=src.line_count() {
        if line >= def.start_line && line <= def.end_line {
            continue;
        }
        let span = src.line_span(line, line);
        let masked = &src.masked[span];
        if src.flags(line).directive {
            let body = directive_word(masked);
            if matches!(body, "if" | "ifdef" | "ifndef" | "elif") {
                continue;
            }
        }
        if text::identifiers(masked).any(|(_, id)| id == def.name) {
            return true;
        }
    }
    false
}

fn directive_word(masked_line: &str) -> &str {
    let t = masked_line.trim_start();
    let t = t.strip_prefix('#').unwrap_or(t).trim_start();
    let end = t
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(t.len());
    &t[..end]
}
