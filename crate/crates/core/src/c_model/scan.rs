//! The top-level construct scanner.
//!
//! Two passes over a masked file. Pass one walks lines and handles the
//! preprocessor: `#define` becomes a macro element, `#include` and `#undef`
//! are recorded, and `#if`/`#endif` nesting is tracked into conditional
//! blocks. Pass two walks the remaining code with a small token machine and
//! classifies each construct by shape — where the first `{` or `;` falls and
//! what preceded it — rather than by grammar.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::text::{self, MaskedSource};

use super::{CElement, CFile, CModelError, ConditionalBlock, ElementKind, IncludeDirective};

const TYPE_KEYWORDS: &[&str] = &[
    "void", "char", "short", "int", "long", "float", "double", "signed", "unsigned", "_Bool",
    "size_t", "ssize_t", "int8_t", "int16_t", "int32_t", "int64_t", "uint8_t", "uint16_t",
    "uint32_t", "uint64_t", "intptr_t", "uintptr_t", "ptrdiff_t", "FILE", "const", "volatile",
    "restrict", "static", "extern", "inline", "register", "struct", "union", "enum",
];

pub fn scan_source(path: PathBuf, raw: &str) -> Result<CFile, CModelError> {
    let file_label = path.to_string_lossy().replace('\\', "/");
    let source = MaskedSource::c(raw);
    let n = source.line_count();

    let mut elements = Vec::new();
    let mut includes = Vec::new();
    let mut undefs = Vec::new();
    let mut conditionals = Vec::new();

    // --- pass one: directives -------------------------------------------
    // An open conditional: (start line, depth, guards collected so far).
    let mut cond_stack: Vec<(usize, usize, Vec<String>)> = Vec::new();
    let mut line = 1;
    while line <= n {
        if !source.flags(line).directive {
            line += 1;
            continue;
        }
        let start = line;
        let mut end = line;
        while end < n && trimmed(&source, end).ends_with('\\') {
            end += 1;
        }
        line = end + 1;

        let masked_text = source.masked[source.line_span(start, end)].to_string();
        let body = directive_body(&masked_text);
        let (word, rest) = split_word(body);
        match word {
            "define" => {
                let (name, after) = split_word(rest);
                if name.is_empty() {
                    continue;
                }
                // No space between the name and `(` means parameters.
                let kind = if after.starts_with('(') {
                    ElementKind::MacroFunction
                } else {
                    ElementKind::MacroVariable
                };
                elements.push(CElement {
                    kind,
                    name: name.to_string(),
                    start_line: start,
                    end_line: end,
                    is_declaration: false,
                    is_static: false,
                });
            }
            "undef" => {
                let (name, _) = split_word(rest);
                if !name.is_empty() {
                    undefs.push(name.to_string());
                }
            }
            "include" => {
                // The filename is masked out as a string literal, so read
                // from the original text.
                let orig = &source.original[source.line_span(start, end)];
                if let Some(inc) = parse_include(orig, start) {
                    includes.push(inc);
                }
            }
            "if" | "ifdef" | "ifndef" => {
                let guards = if word == "if" {
                    guard_idents(rest)
                } else {
                    let (name, _) = split_word(rest);
                    if name.is_empty() { Vec::new() } else { vec![name.to_string()] }
                };
                cond_stack.push((start, cond_stack.len(), guards));
            }
            "elif" => {
                if let Some(top) = cond_stack.last_mut() {
                    top.2.extend(guard_idents(rest));
                }
            }
            "else" => {}
            "endif" => match cond_stack.pop() {
                Some((open, depth, mut guards)) => {
                    let mut seen = HashSet::new();
                    guards.retain(|g| seen.insert(g.clone()));
                    conditionals.push(ConditionalBlock {
                        start_line: open,
                        end_line: end,
                        depth,
                        guards,
                        contained_elements: Vec::new(),
                    });
                }
                None => {
                    return Err(CModelError::DanglingEndif { file: file_label, line: start })
                }
            },
            _ => {}
        }
    }
    if let Some((open, _, _)) = cond_stack.first() {
        return Err(CModelError::UnterminatedConditional { file: file_label, line: *open });
    }

    // --- pass two: code constructs --------------------------------------
    // Brace matching must not see braces inside directives (`#define BEGIN {`
    // would wreck it), so blank every directive line first.
    let code = blank_directives(&source);
    scan_code(&source, &code, &file_label, &mut elements)?;

    elements.sort_by_key(|e| (e.start_line, e.end_line));
    conditionals.sort_by_key(|b| (b.start_line, b.end_line));
    for block in &mut conditionals {
        block.contained_elements = elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.start_line >= block.start_line && e.end_line <= block.end_line)
            .map(|(i, _)| i)
            .collect();
    }

    Ok(CFile { path, source, elements, conditionals, includes, undefs })
}

fn trimmed(source: &MaskedSource, line: usize) -> &str {
    let span = source.line_span(line, line);
    source.masked[span].trim_end_matches('\n').trim_end()
}

/// Text after the `#`, with leading whitespace dropped.
fn directive_body(masked: &str) -> &str {
    let t = masked.trim_start();
    t.strip_prefix('#').map(str::trim_start).unwrap_or("")
}

fn split_word(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    let end = s
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(s.len());
    (&s[..end], &s[end..])
}

fn parse_include(original: &str, line: usize) -> Option<IncludeDirective> {
    let idx = original.find("include")?;
    let rest = original[idx + "include".len()..].trim_start();
    if let Some(stripped) = rest.strip_prefix('"') {
        let end = stripped.find('"')?;
        Some(IncludeDirective { line, target: stripped[..end].to_string(), quoted: true })
    } else if let Some(stripped) = rest.strip_prefix('<') {
        let end = stripped.find('>')?;
        Some(IncludeDirective { line, target: stripped[..end].to_string(), quoted: false })
    } else {
        None
    }
}

/// Identifiers a condition expression tests, minus the `defined` operator.
fn guard_idents(expr: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (_, ident) in text::identifiers(expr) {
        if ident != "defined" && !out.iter().any(|s| s == ident) {
            out.push(ident.to_string());
        }
    }
    out
}

fn blank_directives(source: &MaskedSource) -> String {
    let mut bytes = source.masked.clone().into_bytes();
    for line in 1..=source.line_count() {
        if source.flags(line).directive {
            for b in &mut bytes[source.line_span(line, line)] {
                if *b != b'\n' {
                    *b = b' ';
                }
            }
        }
    }
    String::from_utf8(bytes).expect("blanking writes ASCII")
}

/// One `identifier (args)` group seen at the top level of a construct.
struct ParenGroup {
    ident: Option<String>,
    open: usize,
    close: usize,
    /// First non-space byte inside the group is `*` — function pointer shape.
    star_inside: bool,
}

fn scan_code(
    source: &MaskedSource,
    code: &str,
    file_label: &str,
    elements: &mut Vec<CElement>,
) -> Result<(), CModelError> {
    let bytes = code.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() || bytes[i] == b';' {
            i += 1;
            continue;
        }
        i = scan_construct(source, code, file_label, i, elements)?;
    }
    Ok(())
}

/// Scan one construct starting at non-space offset `start`; return the
/// offset to resume from.
fn scan_construct(
    source: &MaskedSource,
    code: &str,
    file_label: &str,
    start: usize,
    elements: &mut Vec<CElement>,
) -> Result<usize, CModelError> {
    let bytes = code.as_bytes();
    let start_line = source.line_of(start);

    let mut saw_typedef = false;
    let mut saw_static = false;
    let mut saw_extern = false;
    let mut tag_kw: Option<usize> = None; // offset after struct/union/enum keyword
    let mut saw_eq = false;
    let mut saw_type_braces = false;
    let mut groups: Vec<ParenGroup> = Vec::new();
    let mut last_ident: Option<(usize, usize)> = None;
    let mut last_meaningful: u8 = 0;
    let mut idents_seen = 0usize;

    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        match b {
            b'{' => {
                let close = text::matching_brace(code, i).ok_or_else(|| {
                    CModelError::UnbalancedBraces {
                        file: file_label.to_string(),
                        line: source.line_of(i),
                    }
                })?;
                if last_meaningful == b')' && !saw_eq && !saw_typedef {
                    // `name(args) {` — a function definition.
                    elements.push(CElement {
                        kind: ElementKind::Function,
                        name: function_name(&groups)
                            .unwrap_or_else(|| anon_name(file_label, start_line)),
                        start_line,
                        end_line: source.line_of(close - 1),
                        is_declaration: false,
                        is_static: saw_static,
                    });
                    return Ok(close);
                }
                // Initializer or a struct/union/enum body: skip it whole and
                // keep going to the terminating `;`.
                if !saw_eq {
                    saw_type_braces = true;
                }
                last_meaningful = b'}';
                i = close;
            }
            b';' => {
                classify_terminated(ConstructShape {
                    code,
                    file_label,
                    start,
                    semi: i,
                    start_line,
                    end_line: source.line_of(i),
                    saw_typedef,
                    saw_static,
                    saw_extern,
                    tag_kw,
                    saw_eq,
                    saw_type_braces,
                    groups: &groups,
                    had_ident: last_ident.is_some(),
                    idents_seen,
                }, elements);
                // A suspected K&R definition may continue past this `;`.
                if let Some(resume) =
                    knr_continuation(source, code, file_label, start, i, elements)?
                {
                    return Ok(resume);
                }
                return Ok(i + 1);
            }
            b'(' => {
                let close = skip_parens(bytes, i);
                let ident = last_ident
                    .filter(|_| last_meaningful == b'i')
                    .map(|(a, z)| code[a..z].to_string());
                let inner_start = (i + 1).min(close.saturating_sub(1));
                let inner = code[inner_start..close.saturating_sub(1).max(inner_start)]
                    .trim_start();
                groups.push(ParenGroup {
                    ident,
                    open: i,
                    close,
                    star_inside: inner.starts_with('*'),
                });
                last_meaningful = b')';
                i = close;
            }
            b'[' => {
                i = skip_brackets(bytes, i);
                last_meaningful = b']';
            }
            b'=' => {
                saw_eq = true;
                last_meaningful = b'=';
                i += 1;
            }
            _ if text::is_ident_start(b) => {
                let mut j = i;
                while j < bytes.len() && text::is_ident_byte(bytes[j]) {
                    j += 1;
                }
                let word = &code[i..j];
                match word {
                    "typedef" => saw_typedef = true,
                    "static" => saw_static = true,
                    "extern" => saw_extern = true,
                    "struct" | "union" | "enum" if tag_kw.is_none() => tag_kw = Some(j),
                    _ => {}
                }
                idents_seen += 1;
                last_ident = Some((i, j));
                last_meaningful = b'i';
                i = j;
            }
            _ => {
                last_meaningful = b;
                i += 1;
            }
        }
    }
    // Ran off the end without a terminator; record what we have as `other`
    // so the module still tiles completely.
    if source.line_count() >= start_line {
        elements.push(CElement {
            kind: ElementKind::Other,
            name: anon_name(file_label, start_line),
            start_line,
            end_line: source.line_count(),
            is_declaration: false,
            is_static: saw_static,
        });
    }
    Ok(bytes.len())
}

struct ConstructShape<'a> {
    code: &'a str,
    file_label: &'a str,
    start: usize,
    semi: usize,
    start_line: usize,
    end_line: usize,
    saw_typedef: bool,
    saw_static: bool,
    saw_extern: bool,
    tag_kw: Option<usize>,
    saw_eq: bool,
    saw_type_braces: bool,
    groups: &'a [ParenGroup],
    had_ident: bool,
    idents_seen: usize,
}

fn classify_terminated(shape: ConstructShape<'_>, elements: &mut Vec<CElement>) {
    let ConstructShape {
        code,
        file_label,
        start,
        semi,
        start_line,
        end_line,
        saw_typedef,
        saw_static,
        saw_extern,
        tag_kw,
        saw_eq,
        saw_type_braces,
        groups,
        had_ident,
        idents_seen,
    } = shape;
    if !had_ident {
        return; // stray punctuation — not an element
    }
    let construct = &code[start..semi];

    if saw_typedef {
        elements.push(CElement {
            kind: ElementKind::TypeDef,
            name: typedef_name(construct).unwrap_or_else(|| anon_name(file_label, start_line)),
            start_line,
            end_line,
            is_declaration: false,
            is_static: false,
        });
        return;
    }

    if saw_type_braces && !saw_eq {
        // `struct X { ... };` — named by the tag, anonymous otherwise.
        let name = tag_kw
            .and_then(|after| tag_name(code, after, semi))
            .unwrap_or_else(|| anon_name(file_label, start_line));
        elements.push(CElement {
            kind: ElementKind::TypeDef,
            name,
            start_line,
            end_line,
            is_declaration: false,
            is_static: saw_static,
        });
        return;
    }

    if let Some(after) = tag_kw {
        // `struct X;` forward declaration: exactly the keyword and the tag.
        if idents_seen == 2 && !saw_eq && groups.is_empty() {
            if let Some(name) = tag_name(code, after, semi) {
                elements.push(CElement {
                    kind: ElementKind::TypeDef,
                    name,
                    start_line,
                    end_line,
                    is_declaration: true,
                    is_static: false,
                });
                return;
            }
        }
    }

    let named_group = groups.iter().rev().find(|g| g.ident.as_deref().is_some_and(usable_name));

    if named_group.is_none() {
        if let Some(star_group) = groups.iter().find(|g| g.star_inside) {
            // `int (*fp)(void);` — a function-pointer variable, with or
            // without an initializer.
            let inner = &code[star_group.open + 1..star_group.close.saturating_sub(1)];
            let name = text::identifiers(inner)
                .map(|(_, s)| s)
                .find(|s| usable_name(s))
                .map(str::to_string)
                .unwrap_or_else(|| anon_name(file_label, start_line));
            elements.push(CElement {
                kind: ElementKind::Variable,
                name,
                start_line,
                end_line,
                is_declaration: saw_extern && !saw_eq,
                is_static: saw_static,
            });
            return;
        }
    }

    if !saw_eq {
        if let Some(group) = named_group {
            let after_close = code[group.close..semi].trim();
            if after_close.is_empty() {
                // `;` directly after `)` — a prototype.
                elements.push(CElement {
                    kind: ElementKind::Function,
                    name: group.ident.clone().unwrap(),
                    start_line,
                    end_line,
                    is_declaration: true,
                    is_static: saw_static,
                });
                return;
            }
            let tail_is_groups = groups
                .iter()
                .filter(|g| g.open >= group.close)
                .all(|g| g.ident.as_deref().is_none_or(|s| s.starts_with("__")));
            if after_close.ends_with(')') && tail_is_groups {
                // `void f(void) __attribute__((...));` — still a prototype.
                elements.push(CElement {
                    kind: ElementKind::Function,
                    name: group.ident.clone().unwrap(),
                    start_line,
                    end_line,
                    is_declaration: true,
                    is_static: saw_static,
                });
                return;
            }
            // `ident(...) extras ;` — K&R parameter declarations, old-style
            // definitions, or something stranger. `knr_continuation` extends
            // the span if a body follows.
            elements.push(CElement {
                kind: ElementKind::Other,
                name: group.ident.clone().unwrap(),
                start_line,
                end_line,
                is_declaration: false,
                is_static: saw_static,
            });
            return;
        }
    }

    let name =
        variable_name(construct).unwrap_or_else(|| anon_name(file_label, start_line));
    elements.push(CElement {
        kind: ElementKind::Variable,
        name,
        start_line,
        end_line,
        is_declaration: saw_extern && !saw_eq,
        is_static: saw_static,
    });
}

/// After an ambiguous `ident(...) extras ;`, look for a K&R-style body:
/// parameter declarations (no parentheses) followed by a bare `{`. When one
/// is found, extend the just-pushed `other` element over the whole
/// definition and return the resume offset.
fn knr_continuation(
    source: &MaskedSource,
    code: &str,
    file_label: &str,
    construct_start: usize,
    semi: usize,
    elements: &mut Vec<CElement>,
) -> Result<Option<usize>, CModelError> {
    let eligible = matches!(
        elements.last(),
        Some(e) if e.kind == ElementKind::Other
            && !e.is_declaration
            && e.start_line == source.line_of(construct_start)
    );
    if !eligible {
        return Ok(None);
    }
    let bytes = code.as_bytes();
    let mut i = semi + 1;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            return Ok(None);
        }
        match bytes[i] {
            b'{' => {
                let end = text::matching_brace(code, i).ok_or_else(|| {
                    CModelError::UnbalancedBraces {
                        file: file_label.to_string(),
                        line: source.line_of(i),
                    }
                })?;
                let end_line = source.line_of(end - 1);
                elements.last_mut().unwrap().end_line = end_line;
                return Ok(Some(end));
            }
            b'(' => return Ok(None), // next construct has parameters — not K&R
            _ => {
                // Consume one parameter declaration `... ;` with no parens.
                while i < bytes.len() && bytes[i] != b';' {
                    if bytes[i] == b'(' || bytes[i] == b'{' {
                        return Ok(None);
                    }
                    i += 1;
                }
                if i >= bytes.len() {
                    return Ok(None);
                }
                i += 1;
            }
        }
    }
}

fn skip_parens(bytes: &[u8], open: usize) -> usize {
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    bytes.len()
}

fn skip_brackets(bytes: &[u8], open: usize) -> usize {
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    bytes.len()
}

fn usable_name(name: &str) -> bool {
    !TYPE_KEYWORDS.contains(&name) && !name.starts_with("__")
}

/// Name of a function definition: the identifier owning the last usable
/// parameter-list group.
fn function_name(groups: &[ParenGroup]) -> Option<String> {
    groups.iter().rev().find_map(|g| g.ident.clone().filter(|s| usable_name(s)))
}

/// Tag identifier right after `struct`/`union`/`enum`, if the next token is
/// an identifier rather than `{`.
fn tag_name(code: &str, after_kw: usize, limit: usize) -> Option<String> {
    let rest = code[after_kw..limit].trim_start();
    let bytes = rest.as_bytes();
    if bytes.is_empty() || !text::is_ident_start(bytes[0]) {
        return None;
    }
    let end = bytes.iter().position(|&b| !text::is_ident_byte(b)).unwrap_or(bytes.len());
    Some(rest[..end].to_string())
}

/// Typedef naming: the declarator after the last `}` (or after `typedef`),
/// which is either `(*name)(...)` or the last identifier outside brackets.
fn typedef_name(construct: &str) -> Option<String> {
    let tail = match construct.rfind('}') {
        Some(i) => &construct[i + 1..],
        None => {
            let i = construct.find("typedef")? + "typedef".len();
            &construct[i..]
        }
    };
    if let Some(open) = tail.find('(') {
        let inner = tail[open + 1..].trim_start();
        if let Some(stripped) = inner.strip_prefix('*') {
            let stripped = stripped.trim_start();
            let end = stripped
                .bytes()
                .position(|b| !text::is_ident_byte(b))
                .unwrap_or(stripped.len());
            if end > 0 {
                return Some(stripped[..end].to_string());
            }
        }
    }
    last_ident_outside_brackets(tail)
}

/// Variable naming: last identifier before the first top-level `,`, `=`, or
/// `[`.
fn variable_name(construct: &str) -> Option<String> {
    let bytes = construct.as_bytes();
    let mut cut = construct.len();
    let mut depth = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' if depth == 0 => {
                cut = i;
                break;
            }
            b',' | b'=' if depth == 0 => {
                cut = i;
                break;
            }
            b'(' | b'{' | b'[' => depth += 1,
            b')' | b'}' | b']' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    last_ident_outside_brackets(&construct[..cut]).filter(|n| usable_name(n))
}

fn last_ident_outside_brackets(s: &str) -> Option<String> {
    let mut depth = 0usize;
    let mut last = None;
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'[' | b'(' => {
                depth += 1;
                i += 1;
            }
            b']' | b')' => {
                depth = depth.saturating_sub(1);
                i += 1;
            }
            b if text::is_ident_start(b) && depth == 0 => {
                let start = i;
                while i < bytes.len() && text::is_ident_byte(bytes[i]) {
                    i += 1;
                }
                last = Some(s[start..i].to_string());
            }
            _ => i += 1,
        }
    }
    last
}

fn anon_name(file_label: &str, line: usize) -> String {
    format!("anon@{file_label}:{line}")
}
