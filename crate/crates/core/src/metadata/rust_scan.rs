//! A shape-level parser for generated Rust files, used to check that
//! reported name mappings point at items that exist and to auto-match
//! unreported ones. Like the C scanner it reads token shapes off masked
//! text; it does not try to be rustc.

use crate::text::{self, MaskedSource};

use super::MetadataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RustItemKind {
    Fn,
    Struct,
    Enum,
    Union,
    TypeAlias,
    Static,
    Const,
    MacroRules,
}

/// One item found in a Rust file. Lines are 1-based inclusive and cover
/// any attributes directly above the item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RustElement {
    pub name: String,
    pub kind: RustItemKind,
    pub start_line: usize,
    pub end_line: usize,
    /// For functions: attributes and header up to the body brace.
    pub signature: String,
}

/// Scan the top level of a Rust file, plus functions one level inside
/// `impl` blocks (method mappings must resolve too). `use`-only files
/// yield an empty list.
pub fn parse_rust_elements(file_label: &str, source: &str) -> Result<Vec<RustElement>, MetadataError> {
    let masked = MaskedSource::rust(source);
    let mut out = Vec::new();
    scan_items(&masked, file_label, 0, masked.original.len(), false, &mut out)?;
    out.sort_by_key(|e| (e.start_line, e.end_line));
    Ok(out)
}

fn scan_items(
    src: &MaskedSource,
    file_label: &str,
    from: usize,
    to: usize,
    inside_impl: bool,
    out: &mut Vec<RustElement>,
) -> Result<(), MetadataError> {
    let bytes = src.masked.as_bytes();
    let mut i = from;
    let mut attr_start: Option<usize> = None;

    while i < to {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if b == b'#' {
            // `#[...]` starts (or extends) an item's attribute run; inner
            // `#![...]` attributes belong to the enclosing scope, not the
            // next item.
            let mut j = i + 1;
            let inner = j < to && bytes[j] == b'!';
            if inner {
                j += 1;
            }
            if j < to && bytes[j] == b'[' {
                if !inner && attr_start.is_none() {
                    attr_start = Some(i);
                }
                i = skip_delimited(bytes, j, b'[', b']', to);
                continue;
            }
            i += 1;
            continue;
        }
        if !text::is_ident_start(b) {
            // Stray token at item level; no construct starts here.
            attr_start = None;
            i += 1;
            continue;
        }

        let item_start = attr_start.take().unwrap_or(i);
        let (word, after_word) = read_ident(&src.masked, i);
        let mut cursor = after_word;
        let mut keyword = word;

        // Skip visibility and modifier prefixes to the defining keyword.
        loop {
            match keyword {
                "pub" => {
                    cursor = skip_ws(bytes, cursor, to);
                    if cursor < to && bytes[cursor] == b'(' {
                        cursor = skip_delimited(bytes, cursor, b'(', b')', to);
                    }
                }
                "unsafe" | "extern" | "async" | "default" => {
                    cursor = skip_ws(bytes, cursor, to);
                    // `extern "C"` strings are masked to spaces already.
                }
                _ => break,
            }
            cursor = skip_ws(bytes, cursor, to);
            if cursor >= to || !text::is_ident_start(bytes[cursor]) {
                keyword = "";
                break;
            }
            let (w, a) = read_ident(&src.masked, cursor);
            keyword = w;
            cursor = a;
        }

        match keyword {
            "fn" => {
                let (name, after) = next_ident(&src.masked, cursor, to);
                let body = find_at_top(bytes, after, to, b'{');
                match body {
                    Some(open) => {
                        let close = text::matching_brace(&src.masked, open).ok_or_else(|| {
                            MetadataError::ScanFailure {
                                file: file_label.to_string(),
                                line: src.line_of(open),
                            }
                        })?;
                        let sig = src.original[item_start..open].trim_end().to_string();
                        out.push(RustElement {
                            name,
                            kind: RustItemKind::Fn,
                            start_line: src.line_of(item_start),
                            end_line: src.line_of(close - 1),
                            signature: sig,
                        });
                        i = close;
                    }
                    None => {
                        // Bodyless fn (trait default elsewhere): to the `;`.
                        let semi = find_at_top(bytes, after, to, b';').unwrap_or(to);
                        out.push(RustElement {
                            name,
                            kind: RustItemKind::Fn,
                            start_line: src.line_of(item_start),
                            end_line: src.line_of(semi.min(to.saturating_sub(1))),
                            signature: src.original[item_start..semi].trim_end().to_string(),
                        });
                        i = semi + 1;
                    }
                }
            }
            "struct" | "enum" | "union" => {
                let (name, after) = next_ident(&src.masked, cursor, to);
                let kind = match keyword {
                    "struct" => RustItemKind::Struct,
                    "enum" => RustItemKind::Enum,
                    _ => RustItemKind::Union,
                };
                // Body `{...}`, tuple `(...);`, or unit `;`.
                let end = match first_of(bytes, after, to, &[b'{', b';']) {
                    Some(p) if bytes[p] == b'{' => {
                        text::matching_brace(&src.masked, p).ok_or_else(|| {
                            MetadataError::ScanFailure {
                                file: file_label.to_string(),
                                line: src.line_of(p),
                            }
                        })?
                    }
                    Some(p) => p + 1,
                    None => to,
                };
                out.push(RustElement {
                    name,
                    kind,
                    start_line: src.line_of(item_start),
                    end_line: src.line_of(end.saturating_sub(1)),
                    signature: String::new(),
                });
                i = end;
            }
            "type" => {
                let (name, after) = next_ident(&src.masked, cursor, to);
                let semi = find_at_top(bytes, after, to, b';').unwrap_or(to);
                out.push(RustElement {
                    name,
                    kind: RustItemKind::TypeAlias,
                    start_line: src.line_of(item_start),
                    end_line: src.line_of(semi.min(to.saturating_sub(1))),
                    signature: String::new(),
                });
                i = semi + 1;
            }
            "static" | "const" => {
                // `const fn` was already routed to fn by the modifier loop
                // only for `fn` keyword order; handle `const fn` here too.
                let peek = skip_ws(bytes, cursor, to);
                if peek < to && src.masked[peek..].starts_with("fn ") {
                    // Re-enter as a function: simplest is to continue the
                    // outer loop from the `fn` keyword with attrs intact.
                    attr_start = Some(item_start);
                    i = peek;
                    continue;
                }
                let skip_mut = skip_ws(bytes, cursor, to);
                let (name, after) = if src.masked[skip_mut..].starts_with("mut ") {
                    next_ident(&src.masked, skip_mut + 4, to)
                } else {
                    next_ident(&src.masked, cursor, to)
                };
                let semi = find_at_top(bytes, after, to, b';').unwrap_or(to);
                out.push(RustElement {
                    name,
                    kind: if keyword == "static" {
                        RustItemKind::Static
                    } else {
                        RustItemKind::Const
                    },
                    start_line: src.line_of(item_start),
                    end_line: src.line_of(semi.min(to.saturating_sub(1))),
                    signature: String::new(),
                });
                i = semi + 1;
            }
            "macro_rules" => {
                // macro_rules! name { ... }
                let after_bang = skip_ws(bytes, cursor, to);
                let after_bang =
                    if after_bang < to && bytes[after_bang] == b'!' { after_bang + 1 } else { after_bang };
                let (name, after) = next_ident(&src.masked, after_bang, to);
                let end = match find_at_top(bytes, after, to, b'{') {
                    Some(open) => text::matching_brace(&src.masked, open).ok_or_else(|| {
                        MetadataError::ScanFailure {
                            file: file_label.to_string(),
                            line: src.line_of(open),
                        }
                    })?,
                    None => to,
                };
                out.push(RustElement {
                    name,
                    kind: RustItemKind::MacroRules,
                    start_line: src.line_of(item_start),
                    end_line: src.line_of(end.saturating_sub(1)),
                    signature: String::new(),
                });
                i = end;
            }
            "impl" if !inside_impl => {
                let open = match find_at_top(bytes, cursor, to, b'{') {
                    Some(p) => p,
                    None => {
                        i = cursor;
                        continue;
                    }
                };
                let close = text::matching_brace(&src.masked, open).ok_or_else(|| {
                    MetadataError::ScanFailure {
                        file: file_label.to_string(),
                        line: src.line_of(open),
                    }
                })?;
                scan_items(src, file_label, open + 1, close - 1, true, out)?;
                i = close;
            }
            "trait" | "mod" | "impl" => {
                // Skip the whole body; nothing inside maps to C elements.
                match find_at_top(bytes, cursor, to, b'{') {
                    Some(open) => {
                        let close = text::matching_brace(&src.masked, open).ok_or_else(|| {
                            MetadataError::ScanFailure {
                                file: file_label.to_string(),
                                line: src.line_of(open),
                            }
                        })?;
                        i = close;
                    }
                    None => {
                        // `mod name;` — to the semicolon.
                        i = find_at_top(bytes, cursor, to, b';').map(|p| p + 1).unwrap_or(to);
                    }
                }
            }
            "use" | "crate" => {
                i = find_at_top(bytes, cursor, to, b';').map(|p| p + 1).unwrap_or(to);
            }
            _ => {
                // Something else (expression fragments in a broken file).
                // Move past the token and keep looking.
                i = cursor;
            }
        }
    }
    Ok(())
}

fn read_ident(masked: &str, at: usize) -> (&str, usize) {
    let bytes = masked.as_bytes();
    let mut j = at;
    while j < bytes.len() && text::is_ident_byte(bytes[j]) {
        j += 1;
    }
    (&masked[at..j], j)
}

/// The next identifier at or after `at`, skipping whitespace.
fn next_ident(masked: &str, at: usize, to: usize) -> (String, usize) {
    let bytes = masked.as_bytes();
    let mut i = at;
    while i < to && !text::is_ident_start(bytes[i]) {
        i += 1;
    }
    let (w, j) = read_ident(masked, i.min(to));
    (w.to_string(), j)
}

fn skip_ws(bytes: &[u8], mut i: usize, to: usize) -> usize {
    while i < to && bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

fn skip_delimited(bytes: &[u8], open: usize, open_b: u8, close_b: u8, to: usize) -> usize {
    let mut depth = 0usize;
    let mut i = open;
    while i < to {
        if bytes[i] == open_b {
            depth += 1;
        } else if bytes[i] == close_b {
            depth -= 1;
            if depth == 0 {
                return i + 1;
            }
        }
        i += 1;
    }
    to
}

/// First `target` byte at zero bracket/paren/brace depth.
fn find_at_top(bytes: &[u8], from: usize, to: usize, target: u8) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = from;
    while i < to {
        let b = bytes[i];
        if depth == 0 && b == target {
            return Some(i);
        }
        match b {
            b'(' | b'[' => depth += 1,
            b'{' if target != b'{' => depth += 1,
            b')' | b']' => depth = depth.saturating_sub(1),
            b'}' if target != b'{' => depth = depth.saturating_sub(1),
            _ => {}
        }
        i += 1;
    }
    None
}

/// First of `targets` at zero paren/bracket depth (braces are not tracked:
/// callers use this to find the byte that opens or ends the item body).
fn first_of(bytes: &[u8], from: usize, to: usize, targets: &[u8]) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = from;
    while i < to {
        let b = bytes[i];
        if depth == 0 && targets.contains(&b) {
            return Some(i);
        }
        match b {
            b'(' | b'[' => depth += 1,
            b')' | b']' => depth = depth.saturating_sub(1),
            _ => {}
        }
        i += 1;
    }
    None
}
