//! Lexical groundwork shared by the C scanner and the Rust element parser.
//!
//! Everything downstream (element spans, call edges, guard extraction,
//! identifier renames) works on a *masked* copy of the source in which
//! comments and string/char literals have been blanked out with spaces. The
//! masked text has exactly the same length and line structure as the
//! original, so byte offsets and line numbers computed on one apply to the
//! other.

/// A source file plus its masked image and per-line classification.
#[derive(Debug, Clone)]
pub struct MaskedSource {
    /// The original text, untouched.
    pub original: String,
    /// Same length as `original`; comments and literal contents are spaces.
    pub masked: String,
    /// Byte offset of the start of each line (line numbers are 1-based).
    line_starts: Vec<usize>,
    /// Per-line flags, indexed by `line - 1`.
    flags: Vec<LineFlags>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LineFlags {
    /// Only whitespace on the original line.
    pub blank: bool,
    /// Non-blank, but nothing survives masking (pure comment line).
    pub comment_only: bool,
    /// First masked non-whitespace byte is `#` (C preprocessor directive),
    /// or the line continues a directive via a trailing backslash.
    pub directive: bool,
}

impl LineFlags {
    /// Blank or comment-only: contributes no code or directives.
    pub fn is_filler(&self) -> bool {
        self.blank || self.comment_only
    }
}

enum Lang {
    C,
    Rust,
}

impl MaskedSource {
    /// Mask C source: `//` and `/* */` comments, string and char literals.
    pub fn c(text: &str) -> Self {
        Self::build(text, Lang::C)
    }

    /// Mask Rust source: nested block comments, raw strings, lifetimes.
    pub fn rust(text: &str) -> Self {
        Self::build(text, Lang::Rust)
    }

    fn build(text: &str, lang: Lang) -> Self {
        let bytes = text.as_bytes();
        let mut masked = bytes.to_vec();
        // True for every line that contained comment or literal content.
        let mut saw_comment = vec![false; text.lines().count().max(1)];
        let mut line_starts = vec![0usize];
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'\n' {
                line_starts.push(i + 1);
            }
        }
        let line_of = |offset: usize| -> usize {
            match line_starts.binary_search(&offset) {
                Ok(i) => i,
                Err(i) => i - 1,
            }
        };

        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                    // Line comment. In C a trailing backslash splices the next
                    // line into the comment; Rust has no line continuation.
                    let start = i;
                    i += 2;
                    while i < bytes.len() {
                        if bytes[i] == b'\n' {
                            let spliced = matches!(lang, Lang::C)
                                && i > start
                                && bytes[i - 1] == b'\\';
                            if !spliced {
                                break;
                            }
                        }
                        i += 1;
                    }
                    blank_range(&mut masked, start, i, &mut saw_comment, &line_of);
                }
                b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => {
                    let start = i;
                    let mut depth = 1usize;
                    i += 2;
                    while i < bytes.len() && depth > 0 {
                        if matches!(lang, Lang::Rust)
                            && bytes[i] == b'/'
                            && i + 1 < bytes.len()
                            && bytes[i + 1] == b'*'
                        {
                            depth += 1;
                            i += 2;
                        } else if bytes[i] == b'*' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
                            depth -= 1;
                            i += 2;
                        } else {
                            i += 1;
                        }
                    }
                    blank_range(&mut masked, start, i, &mut saw_comment, &line_of);
                }
                b'"' => {
                    let start = i;
                    i += 1;
                    while i < bytes.len() {
                        match bytes[i] {
                            b'\\' if i + 1 < bytes.len() => i += 2,
                            b'"' => {
                                i += 1;
                                break;
                            }
                            // A bare newline ends the literal (recovery for
                            // unterminated strings); C line splices arrive as
                            // the escape arm above.
                            b'\n' => break,
                            _ => i += 1,
                        }
                    }
                    blank_range(&mut masked, start, i, &mut saw_comment, &line_of);
                }
                b'r' | b'b' if matches!(lang, Lang::Rust) && is_raw_string_start(bytes, i) => {
                    let start = i;
                    i = skip_raw_string(bytes, i);
                    blank_range(&mut masked, start, i, &mut saw_comment, &line_of);
                }
                b'\'' => {
                    // C23 digit separators (1'000) and Rust lifetimes both put
                    // a quote in code position; neither starts a char literal.
                    let after_digit =
                        matches!(lang, Lang::C) && i > 0 && bytes[i - 1].is_ascii_alphanumeric();
                    let lifetime = matches!(lang, Lang::Rust) && !is_char_literal(bytes, i);
                    if after_digit || lifetime {
                        i += 1;
                        continue;
                    }
                    let start = i;
                    i += 1;
                    while i < bytes.len() {
                        match bytes[i] {
                            b'\\' if i + 1 < bytes.len() => i += 2,
                            b'\'' => {
                                i += 1;
                                break;
                            }
                            b'\n' => break,
                            _ => i += 1,
                        }
                    }
                    blank_range(&mut masked, start, i, &mut saw_comment, &line_of);
                }
                _ => i += 1,
            }
        }

        let masked = String::from_utf8(masked).expect("masking only writes ASCII spaces");
        let mut flags = Vec::with_capacity(line_starts.len());
        let mut in_directive = false;
        for (idx, &start) in line_starts.iter().enumerate() {
            let end = line_starts
                .get(idx + 1)
                .map(|&e| e.saturating_sub(1))
                .unwrap_or(masked.len());
            let orig_line = &text[start..end.min(text.len())];
            let masked_line = &masked[start..end.min(masked.len())];
            let blank = orig_line.trim().is_empty();
            let masked_blank = masked_line.trim().is_empty();
            let continues = in_directive;
            let starts_directive =
                matches!(lang, Lang::C) && !continues && masked_line.trim_start().starts_with('#');
            let directive = starts_directive || continues;
            in_directive = directive && masked_line.trim_end().ends_with('\\');
            flags.push(LineFlags {
                blank,
                comment_only: !blank
                    && masked_blank
                    && saw_comment.get(idx).copied().unwrap_or(false),
                directive: directive && !blank,
            });
        }

        MaskedSource {
            original: text.to_string(),
            masked,
            line_starts,
            flags,
        }
    }

    /// Number of lines (a trailing newline does not add a line).
    pub fn line_count(&self) -> usize {
        if self.original.is_empty() {
            0
        } else if self.original.ends_with('\n') {
            self.line_starts.len() - 1
        } else {
            self.line_starts.len()
        }
    }

    /// 1-based line containing the byte at `offset`.
    pub fn line_of(&self, offset: usize) -> usize {
        match self.line_starts.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }

    /// Byte offset of the start of 1-based `line`.
    pub fn line_start(&self, line: usize) -> usize {
        self.line_starts[line - 1]
    }

    /// Byte range covering 1-based lines `start..=end`, including the
    /// trailing newline of `end` when present.
    pub fn line_span(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.line_start(start);
        let hi = self
            .line_starts
            .get(end)
            .copied()
            .unwrap_or(self.original.len());
        lo..hi
    }

    /// Flags for 1-based `line`.
    pub fn flags(&self, line: usize) -> LineFlags {
        self.flags.get(line - 1).copied().unwrap_or_default()
    }

    /// Original text of 1-based lines `start..=end`.
    pub fn lines_text(&self, start: usize, end: usize) -> &str {
        &self.original[self.line_span(start, end)]
    }
}

fn blank_range(
    masked: &mut [u8],
    start: usize,
    end: usize,
    saw_comment: &mut [bool],
    line_of: &impl Fn(usize) -> usize,
) {
    for (off, b) in masked.iter_mut().enumerate().take(end).skip(start) {
        if *b != b'\n' {
            *b = b' ';
        }
        if let Some(f) = saw_comment.get_mut(line_of(off)) {
            *f = true;
        }
    }
}

fn is_raw_string_start(bytes: &[u8], i: usize) -> bool {
    // r"..."  r#"..."#  br"..."  b"..." is handled by the plain-string arm
    // only when the b is left in code, so catch b" and br" here too.
    let mut j = i;
    if bytes[j] == b'b' {
        j += 1;
    }
    if j < bytes.len() && bytes[j] == b'r' {
        j += 1;
        while j < bytes.len() && bytes[j] == b'#' {
            j += 1;
        }
        return j < bytes.len() && bytes[j] == b'"';
    }
    // Bare b"..." byte string.
    bytes[i] == b'b' && i + 1 < bytes.len() && bytes[i + 1] == b'"'
}

fn skip_raw_string(bytes: &[u8], i: usize) -> usize {
    let mut j = i;
    if bytes[j] == b'b' {
        j += 1;
    }
    let raw = j < bytes.len() && bytes[j] == b'r';
    if raw {
        j += 1;
    }
    let mut hashes = 0;
    while j < bytes.len() && bytes[j] == b'#' {
        hashes += 1;
        j += 1;
    }
    if j >= bytes.len() || bytes[j] != b'"' {
        return i + 1;
    }
    j += 1;
    while j < bytes.len() {
        if !raw && bytes[j] == b'\\' && j + 1 < bytes.len() {
            j += 2;
            continue;
        }
        if bytes[j] == b'"' {
            let mut k = j + 1;
            let mut seen = 0;
            while raw && seen < hashes && k < bytes.len() && bytes[k] == b'#' {
                seen += 1;
                k += 1;
            }
            if !raw || seen == hashes {
                return k;
            }
        }
        j += 1;
    }
    j
}

/// Does the `'` at `i` begin a char literal (vs a lifetime)?
fn is_char_literal(bytes: &[u8], i: usize) -> bool {
    match bytes.get(i + 1) {
        Some(b'\\') => true,
        Some(_) => bytes.get(i + 2) == Some(&b'\''),
        None => false,
    }
}

/// Blank only the comments of C text, leaving string and char literals in
/// place. Used where literal content matters but comments must not, e.g.
/// deciding whether a macro has a replacement value.
pub fn c_comments_blanked(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = bytes.to_vec();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    out[i] = b' ';
                    i += 1;
                }
            }
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => {
                out[i] = b' ';
                out[i + 1] = b' ';
                i += 2;
                while i < bytes.len() {
                    if bytes[i] == b'*' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
                        out[i] = b' ';
                        out[i + 1] = b' ';
                        i += 2;
                        break;
                    }
                    if bytes[i] != b'\n' {
                        out[i] = b' ';
                    }
                    i += 1;
                }
            }
            b'"' | b'\'' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() && bytes[i] != quote && bytes[i] != b'\n' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    String::from_utf8(out).expect("blanking writes ASCII")
}

pub fn is_ident_start(b: u8) -> bool {
    b == b'_' || b.is_ascii_alphabetic()
}

pub fn is_ident_byte(b: u8) -> bool {
    b == b'_' || b.is_ascii_alphanumeric()
}

/// Iterate `(offset, identifier)` pairs over masked text.
pub fn identifiers(masked: &str) -> impl Iterator<Item = (usize, &str)> {
    let bytes = masked.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if is_ident_start(bytes[i]) && (i == 0 || !is_ident_byte(bytes[i - 1])) {
                let start = i;
                while i < bytes.len() && is_ident_byte(bytes[i]) {
                    i += 1;
                }
                return Some((start, &masked[start..i]));
            }
            i += 1;
        }
        None
    })
}

/// Offset just past the `}` matching the `{` at `open` in masked text, or
/// `None` when the braces never balance.
pub fn matching_brace(masked: &str, open: usize) -> Option<usize> {
    let bytes = masked.as_bytes();
    debug_assert_eq!(bytes[open], b'{');
    let mut depth = 0usize;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        match b {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
