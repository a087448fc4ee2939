//! ABC notation parsing, normalization, and structural segmentation.
//!
//! A tune is a run of header field lines (`X:1`, `K:D`, ...) followed by a
//! body of notes and barlines. The body is segmented into sections at the six
//! two-character boundary symbols (`[|`, `||`, `|]`, `|:`, `::`, `:|`) and
//! each section into bars at single `|` delimiters. Text inside inline fields
//! (`[K:...]`) and quoted chord symbols (`"..."`) is opaque to both scans.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbcError {
    /// No `K:` field line was found before the tune body.
    #[error("no K: field line before the tune body")]
    MissingKeyField,
    /// The tune has no body content after the header.
    #[error("tune body is empty")]
    EmptyBody,
    /// A header line was malformed (not a field line or comment).
    #[error("malformed header line {line}: {text:?}")]
    MalformedHeader { line: usize, text: String },
}

/// One header information field, e.g. `K:D` has tag `K` and value `"D"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub tag: char,
    pub value: String,
}

/// A parsed tune: header fields in source order plus the normalized body.
///
/// The body keeps interior newlines but never a trailing one; [`serialize`]
/// restores the final newline, so `parse_tune(serialize(t)) == t` and the
/// serialized form is a fixed point of parse-then-serialize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbcTune {
    pub fields: Vec<Field>,
    pub body: String,
}

impl AbcTune {
    pub fn field(&self, tag: char) -> Option<&str> {
        self.fields
            .iter()
            .find(|f| f.tag == tag)
            .map(|f| f.value.as_str())
    }
}

/// The six section-boundary symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    /// `[|`
    SectionOpen,
    /// `||`
    Double,
    /// `|]`
    Final,
    /// `|:`
    RepeatOpen,
    /// `::`
    RepeatBoth,
    /// `:|`
    RepeatClose,
}

impl BoundaryKind {
    pub const ALL: [BoundaryKind; 6] = [
        BoundaryKind::SectionOpen,
        BoundaryKind::Double,
        BoundaryKind::Final,
        BoundaryKind::RepeatOpen,
        BoundaryKind::RepeatBoth,
        BoundaryKind::RepeatClose,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            BoundaryKind::SectionOpen => "[|",
            BoundaryKind::Double => "||",
            BoundaryKind::Final => "|]",
            BoundaryKind::RepeatOpen => "|:",
            BoundaryKind::RepeatBoth => "::",
            BoundaryKind::RepeatClose => ":|",
        }
    }

    pub(crate) fn at(bytes: &[u8], i: usize) -> Option<BoundaryKind> {
        if i + 1 >= bytes.len() {
            return None;
        }
        match (bytes[i], bytes[i + 1]) {
            (b'[', b'|') => Some(BoundaryKind::SectionOpen),
            (b'|', b'|') => Some(BoundaryKind::Double),
            (b'|', b']') => Some(BoundaryKind::Final),
            (b'|', b':') => Some(BoundaryKind::RepeatOpen),
            (b':', b':') => Some(BoundaryKind::RepeatBoth),
            (b':', b'|') => Some(BoundaryKind::RepeatClose),
            _ => None,
        }
    }
}

/// A boundary symbol occurrence; `offset` is the byte index of its first
/// character in the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionBoundary {
    pub kind: BoundaryKind,
    pub offset: usize,
}

/// What ended a section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    Boundary(BoundaryKind),
    EndOfBody,
}

/// A section of the body: its text (terminator excluded), its bars, and the
/// terminator itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub text: String,
    pub bars: Vec<String>,
    pub terminator: Terminator,
}

impl Section {
    fn new(text: &str, terminator: Terminator) -> Section {
        Section {
            text: text.to_string(),
            bars: split_bars(text),
            terminator,
        }
    }

    /// Bar count of this section.
    pub fn bar_count(&self) -> usize {
        self.bars.len()
    }
}

/// Structural header fields kept by default when stripping natural-language
/// fields; everything else (T:, C:, S:, N:, ...) is prose.
pub const STRUCTURAL_FIELDS: [char; 4] = ['X', 'L', 'M', 'K'];

fn is_field_line(line: &str) -> Option<(char, &str)> {
    let mut chars = line.chars();
    let tag = chars.next()?;
    if tag.is_ascii_uppercase() && chars.next() == Some(':') {
        Some((tag, &line[2..]))
    } else {
        None
    }
}

/// Parse one tune. Header fields are consumed up to and including the first
/// `K:` line; every later line belongs to the body. Comment lines (starting
/// `%`) are dropped and CRLF line endings are normalized to LF.
pub fn parse_tune(src: &str) -> Result<AbcTune, AbcError> {
    let text = src.replace("\r\n", "\n").replace('\r', "\n");
    let mut fields = Vec::new();
    let mut body_lines: Vec<&str> = Vec::new();
    let mut in_body = false;
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('%') {
            continue;
        }
        if in_body {
            body_lines.push(line);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        match is_field_line(line) {
            Some((tag, value)) => {
                fields.push(Field {
                    tag,
                    value: value.to_string(),
                });
                if tag == 'K' {
                    in_body = true;
                }
            }
            None => {
                // Tune content before any K: line means the header never closed.
                let _ = idx;
                return Err(AbcError::MissingKeyField);
            }
        }
    }
    if !in_body {
        return Err(AbcError::MissingKeyField);
    }
    let mut body = body_lines.join("\n");
    while body.ends_with('\n') {
        body.pop();
    }
    if body.trim().is_empty() {
        return Err(AbcError::EmptyBody);
    }
    Ok(AbcTune { fields, body })
}

/// Split a tunebook into chunks at blank lines; each chunk is one tune source.
pub fn split_tunebook(src: &str) -> Vec<String> {
    let text = src.replace("\r\n", "\n").replace('\r', "\n");
    let mut chunks = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.trim().is_empty() {
                chunks.push(std::mem::take(&mut current));
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Keep only the fields whose tags appear in `keep`, preserving order.
/// Removing `K:` is an error because the result could no longer parse.
pub fn strip_fields(tune: &AbcTune, keep: &[char]) -> Result<AbcTune, AbcError> {
    if !keep.contains(&'K') {
        return Err(AbcError::MissingKeyField);
    }
    Ok(AbcTune {
        fields: tune
            .fields
            .iter()
            .filter(|f| keep.contains(&f.tag))
            .cloned()
            .collect(),
        body: tune.body.clone(),
    })
}

/// Emit header fields then the body, with a final newline.
pub fn serialize(tune: &AbcTune) -> String {
    let mut out = String::new();
    for f in &tune.fields {
        out.push(f.tag);
        out.push(':');
        out.push_str(&f.value);
        out.push('\n');
    }
    out.push_str(&tune.body);
    out.push('\n');
    out
}

/// Skip an opaque span starting at `i`: a quoted string `"..."` or an inline
/// field `[K:...]`. Returns the index just past the span, or `None` if `i`
/// does not start one.
fn skip_opaque(bytes: &[u8], i: usize) -> Option<usize> {
    match bytes[i] {
        b'"' => {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j] != b'"' {
                j += 1;
            }
            Some((j + 1).min(bytes.len()))
        }
        b'[' => {
            // `[|` is a boundary, not an inline field.
            if i + 2 < bytes.len() && bytes[i + 1].is_ascii_alphabetic() && bytes[i + 2] == b':' {
                let mut j = i + 3;
                while j < bytes.len() && bytes[j] != b']' {
                    j += 1;
                }
                Some((j + 1).min(bytes.len()))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Scan the body left-to-right for boundary symbols, longest match first.
/// Matched spans never overlap; quoted strings and inline fields are opaque.
pub fn scan_boundaries(body: &str) -> Vec<SectionBoundary> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if let Some(next) = skip_opaque(bytes, i) {
            i = next;
            continue;
        }
        if let Some(kind) = BoundaryKind::at(bytes, i) {
            out.push(SectionBoundary { kind, offset: i });
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

/// Raw section spans including empty ones, for reconstruction checks.
pub(crate) fn split_sections_raw(body: &str) -> Vec<Section> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for b in scan_boundaries(body) {
        out.push(Section::new(
            &body[cursor..b.offset],
            Terminator::Boundary(b.kind),
        ));
        cursor = b.offset + 2;
    }
    let tail = &body[cursor..];
    if !tail.is_empty() {
        out.push(Section::new(tail, Terminator::EndOfBody));
    }
    out
}

/// Split the body into sections at every boundary symbol. A boundary
/// terminates the section to its left; sections with no content (consecutive
/// boundaries, a leading `|:`, or whitespace-only gaps) are dropped.
pub fn split_sections(body: &str) -> Vec<Section> {
    split_sections_raw(body)
        .into_iter()
        .filter(|s| !s.text.trim().is_empty())
        .collect()
}

/// Split section text at single `|` delimiters that are not part of a
/// two-character boundary symbol. The terminating boundary closes the final
/// bar, so trailing empty fragments are dropped (at least one bar remains for
/// non-empty input).
pub fn split_bars(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let bytes = text.as_bytes();
    let mut bars = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if let Some(next) = skip_opaque(bytes, i) {
            i = next;
            continue;
        }
        if BoundaryKind::at(bytes, i).is_some() {
            i += 2;
            continue;
        }
        if bytes[i] == b'|' {
            bars.push(text[start..i].to_string());
            start = i + 1;
        }
        i += 1;
    }
    bars.push(text[start..].to_string());
    while bars.len() > 1 && bars.last().is_some_and(|b| b.is_empty()) {
        bars.pop();
    }
    bars
}
