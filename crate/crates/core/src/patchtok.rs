//! Fixed-width bar patches over prefixed tune text.
//!
//! Segmentation units, in order: every control-code line, every header field
//! line, then each bar of the body together with its trailing delimiter or
//! boundary symbol (a final lone newline attaches to the last bar). Each unit
//! becomes one patch of exactly `patch_size` character ids, right-padded with
//! PAD, so concatenating the unit strings reproduces the input byte for byte.

use crate::abc::AbcError;
use crate::control::{self, ControlError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("segment {index} is {len} characters, over the {max} patch width")]
    Overflow { index: usize, len: usize, max: usize },
    #[error("tune needs {needed} patches, over the {max} sequence budget")]
    Truncated { needed: usize, max: usize },
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Abc(#[from] AbcError),
}

/// The fixed 99-symbol vocabulary: PAD/BOS/EOS, LF, and the 95 printable
/// ASCII characters. Ids are dense and deterministic across builds.
#[derive(Debug, Clone, Default)]
pub struct Vocab;

impl Vocab {
    pub const PAD: u16 = 0;
    pub const BOS: u16 = 1;
    pub const EOS: u16 = 2;
    const LF: u16 = 3;
    const PRINTABLE_BASE: u16 = 4;

    pub const SIZE: usize = 99;

    pub fn size(&self) -> usize {
        Vocab::SIZE
    }

    pub fn encode_char(&self, ch: char) -> Option<u16> {
        match ch {
            '\n' => Some(Vocab::LF),
            ' '..='~' => Some(Vocab::PRINTABLE_BASE + (ch as u16 - 0x20)),
            _ => None,
        }
    }

    pub fn decode_id(&self, id: u16) -> Option<char> {
        match id {
            Vocab::LF => Some('\n'),
            Vocab::PRINTABLE_BASE.. if (id as usize) < Vocab::SIZE => {
                Some((0x20 + (id - Vocab::PRINTABLE_BASE) as u8) as char)
            }
            _ => None,
        }
    }

    pub fn is_special(&self, id: u16) -> bool {
        id < Vocab::PRINTABLE_BASE && id != Vocab::LF
    }
}

/// One patch: exactly `patch_size` ids, the first `content_len` of which are
/// characters and the rest PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    ids: Vec<u16>,
    content_len: usize,
}

impl Patch {
    /// Build a content patch from character ids, right-padded to width.
    pub fn from_content(content: &[u16], width: usize) -> Patch {
        assert!(content.len() <= width, "content wider than patch");
        let mut ids = content.to_vec();
        ids.resize(width, Vocab::PAD);
        Patch {
            ids,
            content_len: content.len(),
        }
    }

    /// A BOS or EOS marker patch.
    pub fn special(id: u16, width: usize) -> Patch {
        let mut ids = vec![Vocab::PAD; width];
        ids[0] = id;
        Patch { ids, content_len: 1 }
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn content_ids(&self) -> &[u16] {
        &self.ids[..self.content_len]
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn width(&self) -> usize {
        self.ids.len()
    }

    pub fn is_bos(&self) -> bool {
        self.ids[0] == Vocab::BOS
    }

    pub fn is_eos(&self) -> bool {
        self.ids[0] == Vocab::EOS
    }
}

/// A complete encoded tune: BOS patch, content patches, EOS patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSequence {
    patches: Vec<Patch>,
}

impl PatchSequence {
    pub fn new(patches: Vec<Patch>) -> PatchSequence {
        assert!(patches.len() >= 2, "sequence needs at least BOS and EOS");
        assert!(patches[0].is_bos(), "first patch must be BOS");
        assert!(patches[patches.len() - 1].is_eos(), "last patch must be EOS");
        for p in &patches[1..patches.len() - 1] {
            assert!(
                !p.is_bos() && !p.is_eos(),
                "specials only at sequence ends"
            );
        }
        PatchSequence { patches }
    }

    /// Skip the BOS/EOS placement checks; for synthetic test sequences.
    #[cfg(test)]
    pub(crate) fn new_unchecked(patches: Vec<Patch>) -> PatchSequence {
        PatchSequence { patches }
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Converts prefixed tune text to and from patch sequences.
#[derive(Debug, Clone)]
pub struct PatchCodec {
    pub patch_size: usize,
    pub max_patches: usize,
    pub vocab: Vocab,
}

impl Default for PatchCodec {
    fn default() -> Self {
        PatchCodec::new(32, 128)
    }
}

impl PatchCodec {
    pub fn new(patch_size: usize, max_patches: usize) -> PatchCodec {
        PatchCodec {
            patch_size,
            max_patches,
            vocab: Vocab,
        }
    }

    /// Split a control prefix plus serialized tune into segmentation units.
    /// Concatenating the units reproduces the input exactly.
    pub fn segment(&self, prefixed: &str) -> Result<Vec<String>, PatchError> {
        let (_, rest) = control::parse_prefix(prefixed)?;
        let prefix = &prefixed[..prefixed.len() - rest.len()];
        let mut units: Vec<String> = Vec::new();
        for line in split_inclusive_lines(prefix) {
            units.push(line.to_string());
        }

        // Header field lines up to and including K:, then the body.
        let mut offset = 0;
        let mut saw_key = false;
        while offset < rest.len() {
            let line_end = rest[offset..]
                .find('\n')
                .map(|i| offset + i + 1)
                .unwrap_or(rest.len());
            let line = &rest[offset..line_end];
            let stripped = line.trim_end_matches('\n');
            let mut chars = stripped.chars();
            let tag = chars.next();
            let is_field = matches!(tag, Some(t) if t.is_ascii_uppercase())
                && chars.next() == Some(':');
            if !is_field {
                break;
            }
            units.push(line.to_string());
            offset = line_end;
            if tag == Some('K') {
                saw_key = true;
                break;
            }
        }
        if !saw_key {
            return Err(AbcError::MissingKeyField.into());
        }
        if offset >= rest.len() {
            return Err(AbcError::EmptyBody.into());
        }
        units.extend(segment_body(&rest[offset..]));

        for (index, unit) in units.iter().enumerate() {
            let len = unit.chars().count();
            if len > self.patch_size {
                return Err(PatchError::Overflow {
                    index,
                    len,
                    max: self.patch_size,
                });
            }
        }
        Ok(units)
    }

    fn unit_to_patch(&self, unit: &str, base_offset: usize) -> Result<Patch, PatchError> {
        let mut ids = Vec::with_capacity(self.patch_size);
        for (i, ch) in unit.chars().enumerate() {
            let id = self
                .vocab
                .encode_char(ch)
                .ok_or(PatchError::UnknownChar {
                    ch,
                    offset: base_offset + i,
                })?;
            ids.push(id);
        }
        Ok(Patch::from_content(&ids, self.patch_size))
    }

    /// Encode prefixed text as BOS + unit patches + EOS.
    pub fn encode(&self, prefixed: &str) -> Result<PatchSequence, PatchError> {
        let units = self.segment(prefixed)?;
        let needed = units.len() + 2;
        if needed > self.max_patches {
            return Err(PatchError::Truncated {
                needed,
                max: self.max_patches,
            });
        }
        let mut patches = Vec::with_capacity(needed);
        patches.push(Patch::special(Vocab::BOS, self.patch_size));
        let mut offset = 0;
        for unit in &units {
            patches.push(self.unit_to_patch(unit, offset)?);
            offset += unit.chars().count();
        }
        patches.push(Patch::special(Vocab::EOS, self.patch_size));
        Ok(PatchSequence::new(patches))
    }

    /// Strip specials and padding, concatenate patch contents.
    pub fn decode_patches(&self, patches: &[Patch]) -> String {
        let mut out = String::new();
        for p in patches {
            if p.is_bos() || p.is_eos() {
                continue;
            }
            for &id in p.content_ids() {
                if let Some(ch) = self.vocab.decode_id(id) {
                    out.push(ch);
                }
            }
        }
        out
    }

    pub fn decode(&self, seq: &PatchSequence) -> String {
        self.decode_patches(seq.patches())
    }
}

fn split_inclusive_lines(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < text.len() {
        let end = text[offset..]
            .find('\n')
            .map(|i| offset + i + 1)
            .unwrap_or(text.len());
        out.push(&text[offset..end]);
        offset = end;
    }
    out
}

/// Cut body text after every bar delimiter; a trailing lone newline joins the
/// final unit. Quoted strings and inline fields are opaque, matching the
/// boundary scanner.
pub(crate) fn segment_body(body: &str) -> Vec<String> {
    let bytes = body.as_bytes();
    let mut units = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        // Reuse the scanner's opacity rules via a local check.
        match bytes[i] {
            b'"' => {
                let mut j = i + 1;
                while j < bytes.len() && bytes[j] != b'"' {
                    j += 1;
                }
                i = (j + 1).min(bytes.len());
                continue;
            }
            b'[' if i + 2 < bytes.len()
                && bytes[i + 1].is_ascii_alphabetic()
                && bytes[i + 2] == b':' =>
            {
                let mut j = i + 3;
                while j < bytes.len() && bytes[j] != b']' {
                    j += 1;
                }
                i = (j + 1).min(bytes.len());
                continue;
            }
            _ => {}
        }
        if crate::abc::BoundaryKind::at(bytes, i).is_some() {
            i += 2;
            units.push(body[start..i].to_string());
            start = i;
        } else if bytes[i] == b'|' {
            i += 1;
            units.push(body[start..i].to_string());
            start = i;
        } else {
            i += 1;
        }
    }
    let tail = &body[start..];
    if !tail.is_empty() {
        if tail == "\n" && !units.is_empty() {
            units.last_mut().unwrap().push('\n');
        } else {
            units.push(tail.to_string());
        }
    }
    units
}
