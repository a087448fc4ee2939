//! S/B/E control codes describing a tune's musical form.
//!
//! `S:` counts sections, `B:` counts bars per section, and `E:` grades the
//! similarity of a section against each earlier one on an 11-level scale
//! derived from edit distance: `eds(c, p) = 1 - lev(c, p) / max(|c|, |p|)`.
//! Codes are serialized as one `TAG:<int>` line each, section by section, so
//! a prefix can be decoded left-to-right in generation order.

use crate::abc::{split_sections, AbcTune};
use crate::tensor::Scalar;
use thiserror::Error;

pub const MAX_SECTIONS: usize = 8;
pub const MAX_BARS: usize = 32;
pub const MAX_SIMILARITY_LEVEL: u8 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("musical form out of range: {0}")]
    FormOutOfRange(String),
    #[error("similarity value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("malformed control prefix at line {line}: {reason}")]
    MalformedPrefix { line: usize, reason: String },
    #[error("inconsistent control counts at line {line}: {reason}")]
    InconsistentCounts { line: usize, reason: String },
}

/// Codes for one section: its bar count and the similarity level against
/// each earlier section in ascending order (the k-th section carries k-1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionCodes {
    pub bars: u8,
    pub similarity: Vec<u8>,
}

/// The full form descriptor of a tune; the section count is the length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlCodes {
    pub sections: Vec<SectionCodes>,
}

impl ControlCodes {
    pub fn section_count(&self) -> usize {
        self.sections.len()
    }

    /// Check every range and count invariant.
    pub fn validate(&self) -> Result<(), ControlError> {
        let s = self.sections.len();
        if s < 1 || s > MAX_SECTIONS {
            return Err(ControlError::FormOutOfRange(format!(
                "section count {s} outside 1..={MAX_SECTIONS}"
            )));
        }
        for (k, sec) in self.sections.iter().enumerate() {
            if sec.bars < 1 || sec.bars as usize > MAX_BARS {
                return Err(ControlError::FormOutOfRange(format!(
                    "section {} has {} bars, outside 1..={MAX_BARS}",
                    k + 1,
                    sec.bars
                )));
            }
            if sec.similarity.len() != k {
                return Err(ControlError::FormOutOfRange(format!(
                    "section {} carries {} similarity codes, expected {}",
                    k + 1,
                    sec.similarity.len(),
                    k
                )));
            }
            if let Some(&e) = sec.similarity.iter().find(|&&e| e > MAX_SIMILARITY_LEVEL) {
                return Err(ControlError::FormOutOfRange(format!(
                    "similarity level {e} outside 0..={MAX_SIMILARITY_LEVEL}"
                )));
            }
        }
        Ok(())
    }
}

/// Minimum number of single-character insertions, deletions, and
/// substitutions transforming `a` into `b`. Two-row dynamic programming.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1)
                .min(row[j] + 1)
                .min(diag + if ca == cb { 0 } else { 1 });
            diag = up;
        }
    }
    row[b.len()]
}

/// Edit-distance similarity `1 - lev(c, p) / max(|c|, |p|)` in [0, 1].
/// Two empty strings are defined as identical (similarity one).
pub fn eds<S: Scalar>(c: &str, p: &str) -> S {
    let lc = c.chars().count();
    let lp = p.chars().count();
    if lc == 0 && lp == 0 {
        log::warn!("eds of two empty sections defined as 1");
        return S::one();
    }
    let lev = levenshtein(c, p);
    S::one() - S::from_usize(lev).unwrap() / S::from_usize(lc.max(lp)).unwrap()
}

/// Map a similarity in [0, 1] to one of the 11 levels 0..=10, rounding half
/// up. Values outside the range by more than 1e-9 are rejected; a matching
/// epsilon keeps exact halves (e.g. 11/20) from rounding down after the
/// float division.
pub fn discretize_eds<S: Scalar>(x: S) -> Result<u8, ControlError> {
    let v = x.to_f64().unwrap_or(f64::NAN);
    if !(-1e-9..=1.0 + 1e-9).contains(&v) {
        return Err(ControlError::OutOfRange(v));
    }
    let v = v.clamp(0.0, 1.0);
    Ok((10.0 * v + 0.5 + 1e-9).floor() as u8)
}

/// Extract the S/B/E codes of a parsed tune. Tunes whose form falls outside
/// the 1..=8 section or 1..=32 bar ranges are rejected.
pub fn extract_control_codes(tune: &AbcTune) -> Result<ControlCodes, ControlError> {
    let sections = split_sections(&tune.body);
    if sections.is_empty() {
        return Err(ControlError::FormOutOfRange("body has no sections".into()));
    }
    if sections.len() > MAX_SECTIONS {
        return Err(ControlError::FormOutOfRange(format!(
            "section count {} outside 1..={MAX_SECTIONS}",
            sections.len()
        )));
    }
    let mut out = Vec::with_capacity(sections.len());
    for (k, sec) in sections.iter().enumerate() {
        let bars = sec.bar_count();
        if bars < 1 || bars > MAX_BARS {
            return Err(ControlError::FormOutOfRange(format!(
                "section {} has {bars} bars, outside 1..={MAX_BARS}",
                k + 1
            )));
        }
        let similarity = sections[..k]
            .iter()
            .map(|prev| discretize_eds(eds::<f64>(&sec.text, &prev.text)))
            .collect::<Result<Vec<u8>, _>>()?;
        out.push(SectionCodes {
            bars: bars as u8,
            similarity,
        });
    }
    let codes = ControlCodes { sections: out };
    codes.validate()?;
    Ok(codes)
}

/// Serialize codes as LF-terminated lines: `S:<s>`, then per section its
/// `B:<b>` line followed by that section's `E:` lines.
pub fn render_prefix(codes: &ControlCodes) -> String {
    let mut out = format!("S:{}\n", codes.sections.len());
    for sec in &codes.sections {
        out.push_str(&format!("B:{}\n", sec.bars));
        for &e in &sec.similarity {
            out.push_str(&format!("E:{e}\n"));
        }
    }
    out
}

fn code_value(line: &str, tag: char, lineno: usize) -> Result<u32, ControlError> {
    let rest = line
        .strip_prefix(tag)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| ControlError::MalformedPrefix {
            line: lineno,
            reason: format!("expected {tag}:<int>, got {line:?}"),
        })?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ControlError::MalformedPrefix {
            line: lineno,
            reason: format!("expected {tag}:<int>, got {line:?}"),
        });
    }
    rest.parse().map_err(|_| ControlError::MalformedPrefix {
        line: lineno,
        reason: format!("value out of range in {line:?}"),
    })
}

fn looks_like_code(line: &str, tag: char) -> bool {
    line.strip_prefix(tag)
        .and_then(|r| r.strip_prefix(':'))
        .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

/// Parse a control prefix from the start of `text`, returning the codes and
/// the remainder beginning at the first non-code line.
pub fn parse_prefix(text: &str) -> Result<(ControlCodes, &str), ControlError> {
    let mut offset = 0;
    let mut lineno = 0;
    let next_line = |off: &mut usize, n: &mut usize| -> Option<&str> {
        if *off >= text.len() {
            return None;
        }
        let rest = &text[*off..];
        let end = rest.find('\n').map(|i| i + 1).unwrap_or(rest.len());
        let line = rest[..end].trim_end_matches('\n');
        *off += end;
        *n += 1;
        Some(line)
    };

    let first = next_line(&mut offset, &mut lineno).ok_or(ControlError::MalformedPrefix {
        line: 1,
        reason: "empty input, expected S:<int>".into(),
    })?;
    let s = code_value(first, 'S', lineno)? as usize;
    if s < 1 || s > MAX_SECTIONS {
        return Err(ControlError::MalformedPrefix {
            line: lineno,
            reason: format!("section count {s} outside 1..={MAX_SECTIONS}"),
        });
    }

    let mut sections = Vec::with_capacity(s);
    for k in 0..s {
        let line = next_line(&mut offset, &mut lineno).ok_or_else(|| {
            ControlError::InconsistentCounts {
                line: lineno + 1,
                reason: format!("S:{s} declared but only {k} B: lines present"),
            }
        })?;
        if looks_like_code(line, 'E') {
            return Err(ControlError::InconsistentCounts {
                line: lineno,
                reason: format!("expected B: line for section {}, got E: line", k + 1),
            });
        }
        let bars = code_value(line, 'B', lineno)?;
        if bars < 1 || bars as usize > MAX_BARS {
            return Err(ControlError::MalformedPrefix {
                line: lineno,
                reason: format!("bar count {bars} outside 1..={MAX_BARS}"),
            });
        }
        let mut similarity = Vec::with_capacity(k);
        for j in 0..k {
            let line = next_line(&mut offset, &mut lineno).ok_or_else(|| {
                ControlError::InconsistentCounts {
                    line: lineno + 1,
                    reason: format!("section {} needs {k} E: lines, got {j}", k + 1),
                }
            })?;
            if looks_like_code(line, 'B') {
                return Err(ControlError::InconsistentCounts {
                    line: lineno,
                    reason: format!("section {} needs {k} E: lines, got {j}", k + 1),
                });
            }
            let e = code_value(line, 'E', lineno)?;
            if e > MAX_SIMILARITY_LEVEL as u32 {
                return Err(ControlError::MalformedPrefix {
                    line: lineno,
                    reason: format!("similarity level {e} outside 0..={MAX_SIMILARITY_LEVEL}"),
                });
            }
            similarity.push(e as u8);
        }
        sections.push(SectionCodes {
            bars: bars as u8,
            similarity,
        });
    }

    // A stray B:/E: code right after a complete prefix means the counts lied.
    let rest = &text[offset..];
    let peek = rest.split('\n').next().unwrap_or("");
    if looks_like_code(peek, 'B') || looks_like_code(peek, 'E') {
        return Err(ControlError::InconsistentCounts {
            line: lineno + 1,
            reason: format!("unexpected {peek:?} after {s} complete sections"),
        });
    }

    let codes = ControlCodes { sections };
    codes.validate().map_err(|e| ControlError::MalformedPrefix {
        line: lineno,
        reason: e.to_string(),
    })?;
    Ok((codes, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::parse_tune;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-table dynamic-programming oracle, independent of the two-row
    /// implementation above.
    pub(crate) fn lev_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in table.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            table[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                table[i][j] = (table[i - 1][j] + 1)
                    .min(table[i][j - 1] + 1)
                    .min(table[i - 1][j - 1] + sub);
            }
        }
        table[a.len()][b.len()]
    }

    pub(crate) fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
        let alphabet: Vec<char> = "abcdefg|:ABCDEFG,'2 ".chars().collect();
        let n = rng.gen_range(0..=max_len);
        (0..n)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", ""), 3);
        for x in ["", "a", "tune", "abc|def"] {
            assert_eq!(levenshtein(x, x), 0);
        }
        // kitten -> sitting: computed with the full DP table oracle.
        assert_eq!(lev_oracle("kitten", "sitting"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn levenshtein_matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let a = random_string(&mut rng, 24);
            let b = random_string(&mut rng, 24);
            assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn levenshtein_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let a = random_string(&mut rng, 12);
            let b = random_string(&mut rng, 12);
            let c = random_string(&mut rng, 12);
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }

    #[test]
    fn eds_examples() {
        assert_eq!(eds::<f64>("abc", "abc"), 1.0);
        // lev("abc","xyz") = 3 by oracle; max = 3.
        assert_eq!(lev_oracle("abc", "xyz"), 3);
        assert_eq!(eds::<f64>("abc", "xyz"), 0.0);
        // lev("abcd","abc") = 1 by oracle; max = 4.
        assert_eq!(lev_oracle("abcd", "abc"), 1);
        assert_eq!(eds::<f64>("abcd", "abc"), 0.75);
        assert_eq!(eds::<f64>("", ""), 1.0);
    }

    #[test]
    fn eds_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = random_string(&mut rng, 16);
            let b = random_string(&mut rng, 16);
            let ab = eds::<f64>(&a, &b);
            let ba = eds::<f64>(&b, &a);
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn discretize_endpoints_and_rounding() {
        assert_eq!(discretize_eds(0.0f64).unwrap(), 0);
        assert_eq!(discretize_eds(1.0f64).unwrap(), 10);
        // eds(kitten, sitting) = 1 - 3/7 = 0.5714..., rounds to 6.
        let x = eds::<f64>("kitten", "sitting");
        assert!((x - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        assert_eq!(discretize_eds(x).unwrap(), 6);
        // Half values round up.
        assert_eq!(discretize_eds(0.55f64).unwrap(), 6);
        assert_eq!(discretize_eds(0.05f64).unwrap(), 1);
        assert_eq!(discretize_eds(0.04f64).unwrap(), 0);
    }

    #[test]
    fn discretize_rejects_out_of_range() {
        assert!(matches!(
            discretize_eds(1.01f64),
            Err(ControlError::OutOfRange(_))
        ));
        assert!(matches!(
            discretize_eds(-0.01f64),
            Err(ControlError::OutOfRange(_))
        ));
        // Within the 1e-9 tolerance values are clamped.
        assert_eq!(discretize_eds(1.0f64 + 5e-10).unwrap(), 10);
    }

    #[test]
    fn extract_identical_sections() {
        let tune = parse_tune("X:1\nK:C\n|:abc|def:|abc|def|]").unwrap();
        let codes = extract_control_codes(&tune).unwrap();
        assert_eq!(codes.section_count(), 2);
        assert_eq!(codes.sections[0].bars, 2);
        assert_eq!(codes.sections[0].similarity, Vec::<u8>::new());
        assert_eq!(codes.sections[1].bars, 2);
        assert_eq!(codes.sections[1].similarity, vec![10]);
    }

    #[test]
    fn extract_single_bar_tune() {
        let tune = parse_tune("X:1\nK:C\nabc|").unwrap();
        let codes = extract_control_codes(&tune).unwrap();
        assert_eq!(codes.section_count(), 1);
        assert_eq!(codes.sections[0].bars, 1);
        assert!(codes.sections[0].similarity.is_empty());
    }

    #[test]
    fn extract_rejects_out_of_range_forms() {
        let body = (0..9).map(|_| "a|b|]").collect::<String>();
        let tune = parse_tune(&format!("X:1\nK:C\n{body}")).unwrap();
        assert!(matches!(
            extract_control_codes(&tune),
            Err(ControlError::FormOutOfRange(_))
        ));
        let wide = vec!["a"; 33].join("|");
        let tune = parse_tune(&format!("X:1\nK:C\n{wide}|]")).unwrap();
        assert!(matches!(
            extract_control_codes(&tune),
            Err(ControlError::FormOutOfRange(_))
        ));
    }

    #[test]
    fn render_single_section() {
        let codes = ControlCodes {
            sections: vec![SectionCodes { bars: 4, similarity: vec![] }],
        };
        assert_eq!(render_prefix(&codes), "S:1\nB:4\n");
    }

    #[test]
    fn render_two_sections_with_similarity() {
        let tune = parse_tune("X:1\nK:C\n|:abc|def:|abc|def|]").unwrap();
        let codes = extract_control_codes(&tune).unwrap();
        assert_eq!(render_prefix(&codes), "S:2\nB:2\nB:2\nE:10\n");
    }

    pub(crate) fn random_codes(rng: &mut ChaCha8Rng) -> ControlCodes {
        let s = rng.gen_range(1..=MAX_SECTIONS);
        let sections = (0..s)
            .map(|k| SectionCodes {
                bars: rng.gen_range(1..=MAX_BARS) as u8,
                similarity: (0..k)
                    .map(|_| rng.gen_range(0..=MAX_SIMILARITY_LEVEL))
                    .collect(),
            })
            .collect();
        ControlCodes { sections }
    }

    #[test]
    fn prefix_round_trip_on_random_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let codes = random_codes(&mut rng);
            let rendered = render_prefix(&codes);
            let (parsed, rest) = parse_prefix(&rendered).unwrap();
            assert_eq!(parsed, codes);
            assert_eq!(rest, "");
        }
    }

    #[test]
    fn parse_prefix_returns_remainder() {
        let (codes, rest) = parse_prefix("S:1\nB:4\nX:1\nK:C\nabc|\n").unwrap();
        assert_eq!(codes.sections.len(), 1);
        assert_eq!(rest, "X:1\nK:C\nabc|\n");
    }

    #[test]
    fn parse_prefix_errors_carry_line_numbers() {
        match parse_prefix("S:1\nB:zap\n") {
            Err(ControlError::MalformedPrefix { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed prefix, got {other:?}"),
        }
        match parse_prefix("B:4\n") {
            Err(ControlError::MalformedPrefix { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed prefix, got {other:?}"),
        }
    }

    #[test]
    fn parse_prefix_detects_inconsistent_counts() {
        // Section 2 must carry one E: line before any further B: line.
        assert!(matches!(
            parse_prefix("S:2\nB:4\nB:4\nB:4\n"),
            Err(ControlError::InconsistentCounts { .. })
        ));
        // An E: line where a B: line is due.
        assert!(matches!(
            parse_prefix("S:2\nB:4\nE:3\nB:4\n"),
            Err(ControlError::InconsistentCounts { .. })
        ));
        // Declared two sections, prefix ends after one.
        assert!(matches!(
            parse_prefix("S:2\nB:4\n"),
            Err(ControlError::InconsistentCounts { .. })
        ));
        // Stray E: after a complete prefix.
        assert!(matches!(
            parse_prefix("S:1\nB:4\nE:9\n"),
            Err(ControlError::InconsistentCounts { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn prop_levenshtein_matches_oracle(a in "[a-g|:A-G ]{0,20}", b in "[a-g|:A-G ]{0,20}") {
            proptest::prop_assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b));
        }

        #[test]
        fn prop_eds_symmetric_and_bounded(a in "[a-g|:A-G ]{0,24}", b in "[a-g|:A-G ]{0,24}") {
            let ab = eds::<f64>(&a, &b);
            proptest::prop_assert_eq!(ab, eds::<f64>(&b, &a));
            proptest::prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn self_similarity_of_extracted_codes_is_exact() {
        let sources = [
            "X:1\nK:C\n|:abc|def:|abc|def|]",
            "X:2\nK:D\nab|cd|ef|]",
            "X:3\nK:G\n|:a|b:|c|d||e|f|]",
        ];
        for src in sources {
            let tune = parse_tune(src).unwrap();
            let codes = extract_control_codes(&tune).unwrap();
            let a = render_prefix(&codes);
            assert_eq!(eds::<f64>(&a, &a), 1.0);
        }
    }
}
