//! Patch-by-patch autoregressive sampling under user-supplied control codes.
//!
//! A prompt is a control prefix plus optional header lines and opening bars.
//! Sampling loops: take the feature of the last patch, draw characters from
//! the temperature/top-p filtered distribution until the PAD stop or the
//! patch fills, append the patch, and halt on an EOS draw at a patch start,
//! the patch budget, or the sequence cap. The prompt is reproduced verbatim
//! at the head of the output.

use crate::abc;
use crate::control::{self, ControlCodes, ControlError};
use crate::model::{DualDecoderModel, ModelError};
use crate::patchtok::{Patch, PatchCodec, PatchError, Vocab};
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

#[derive(Debug, Clone)]
pub struct SampleOpts {
    /// Softmax temperature; zero means greedy argmax decoding.
    pub temperature: f64,
    /// Nucleus mass in (0, 1].
    pub top_p: f64,
    /// Maximum patches to generate beyond the prompt.
    pub max_patches: usize,
    pub seed: u64,
    /// Benchmark mode: mask PAD and EOS so every patch fills to exactly P
    /// characters and generation runs to the budget.
    pub forbid_stop: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts {
            temperature: 1.0,
            top_p: 0.95,
            max_patches: 128,
            seed: 0,
            forbid_stop: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    /// Prompt text followed by the generated continuation.
    pub text: String,
    /// Characters emitted after the prompt (specials excluded).
    pub generated_chars: usize,
    pub patches_generated: usize,
    /// True when generation stopped on a budget rather than an EOS draw.
    pub budget_exhausted: bool,
    pub seed: u64,
}

/// Split the tune part of a prompt into complete patch units plus an
/// optional unfinished tail that the sampler continues in place.
fn segment_prompt_tune(rest: &str) -> Result<(Vec<String>, Option<String>), GenError> {
    let mut units = Vec::new();
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
        let is_field = matches!(chars.next(), Some(t) if t.is_ascii_uppercase())
            && chars.next() == Some(':');
        if !is_field {
            break;
        }
        if !line.ends_with('\n') {
            // Header line still being typed: continue it in-patch.
            return Ok((units, Some(line.to_string())));
        }
        units.push(line.to_string());
        offset = line_end;
        if stripped.starts_with("K:") {
            saw_key = true;
            break;
        }
    }
    let body = &rest[offset..];
    if body.is_empty() {
        return Ok((units, None));
    }
    if !saw_key {
        return Err(GenError::InvalidPrompt(
            "tune content before any K: line".into(),
        ));
    }
    let mut bars = crate::patchtok::segment_body(body);
    let mut tail = None;
    if let Some(last) = bars.last() {
        let complete = last.ends_with('\n')
            || last.ends_with('|')
            || last.ends_with(']')
            || last.ends_with(':');
        if !complete {
            tail = bars.pop();
        }
    }
    units.extend(bars);
    Ok((units, tail))
}

fn encode_units(
    codec: &PatchCodec,
    units: &[String],
) -> Result<Vec<Patch>, GenError> {
    let mut patches = vec![Patch::special(Vocab::BOS, codec.patch_size)];
    for (index, unit) in units.iter().enumerate() {
        let len = unit.chars().count();
        if len > codec.patch_size {
            return Err(PatchError::Overflow {
                index,
                len,
                max: codec.patch_size,
            }
            .into());
        }
        let ids = text_to_ids(codec, unit)?;
        patches.push(Patch::from_content(&ids, codec.patch_size));
    }
    Ok(patches)
}

fn text_to_ids(codec: &PatchCodec, text: &str) -> Result<Vec<u16>, GenError> {
    text.chars()
        .enumerate()
        .map(|(offset, ch)| {
            codec
                .vocab
                .encode_char(ch)
                .ok_or_else(|| PatchError::UnknownChar { ch, offset }.into())
        })
        .collect()
}

/// Sample a continuation of `prompt_text` from the model. Deterministic for a
/// given seed; the returned text always starts with the prompt verbatim.
pub fn sample<S: Scalar>(
    model: &DualDecoderModel<S>,
    codec: &PatchCodec,
    prompt_text: &str,
    opts: &SampleOpts,
) -> Result<GenOutput, GenError> {
    let (_, rest) =
        control::parse_prefix(prompt_text).map_err(|e| GenError::InvalidPrompt(e.to_string()))?;
    let prefix = &prompt_text[..prompt_text.len() - rest.len()];
    let mut units: Vec<String> = Vec::new();
    let mut off = 0;
    while off < prefix.len() {
        let end = prefix[off..]
            .find('\n')
            .map(|i| off + i + 1)
            .unwrap_or(prefix.len());
        units.push(prefix[off..end].to_string());
        off = end;
    }
    let (tune_units, partial) = segment_prompt_tune(rest)?;
    units.extend(tune_units);

    let mut seq = encode_units(codec, &units)?;
    let mut pending: Vec<u16> = match &partial {
        Some(tail) => text_to_ids(codec, tail)?,
        None => Vec::new(),
    };
    if seq.len() >= codec.max_patches {
        return Err(GenError::InvalidPrompt(format!(
            "prompt alone uses {} of {} patches",
            seq.len(),
            codec.max_patches
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut text = prompt_text.to_string();
    let mut generated_chars = 0usize;
    let mut patches_generated = 0usize;
    let mut budget_exhausted = false;

    'outer: loop {
        // The EOS halt consumes no patch slot, so a full-but-for-EOS sequence
        // still gets one more draw.
        if patches_generated >= opts.max_patches || seq.len() >= codec.max_patches {
            budget_exhausted = true;
            break;
        }
        let feats = model.patch_features(&seq)?;
        let feature = feats.row(seq.len() - 1).map_err(ModelError::from)?;
        let mut chars = std::mem::take(&mut pending);
        // Characters carried over from an unfinished prompt bar are already
        // part of the prompt text; only the newly drawn ones count as output.
        let preset = chars.len();
        let mut eos = false;
        while chars.len() < codec.patch_size {
            let logits = model.char_forward(&feature, &chars)?;
            let last = logits.shape()[0] - 1;
            let row: Vec<f64> = logits.with_data(|d| {
                d[last * model.config.vocab_size..(last + 1) * model.config.vocab_size]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect()
            });
            let mut banned = vec![Vocab::BOS];
            if opts.forbid_stop {
                banned.push(Vocab::PAD);
                banned.push(Vocab::EOS);
            } else if !chars.is_empty() {
                // EOS is only legal as the very first draw of a patch.
                banned.push(Vocab::EOS);
            }
            let id = draw(&row, &banned, opts, &mut rng);
            if id == Vocab::EOS {
                eos = true;
                break;
            }
            if id == Vocab::PAD {
                break;
            }
            chars.push(id);
        }
        if eos && chars.is_empty() {
            break 'outer;
        }
        for &id in &chars[preset..] {
            if let Some(ch) = codec.vocab.decode_id(id) {
                text.push(ch);
            }
        }
        generated_chars += chars.len() - preset;
        seq.push(Patch::from_content(&chars, codec.patch_size));
        patches_generated += 1;
        if eos {
            break;
        }
    }

    debug_assert!(text.starts_with(prompt_text));
    Ok(GenOutput {
        text,
        generated_chars,
        patches_generated,
        budget_exhausted,
        seed: opts.seed,
    })
}

/// Temperature/top-p draw over a logit row with some ids masked out.
pub(crate) fn draw(
    logits: &[f64],
    banned: &[u16],
    opts: &SampleOpts,
    rng: &mut ChaCha8Rng,
) -> u16 {
    let mut masked = logits.to_vec();
    for &b in banned {
        masked[b as usize] = f64::NEG_INFINITY;
    }
    if opts.temperature <= 0.0 {
        // Greedy: lowest index wins ties.
        let mut best = 0usize;
        for (i, &v) in masked.iter().enumerate() {
            if v > masked[best] {
                best = i;
            }
        }
        return best as u16;
    }
    let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = masked
        .iter()
        .map(|&v| ((v - max) / opts.temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let kept = nucleus_filter(&probs, opts.top_p);
    sample_index(&kept, rng) as u16
}

/// Keep the minimal prefix of the probability-sorted distribution whose
/// cumulative mass reaches `p`, renormalized. Ties sort by index so the
/// result is deterministic.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        kept.push((i, probs[i]));
        cum += probs[i];
        if cum >= p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|(_, q)| q).sum();
    for (_, q) in &mut kept {
        *q /= total;
    }
    kept
}

/// Inverse-CDF draw over a (sparse) renormalized distribution.
pub(crate) fn sample_index(kept: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(i, q) in kept {
        cum += q;
        if u < cum {
            return i;
        }
    }
    kept.last().map(|&(i, _)| i).unwrap_or(0)
}

// ---- form checking -----------------------------------------------------------

/// One requested-vs-extracted code mismatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeDelta {
    /// Code label: `S`, `B[k]`, or `E[k.j]` (1-based section indices).
    pub code: String,
    pub requested: Option<u32>,
    pub generated: Option<u32>,
}

/// Requested-vs-extracted comparison for one generation.
#[derive(Debug, Clone)]
pub struct FormDiff {
    pub matches: bool,
    /// Edit-distance similarity of the two rendered prefixes; zero when the
    /// generation does not parse at all.
    pub similarity: f64,
    pub deltas: Vec<CodeDelta>,
    pub extracted: Option<ControlCodes>,
}

fn extract_from_generated(generated: &str) -> Result<ControlCodes, String> {
    let (_, rest) = control::parse_prefix(generated).map_err(|e| e.to_string())?;
    let tune = abc::parse_tune(rest).map_err(|e| e.to_string())?;
    control::extract_control_codes(&tune).map_err(|e: ControlError| e.to_string())
}

fn structured_deltas(requested: &ControlCodes, extracted: &ControlCodes) -> Vec<CodeDelta> {
    let mut deltas = Vec::new();
    let (rs, es) = (requested.section_count(), extracted.section_count());
    if rs != es {
        deltas.push(CodeDelta {
            code: "S".into(),
            requested: Some(rs as u32),
            generated: Some(es as u32),
        });
    }
    let sections = rs.max(es);
    for k in 0..sections {
        let r = requested.sections.get(k);
        let e = extracted.sections.get(k);
        let rb = r.map(|s| s.bars as u32);
        let eb = e.map(|s| s.bars as u32);
        if rb != eb {
            deltas.push(CodeDelta {
                code: format!("B[{}]", k + 1),
                requested: rb,
                generated: eb,
            });
        }
        for j in 0..k {
            let re = r.and_then(|s| s.similarity.get(j)).map(|&v| v as u32);
            let ee = e.and_then(|s| s.similarity.get(j)).map(|&v| v as u32);
            if re != ee {
                deltas.push(CodeDelta {
                    code: format!("E[{}.{}]", k + 1, j + 1),
                    requested: re,
                    generated: ee,
                });
            }
        }
    }
    deltas
}

/// Re-extract the control codes of a generated tune and compare with the
/// request. Unparseable generations score zero rather than erroring.
pub fn check_form(generated: &str, requested: &ControlCodes) -> FormDiff {
    match extract_from_generated(generated) {
        Ok(extracted) => {
            let similarity = control::eds::<f64>(
                &control::render_prefix(requested),
                &control::render_prefix(&extracted),
            );
            let deltas = structured_deltas(requested, &extracted);
            FormDiff {
                matches: deltas.is_empty(),
                similarity,
                deltas,
                extracted: Some(extracted),
            }
        }
        Err(reason) => FormDiff {
            matches: false,
            similarity: 0.0,
            deltas: vec![CodeDelta {
                code: format!("unparseable: {reason}"),
                requested: None,
                generated: None,
            }],
            extracted: None,
        },
    }
}
