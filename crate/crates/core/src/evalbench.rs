//! Objective evaluation: generation efficiency (tokens per second),
//! controllability (edit-distance similarity of requested vs extracted
//! control codes), and attention-cost accounting against a flat
//! character-level decoder with matched parameter count.
//!
//! Absolute throughput depends on the machine and is only ever reported;
//! acceptance gates compare dual/flat ratios measured back to back.

use crate::control::{self, ControlCodes};
use crate::generate::{self, check_form, draw, GenError, GenOutput, SampleOpts};
use crate::model::{
    attention_cost_units, attn_counter_read, attn_counter_reset, normal_vec, AttnScope, Block,
    DualDecoderModel, ModelConfig, ModelError,
};
use crate::patchtok::{Patch, PatchCodec, PatchSequence, Vocab};
use crate::tensor::{ParamSet, Scalar, Tensor};
use crate::trainer::CorpusRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample: nothing to evaluate")]
    EmptySample,
    #[error("no flat configuration within {tolerance}% of {target} parameters (best {best})")]
    ConfigInfeasible {
        target: usize,
        best: usize,
        tolerance: f64,
    },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that can turn a prompt into a tune, for benchmarking.
pub trait Generator {
    fn label(&self) -> &str;
    fn generate(&self, prompt: &str, opts: &SampleOpts) -> Result<GenOutput, GenError>;
}

/// The dual-decoder model paired with its codec.
pub struct DualGenerator<'a, S: Scalar> {
    pub model: &'a DualDecoderModel<S>,
    pub codec: PatchCodec,
}

impl<'a, S: Scalar> DualGenerator<'a, S> {
    pub fn new(model: &'a DualDecoderModel<S>) -> DualGenerator<'a, S> {
        let codec = PatchCodec::new(model.config.patch_size, model.config.max_patches());
        DualGenerator { model, codec }
    }
}

impl<S: Scalar> Generator for DualGenerator<'_, S> {
    fn label(&self) -> &str {
        "dual"
    }

    fn generate(&self, prompt: &str, opts: &SampleOpts) -> Result<GenOutput, GenError> {
        generate::sample(self.model, &self.codec, prompt, opts)
    }
}

// ---- flat character-level baseline ----------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatConfig {
    pub max_len: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl FlatConfig {
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let v = self.vocab_size;
        let per_layer = 12 * h * h + 13 * h;
        v * h                       // char embedding at full width
            + (self.max_len + 1) * h // positions (BOS plus max_len chars)
            + self.layers * per_layer
            + 2 * h                  // final norm
            + (h * v + v) // head
    }
}

/// A single causal character-level decoder: the quadratic-cost comparator.
pub struct FlatDecoder<S: Scalar> {
    pub config: FlatConfig,
    params: ParamSet<S>,
    embed: Tensor<S>,
    pos: Tensor<S>,
    blocks: Vec<Block<S>>,
    ln_g: Tensor<S>,
    ln_b: Tensor<S>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
    vocab: Vocab,
}

impl<S: Scalar> FlatDecoder<S> {
    pub fn new(config: FlatConfig, seed: u64) -> FlatDecoder<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let h = config.hidden;
        let v = config.vocab_size;
        let embed = ps.add("flat.embed", vec![v, h], normal_vec(&mut rng, 0.02, v * h));
        let pos = ps.add(
            "flat.pos",
            vec![config.max_len + 1, h],
            normal_vec(&mut rng, 0.02, (config.max_len + 1) * h),
        );
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut ps, &format!("flat.block{i}"), h, config.heads, &mut rng))
            .collect();
        let ln_g = ps.add("flat.ln.g", vec![h], vec![S::one(); h]);
        let ln_b = ps.add("flat.ln.b", vec![h], vec![S::zero(); h]);
        let head_w = ps.add("flat.head.w", vec![h, v], normal_vec(&mut rng, 0.02, h * v));
        let head_b = ps.add("flat.head.b", vec![v], vec![S::zero(); v]);
        FlatDecoder {
            config,
            params: ps,
            embed,
            pos,
            blocks,
            ln_g,
            ln_b,
            head_w,
            head_b,
            vocab: Vocab,
        }
    }

    /// Search layer/hidden/head combinations for a parameter count within 5%
    /// of the dual model's total mass.
    pub fn matched(dual: &ModelConfig, seed: u64) -> Result<FlatDecoder<S>, EvalError> {
        let (m, n) = dual.param_counts();
        let target = m + n;
        let mut best: Option<FlatConfig> = None;
        let mut best_err = usize::MAX;
        for heads in [2usize, 4] {
            for layers in 1..=10 {
                let mut hidden = heads;
                while hidden <= 512 {
                    let cand = FlatConfig {
                        max_len: dual.max_len,
                        layers,
                        hidden,
                        heads,
                        vocab_size: dual.vocab_size,
                    };
                    let err = cand.param_count().abs_diff(target);
                    if err < best_err {
                        best_err = err;
                        best = Some(cand);
                    }
                    hidden += heads;
                }
            }
        }
        let cfg = best.expect("non-empty search space");
        let rel = best_err as f64 / target as f64;
        if rel >= 0.05 {
            return Err(EvalError::ConfigInfeasible {
                target,
                best: cfg.param_count(),
                tolerance: 5.0,
            });
        }
        Ok(FlatDecoder::new(cfg, seed))
    }

    pub fn param_count(&self) -> usize {
        self.params.count_elements("flat.")
    }

    /// Logits over a stream of ids (BOS first); row t predicts position t+1.
    pub fn forward(&self, stream: &[u16]) -> Result<Tensor<S>, ModelError> {
        assert!(!stream.is_empty());
        if stream.len() > self.config.max_len + 1 {
            return Err(ModelError::TooManyPatches {
                got: stream.len(),
                max: self.config.max_len + 1,
            });
        }
        let emb = self.embed.index_rows(stream)?;
        let pos = self.pos.slice_rows(0, stream.len())?;
        let mut x = emb.add(&pos)?;
        let content = stream.len() - 1;
        for block in &self.blocks {
            x = block.forward(&x, AttnScope::Flat, content)?;
        }
        let x = x.layer_norm(&self.ln_g, &self.ln_b)?;
        Ok(x.matmul(&self.head_w)?.add_row(&self.head_b)?)
    }

    /// Mean next-character loss over a text: BOS-prefixed input, EOS-closed
    /// targets.
    pub fn next_char_loss(&self, text: &str) -> Result<Tensor<S>, ModelError> {
        let mut stream = vec![Vocab::BOS];
        let mut targets = Vec::new();
        for ch in text.chars() {
            let id = self.vocab.encode_char(ch).unwrap_or(Vocab::PAD);
            stream.push(id);
            targets.push(id);
        }
        targets.push(Vocab::EOS);
        let logits = self.forward(&stream)?;
        Ok(logits.softmax_cross_entropy(&targets, Vocab::BOS)?)
    }
}

impl<S: Scalar> Generator for FlatDecoder<S> {
    fn label(&self) -> &str {
        "flat"
    }

    /// Character-by-character sampling with full recomputation per step, the
    /// same policy the dual sampler uses.
    fn generate(&self, prompt: &str, opts: &SampleOpts) -> Result<GenOutput, GenError> {
        let mut stream = vec![Vocab::BOS];
        for (offset, ch) in prompt.chars().enumerate() {
            let id = self
                .vocab
                .encode_char(ch)
                .ok_or(crate::patchtok::PatchError::UnknownChar { ch, offset })?;
            stream.push(id);
        }
        let budget_chars = opts.max_patches.saturating_mul(32);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut text = prompt.to_string();
        let mut generated = 0usize;
        let mut budget_exhausted = true;
        while generated < budget_chars && stream.len() <= self.config.max_len {
            let logits = self.forward(&stream)?;
            let last = logits.shape()[0] - 1;
            let v = self.config.vocab_size;
            let row: Vec<f64> = logits.with_data(|d| {
                d[last * v..(last + 1) * v]
                    .iter()
                    .map(|x| x.to_f64().unwrap())
                    .collect()
            });
            let mut banned = vec![Vocab::BOS, Vocab::PAD];
            if opts.forbid_stop {
                banned.push(Vocab::EOS);
            }
            let id = draw(&row, &banned, opts, &mut rng);
            if id == Vocab::EOS {
                budget_exhausted = false;
                break;
            }
            stream.push(id);
            if let Some(ch) = self.vocab.decode_id(id) {
                text.push(ch);
            }
            generated += 1;
        }
        Ok(GenOutput {
            text,
            generated_chars: generated,
            patches_generated: 0,
            budget_exhausted,
            seed: opts.seed,
        })
    }
}

// ---- efficiency ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EffReport {
    pub tokens_per_second: f64,
    pub tokens: usize,
    pub seconds: f64,
    pub n_tunes: usize,
}

/// Generate `n_tunes` from scratch, prompted by control prefixes drawn from
/// the corpus's empirical code distribution, and measure characters per
/// second of wall clock after one untimed warmup run.
pub fn efficiency<G: Generator>(
    generator: &G,
    prefix_pool: &[ControlCodes],
    n_tunes: usize,
    base: &SampleOpts,
) -> Result<EffReport, EvalError> {
    if n_tunes == 0 || prefix_pool.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let pick = |rng: &mut ChaCha8Rng| {
        let codes = &prefix_pool[rng.gen_range(0..prefix_pool.len())];
        control::render_prefix(codes)
    };

    let warm_prompt = pick(&mut rng);
    let warm_opts = SampleOpts {
        seed: base.seed,
        ..base.clone()
    };
    generator.generate(&warm_prompt, &warm_opts)?;

    let mut tokens = 0usize;
    let start = Instant::now();
    for i in 0..n_tunes {
        let prompt = pick(&mut rng);
        let opts = SampleOpts {
            seed: base.seed.wrapping_add(1 + i as u64),
            ..base.clone()
        };
        let out = generator.generate(&prompt, &opts)?;
        tokens += out.generated_chars;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(EffReport {
        tokens_per_second: tokens as f64 / seconds.max(1e-9),
        tokens,
        seconds,
        n_tunes,
    })
}

// ---- controllability -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ControllabilityReport {
    /// Mean edit-distance similarity of rendered prefixes, the primary score.
    pub mean: f64,
    pub scores: Vec<f64>,
    /// How many generations matched every code exactly (structured view).
    pub exact_matches: usize,
}

/// Generate once per requested code set and score each generation by the
/// edit-distance similarity between the requested and re-extracted prefixes;
/// unparseable generations score zero.
pub fn controllability<S: Scalar>(
    model: &DualDecoderModel<S>,
    prompts: &[ControlCodes],
    base: &SampleOpts,
) -> Result<ControllabilityReport, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let generator = DualGenerator::new(model);
    let mut scores = Vec::with_capacity(prompts.len());
    let mut exact = 0usize;
    for (i, codes) in prompts.iter().enumerate() {
        let opts = SampleOpts {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let out = generator.generate(&control::render_prefix(codes), &opts)?;
        let diff = check_form(&out.text, codes);
        if diff.matches {
            exact += 1;
        }
        scores.push(diff.similarity);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(ControllabilityReport {
        mean,
        scores,
        exact_matches: exact,
    })
}

/// Draw `n` code sets from the pool with replacement, deterministically.
pub fn sample_prompt_codes(pool: &[ControlCodes], n: usize, seed: u64) -> Vec<ControlCodes> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect()
}

/// Score corpus records against their own extracted codes; the pipeline is
/// sound only if this is exactly one.
pub fn self_controllability(records: &[CorpusRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut total = 0.0;
    for r in records {
        let (codes, _) =
            control::parse_prefix(&r.prefixed_text).map_err(|e| GenError::InvalidPrompt(e.to_string()))?;
        total += check_form(&r.prefixed_text, &codes).similarity;
    }
    Ok(total / records.len() as f64)
}

// ---- throughput ratio -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ThroughputReport {
    /// Median tokens/second per engine across runs.
    pub dual_tps: f64,
    pub flat_tps: f64,
    /// dual / flat
    pub ratio: f64,
    pub runs: usize,
    pub budget_chars: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn timed_run<G: Generator>(
    generator: &G,
    prompt: &str,
    opts: &SampleOpts,
) -> Result<f64, EvalError> {
    let start = Instant::now();
    let out = generator.generate(prompt, opts)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(out.generated_chars as f64 / secs.max(1e-9))
}

/// Fixed-budget generation throughput of the dual model against the flat
/// baseline: stop symbols are masked so both engines emit exactly
/// `budget_chars` characters per run, and the median over `runs` is compared.
pub fn throughput_ratio<S: Scalar>(
    dual: &DualDecoderModel<S>,
    flat: &FlatDecoder<S>,
    runs: usize,
    budget_chars: usize,
    seed: u64,
) -> Result<ThroughputReport, EvalError> {
    if runs == 0 || budget_chars == 0 {
        return Err(EvalError::EmptySample);
    }
    let p = dual.config.patch_size;
    let budget_patches = budget_chars.div_ceil(p);
    let prompt = "S:1\nB:8\n";
    let dual_gen = DualGenerator::new(dual);

    let mk_opts = |seed: u64, max_patches: usize| SampleOpts {
        temperature: 1.0,
        top_p: 0.95,
        max_patches,
        seed,
        forbid_stop: true,
    };

    // One warmup each, untimed.
    dual_gen.generate(prompt, &mk_opts(seed, budget_patches))?;
    flat.generate(prompt, &mk_opts(seed, budget_patches))?;

    let mut dual_tps = Vec::with_capacity(runs);
    let mut flat_tps = Vec::with_capacity(runs);
    for r in 0..runs {
        let run_seed = seed.wrapping_add(1 + r as u64);
        dual_tps.push(timed_run(&dual_gen, prompt, &mk_opts(run_seed, budget_patches))?);
        flat_tps.push(timed_run(flat, prompt, &mk_opts(run_seed, budget_patches))?);
    }
    let dual_med = median(dual_tps);
    let flat_med = median(flat_tps);
    Ok(ThroughputReport {
        dual_tps: dual_med,
        flat_tps: flat_med,
        ratio: dual_med / flat_med,
        runs,
        budget_chars,
    })
}

// ---- attention-cost accounting ----------------------------------------------------

/// Analytic vs measured attention cost at one content length.
#[derive(Debug, Clone)]
pub struct AccountingRow {
    pub content_len: usize,
    pub dual_analytic: f64,
    pub dual_measured: f64,
    pub flat_analytic: f64,
    pub flat_measured: f64,
    /// Raw flat content pairs per layer (for scaling fits).
    pub flat_pairs_per_layer: f64,
}

/// Teacher-forced forward passes over synthetic full-patch sequences of
/// exactly `content_len` characters, with op counters on. The bench model
/// gets two extra patch positions so BOS and EOS don't displace content.
pub fn attention_accounting<S: Scalar>(
    base: &ModelConfig,
    content_lens: &[usize],
    seed: u64,
) -> Result<Vec<AccountingRow>, EvalError> {
    let mut rows = Vec::with_capacity(content_lens.len());
    for &l in content_lens {
        let p = base.patch_size;
        assert_eq!(l % p, 0, "content length must be a multiple of patch size");
        let mut cfg = base.clone();
        cfg.max_len = l + 2 * p;
        let model: DualDecoderModel<S> = DualDecoderModel::new(cfg.clone(), seed)?;
        let (m, n) = model.count_params();

        let mut patches = vec![Patch::special(Vocab::BOS, p)];
        for i in 0..l / p {
            let ids: Vec<u16> = (0..p).map(|j| 4 + ((i + j) % 90) as u16).collect();
            patches.push(Patch::from_content(&ids, p));
        }
        patches.push(Patch::special(Vocab::EOS, p));
        let seq = PatchSequence::new(patches);

        attn_counter_reset();
        model.next_patch_loss(&seq)?;
        let counts = attn_counter_read();
        let dual_measured = m as f64 * counts.patch_pairs as f64 / cfg.patch_layers as f64
            + n as f64 * counts.char_pairs as f64 / cfg.char_layers as f64;

        let flat: FlatDecoder<S> = FlatDecoder::matched(&cfg, seed)?;
        let text: String = (0..l).map(|i| (b'a' + (i % 26) as u8) as char).collect();
        attn_counter_reset();
        flat.next_char_loss(&text)?;
        let flat_counts = attn_counter_read();
        let flat_measured =
            flat.param_count() as f64 * flat_counts.flat_pairs as f64 / flat.config.layers as f64;

        let analytic = attention_cost_units(l as f64, p as f64, m as f64, n as f64);
        rows.push(AccountingRow {
            content_len: l,
            dual_analytic: analytic.dual,
            dual_measured,
            flat_analytic: analytic.flat,
            flat_measured,
            flat_pairs_per_layer: flat_counts.flat_pairs as f64 / flat.config.layers as f64,
        });
    }
    Ok(rows)
}

/// Least-squares slope of ln(y) over ln(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---- report -------------------------------------------------------------------------

/// Evaluation summary; absent metrics were not run.
#[derive(Debug, Clone, Default)]
pub struct GenReport {
    pub tokens_per_second: Option<f64>,
    pub controllability: Option<f64>,
    pub n_samples: usize,
    pub config_digest: String,
    pub hardware_note: String,
}

impl GenReport {
    /// Line-delimited key=value form for the report file.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        if let Some(t) = self.tokens_per_second {
            out.push_str(&format!("tokens_per_second={t:.4}\n"));
        }
        if let Some(c) = self.controllability {
            out.push_str(&format!("controllability={c:.6}\n"));
        }
        out.push_str(&format!("n_samples={}\n", self.n_samples));
        out.push_str(&format!("config_digest={}\n", self.config_digest));
        out.push_str(&format!("hardware_note={}\n", self.hardware_note));
        out
    }

    /// Human-readable table for stdout.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<22}{}\n", "metric", "value"));
        out.push_str(&format!("{:-<40}\n", ""));
        if let Some(t) = self.tokens_per_second {
            out.push_str(&format!("{:<22}{t:.2}\n", "tokens/second"));
        }
        if let Some(c) = self.controllability {
            out.push_str(&format!("{:<22}{c:.4}\n", "controllability"));
        }
        out.push_str(&format!("{:<22}{}\n", "samples", self.n_samples));
        out.push_str(&format!("{:<22}{}\n", "config digest", self.config_digest));
        out.push_str(&format!("{:<22}{}\n", "hardware", self.hardware_note));
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        crate::fsutil::write_atomic(path, self.to_kv_text().as_bytes()).map_err(|source| {
            EvalError::Io {
                path: path.display().to_string(),
                source,
            }
        })
    }
}
