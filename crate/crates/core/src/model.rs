//! The dual-decoder model: a patch-level causal transformer over bar-patch
//! embeddings feeding, one feature per patch, a small character-level causal
//! transformer that spells out each patch. Training objective: the feature of
//! patch i supervises patch i+1 character by character, with a PAD stop
//! position closing every patch and a single EOS prediction closing the tune.

use crate::container::{self, Blob};
use crate::patchtok::{Patch, PatchSequence, Vocab};
use crate::tensor::{ParamSet, Scalar, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::cell::Cell;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGENCKP1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {got} patches exceeds the {max} position budget")]
    TooManyPatches { got: usize, max: usize },
    #[error("patch content of {got} characters exceeds patch size {max}")]
    PatchTooLong { got: usize, max: usize },
    #[error("next-patch loss needs at least 2 patches, got {0}")]
    SequenceTooShort(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Maximum character length of a tune (L).
    pub max_len: usize,
    /// Characters per patch (P).
    pub patch_size: usize,
    pub patch_layers: usize,
    pub char_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Full-scale configuration; constructed for parameter accounting only.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            max_len: 4096,
            patch_size: 32,
            patch_layers: 9,
            char_layers: 3,
            hidden: 768,
            heads: 12,
            vocab_size: Vocab::SIZE,
        }
    }

    /// Desk-scale preset keeping the 3:1 layer ratio.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            max_len: 1024,
            patch_size: 32,
            patch_layers: 3,
            char_layers: 1,
            hidden: 64,
            heads: 4,
            vocab_size: Vocab::SIZE,
        }
    }

    /// Smallest gradient-checkable configuration.
    pub fn micro() -> ModelConfig {
        ModelConfig {
            max_len: 32,
            patch_size: 4,
            patch_layers: 1,
            char_layers: 1,
            hidden: 8,
            heads: 2,
            vocab_size: Vocab::SIZE,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_len == 0 || self.patch_size == 0 || self.max_len % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "max_len {} must be a positive multiple of patch_size {}",
                self.max_len, self.patch_size
            )));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} must be divisible by 4 (char embedding width)",
                self.hidden
            )));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::InvalidConfig("vocab too small".into()));
        }
        if self.patch_layers == 0 || self.char_layers == 0 {
            return Err(ModelError::InvalidConfig(
                "layer counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch positions available, BOS and EOS included.
    pub fn max_patches(&self) -> usize {
        self.max_len / self.patch_size
    }

    /// Character embedding width: a quarter of the hidden size, keeping the
    /// patch projection from dominating the parameter budget.
    pub fn char_embed_dim(&self) -> usize {
        self.hidden / 4
    }

    /// Analytic parameter counts (patch-side M, char-side N), matching the
    /// construction in [`DualDecoderModel::new`] exactly.
    pub fn param_counts(&self) -> (usize, usize) {
        let h = self.hidden;
        let e = self.char_embed_dim();
        let v = self.vocab_size;
        let per_layer = 12 * h * h + 13 * h;
        let m = (self.patch_size * e * h + h)   // patch projection
            + self.max_patches() * h            // patch positions
            + self.patch_layers * per_layer
            + 2 * h; // final norm
        let n = v * e                           // char embedding
            + (e * h + h)                       // char input lift
            + (self.patch_size + 1) * h         // char positions
            + self.char_layers * per_layer
            + 2 * h                             // final norm
            + (h * v + v); // output head
        (m, n)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("max_len".into(), self.max_len.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("patch_layers".into(), self.patch_layers.to_string()),
            ("char_layers".into(), self.char_layers.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<ModelConfig, ModelError> {
        let get = |key: &str| -> Result<usize, ModelError> {
            kv.iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| {
                    ModelError::CheckpointMismatch(format!("missing config key {key}"))
                })
        };
        let cfg = ModelConfig {
            max_len: get("max_len")?,
            patch_size: get("patch_size")?,
            patch_layers: get("patch_layers")?,
            char_layers: get("char_layers")?,
            hidden: get("hidden")?,
            heads: get("heads")?,
            vocab_size: get("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short hex digest identifying this configuration.
    pub fn digest(&self) -> String {
        let text: String = self
            .to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let d = Sha256::digest(text.as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

// ---- attention accounting ---------------------------------------------------

/// Which decoder an attention call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScope {
    PatchDecoder,
    CharDecoder,
    Flat,
}

/// Content-position pairs seen by attention on this thread, per decoder.
///
/// Each layer's attention call over a stream with `c` content positions adds
/// c^2 pairs. Conditioning slots (the BOS patch, the prepended patch feature,
/// the BOS character) are excluded so measurements share the cost model's
/// unit convention of parameter mass times content length squared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttnCounts {
    pub patch_pairs: u64,
    pub char_pairs: u64,
    pub flat_pairs: u64,
}

thread_local! {
    static ATTN_COUNTS: Cell<AttnCounts> = const { Cell::new(AttnCounts {
        patch_pairs: 0,
        char_pairs: 0,
        flat_pairs: 0,
    }) };
}

pub fn attn_counter_reset() {
    ATTN_COUNTS.with(|c| c.set(AttnCounts::default()));
}

pub fn attn_counter_read() -> AttnCounts {
    ATTN_COUNTS.with(|c| c.get())
}

fn attn_record(scope: AttnScope, content: usize) {
    let pairs = (content as u64) * (content as u64);
    ATTN_COUNTS.with(|c| {
        let mut v = c.get();
        match scope {
            AttnScope::PatchDecoder => v.patch_pairs += pairs,
            AttnScope::CharDecoder => v.char_pairs += pairs,
            AttnScope::Flat => v.flat_pairs += pairs,
        }
        c.set(v);
    });
}

// ---- initialization ----------------------------------------------------------

/// Gaussian init via Box-Muller, deterministic for a given rng state and
/// identical across scalar types.
pub(crate) fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<S> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            S::from_f64(z * std).unwrap()
        })
        .collect()
}

const INIT_STD: f64 = 0.02;

// ---- transformer block ---------------------------------------------------------

/// Pre-norm causal block: multi-head attention then a 4x GELU feed-forward,
/// both with residual connections.
pub(crate) struct Block<S: Scalar> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    wq: Tensor<S>,
    bq: Tensor<S>,
    wk: Tensor<S>,
    bk: Tensor<S>,
    wv: Tensor<S>,
    bv: Tensor<S>,
    wo: Tensor<S>,
    bo: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    w1: Tensor<S>,
    b1: Tensor<S>,
    w2: Tensor<S>,
    b2: Tensor<S>,
    heads: usize,
}

impl<S: Scalar> Block<S> {
    pub(crate) fn new(
        ps: &mut ParamSet<S>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Block<S> {
        let h = hidden;
        let mut lin = |ps: &mut ParamSet<S>, name: String, rows: usize, cols: usize| {
            ps.add(&name, vec![rows, cols], normal_vec(rng, INIT_STD, rows * cols))
        };
        Block {
            ln1_g: ps.add(&format!("{prefix}.ln1.g"), vec![h], vec![S::one(); h]),
            ln1_b: ps.add(&format!("{prefix}.ln1.b"), vec![h], vec![S::zero(); h]),
            wq: lin(ps, format!("{prefix}.attn.wq"), h, h),
            bq: ps.add(&format!("{prefix}.attn.bq"), vec![h], vec![S::zero(); h]),
            wk: lin(ps, format!("{prefix}.attn.wk"), h, h),
            bk: ps.add(&format!("{prefix}.attn.bk"), vec![h], vec![S::zero(); h]),
            wv: lin(ps, format!("{prefix}.attn.wv"), h, h),
            bv: ps.add(&format!("{prefix}.attn.bv"), vec![h], vec![S::zero(); h]),
            wo: lin(ps, format!("{prefix}.attn.wo"), h, h),
            bo: ps.add(&format!("{prefix}.attn.bo"), vec![h], vec![S::zero(); h]),
            ln2_g: ps.add(&format!("{prefix}.ln2.g"), vec![h], vec![S::one(); h]),
            ln2_b: ps.add(&format!("{prefix}.ln2.b"), vec![h], vec![S::zero(); h]),
            w1: lin(ps, format!("{prefix}.ff.w1"), h, 4 * h),
            b1: ps.add(&format!("{prefix}.ff.b1"), vec![4 * h], vec![S::zero(); 4 * h]),
            w2: lin(ps, format!("{prefix}.ff.w2"), 4 * h, h),
            b2: ps.add(&format!("{prefix}.ff.b2"), vec![h], vec![S::zero(); h]),
            heads,
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Tensor<S>,
        scope: AttnScope,
        content_positions: usize,
    ) -> Result<Tensor<S>, TensorError> {
        let h = self.ln1_g.shape()[0];
        let hd = h / self.heads;
        let scale = S::from_f64(1.0 / (hd as f64).sqrt()).unwrap();

        let xn = x.layer_norm(&self.ln1_g, &self.ln1_b)?;
        let q = xn.matmul(&self.wq)?.add_row(&self.bq)?;
        let k = xn.matmul(&self.wk)?.add_row(&self.bk)?;
        let v = xn.matmul(&self.wv)?.add_row(&self.bv)?;

        attn_record(scope, content_positions);
        let mut head_outs = Vec::with_capacity(self.heads);
        for a in 0..self.heads {
            let qh = q.slice_cols(a * hd, hd)?;
            let kh = k.slice_cols(a * hd, hd)?;
            let vh = v.slice_cols(a * hd, hd)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let probs = scores.causal_softmax()?;
            head_outs.push(probs.matmul(&vh)?);
        }
        let ctx = Tensor::hstack(&head_outs)?;
        let x = x.add(&ctx.matmul(&self.wo)?.add_row(&self.bo)?)?;

        let xn2 = x.layer_norm(&self.ln2_g, &self.ln2_b)?;
        let ff = xn2
            .matmul(&self.w1)?
            .add_row(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_row(&self.b2)?;
        x.add(&ff)
    }
}

// ---- the model -------------------------------------------------------------------

pub struct DualDecoderModel<S: Scalar> {
    pub config: ModelConfig,
    params: ParamSet<S>,
    char_embed: Tensor<S>,
    patch_proj_w: Tensor<S>,
    patch_proj_b: Tensor<S>,
    patch_pos: Tensor<S>,
    patch_blocks: Vec<Block<S>>,
    patch_ln_g: Tensor<S>,
    patch_ln_b: Tensor<S>,
    char_in_w: Tensor<S>,
    char_in_b: Tensor<S>,
    char_pos: Tensor<S>,
    char_blocks: Vec<Block<S>>,
    char_ln_g: Tensor<S>,
    char_ln_b: Tensor<S>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
}

impl<S: Scalar> DualDecoderModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<DualDecoderModel<S>, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let h = config.hidden;
        let e = config.char_embed_dim();
        let v = config.vocab_size;
        let p = config.patch_size;

        // The char embedding table is shared by both decoders but owned by
        // the char side for accounting.
        let char_embed = ps.add("char.embed", vec![v, e], normal_vec(&mut rng, INIT_STD, v * e));

        let patch_proj_w = ps.add(
            "patch.proj.w",
            vec![p * e, h],
            normal_vec(&mut rng, INIT_STD, p * e * h),
        );
        let patch_proj_b = ps.add("patch.proj.b", vec![h], vec![S::zero(); h]);
        let patch_pos = ps.add(
            "patch.pos",
            vec![config.max_patches(), h],
            normal_vec(&mut rng, INIT_STD, config.max_patches() * h),
        );
        let patch_blocks = (0..config.patch_layers)
            .map(|i| Block::new(&mut ps, &format!("patch.block{i}"), h, config.heads, &mut rng))
            .collect();
        let patch_ln_g = ps.add("patch.ln.g", vec![h], vec![S::one(); h]);
        let patch_ln_b = ps.add("patch.ln.b", vec![h], vec![S::zero(); h]);

        let char_in_w = ps.add("char.in.w", vec![e, h], normal_vec(&mut rng, INIT_STD, e * h));
        let char_in_b = ps.add("char.in.b", vec![h], vec![S::zero(); h]);
        let char_pos = ps.add(
            "char.pos",
            vec![p + 1, h],
            normal_vec(&mut rng, INIT_STD, (p + 1) * h),
        );
        let char_blocks = (0..config.char_layers)
            .map(|i| Block::new(&mut ps, &format!("char.block{i}"), h, config.heads, &mut rng))
            .collect();
        let char_ln_g = ps.add("char.ln.g", vec![h], vec![S::one(); h]);
        let char_ln_b = ps.add("char.ln.b", vec![h], vec![S::zero(); h]);
        let head_w = ps.add("char.head.w", vec![h, v], normal_vec(&mut rng, INIT_STD, h * v));
        let head_b = ps.add("char.head.b", vec![v], vec![S::zero(); v]);

        Ok(DualDecoderModel {
            config,
            params: ps,
            char_embed,
            patch_proj_w,
            patch_proj_b,
            patch_pos,
            patch_blocks,
            patch_ln_g,
            patch_ln_b,
            char_in_w,
            char_in_b,
            char_pos,
            char_blocks,
            char_ln_g,
            char_ln_b,
            head_w,
            head_b,
        })
    }

    pub fn parameters(&self) -> &ParamSet<S> {
        &self.params
    }

    /// Exact parameter counts by module ownership: (patch-side M, char-side N).
    pub fn count_params(&self) -> (usize, usize) {
        (
            self.params.count_elements("patch."),
            self.params.count_elements("char."),
        )
    }

    /// Embed each patch: look up its P character ids (PAD rows included),
    /// concatenate, project to the hidden width, add patch positions.
    pub fn embed_patches(&self, patches: &[Patch]) -> Result<Tensor<S>, ModelError> {
        let n = patches.len();
        if n > self.config.max_patches() {
            return Err(ModelError::TooManyPatches {
                got: n,
                max: self.config.max_patches(),
            });
        }
        let p = self.config.patch_size;
        let e = self.config.char_embed_dim();
        let mut all_ids = Vec::with_capacity(n * p);
        for patch in patches {
            debug_assert_eq!(patch.width(), p);
            all_ids.extend_from_slice(patch.ids());
        }
        // Row-major reshape of [n*P, e] to [n, P*e] is exactly the per-patch
        // concatenation of its character embeddings.
        let flat = self.char_embed.index_rows(&all_ids)?;
        let grouped = flat.reshape(vec![n, p * e])?;
        let projected = grouped
            .matmul(&self.patch_proj_w)?
            .add_row(&self.patch_proj_b)?;
        let pos = self.patch_pos.slice_rows(0, n)?;
        Ok(projected.add(&pos)?)
    }

    /// Run the patch-level decoder stack; the feature at index i depends only
    /// on patches 0..=i. Position 0 is the BOS patch, so content positions
    /// are rows minus one.
    pub fn patch_forward(&self, embeddings: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let rows = embeddings.shape()[0];
        if rows > self.config.max_patches() {
            return Err(ModelError::TooManyPatches {
                got: rows,
                max: self.config.max_patches(),
            });
        }
        let content = rows.saturating_sub(1);
        let mut x = embeddings.clone();
        for block in &self.patch_blocks {
            x = block.forward(&x, AttnScope::PatchDecoder, content)?;
        }
        Ok(x.layer_norm(&self.patch_ln_g, &self.patch_ln_b)?)
    }

    /// Embed then run the patch decoder.
    pub fn patch_features(&self, patches: &[Patch]) -> Result<Tensor<S>, ModelError> {
        let emb = self.embed_patches(patches)?;
        self.patch_forward(&emb)
    }

    /// Character-level decoder over one patch: the patch feature occupies
    /// position 0 and `chars` positions 1..=len; logits at position t predict
    /// the character at in-patch index t (index len being the stop).
    pub fn char_forward(
        &self,
        patch_feature: &Tensor<S>,
        chars: &[u16],
    ) -> Result<Tensor<S>, ModelError> {
        let p = self.config.patch_size;
        if chars.len() > p {
            return Err(ModelError::PatchTooLong {
                got: chars.len(),
                max: p,
            });
        }
        let stream = if chars.is_empty() {
            patch_feature.clone()
        } else {
            let emb = self.char_embed.index_rows(chars)?;
            let lifted = emb.matmul(&self.char_in_w)?.add_row(&self.char_in_b)?;
            Tensor::vstack(&[patch_feature.clone(), lifted])?
        };
        let rows = stream.shape()[0];
        let pos = self.char_pos.slice_rows(0, rows)?;
        let mut x = stream.add(&pos)?;
        for block in &self.char_blocks {
            x = block.forward(&x, AttnScope::CharDecoder, chars.len())?;
        }
        let x = x.layer_norm(&self.char_ln_g, &self.char_ln_b)?;
        Ok(x.matmul(&self.head_w)?.add_row(&self.head_b)?)
    }

    /// Target ids for one patch: its characters plus a PAD stop, or a single
    /// EOS for the terminal patch.
    fn patch_targets(patch: &Patch) -> Vec<u16> {
        if patch.is_eos() {
            vec![Vocab::EOS]
        } else {
            let mut t = patch.content_ids().to_vec();
            t.push(Vocab::PAD);
            t
        }
    }

    /// Mean cross-entropy over every predicted position of the sequence.
    /// The BOS patch is input-only and the EOS patch target-only.
    pub fn next_patch_loss(&self, seq: &PatchSequence) -> Result<Tensor<S>, ModelError> {
        let (sum, count) = self.next_patch_loss_sum(seq)?;
        Ok(sum.scale(S::one() / S::from_usize(count).unwrap()))
    }

    /// Summed loss plus predicted-position count, for pooling across a batch.
    pub fn next_patch_loss_sum(
        &self,
        seq: &PatchSequence,
    ) -> Result<(Tensor<S>, usize), ModelError> {
        let patches = seq.patches();
        let n = patches.len();
        if n < 2 {
            return Err(ModelError::SequenceTooShort(n));
        }
        let feats = self.patch_features(&patches[..n - 1])?;
        let mut logit_parts = Vec::with_capacity(n - 1);
        let mut targets: Vec<u16> = Vec::new();
        for t in 1..n {
            let feature = feats.row(t - 1)?;
            let target_ids = Self::patch_targets(&patches[t]);
            let chars = &target_ids[..target_ids.len() - 1];
            logit_parts.push(self.char_forward(&feature, chars)?);
            targets.extend_from_slice(&target_ids);
        }
        let logits = Tensor::vstack(&logit_parts)?;
        // Streams carry no padding waste, so no position is ignored; BOS never
        // appears as a target and serves as the ignore marker.
        let (sum, count) = logits.cross_entropy_sum(&targets, Vocab::BOS)?;
        Ok((sum, count))
    }

    // ---- checkpointing -----------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let kv = self.config.to_kv();
        let blobs: Vec<Blob> = self
            .params
            .iter()
            .map(|p| Blob {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: p.value.with_data(container::to_f32),
            })
            .collect();
        container::save(path, CHECKPOINT_MAGIC, &kv, &blobs)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DualDecoderModel<S>, ModelError> {
        let c = container::load(path, CHECKPOINT_MAGIC)?;
        let config = ModelConfig::from_kv(&c.kv)?;
        let model = DualDecoderModel::new(config, 0)?;
        if c.blobs.len() != model.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} blobs for {} parameters",
                c.blobs.len(),
                model.params.len()
            )));
        }
        for p in model.params.iter() {
            let blob = c.blob(&p.name).ok_or_else(|| {
                ModelError::CheckpointMismatch(format!("missing parameter {:?}", p.name))
            })?;
            if blob.dims != p.value.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter {:?} has dims {:?}, expected {:?}",
                    p.name,
                    blob.dims,
                    p.value.shape()
                )));
            }
            p.value.set_data(container::from_f32(&blob.data));
        }
        Ok(model)
    }
}

// ---- attention cost model ----------------------------------------------------

/// Attention-cost units for decoding an L-character sequence: dual pays the
/// patch mass over squared patch count plus the char mass over L*P; flat pays
/// the whole mass over L squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCost {
    pub dual: f64,
    pub flat: f64,
    /// flat / dual
    pub ratio: f64,
}

pub fn attention_cost_units(l: f64, p: f64, patch_mass: f64, char_mass: f64) -> AttentionCost {
    let dual = patch_mass * (l / p) * (l / p) + char_mass * l * p;
    let flat = (patch_mass + char_mass) * l * l;
    AttentionCost {
        dual,
        flat,
        ratio: flat / dual,
    }
}

/// Cost estimate for a configuration, using its own analytic masses.
pub fn flops_estimate(config: &ModelConfig) -> AttentionCost {
    let (m, n) = config.param_counts();
    attention_cost_units(
        config.max_len as f64,
        config.patch_size as f64,
        m as f64,
        n as f64,
    )
}
