//! Corpus construction from raw ABC files and desk-scale training.
//!
//! The corpus pipeline: parse each tune, strip natural-language fields,
//! extract its control codes, prepend the rendered prefix to the serialized
//! tune, and keep it only if it re-encodes as patches. Training minimizes the
//! next-patch loss with Adam under linear warmup; state saves are bitwise
//! resumable.

use crate::abc::{self, STRUCTURAL_FIELDS};
use crate::container::{self, Blob};
use crate::control::{extract_control_codes, render_prefix};
use crate::fsutil::write_atomic;
use crate::model::{DualDecoderModel, ModelConfig, ModelError};
use crate::patchtok::{PatchCodec, PatchError, PatchSequence};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STATE_MAGIC: &[u8; 8] = b"TGENSTA1";

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step} on batch [{batch_ids}]")]
    NonFiniteLoss { step: u64, batch_ids: String },
    #[error("corpus record {id:?} does not encode: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed corpus line {line}: {reason}")]
    MalformedCorpus { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error("state mismatch: {0}")]
    StateMismatch(String),
}

/// One prepared training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub id: String,
    /// Control prefix plus normalized tune text.
    pub prefixed_text: String,
    pub patch_count: usize,
}

/// Outcome counts of a corpus build; accepted plus skipped sums to the input
/// record count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildCounts {
    pub accepted: usize,
    pub skipped: BTreeMap<String, usize>,
}

impl BuildCounts {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Run one tune source through the preprocessing pipeline.
pub fn prepare_record(
    id: &str,
    source: &str,
    codec: &PatchCodec,
    keep: &[char],
) -> Result<CorpusRecord, String> {
    let tune = abc::parse_tune(source).map_err(|e| format!("parse:{e:?}"))?;
    let tune = abc::strip_fields(&tune, keep).map_err(|e| format!("strip:{e:?}"))?;
    let codes = extract_control_codes(&tune).map_err(|e| match e {
        crate::control::ControlError::FormOutOfRange(_) => "form:FormOutOfRange".to_string(),
        other => format!("form:{other:?}"),
    })?;
    let prefixed_text = format!("{}{}", render_prefix(&codes), abc::serialize(&tune));
    let seq = codec.encode(&prefixed_text).map_err(|e| match e {
        PatchError::Overflow { .. } => "patch:Overflow".to_string(),
        PatchError::Truncated { .. } => "patch:Truncated".to_string(),
        other => format!("patch:{other:?}"),
    })?;
    Ok(CorpusRecord {
        id: id.to_string(),
        prefixed_text,
        patch_count: seq.len(),
    })
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => out.push(other),
            None => {}
        }
    }
    out
}

/// Write records one per line: id, escaped text, patch count, tab-separated.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), TrainerError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.id);
        out.push('\t');
        out.push_str(&escape(&r.prefixed_text));
        out.push('\t');
        out.push_str(&r.patch_count.to_string());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|source| TrainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, TrainerError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let (Some(id), Some(body), Some(count)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(TrainerError::MalformedCorpus {
                line: i + 1,
                reason: "expected id, text, patch_count".into(),
            });
        };
        let patch_count = count.parse().map_err(|_| TrainerError::MalformedCorpus {
            line: i + 1,
            reason: format!("bad patch count {count:?}"),
        })?;
        records.push(CorpusRecord {
            id: id.to_string(),
            prefixed_text: unescape(body),
            patch_count,
        });
    }
    Ok(records)
}

/// Validation file path for a corpus path: `corpus.txt` -> `corpus.txt.val`.
pub fn val_path(corpus: &Path) -> PathBuf {
    let mut os = corpus.as_os_str().to_owned();
    os.push(".val");
    PathBuf::from(os)
}

/// Build the corpus from `.abc` tunebooks: preprocess every tune, split the
/// accepted records into train and validation files by a seeded shuffle, and
/// report per-reason skip counts. Per-record failures never abort the run.
pub fn build_corpus(
    inputs: &[PathBuf],
    out: &Path,
    val_fraction: f64,
    seed: u64,
    codec: &PatchCodec,
    keep: &[char],
) -> Result<BuildCounts, TrainerError> {
    let mut counts = BuildCounts::default();
    let mut accepted: Vec<CorpusRecord> = Vec::new();
    for input in inputs {
        let text = std::fs::read_to_string(input).map_err(|source| TrainerError::Io {
            path: input.display().to_string(),
            source,
        })?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "tunes".into());
        for (i, chunk) in abc::split_tunebook(&text).iter().enumerate() {
            let id = format!("{stem}-{i:05}");
            match prepare_record(&id, chunk, codec, keep) {
                Ok(r) => {
                    counts.accepted += 1;
                    accepted.push(r);
                }
                Err(reason) => {
                    *counts.skipped.entry(reason).or_insert(0) += 1;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..accepted.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((accepted.len() as f64) * val_fraction).round() as usize;
    let mut val: Vec<CorpusRecord> =
        order[..n_val].iter().map(|&i| accepted[i].clone()).collect();
    let mut train: Vec<CorpusRecord> =
        order[n_val..].iter().map(|&i| accepted[i].clone()).collect();
    // Deterministic output ordering by id within each split.
    val.sort_by(|a, b| a.id.cmp(&b.id));
    train.sort_by(|a, b| a.id.cmp(&b.id));

    write_corpus(out, &train)?;
    write_corpus(&val_path(out), &val)?;
    Ok(counts)
}

// ---- optimizer -------------------------------------------------------------

/// Adam with bias correction; moments are kept per parameter in order.
struct Adam<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    fn new(sizes: &[usize]) -> Adam<S> {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One update over `params` with gradients already accumulated; `t` is
    /// the 1-based step for bias correction.
    fn step(&mut self, params: &[&Tensor<S>], lr: f64, t: u64) {
        let b1 = S::from_f64(self.beta1).unwrap();
        let b2 = S::from_f64(self.beta2).unwrap();
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.beta1.powi(t as i32)).unwrap();
        let corr2 = S::from_f64(1.0 - self.beta2.powi(t as i32)).unwrap();
        let lr = S::from_f64(lr).unwrap();
        let eps = S::from_f64(self.eps).unwrap();
        for (idx, param) in params.iter().enumerate() {
            let Some(grad) = param.grad_vec() else {
                continue;
            };
            let mut data = param.data_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            param.set_data(data);
        }
    }
}

// ---- training --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Hyper {
    pub batch: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    /// Linear warmup steps before the full learning rate applies.
    pub warmup: u64,
    /// Validation cadence in steps; zero disables periodic validation.
    pub eval_every: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            batch: 8,
            lr: 1e-3,
            steps: 500,
            seed: 0,
            warmup: 100,
            eval_every: 50,
        }
    }
}

/// A point on the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
}

pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub val_curve: Vec<CurvePoint>,
    pub best_val: Option<f64>,
    pub final_loss: f64,
}

/// Owns the model, optimizer, and batching state for one training run.
pub struct Trainer<S: Scalar> {
    pub model: DualDecoderModel<S>,
    pub hyper: Hyper,
    opt: Adam<S>,
    sequences: Vec<PatchSequence>,
    ids: Vec<String>,
    val_sequences: Vec<PatchSequence>,
    step: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    best_val: Option<f64>,
}

fn encode_records(
    codec: &PatchCodec,
    records: &[CorpusRecord],
) -> Result<Vec<PatchSequence>, TrainerError> {
    records
        .iter()
        .map(|r| {
            codec
                .encode(&r.prefixed_text)
                .map_err(|e| TrainerError::BadRecord {
                    id: r.id.clone(),
                    reason: e.to_string(),
                })
        })
        .collect()
}

/// Deterministic epoch order: one ChaCha stream per epoch from the run seed.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    order.shuffle(&mut rng);
    order
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        model: DualDecoderModel<S>,
        train: &[CorpusRecord],
        val: &[CorpusRecord],
        hyper: Hyper,
    ) -> Result<Trainer<S>, TrainerError> {
        if train.is_empty() {
            return Err(TrainerError::EmptyCorpus);
        }
        let codec = PatchCodec::new(model.config.patch_size, model.config.max_patches());
        let sequences = encode_records(&codec, train)?;
        let val_sequences = encode_records(&codec, val)?;
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.value.numel()).collect();
        let order = epoch_order(sequences.len(), hyper.seed, 0);
        Ok(Trainer {
            model,
            opt: Adam::new(&sizes),
            sequences,
            ids: train.iter().map(|r| r.id.clone()).collect(),
            val_sequences,
            step: 0,
            epoch: 0,
            cursor: 0,
            order,
            best_val: None,
            hyper,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Indices of the next batch; larger patch counts first within the batch
    /// (bucketing keeps similarly sized sequences together).
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.sequences.len(), self.hyper.seed, self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.hyper.batch).min(self.order.len());
        let mut batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch.sort_by_key(|&i| std::cmp::Reverse(self.sequences[i].len()));
        batch
    }

    /// One optimizer step over the next batch; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64, TrainerError> {
        let batch = self.next_batch();
        self.model.parameters().zero_grads();
        let mut total: Option<Tensor<S>> = None;
        let mut count = 0usize;
        for &i in &batch {
            let (sum, c) = self.model.next_patch_loss_sum(&self.sequences[i])?;
            count += c;
            total = Some(match total {
                None => sum,
                Some(acc) => acc.add(&sum).map_err(ModelError::from)?,
            });
        }
        let loss = total
            .expect("non-empty batch")
            .scale(S::one() / S::from_usize(count).unwrap());
        let loss_value = loss.item().to_f64().unwrap();
        if !loss_value.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| self.ids[i].as_str()).collect();
            return Err(TrainerError::NonFiniteLoss {
                step: self.step + 1,
                batch_ids: ids.join(","),
            });
        }
        loss.backward().map_err(ModelError::from)?;
        self.step += 1;
        let warm = if self.hyper.warmup == 0 {
            1.0
        } else {
            (self.step as f64 / self.hyper.warmup as f64).min(1.0)
        };
        let params: Vec<&Tensor<S>> = self.model.parameters().iter().map(|p| &p.value).collect();
        self.opt.step(&params, self.hyper.lr * warm, self.step);
        self.model.parameters().zero_grads();
        Ok(loss_value)
    }

    /// Mean loss over the validation split, forward only: no gradients are
    /// taken and no trainer state changes.
    pub fn validation_loss(&self) -> Result<Option<f64>, TrainerError> {
        if self.val_sequences.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for seq in &self.val_sequences {
            let (sum, c) = self.model.next_patch_loss_sum(seq)?;
            total += sum.item().to_f64().unwrap();
            count += c;
        }
        Ok(Some(total / count as f64))
    }

    /// Run the configured number of steps, tracking validation loss every
    /// `eval_every` steps and saving the best model when `ckpt_out` is given.
    pub fn run(&mut self, ckpt_out: Option<&Path>) -> Result<TrainReport, TrainerError> {
        let mut curve = Vec::with_capacity(self.hyper.steps as usize);
        let mut val_curve = Vec::new();
        let mut final_loss = f64::NAN;
        let mut saved = false;
        for _ in 0..self.hyper.steps {
            final_loss = self.train_step()?;
            curve.push(CurvePoint {
                step: self.step,
                loss: final_loss,
            });
            let due = self.hyper.eval_every > 0 && self.step % self.hyper.eval_every == 0;
            if due || self.step == self.hyper.steps {
                if let Some(v) = self.validation_loss()? {
                    val_curve.push(CurvePoint {
                        step: self.step,
                        loss: v,
                    });
                    if self.best_val.map_or(true, |b| v < b) {
                        self.best_val = Some(v);
                        if let Some(path) = ckpt_out {
                            self.model.save(path)?;
                            saved = true;
                        }
                    }
                }
            }
        }
        // Without a validation split the final model is the checkpoint.
        if let Some(path) = ckpt_out {
            if !saved {
                self.model.save(path)?;
            }
        }
        Ok(TrainReport {
            curve,
            val_curve,
            best_val: self.best_val,
            final_loss,
        })
    }

    // ---- resumable state ------------------------------------------------

    pub fn save_state(&self, path: &Path) -> Result<(), TrainerError> {
        let mut kv = self.model.config.to_kv();
        kv.push(("step".into(), self.step.to_string()));
        kv.push(("epoch".into(), self.epoch.to_string()));
        kv.push(("cursor".into(), self.cursor.to_string()));
        kv.push(("seed".into(), self.hyper.seed.to_string()));
        kv.push(("batch".into(), self.hyper.batch.to_string()));
        kv.push(("lr_bits".into(), self.hyper.lr.to_bits().to_string()));
        kv.push(("warmup".into(), self.hyper.warmup.to_string()));
        kv.push(("eval_every".into(), self.hyper.eval_every.to_string()));
        kv.push(("steps".into(), self.hyper.steps.to_string()));
        kv.push((
            "best_val_bits".into(),
            self.best_val
                .map(|v| v.to_bits().to_string())
                .unwrap_or_default(),
        ));
        let mut blobs = Vec::new();
        for (idx, p) in self.model.parameters().iter().enumerate() {
            blobs.push(Blob {
                name: format!("param.{}", p.name),
                dims: p.value.shape().to_vec(),
                data: p.value.with_data(container::to_f32),
            });
            blobs.push(Blob {
                name: format!("adam.m.{}", p.name),
                dims: p.value.shape().to_vec(),
                data: container::to_f32(&self.opt.m[idx]),
            });
            blobs.push(Blob {
                name: format!("adam.v.{}", p.name),
                dims: p.value.shape().to_vec(),
                data: container::to_f32(&self.opt.v[idx]),
            });
        }
        container::save(path, STATE_MAGIC, &kv, &blobs)?;
        Ok(())
    }

    /// Rebuild a trainer from a state file and the same corpus; continuing is
    /// bitwise identical to never having stopped.
    pub fn load_state(
        path: &Path,
        train: &[CorpusRecord],
        val: &[CorpusRecord],
    ) -> Result<Trainer<S>, TrainerError> {
        let c = container::load(path, STATE_MAGIC)?;
        let config = ModelConfig::from_kv(&c.kv)?;
        let get = |key: &str| -> Result<u64, TrainerError> {
            c.value(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainerError::StateMismatch(format!("missing key {key}")))
        };
        let hyper = Hyper {
            batch: get("batch")? as usize,
            lr: f64::from_bits(get("lr_bits")?),
            steps: get("steps")?,
            seed: get("seed")?,
            warmup: get("warmup")?,
            eval_every: get("eval_every")?,
        };
        let model = DualDecoderModel::new(config, 0)?;
        let mut trainer = Trainer::new(model, train, val, hyper)?;
        trainer.step = get("step")?;
        trainer.epoch = get("epoch")?;
        trainer.cursor = get("cursor")? as usize;
        trainer.order = epoch_order(trainer.sequences.len(), trainer.hyper.seed, trainer.epoch);
        trainer.best_val = c
            .value("best_val_bits")
            .filter(|v| !v.is_empty())
            .and_then(|v| v.parse::<u64>().ok())
            .map(f64::from_bits);
        for (idx, p) in trainer.model.parameters().iter().enumerate() {
            let read = |prefix: &str| -> Result<Vec<S>, TrainerError> {
                let name = format!("{prefix}.{}", p.name);
                let blob = c
                    .blob(&name)
                    .ok_or_else(|| TrainerError::StateMismatch(format!("missing blob {name}")))?;
                if blob.dims != p.value.shape() {
                    return Err(TrainerError::StateMismatch(format!(
                        "blob {name} dims {:?} vs {:?}",
                        blob.dims,
                        p.value.shape()
                    )));
                }
                Ok(container::from_f32(&blob.data))
            };
            p.value.set_data(read("param")?);
            trainer.opt.m[idx] = read("adam.m")?;
            trainer.opt.v[idx] = read("adam.v")?;
        }
        Ok(trainer)
    }
}

/// Default field whitelist used by the corpus builder.
pub fn default_keep_fields() -> &'static [char] {
    &STRUCTURAL_FIELDS
}
