//! Acceptance suite: one test per shipping criterion, each printing a PASS
//! line with its headline numbers. Oracles here are independent of the
//! library paths they check (full-table DP for edit distance, hand-derived
//! form codes for the annotated fixture, synthetic sequences for the
//! attention accounting).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tunegen_core::abc::STRUCTURAL_FIELDS;
use tunegen_core::control::{
    eds, extract_control_codes, levenshtein, parse_prefix, render_prefix, ControlCodes,
    SectionCodes,
};
use tunegen_core::evalbench::{
    attention_accounting, controllability, self_controllability, throughput_ratio, FlatDecoder,
};
use tunegen_core::generate::{sample, SampleOpts};
use tunegen_core::model::{attention_cost_units, DualDecoderModel, ModelConfig};
use tunegen_core::patchtok::{Patch, PatchCodec, Vocab};
use tunegen_core::trainer::{
    build_corpus, prepare_record, read_corpus, val_path, CorpusRecord, Hyper, Trainer,
};
use tunegen_core::{Model32, Model64};

fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn load_fixture_records(name: &str, codec: &PatchCodec) -> Vec<CorpusRecord> {
    let text = std::fs::read_to_string(data_path(name)).unwrap();
    tunegen_core::abc::split_tunebook(&text)
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            prepare_record(&format!("{name}-{i:02}"), chunk, codec, &STRUCTURAL_FIELDS)
                .unwrap_or_else(|e| panic!("fixture tune {i} of {name} rejected: {e}"))
        })
        .collect()
}

/// Full-table dynamic-programming edit distance, the independent oracle.
fn lev_oracle(a: &[char], b: &[char]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        table[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = (table[i - 1][j] + 1)
                .min(table[i][j - 1] + 1)
                .min(table[i - 1][j - 1] + sub);
        }
    }
    table[a.len()][b.len()]
}

#[test]
fn c01_edit_distance_matches_dp_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let alphabet: Vec<char> = "abcdefgABCDEFG|:, 238".chars().collect();
    let rand_string = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..=64);
        (0..n)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect()
    };
    for trial in 0..10_000 {
        let a = rand_string(&mut rng);
        let b = rand_string(&mut rng);
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        let expected = lev_oracle(&ac, &bc);
        let got = levenshtein(&a, &b);
        assert_eq!(got, expected, "trial {trial}: {a:?} vs {b:?}");
        if !(ac.is_empty() && bc.is_empty()) {
            let expected_eds = 1.0 - expected as f64 / ac.len().max(bc.len()) as f64;
            let diff = (eds::<f64>(&a, &b) - expected_eds).abs();
            assert!(diff < 1e-12, "trial {trial}: eds off by {diff}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "oracle sweep took {secs:.1}s, budget 10s");
    println!("criterion 01 (edit-distance oracle, 10k pairs in {secs:.2}s): PASS");
}

fn codes(sections: &[(u8, &[u8])]) -> ControlCodes {
    ControlCodes {
        sections: sections
            .iter()
            .map(|(b, e)| SectionCodes {
                bars: *b,
                similarity: e.to_vec(),
            })
            .collect(),
    }
}

#[test]
fn c02_control_codes_match_hand_annotation() {
    // Hand-derived S/B/E values for every tune of annotated20.abc, in order.
    let e: &[u8] = &[];
    let expected: Vec<ControlCodes> = vec![
        codes(&[(1, e)]),
        codes(&[(4, e)]),
        codes(&[(8, e)]),
        codes(&[(2, e), (2, &[10])]),
        codes(&[(1, e), (1, &[0])]),
        codes(&[(1, e), (1, &[9])]),
        codes(&[(2, e), (2, &[10])]),
        codes(&[(1, e), (1, &[5])]),
        codes(&[(1, e), (1, &[0])]),
        codes(&[(2, e), (2, &[10]), (2, &[2, 2])]),
        codes(&[(2, e), (2, &[2]), (2, &[10, 2])]),
        codes(&[(3, e)]),
        codes(&[(2, e), (2, &[2])]),
        codes(&[(2, e)]),
        codes(&[(1, e), (1, &[10]), (1, &[10, 10]), (1, &[10, 10, 10])]),
        codes(&[(1, e), (2, &[4]), (3, &[3, 6])]),
        codes(&[(4, e)]),
        codes(&[(2, e)]),
        codes(&[(2, e)]),
        codes(&[(8, e), (8, &[10])]),
    ];

    let text = std::fs::read_to_string(data_path("annotated20.abc")).unwrap();
    let chunks = tunegen_core::abc::split_tunebook(&text);
    assert_eq!(chunks.len(), 20);
    for (i, chunk) in chunks.iter().enumerate() {
        let tune = tunegen_core::abc::parse_tune(chunk).unwrap();
        let got = extract_control_codes(&tune).unwrap();
        assert_eq!(got, expected[i], "tune {} codes differ", i + 1);
    }

    // Render/parse round trip over 1,000 random valid code sets.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..1000 {
        let s = rng.gen_range(1..=8usize);
        let c = ControlCodes {
            sections: (0..s)
                .map(|k| SectionCodes {
                    bars: rng.gen_range(1..=32u8),
                    similarity: (0..k).map(|_| rng.gen_range(0..=10u8)).collect(),
                })
                .collect(),
        };
        let rendered = render_prefix(&c);
        let (parsed, rest) = parse_prefix(&rendered).unwrap();
        assert_eq!(parsed, c);
        assert!(rest.is_empty());
    }
    println!("criterion 02 (hand-annotated control codes + round trip): PASS");
}

#[test]
fn c03_bar_patching_round_trip() {
    let codec = PatchCodec::default();
    let mut checked = 0;
    for fixture in ["ten_tunes.abc", "annotated20.abc", "overfit8.abc"] {
        for record in load_fixture_records(fixture, &codec) {
            let seq = codec.encode(&record.prefixed_text).unwrap();
            assert!(seq.len() <= 128, "{}: {} patches", record.id, seq.len());
            assert_eq!(
                codec.decode(&seq),
                record.prefixed_text,
                "{} round trip",
                record.id
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 38);
    println!("criterion 03 (byte-exact patch round trip, {checked} tunes): PASS");
}

#[test]
fn c04_decoder_causality_bitwise() {
    let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), 404).unwrap();
    let h = 64;
    let v = 99;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let rand_patch = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(1..=32usize);
        let ids: Vec<u16> = (0..len).map(|_| rng.gen_range(4..99u16)).collect();
        Patch::from_content(&ids, 32)
    };

    for trial in 0..100 {
        let n = rng.gen_range(3..10usize);
        let mut patches = vec![Patch::special(Vocab::BOS, 32)];
        patches.extend((0..n).map(|_| rand_patch(&mut rng)));
        let j = rng.gen_range(1..patches.len());
        let mut perturbed = patches.clone();
        perturbed[j] = loop {
            let p = rand_patch(&mut rng);
            if p != patches[j] {
                break p;
            }
        };
        let a = model.patch_features(&patches).unwrap().data_vec();
        let b = model.patch_features(&perturbed).unwrap().data_vec();
        for i in 0..j * h {
            assert_eq!(
                a[i].to_bits(),
                b[i].to_bits(),
                "patch trial {trial}: row {} leaked",
                i / h
            );
        }
    }

    let feats = model
        .patch_features(&[Patch::special(Vocab::BOS, 32)])
        .unwrap();
    let feature = feats.row(0).unwrap();
    for trial in 0..100 {
        let len = rng.gen_range(2..=32usize);
        let chars: Vec<u16> = (0..len).map(|_| rng.gen_range(4..99u16)).collect();
        let i = rng.gen_range(0..len);
        let mut perturbed = chars.clone();
        perturbed[i] = loop {
            let c = rng.gen_range(4..99u16);
            if c != chars[i] {
                break c;
            }
        };
        let a = model.char_forward(&feature, &chars).unwrap().data_vec();
        let b = model.char_forward(&feature, &perturbed).unwrap().data_vec();
        // Char i occupies stream position i+1; logits 0..=i stay put.
        for k in 0..(i + 1) * v {
            assert_eq!(
                a[k].to_bits(),
                b[k].to_bits(),
                "char trial {trial}: row {} leaked",
                k / v
            );
        }
    }
    println!("criterion 04 (bitwise causality, 100 + 100 trials): PASS");
}

#[test]
fn c05_gradient_check_micro_model() {
    let model: Model64 = DualDecoderModel::new(ModelConfig::micro(), 11).unwrap();
    let codec = PatchCodec::new(4, 8);
    let seq = codec.encode("S:1\nB:1\nX:1\nK:C\nab|\n").unwrap();

    // Move parameters to O(1) scale so the 1e-3 step sits inside the smooth
    // regime of the first layer norm (the 0.02 init leaves its input variance
    // near epsilon, where curvature dwarfs the step).
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in model.parameters().iter() {
        let noise = (0..p.value.numel())
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                0.5 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect::<Vec<f64>>();
        let data: Vec<f64> = p
            .value
            .data_vec()
            .iter()
            .zip(&noise)
            .map(|(&a, &b)| a + b)
            .collect();
        p.value.set_data(data);
    }

    model.parameters().zero_grads();
    let loss = model.next_patch_loss(&seq).unwrap();
    loss.backward().unwrap();

    let step = 1e-3;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for p in model.parameters().iter() {
        let grads = p
            .value
            .grad_vec()
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        let base = p.value.data_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.value.set_data(plus);
            let lp = model.next_patch_loss(&seq).unwrap().item();
            let mut minus = base.clone();
            minus[i] -= step;
            p.value.set_data(minus);
            let lm = model.next_patch_loss(&seq).unwrap().item();
            p.value.set_data(base.clone());
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{} [{i}]: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})",
                p.name
            );
            checked += 1;
        }
    }
    println!(
        "criterion 05 (gradient check, {checked} parameters, worst rel err {worst:.2e}): PASS"
    );
}

#[test]
fn c06_init_loss_is_uniform_over_20_seeds() {
    let codec = PatchCodec::new(32, 32);
    let seq = codec
        .encode("S:1\nB:3\nX:1\nK:C\nab|cd|ef|\n")
        .unwrap();
    let expected = (99.0f64).ln();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), seed).unwrap();
        let loss = model.next_patch_loss(&seq).unwrap().item() as f64;
        let dev = (loss - expected).abs();
        worst = worst.max(dev);
        assert!(dev < 0.3, "seed {seed}: loss {loss} vs ln(99) {expected}");
    }
    println!("criterion 06 (init loss = ln(99) +/- 0.3, 20 seeds, worst dev {worst:.3}): PASS");
}

/// Prompt for the memorization probe: control prefix, header lines, and the
/// first two body units of the encoded tune.
fn prefix_and_two_bars(codec: &PatchCodec, text: &str) -> String {
    let units = codec.segment(text).unwrap();
    let mut out = String::new();
    let mut seen_key = false;
    let mut body_units = 0;
    for u in units {
        if !seen_key {
            out.push_str(&u);
            if u.starts_with("K:") {
                seen_key = true;
            }
        } else {
            if body_units == 2 {
                break;
            }
            out.push_str(&u);
            body_units += 1;
        }
    }
    out
}

#[test]
fn c07_overfit_and_exact_regeneration() {
    let start = Instant::now();
    let codec = PatchCodec::new(32, 32);
    let records = load_fixture_records("overfit8.abc", &codec);
    assert_eq!(records.len(), 8);

    let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), 7).unwrap();
    let hyper = Hyper {
        batch: 8,
        lr: 4e-3,
        steps: 500,
        seed: 7,
        warmup: 100,
        eval_every: 0,
    };
    let mut trainer = Trainer::new(model, &records, &[], hyper).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = trainer.train_step().unwrap();
    }
    assert!(loss < 0.1, "train loss {loss} after 500 steps");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "overfit took {secs:.0}s, budget 600s");

    let opts = SampleOpts {
        temperature: 0.0,
        max_patches: 32,
        ..SampleOpts::default()
    };
    let mut replayed = 0;
    for record in &records {
        let prompt = prefix_and_two_bars(&codec, &record.prefixed_text);
        let out = sample(&trainer.model, &codec, &prompt, &opts).unwrap();
        if out.text == record.prefixed_text {
            replayed += 1;
        }
    }
    assert!(
        replayed == records.len(),
        "only {replayed}/8 tunes regenerate exactly"
    );
    println!(
        "criterion 07 (overfit loss {loss:.4} in {secs:.0}s, 8/8 exact replays): PASS"
    );
}

#[test]
fn c08_attention_accounting_matches_formula() {
    // Analytic spot check at unit masses.
    let c = attention_cost_units(4096.0, 32.0, 3.0, 1.0);
    assert_eq!(c.flat, 67_108_864.0);
    assert_eq!(c.dual, 180_224.0);
    assert!((c.ratio - 372.4).abs() < 0.1, "ratio {}", c.ratio);

    let rows = attention_accounting::<f32>(&ModelConfig::toy(), &[256, 512, 1024], 808).unwrap();
    for row in &rows {
        let dual_err = (row.dual_measured - row.dual_analytic).abs() / row.dual_analytic;
        let flat_err = (row.flat_measured - row.flat_analytic).abs() / row.flat_analytic;
        assert!(
            dual_err < 0.05,
            "L={}: dual measured {} vs analytic {} ({dual_err:.4})",
            row.content_len,
            row.dual_measured,
            row.dual_analytic
        );
        assert!(
            flat_err < 0.05,
            "L={}: flat measured {} vs analytic {} ({flat_err:.4})",
            row.content_len,
            row.flat_measured,
            row.flat_analytic
        );
    }
    println!(
        "criterion 08 (op counters vs cost formula at L=256/512/1024, unit-mass ratio {:.1}): PASS",
        c.ratio
    );
}

#[test]
fn c09_throughput_ratio_dual_vs_flat() {
    let config = ModelConfig::toy();
    let dual: Model32 = DualDecoderModel::new(config.clone(), 909).unwrap();
    let flat: FlatDecoder<f32> = FlatDecoder::matched(&config, 909).unwrap();

    let (m, n) = dual.count_params();
    let parity = (flat.param_count() as f64 - (m + n) as f64).abs() / (m + n) as f64;
    assert!(parity < 0.05, "parameter parity {parity:.4}");

    let report = throughput_ratio(&dual, &flat, 5, 256, 909).unwrap();
    println!(
        "  absolute throughput (machine-dependent, reported only): dual {:.1} tok/s, flat {:.1} tok/s",
        report.dual_tps, report.flat_tps
    );
    assert!(
        report.ratio >= 1.5,
        "dual/flat throughput ratio {:.2} below 1.5",
        report.ratio
    );
    println!(
        "criterion 09 (median throughput ratio {:.1}x >= 1.5x at parity {:.2}%): PASS",
        report.ratio,
        parity * 100.0
    );
}

/// Deterministic synthetic corpus of short tunes with varied forms.
fn synth_corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    let codec = PatchCodec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = ["C", "D", "G", "A", "Em", "Am", "Bm", "F"];
    let notes = [
        "a", "b", "c", "d", "e", "f", "g", "A", "B", "c2", "d2", "e2", "ga", "ab", "ed", "cB",
    ];
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n {
        i += 1;
        let n_sec = rng.gen_range(1..=3usize);
        let mut sections: Vec<String> = Vec::new();
        for s in 0..n_sec {
            if s > 0 && rng.gen_bool(0.4) {
                let copy = sections[rng.gen_range(0..s)].clone();
                sections.push(copy);
                continue;
            }
            let n_bars = rng.gen_range(2..=4);
            let bars: Vec<String> = (0..n_bars)
                .map(|_| {
                    let len = rng.gen_range(1..=2);
                    (0..len)
                        .map(|_| notes[rng.gen_range(0..notes.len())])
                        .collect::<String>()
                })
                .collect();
            sections.push(bars.join("|"));
        }
        let mut body = String::new();
        for (s, sec) in sections.iter().enumerate() {
            body.push_str(sec);
            if s + 1 < n_sec {
                body.push_str(if rng.gen_bool(0.5) { ":|" } else { "||" });
            } else {
                body.push_str("|]");
            }
        }
        let key = keys[rng.gen_range(0..keys.len())];
        let src = format!("X:{i}\nK:{key}\n{body}\n");
        if let Ok(r) = prepare_record(&format!("gen-{i:04}"), &src, &codec, &STRUCTURAL_FIELDS) {
            out.push(r);
        }
    }
    out
}

#[test]
fn c10_controllability_pipeline() {
    // Ground truth against its own codes is exactly one.
    let codec = PatchCodec::default();
    let mut truth = load_fixture_records("annotated20.abc", &codec);
    truth.extend(load_fixture_records("ten_tunes.abc", &codec));
    let self_score = self_controllability(&truth).unwrap();
    assert_eq!(self_score, 1.0, "ground-truth self score {self_score}");

    // Desk-scale sanity floor: train on 200 synthetic tunes and score 50
    // prompts drawn from the training distribution.
    let records = synth_corpus(200, 1010);
    let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), 1010).unwrap();
    let hyper = Hyper {
        batch: 8,
        lr: 1e-3,
        steps: 2000,
        seed: 1010,
        warmup: 100,
        eval_every: 0,
    };
    let mut trainer = Trainer::new(model, &records, &[], hyper).unwrap();
    let mut loss = f64::INFINITY;
    for _ in 0..2000 {
        loss = trainer.train_step().unwrap();
    }

    let prompts: Vec<ControlCodes> = records
        .iter()
        .take(50)
        .map(|r| parse_prefix(&r.prefixed_text).unwrap().0)
        .collect();
    let base = SampleOpts {
        temperature: 1.0,
        top_p: 0.95,
        max_patches: 32,
        seed: 1010,
        forbid_stop: false,
    };
    let report = controllability(&trainer.model, &prompts, &base).unwrap();
    assert!(
        report.mean >= 0.5,
        "controllability {:.3} below the 0.5 floor (train loss {loss:.3})",
        report.mean
    );
    println!(
        "criterion 10 (self-controllability 1.0 exactly; trained controllability {:.3} >= 0.5, {} exact): PASS",
        report.mean, report.exact_matches
    );
}

#[test]
fn c11_determinism_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let input = data_path("ten_tunes.abc");

    // Preprocess twice: byte-identical corpus and validation files.
    let out1 = dir.path().join("c1.txt");
    let out2 = dir.path().join("c2.txt");
    let codec = PatchCodec::default();
    build_corpus(&[input.clone()], &out1, 0.2, 11, &codec, &STRUCTURAL_FIELDS).unwrap();
    build_corpus(&[input], &out2, 0.2, 11, &codec, &STRUCTURAL_FIELDS).unwrap();
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out2).unwrap()
    );
    assert_eq!(
        std::fs::read(val_path(&out1)).unwrap(),
        std::fs::read(val_path(&out2)).unwrap()
    );

    // Ten training steps twice: byte-identical checkpoints.
    let records = read_corpus(&out1).unwrap();
    let ckpts: Vec<Vec<u8>> = (0..2)
        .map(|run| {
            let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), 11).unwrap();
            let hyper = Hyper {
                batch: 4,
                lr: 1e-3,
                steps: 10,
                seed: 11,
                warmup: 5,
                eval_every: 0,
            };
            let mut trainer = Trainer::new(model, &records, &[], hyper).unwrap();
            for _ in 0..10 {
                trainer.train_step().unwrap();
            }
            let path = dir.path().join(format!("run{run}.ckpt"));
            trainer.model.save(&path).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    assert_eq!(ckpts[0], ckpts[1]);

    // Generation twice from the same seed: identical text.
    let model: Model32 = DualDecoderModel::new(ModelConfig::toy(), 11).unwrap();
    let gen_codec = PatchCodec::new(32, 32);
    let opts = SampleOpts {
        max_patches: 8,
        seed: 11,
        ..SampleOpts::default()
    };
    let a = sample(&model, &gen_codec, "S:1\nB:4\nX:1\nK:D\n", &opts).unwrap();
    let b = sample(&model, &gen_codec, "S:1\nB:4\nX:1\nK:D\n", &opts).unwrap();
    assert_eq!(a.text, b.text);
    println!("criterion 11 (deterministic preprocess/train/generate): PASS");
}
