//! Command-line front end for the melody toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Every run prints its
//! config digest and seed so results can be reproduced. Flags are validated
//! before any file is written, and all writers go through temp-then-rename.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tunegen_core::control::parse_prefix;
use tunegen_core::evalbench::{
    attention_accounting, controllability, efficiency, throughput_ratio, DualGenerator,
    FlatDecoder, GenReport,
};
use tunegen_core::generate::{check_form, sample, SampleOpts};
use tunegen_core::model::{flops_estimate, DualDecoderModel, ModelConfig};
use tunegen_core::patchtok::PatchCodec;
use tunegen_core::trainer::{
    build_corpus, default_keep_fields, read_corpus, val_path, Hyper, Trainer,
};
use tunegen_core::Model32;

const DATA_DIR_ENV: &str = "TUNEGEN_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "tunegen",
    version,
    about = "Melody generation: ABC preprocessing, control codes, bar patching, training, sampling, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Controllability,
    Efficiency,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Dual,
    Flat,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the training corpus from .abc tunebooks.
    Preprocess(PreprocessArgs),
    /// Train a model on a prepared corpus.
    Train(TrainArgs),
    /// Sample a tune from a checkpoint under a control-code prompt.
    Generate(GenerateArgs),
    /// Measure controllability or generation efficiency of a checkpoint.
    Eval(EvalArgs),
    /// Attention-cost accounting and dual-vs-flat throughput comparison.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input .abc files (tunes separated by blank lines).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output corpus file; validation records go to <out>.val.
    /// Defaults to $TUNEGEN_DATA_DIR/corpus.txt when the variable is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation fraction of accepted records.
    #[arg(long = "val-frac", default_value_t = 0.01)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file from `preprocess`; <corpus>.val is used when present.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    /// Checkpoint output path. Defaults to $TUNEGEN_DATA_DIR/model.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "eval-every", default_value_t = 50)]
    eval_every: u64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt file: control-code lines, then optional header and bars.
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long = "top-p", default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max-patches", default_value_t = 128)]
    max_patches: usize,
    /// Output file for the tune; metadata goes to <out>.meta. Stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Sample count (prompts or generated tunes).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Corpus supplying the control-code distribution.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long = "top-p", default_value_t = 0.95)]
    top_p: f64,
    /// Report file (key=value lines); table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "hardware-note", default_value = "unspecified-cpu")]
    hardware_note: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    mode: BenchMode,
    /// Timed runs per engine for the throughput comparison.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Characters generated per timed run.
    #[arg(long, default_value_t = 256)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Content lengths for the accounting table.
    #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024])]
    lens: Vec<usize>,
}

enum AppError {
    Usage(String),
    Data(String),
}

impl AppError {
    fn data<E: std::fmt::Display>(e: E) -> AppError {
        AppError::Data(e.to_string())
    }
}

type AppResult<T> = Result<T, AppError>;

fn digest_of(parts: &[String]) -> String {
    let d = Sha256::digest(parts.join("\x1f").as_bytes());
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn data_dir_default(name: &str) -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(|dir| PathBuf::from(dir).join(name))
}

fn require_out(opt: Option<PathBuf>, name: &str, flag: &str) -> AppResult<PathBuf> {
    opt.or_else(|| data_dir_default(name)).ok_or_else(|| {
        AppError::Usage(format!("missing {flag} (or set {DATA_DIR_ENV} for defaults)"))
    })
}

fn require_file(path: &Path, what: &str) -> AppResult<()> {
    if !path.is_file() {
        return Err(AppError::Data(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> AppResult<Model32> {
    require_file(path, "checkpoint")?;
    DualDecoderModel::load(path).map_err(AppError::data)
}

fn load_corpus_codes(
    path: &Path,
) -> AppResult<(Vec<tunegen_core::trainer::CorpusRecord>, Vec<tunegen_core::control::ControlCodes>)> {
    require_file(path, "corpus")?;
    let records = read_corpus(path).map_err(AppError::data)?;
    let mut codes = Vec::with_capacity(records.len());
    for r in &records {
        let (c, _) = parse_prefix(&r.prefixed_text).map_err(AppError::data)?;
        codes.push(c);
    }
    Ok((records, codes))
}

fn run_preprocess(args: PreprocessArgs) -> AppResult<()> {
    if !(0.0..=1.0).contains(&args.val_frac) {
        return Err(AppError::Usage(format!(
            "--val-frac {} outside [0, 1]",
            args.val_frac
        )));
    }
    let out = require_out(args.out, "corpus.txt", "--out")?;
    for input in &args.inputs {
        require_file(input, "input")?;
    }
    let digest = digest_of(&[
        "preprocess".into(),
        format!("{:?}", args.inputs),
        args.val_frac.to_string(),
        args.seed.to_string(),
    ]);
    println!("config digest: {digest}");
    println!("seed: {}", args.seed);

    let counts = build_corpus(
        &args.inputs,
        &out,
        args.val_frac,
        args.seed,
        &PatchCodec::default(),
        default_keep_fields(),
    )
    .map_err(AppError::data)?;
    println!("accepted: {}", counts.accepted);
    for (reason, n) in &counts.skipped {
        println!("skipped[{reason}]: {n}");
    }
    println!("train file: {}", out.display());
    println!("val file:   {}", val_path(&out).display());
    Ok(())
}

fn run_train(args: TrainArgs) -> AppResult<()> {
    if args.steps == 0 {
        return Err(AppError::Usage("--steps must be positive".into()));
    }
    if args.batch == 0 {
        return Err(AppError::Usage("--batch must be positive".into()));
    }
    if args.lr <= 0.0 {
        return Err(AppError::Usage("--lr must be positive".into()));
    }
    let corpus = require_out(args.corpus, "corpus.txt", "--corpus")?;
    let out = require_out(args.out, "model.ckpt", "--out")?;
    require_file(&corpus, "corpus")?;

    let config = args.preset.config();
    println!("config digest: {}", config.digest());
    println!("seed: {}", args.seed);

    let train_records = read_corpus(&corpus).map_err(AppError::data)?;
    let vp = val_path(&corpus);
    let val_records = if vp.is_file() {
        read_corpus(&vp).map_err(AppError::data)?
    } else {
        Vec::new()
    };
    println!(
        "records: {} train, {} validation",
        train_records.len(),
        val_records.len()
    );

    let model = Model32::new(config, args.seed).map_err(AppError::data)?;
    let (m, n) = model.count_params();
    println!("parameters: patch {m}, char {n}, total {}", m + n);
    let hyper = Hyper {
        batch: args.batch,
        lr: args.lr,
        steps: args.steps,
        seed: args.seed,
        warmup: args.warmup,
        eval_every: args.eval_every,
    };
    let mut trainer =
        Trainer::new(model, &train_records, &val_records, hyper).map_err(AppError::data)?;
    let report = trainer.run(Some(&out)).map_err(AppError::data)?;

    let mut curve_text = String::from("step\tkind\tloss\n");
    for pt in &report.curve {
        curve_text.push_str(&format!("{}\ttrain\t{}\n", pt.step, pt.loss));
    }
    for pt in &report.val_curve {
        curve_text.push_str(&format!("{}\tval\t{}\n", pt.step, pt.loss));
    }
    let curve_path = {
        let mut os = out.as_os_str().to_owned();
        os.push(".curve.tsv");
        PathBuf::from(os)
    };
    tunegen_core::fsutil::write_atomic(&curve_path, curve_text.as_bytes())
        .map_err(AppError::data)?;

    println!("final train loss: {:.6}", report.final_loss);
    if let Some(v) = report.best_val {
        println!("best validation loss: {v:.6}");
    }
    println!("checkpoint: {}", out.display());
    println!("loss curve: {}", curve_path.display());
    Ok(())
}

fn run_generate(args: GenerateArgs) -> AppResult<()> {
    if args.temperature < 0.0 {
        return Err(AppError::Usage("--temperature must be >= 0".into()));
    }
    if !(0.0 < args.top_p && args.top_p <= 1.0) {
        return Err(AppError::Usage("--top-p must be in (0, 1]".into()));
    }
    if args.max_patches == 0 {
        return Err(AppError::Usage("--max-patches must be positive".into()));
    }
    require_file(&args.prompt, "prompt")?;
    let model = load_model(&args.ckpt)?;
    println!("config digest: {}", model.config.digest());
    println!("seed: {}", args.seed);

    let prompt_raw = std::fs::read_to_string(&args.prompt)
        .map_err(|e| AppError::Data(format!("prompt {}: {e}", args.prompt.display())))?;
    let prompt = prompt_raw.replace("\r\n", "\n").replace('\r', "\n");
    let (requested, _) = parse_prefix(&prompt).map_err(AppError::data)?;

    let codec = PatchCodec::new(model.config.patch_size, model.config.max_patches());
    let opts = SampleOpts {
        temperature: args.temperature,
        top_p: args.top_p,
        max_patches: args.max_patches,
        seed: args.seed,
        forbid_stop: false,
    };
    let out = sample(&model, &codec, &prompt, &opts).map_err(AppError::data)?;
    let diff = check_form(&out.text, &requested);

    let mut meta = String::new();
    meta.push_str(&format!("seed={}\n", args.seed));
    meta.push_str(&format!("temperature={}\n", args.temperature));
    meta.push_str(&format!("top_p={}\n", args.top_p));
    meta.push_str(&format!("max_patches={}\n", args.max_patches));
    meta.push_str(&format!("generated_chars={}\n", out.generated_chars));
    meta.push_str(&format!("patches_generated={}\n", out.patches_generated));
    meta.push_str(&format!("budget_exhausted={}\n", out.budget_exhausted));
    meta.push_str(&format!("form_match={}\n", diff.matches));
    meta.push_str(&format!("form_similarity={:.6}\n", diff.similarity));
    for d in &diff.deltas {
        meta.push_str(&format!(
            "form_delta={} requested={:?} generated={:?}\n",
            d.code, d.requested, d.generated
        ));
    }

    match &args.out {
        Some(path) => {
            tunegen_core::fsutil::write_atomic(path, out.text.as_bytes())
                .map_err(AppError::data)?;
            let meta_path = {
                let mut os = path.as_os_str().to_owned();
                os.push(".meta");
                PathBuf::from(os)
            };
            tunegen_core::fsutil::write_atomic(&meta_path, meta.as_bytes())
                .map_err(AppError::data)?;
            println!("tune: {}", path.display());
            println!("meta: {}", meta_path.display());
        }
        None => {
            println!("--- tune ---");
            print!("{}", out.text);
            println!("--- meta ---");
            print!("{meta}");
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> AppResult<()> {
    if args.n == 0 {
        return Err(AppError::Usage("--n must be positive".into()));
    }
    let corpus = require_out(args.corpus, "corpus.txt", "--corpus")?;
    let model = load_model(&args.ckpt)?;
    println!("config digest: {}", model.config.digest());
    println!("seed: {}", args.seed);
    let (_, codes) = load_corpus_codes(&corpus)?;
    if codes.is_empty() {
        return Err(AppError::Data(format!(
            "corpus {} has no records",
            corpus.display()
        )));
    }

    let base = SampleOpts {
        temperature: args.temperature,
        top_p: args.top_p,
        max_patches: model.config.max_patches(),
        seed: args.seed,
        forbid_stop: false,
    };
    let mut report = GenReport {
        tokens_per_second: None,
        controllability: None,
        n_samples: args.n,
        config_digest: model.config.digest(),
        hardware_note: args.hardware_note.clone(),
    };
    match args.metric {
        Metric::Controllability => {
            let prompts =
                tunegen_core::evalbench::sample_prompt_codes(&codes, args.n, args.seed);
            let r = controllability(&model, &prompts, &base).map_err(AppError::data)?;
            println!("exact matches: {}/{}", r.exact_matches, args.n);
            report.controllability = Some(r.mean);
        }
        Metric::Efficiency => {
            let generator = DualGenerator::new(&model);
            let r = efficiency(&generator, &codes, args.n, &base).map_err(AppError::data)?;
            println!(
                "generated {} tokens in {:.3}s",
                r.tokens, r.seconds
            );
            report.tokens_per_second = Some(r.tokens_per_second);
        }
    }
    print!("{}", report.to_table());
    if let Some(path) = &args.out {
        report.write(path).map_err(AppError::data)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> AppResult<()> {
    if args.runs == 0 || args.budget == 0 {
        return Err(AppError::Usage("--runs and --budget must be positive".into()));
    }
    let config = args.preset.config();
    for &l in &args.lens {
        if l == 0 || l % config.patch_size != 0 {
            return Err(AppError::Usage(format!(
                "--lens entry {l} must be a positive multiple of patch size {}",
                config.patch_size
            )));
        }
    }
    println!("config digest: {}", config.digest());
    println!("seed: {}", args.seed);

    let est = flops_estimate(&config);
    println!(
        "analytic attention cost at L={}, P={}: dual {:.3e}, flat {:.3e}, ratio {:.1}",
        config.max_len, config.patch_size, est.dual, est.flat, est.ratio
    );

    println!(
        "{:<8}{:>14}{:>14}{:>9}{:>14}{:>14}{:>9}",
        "L", "dual-analytic", "dual-measured", "err%", "flat-analytic", "flat-measured", "err%"
    );
    let rows = attention_accounting::<f32>(&config, &args.lens, args.seed)
        .map_err(AppError::data)?;
    for row in &rows {
        let dual_err = 100.0 * (row.dual_measured - row.dual_analytic).abs() / row.dual_analytic;
        let flat_err = 100.0 * (row.flat_measured - row.flat_analytic).abs() / row.flat_analytic;
        let (da, dm, de, fa, fm, fe) = match args.mode {
            BenchMode::Dual => (
                format!("{:.4e}", row.dual_analytic),
                format!("{:.4e}", row.dual_measured),
                format!("{dual_err:.2}"),
                "-".into(),
                "-".into(),
                "-".into(),
            ),
            BenchMode::Flat => (
                "-".into(),
                "-".into(),
                "-".into(),
                format!("{:.4e}", row.flat_analytic),
                format!("{:.4e}", row.flat_measured),
                format!("{flat_err:.2}"),
            ),
            BenchMode::Both => (
                format!("{:.4e}", row.dual_analytic),
                format!("{:.4e}", row.dual_measured),
                format!("{dual_err:.2}"),
                format!("{:.4e}", row.flat_analytic),
                format!("{:.4e}", row.flat_measured),
                format!("{flat_err:.2}"),
            ),
        };
        println!(
            "{:<8}{:>14}{:>14}{:>9}{:>14}{:>14}{:>9}",
            row.content_len, da, dm, de, fa, fm, fe
        );
    }

    if matches!(args.mode, BenchMode::Both) {
        let dual = Model32::new(config.clone(), args.seed).map_err(AppError::data)?;
        let flat = FlatDecoder::<f32>::matched(&config, args.seed).map_err(AppError::data)?;
        let (m, n) = dual.count_params();
        println!(
            "throughput: dual {} params vs flat {} params, {} runs x {} chars",
            m + n,
            flat.param_count(),
            args.runs,
            args.budget
        );
        let r = throughput_ratio(&dual, &flat, args.runs, args.budget, args.seed)
            .map_err(AppError::data)?;
        println!(
            "dual {:.1} tokens/s | flat {:.1} tokens/s | ratio {:.2}x (absolute numbers are machine-dependent)",
            r.dual_tps, r.flat_tps, r.ratio
        );
    }
    Ok(())
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.cmd {
        Cmd::Preprocess(args) => run_preprocess(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Generate(args) => run_generate(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Bench(args) => run_bench(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
