//! `radkg`: corpus generation, preprocessing, vocabulary extension,
//! annotation, masking, toy training and the invariant suite.
//!
//! Exit codes: 0 success, 1 pipeline failure (JSON message on stderr),
//! 2 usage error or missing input file.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use radkg::annotator::AnnotationRecord;
use radkg::corpus::{HeaderPatternSet, RawReport, RegexRuleSet, SectionedReport, DEFAULT_BUDGET};
use radkg::losses::{evaluate_all, LossConfig, LossWeights, Reduction, RtdBatch};
use radkg::masking::Objective;
use radkg::pipeline::{self, MaskRecord};
use radkg::syngen::{self, Template};
use radkg::taxonomy::Taxonomy;
use radkg::tokenizer::{provenance_path, Vocabulary};
use radkg::toymodel::{self, MaskingStrategy, Schedule, TrainConfig, TrainError};
use radkg::{fixtures, jsonl, verify};

use settings::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "radkg", version, about = "Knowledge-aware pretraining data and loss toolkit")]
struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat TOML file of defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug, trace or off.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a templated corpus with gold annotations.
    Syngen(SyngenArgs),
    /// Clean reports and split them into labeled sections and sentences.
    Preprocess(PreprocessArgs),
    /// Learn WordPiece tokens and extend the base vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Dump entity annotations for every chunk.
    Annotate(AnnotateArgs),
    /// Produce one masked example per chunk.
    Mask(MaskArgs),
    /// Train the toy generator/discriminator pair.
    Train(Box<TrainArgs>),
    /// Evaluate every loss on one batch.
    LossEval(LossEvalArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SyngenArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tax: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    headers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Raw reports (JSONL); defaults to the bundled fixture reports.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    headers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    /// Raw reports (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    tax: Option<PathBuf>,
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    headers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    /// Sectioned reports (JSONL) as written by `preprocess`.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    tax: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// mlm, kg or ss.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    tax: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    objective: Option<String>,
    /// random or kg.
    #[arg(long)]
    masking: Option<String>,
    /// Raw reports (JSONL); defaults to the bundled fixture reports.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Extended vocabulary; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    tax: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    headers: Option<PathBuf>,
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// polynomial or constant.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_kg: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct LossEvalArgs {
    /// RtdBatch JSON file.
    #[arg(long)]
    batch: PathBuf,
    /// Precomputed regularizer value.
    #[arg(long, default_value_t = 0.0)]
    reg: f64,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_kg: Option<f64>,
    #[arg(long)]
    reg_sign: Option<f64>,
    /// sum or mean.
    #[arg(long, default_value = "sum")]
    reduction: String,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    reports: Option<usize>,
    /// Also re-check a `mask` dump.
    #[arg(long)]
    masked: Option<PathBuf>,
    /// Vocabulary the dump was masked with.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

enum Failure {
    Usage(anyhow::Error),
    Pipeline { stage: &'static str, error: anyhow::Error },
}

type Res<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn failed<E: Into<anyhow::Error>>(stage: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Pipeline { stage, error: e.into() }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    out_given: bool,
    file: FileConfig,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn existing(flag: Option<PathBuf>, file: Option<PathBuf>) -> Res<Option<PathBuf>> {
    match flag.or(file) {
        Some(p) if !p.is_file() => Err(usage(anyhow!("missing file: {}", p.display()))),
        other => Ok(other),
    }
}

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| usage(anyhow!("cannot read {}: {e}", path.display())))
}

fn load_tax(p: Option<PathBuf>) -> Res<Taxonomy> {
    match p {
        Some(p) => Taxonomy::load(&p).map_err(failed("taxonomy")),
        None => Ok(fixtures::taxonomy()),
    }
}

fn load_vocab(p: Option<PathBuf>) -> Res<Vocabulary> {
    match p {
        Some(p) => Vocabulary::load(&p).map_err(failed("vocabulary")),
        None => Ok(fixtures::base_vocab()),
    }
}

fn load_rules(p: Option<PathBuf>) -> Res<RegexRuleSet> {
    match p {
        Some(p) => RegexRuleSet::parse(&read_text(&p)?).map_err(failed("rules")),
        None => Ok(fixtures::clean_rules()),
    }
}

fn load_headers(p: Option<PathBuf>) -> Res<HeaderPatternSet> {
    match p {
        Some(p) => HeaderPatternSet::parse(&read_text(&p)?).map_err(failed("headers")),
        None => Ok(fixtures::header_patterns()),
    }
}

fn load_reports(p: Option<PathBuf>) -> Res<Vec<RawReport>> {
    match p {
        Some(p) => jsonl::read(&p).map_err(failed("corpus")),
        None => Ok(fixtures::fixture_reports()),
    }
}

/// Sectioned input; without a file the bundled fixture reports are preprocessed.
fn load_sectioned(p: Option<PathBuf>) -> Res<Vec<SectionedReport>> {
    match p {
        Some(p) => jsonl::read(&p).map_err(failed("sectioned")),
        None => Ok(pipeline::preprocess(
            &fixtures::fixture_reports(),
            &fixtures::clean_rules(),
            &fixtures::header_patterns(),
        )),
    }
}

fn parse_objective(s: Option<String>) -> Res<Objective> {
    s.unwrap_or_else(|| "mlm".into())
        .parse()
        .map_err(|e: String| usage(anyhow!(e)))
}

impl Ctx {
    fn out_dir(&self) -> Res<&Path> {
        fs::create_dir_all(&self.out).map_err(failed("output"))?;
        Ok(&self.out)
    }

    fn write(&self, name: &str, text: &str) -> Res<PathBuf> {
        let path = self.out_dir()?.join(name);
        fs::write(&path, text).map_err(failed("output"))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn syngen_cmd(ctx: &Ctx, a: SyngenArgs) -> Res<()> {
    let f = &ctx.file;
    let tax = load_tax(existing(a.tax, f.tax.clone())?)?;
    let templates = match existing(a.templates, f.templates.clone())? {
        Some(p) => Template::load(&p).map_err(failed("templates"))?,
        None => fixtures::templates(),
    };
    let headers = load_headers(existing(a.headers, f.headers.clone())?)?;
    let n = pick(a.n, f.n, 500);
    let generated = syngen::generate(n, &tax, &templates, &headers, ctx.seed).map_err(failed("syngen"))?;
    let reports: Vec<_> = generated.iter().map(|g| &g.report).collect();
    let gold: Vec<_> = generated.iter().map(|g| &g.gold).collect();
    ctx.write("corpus.jsonl", &jsonl::to_string(&reports))?;
    ctx.write("gold.jsonl", &jsonl::to_string(&gold))?;
    Ok(())
}

fn preprocess_cmd(ctx: &Ctx, a: PreprocessArgs) -> Res<()> {
    let f = &ctx.file;
    let reports = load_reports(existing(a.input, f.corpus.clone())?)?;
    let rules = load_rules(existing(a.rules, f.rules.clone())?)?;
    let headers = load_headers(existing(a.headers, f.headers.clone())?)?;
    let sectioned = pipeline::preprocess(&reports, &rules, &headers);
    ctx.write("sectioned.jsonl", &jsonl::to_string(&sectioned))?;
    Ok(())
}

fn build_vocab_cmd(ctx: &Ctx, a: BuildVocabArgs) -> Res<()> {
    let f = &ctx.file;
    let base = load_vocab(existing(a.base, f.base.clone())?)?;
    let reports = load_reports(existing(a.corpus, f.corpus.clone())?)?;
    let tax = load_tax(existing(a.tax, f.tax.clone())?)?;
    let rules = load_rules(existing(a.rules, f.rules.clone())?)?;
    let headers = load_headers(existing(a.headers, f.headers.clone())?)?;
    let target = pick(a.target_size, f.target_size, 1200);
    let sectioned = pipeline::preprocess(&reports, &rules, &headers);
    let vocab = pipeline::build_vocabulary(&sectioned, &base, &tax, target).map_err(failed("build-vocab"))?;
    let path = ctx.out_dir()?.join("vocab.txt");
    vocab.save(&path).map_err(failed("output"))?;
    log::info!(
        "wrote {} ({} tokens, {} new) and {}",
        path.display(),
        vocab.len(),
        vocab.len() - base.len(),
        provenance_path(&path).display()
    );
    Ok(())
}

fn annotate_cmd(ctx: &Ctx, a: AnnotateArgs) -> Res<()> {
    let f = &ctx.file;
    let sectioned = load_sectioned(existing(a.input, None)?)?;
    let tax = load_tax(existing(a.tax, f.tax.clone())?)?;
    let vocab = load_vocab(existing(a.vocab, f.vocab.clone())?)?;
    let budget = pick(a.budget, f.budget, DEFAULT_BUDGET);
    let chunks = pipeline::encode(&sectioned, &vocab, budget).map_err(failed("encode"))?;
    let annotations = pipeline::annotate_all(&chunks, &tax);
    let records: Vec<_> = chunks
        .iter()
        .zip(&annotations)
        .map(|(c, a)| AnnotationRecord::new(c, &a.spans))
        .collect();
    ctx.write("annotations.jsonl", &jsonl::to_string(&records))?;
    Ok(())
}

fn mask_cmd(ctx: &Ctx, a: MaskArgs) -> Res<()> {
    let f = &ctx.file;
    let objective = parse_objective(a.objective.or(f.objective.clone()))?;
    let sectioned = load_sectioned(existing(a.input, None)?)?;
    let vocab = load_vocab(existing(a.vocab, f.vocab.clone())?)?;
    let tax = load_tax(existing(a.tax, f.tax.clone())?)?;
    let budget = pick(a.budget, f.budget, DEFAULT_BUDGET);
    let chunks = pipeline::encode(&sectioned, &vocab, budget).map_err(failed("encode"))?;
    let annotations = pipeline::annotate_all(&chunks, &tax);
    let (records, skipped) = pipeline::mask_records(&chunks, &annotations, objective, &vocab, ctx.seed);
    for e in &skipped {
        log::warn!("skipped: {e}");
    }
    ctx.write("masked.jsonl", &jsonl::to_string(&records))?;
    Ok(())
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> Res<TrainConfig> {
    let f = &ctx.file;
    let d = TrainConfig::default();
    let masking = match a.masking.clone().or(f.masking.clone()) {
        Some(s) => Some(s.parse::<MaskingStrategy>().map_err(|e| usage(anyhow!(e)))?),
        None => None,
    };
    let schedule = match a.schedule.clone().or(f.schedule.clone()).as_deref() {
        None => d.schedule,
        Some("polynomial") => Schedule::Polynomial,
        Some("constant") => Schedule::Constant,
        Some(other) => return Err(usage(anyhow!("unknown schedule {other:?}"))),
    };
    let d_model = pick(a.d_model, f.d_model, d.d_model);
    Ok(TrainConfig {
        objective: parse_objective(a.objective.clone().or(f.objective.clone()))?,
        masking,
        steps: pick(a.steps, f.steps, d.steps),
        batch_size: pick(a.batch_size, f.batch_size, d.batch_size),
        lr: pick(a.lr, f.lr, d.lr),
        schedule,
        warmup_frac: f.warmup_frac.unwrap_or(d.warmup_frac),
        weight_decay: f.weight_decay.unwrap_or(d.weight_decay),
        run_seed: ctx.seed,
        weights: LossWeights {
            lambda_a: pick(a.lambda_a, f.lambda_a, d.weights.lambda_a),
            lambda_kg: pick(a.lambda_kg, f.lambda_kg, d.weights.lambda_kg),
        },
        reg_sign: f.reg_sign.unwrap_or(d.reg_sign),
        tau: f.tau.unwrap_or(d.tau),
        d_model,
        d_ff: f.d_ff.unwrap_or(2 * d_model),
        max_len: f.max_len.unwrap_or(d.max_len),
        eval_every: pick(a.eval_every, f.eval_every, d.eval_every),
        patience: f.patience.unwrap_or(d.patience),
        checkpoint_every: pick(a.checkpoint_every, f.checkpoint_every, d.checkpoint_every),
    })
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Res<()> {
    let f = &ctx.file;
    let cfg = train_config(ctx, &a)?;
    cfg.validate().map_err(usage)?;
    let reports = load_reports(existing(a.corpus, f.corpus.clone())?)?;
    let vocab_path = existing(a.vocab, f.vocab.clone())?;
    let base = load_vocab(existing(a.base, f.base.clone())?)?;
    let tax = load_tax(existing(a.tax, f.tax.clone())?)?;
    let rules = load_rules(existing(a.rules, f.rules.clone())?)?;
    let headers = load_headers(existing(a.headers, f.headers.clone())?)?;
    let vocab = match vocab_path {
        Some(p) => Vocabulary::load(&p).map_err(failed("vocabulary"))?,
        None => {
            let sectioned = pipeline::preprocess(&reports, &rules, &headers);
            let target = pick(a.target_size, f.target_size, 1200);
            pipeline::build_vocabulary(&sectioned, &base, &tax, target).map_err(failed("build-vocab"))?
        }
    };
    let data = pipeline::prepare_training(&reports, &rules, &headers, &vocab, &base, &tax, cfg.max_len)
        .map_err(failed("prepare"))?;
    let out = ctx.out_dir()?.to_path_buf();
    vocab.save(&out.join("vocab.txt")).map_err(failed("output"))?;
    let outcome = match toymodel::train(&cfg, &data, &vocab, Some(&out)) {
        Ok(o) => o,
        Err(e @ TrainError::Config(_)) => return Err(usage(e)),
        Err(e) => return Err(failed("train")(e)),
    };
    let r = &outcome.report;
    log::info!(
        "{} steps, best step {}, rtd auc {:?}, section accuracy {:?}",
        r.steps_run,
        r.best_step,
        r.rtd_auc,
        r.section_accuracy
    );
    let text = serde_json::to_string_pretty(r).map_err(failed("output"))?;
    ctx.write("train_report.json", &text)?;
    Ok(())
}

fn loss_eval_cmd(ctx: &Ctx, a: LossEvalArgs) -> Res<()> {
    let f = &ctx.file;
    let path = existing(Some(a.batch), None)?.expect("flag is required");
    let batch: RtdBatch<f64> = serde_json::from_str(&read_text(&path)?).map_err(failed("batch"))?;
    let d = LossWeights::default();
    let weights = LossWeights {
        lambda_a: pick(a.lambda_a, f.lambda_a, d.lambda_a),
        lambda_kg: pick(a.lambda_kg, f.lambda_kg, d.lambda_kg),
    };
    let reduction = match a.reduction.as_str() {
        "sum" => Reduction::Sum,
        "mean" => Reduction::Mean,
        other => return Err(usage(anyhow!("unknown reduction {other:?}"))),
    };
    let cfg = LossConfig {
        reg_sign: pick(a.reg_sign, f.reg_sign, 1.0),
        reduction,
    };
    let report = evaluate_all(&batch, a.reg, &weights, &cfg).map_err(failed("loss-eval"))?;
    let text = serde_json::to_string_pretty(&report).map_err(failed("output"))?;
    println!("{text}");
    if ctx.out_given {
        ctx.write("losses.json", &text)?;
    }
    Ok(())
}

fn verify_cmd(ctx: &Ctx, a: VerifyArgs) -> Res<bool> {
    let f = &ctx.file;
    let d = verify::VerifyOptions::default();
    let opts = verify::VerifyOptions {
        seed: ctx.seed,
        trials: pick(a.trials, f.trials, d.trials),
        reports: pick(a.reports, f.reports, d.reports),
    };
    let masked = existing(a.masked, None)?;
    let vocab_path = existing(a.vocab, f.vocab.clone())?;
    let mut report = verify::run(&opts);
    if let Some(p) = masked {
        let records: Vec<MaskRecord> = jsonl::read(&p).map_err(failed("masked"))?;
        let vocab = load_vocab(vocab_path)?;
        report
            .checks
            .push(verify::check_mask_records(&records, &vocab, "masking.dump"));
    }
    for c in report.failures() {
        log::error!("{}: {}", c.name, c.detail);
    }
    let text = report.to_json();
    println!("{text}");
    if ctx.out_given {
        ctx.write("verify.json", &text)?;
    }
    Ok(report.passed())
}

const LEVELS: [&str; 6] = ["off", "error", "warn", "info", "debug", "trace"];

fn run(cli: Cli) -> Res<bool> {
    let file = match &cli.config {
        Some(p) if !p.is_file() => return Err(usage(anyhow!("missing file: {}", p.display()))),
        Some(p) => FileConfig::load(p).map_err(|e| usage(e.context(format!("config {}", p.display()))))?,
        None => FileConfig::default(),
    };
    let level = cli
        .log_level
        .clone()
        .or(file.log_level.clone())
        .unwrap_or_else(|| "warn".into());
    if !LEVELS.contains(&level.as_str()) {
        return Err(usage(anyhow!("unknown log level {level:?}")));
    }
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();
    let out_given = cli.out.is_some() || file.out.is_some();
    let ctx = Ctx {
        seed: pick(cli.seed, file.seed, 0),
        out: pick(cli.out, file.out.clone(), PathBuf::from(".")),
        out_given,
        file,
    };
    match cli.cmd {
        Command::Syngen(a) => syngen_cmd(&ctx, a)?,
        Command::Preprocess(a) => preprocess_cmd(&ctx, a)?,
        Command::BuildVocab(a) => build_vocab_cmd(&ctx, a)?,
        Command::Annotate(a) => annotate_cmd(&ctx, a)?,
        Command::Mask(a) => mask_cmd(&ctx, a)?,
        Command::Train(a) => train_cmd(&ctx, *a)?,
        Command::LossEval(a) => loss_eval_cmd(&ctx, a)?,
        Command::Verify(a) => return verify_cmd(&ctx, a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline { stage, error }) => {
            let msg = serde_json::json!({ "error": "pipeline", "stage": stage, "message": format!("{error:#}") });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
