//! `lppa`: command-line front end for the PHI toolkit.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lppa_core::annotate::{annotate_corpus, RetryPolicy};
use lppa_core::cost::{self, average_tokens, estimate_cost, CharHeuristic, PricingConfig};
use lppa_core::deid::{deidentify_batch, verify_clean, Replacement, Residual};
use lppa_core::eval::{paired_t_test, render_report, score_corpus, EvalReport, TTestResult};
use lppa_core::model::{read_corpus_file, write_corpus_file};
use lppa_core::offline::OfflineResponder;
use lppa_core::prompts::build_task_prompt;
use lppa_core::quality::{quality_report, Ontology, QualityConfig};
use lppa_core::rules::{load_ruleset, tag_corpus, Ruleset};
use lppa_core::synth::{
    bundled_exemplars, bundled_records, export_training_set, generate, mix_corpora, plan_aeg_jobs, plan_spi_jobs,
    read_records, GenerationMode, Pools,
};
use lppa_core::transport::{
    AuditingTransport, ChatTransport, EndpointConfig, HttpTransport, RecordingTransport, ReplayTransport,
};
use lppa_core::{EntityType, Execution, NoteRecord, PhiDictionary};

use config::AppConfig;

#[derive(Parser)]
#[command(
    name = "lppa",
    version,
    about = "PHI annotation, synthetic notes, de-identification and evaluation"
)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic notes with their PHI.
    Generate(GenerateArgs),
    /// Shuffle two corpora together.
    Mix(MixArgs),
    /// Annotate notes with the rule tagger.
    Tag(TagArgs),
    /// Annotate notes through a chat endpoint.
    Annotate(AnnotateArgs),
    /// Replace PHI mentions with type labels.
    Deid(DeidArgs),
    /// Score predictions against gold annotations.
    Eval(EvalArgs),
    /// Diversity, fluency, richness and plausibility of a corpus.
    Synthqual(SynthqualArgs),
    /// Write the chat-format instruction-tuning file.
    ExportTrain(ExportArgs),
    /// Estimate tokens and cost of a run.
    Cost(CostArgs),
}

#[derive(Args)]
struct EndpointArgs {
    /// `offline` (alias `mock`), `replay:<file>` or an http(s) base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Maximum requests in flight.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Append every exchange to this replay file.
    #[arg(long)]
    record_to: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Aeg,
    Spi,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Number of notes. For spi, records are reused in order when fewer.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Structured records (JSONL) for spi; defaults to the bundled sample.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Exemplar note file; repeatable. Defaults to the bundled exemplars.
    #[arg(long = "exemplar")]
    exemplars: Vec<PathBuf>,
    /// Include bundled exemplars in the aeg user message.
    #[arg(long)]
    aeg_exemplars: bool,
    /// Simulate an e-mail address for spi identities.
    #[arg(long)]
    email: bool,
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RuleArgs {
    /// Pattern file (TYPE, priority, regex; tab separated).
    #[arg(long, requires = "dictionaries")]
    patterns: Option<PathBuf>,
    /// Directory of `<TYPE>.txt` dictionaries.
    #[arg(long, requires = "patterns")]
    dictionaries: Option<PathBuf>,
    /// Drop every rule for a category; repeatable.
    #[arg(long)]
    without: Vec<EntityType>,
}

#[derive(Args)]
struct TagArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    rules: RuleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeidArgs {
    /// Corpus whose `phi` field lists the mentions to replace.
    #[arg(long)]
    input: PathBuf,
    /// Label template containing `{TYPE}`.
    #[arg(long)]
    label_format: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Prediction corpus as `name=path` or `path`; repeatable.
    #[arg(long = "pred", required = true)]
    preds: Vec<String>,
    /// System the others are tested against (default: the first).
    #[arg(long)]
    baseline: Option<String>,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthqualArgs {
    #[arg(long)]
    input: PathBuf,
    /// Corpus the language model is trained on.
    #[arg(long)]
    reference: PathBuf,
    /// One term per line; defaults to the bundled list.
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    k: f64,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    calls: u64,
    #[arg(long, conflicts_with = "sample")]
    avg_in: Option<u64>,
    #[arg(long, conflicts_with = "sample")]
    avg_out: Option<u64>,
    /// Corpus to estimate average prompt and reply sizes from.
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Pricing file; use with --model.
    #[arg(long)]
    pricing: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, requires = "out_price")]
    in_price: Option<f64>,
    #[arg(long, requires = "in_price")]
    out_price: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct Ctx {
    cfg: AppConfig,
    exec: Execution,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    let ctx = Ctx {
        cfg,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Mix(a) => cmd_mix(&ctx, a),
        Command::Tag(a) => cmd_tag(&ctx, a),
        Command::Annotate(a) => cmd_annotate(&ctx, a),
        Command::Deid(a) => cmd_deid(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Synthqual(a) => cmd_synthqual(&ctx, a),
        Command::ExportTrain(a) => cmd_export(a),
        Command::Cost(a) => cmd_cost(&ctx, a),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<NoteRecord>> {
    read_corpus_file(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn write_corpus(path: &Path, notes: &[NoteRecord]) -> Result<()> {
    write_corpus_file(path, notes).with_context(|| format!("writing {}", path.display()))
}

fn open_transport(ctx: &Ctx, args: &EndpointArgs) -> Result<AuditingTransport<Box<dyn ChatTransport>>> {
    let spec = args
        .endpoint
        .clone()
        .or_else(|| ctx.cfg.endpoint.clone())
        .ok_or_else(|| anyhow!("no endpoint given (--endpoint or config `endpoint`)"))?;
    let base: Box<dyn ChatTransport> = if spec == "offline" || spec == "mock" {
        Box::new(OfflineResponder::new(load_rules(ctx, None)?, load_pools(ctx)?))
    } else if let Some(path) = spec.strip_prefix("replay:") {
        Box::new(ReplayTransport::open(Path::new(path))?)
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        let model = args
            .model
            .clone()
            .or_else(|| ctx.cfg.model.clone())
            .ok_or_else(|| anyhow!("an http endpoint needs --model"))?;
        let mut ep = EndpointConfig::new(spec, model).with_api_key_from_env();
        if let Some(t) = ctx.cfg.timeout_secs {
            ep.timeout_secs = t;
        }
        Box::new(HttpTransport::new(ep))
    } else {
        bail!("unrecognised endpoint `{spec}`");
    };
    let base: Box<dyn ChatTransport> = match &args.record_to {
        Some(p) => Box::new(RecordingTransport::new(base, p).with_context(|| format!("opening {}", p.display()))?),
        None => base,
    };
    Ok(AuditingTransport::new(base))
}

fn concurrency(ctx: &Ctx, args: &EndpointArgs) -> usize {
    args.concurrency.or(ctx.cfg.concurrency).unwrap_or(4).max(1)
}

fn retry_policy(ctx: &Ctx) -> RetryPolicy {
    ctx.cfg.retry.clone()
}

fn load_rules(ctx: &Ctx, args: Option<&RuleArgs>) -> Result<Ruleset> {
    let mut rules = match (
        args.and_then(|a| a.patterns.as_ref().zip(a.dictionaries.as_ref())),
        &ctx.cfg.rules,
    ) {
        (Some((p, d)), _) => load_ruleset(p, d)?,
        (None, Some(r)) => load_ruleset(&r.patterns, &r.dictionaries)?,
        (None, None) => Ruleset::bundled(),
    };
    for t in args.map(|a| a.without.as_slice()).unwrap_or_default() {
        rules = rules.without(*t);
    }
    Ok(rules)
}

fn load_pools(ctx: &Ctx) -> Result<Pools> {
    Ok(match &ctx.cfg.pools {
        Some(dir) => Pools::load(dir)?,
        None => Pools::bundled(),
    })
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(ctx.cfg.seed);
    let exemplars = if a.exemplars.is_empty() {
        bundled_exemplars()
    } else {
        a.exemplars
            .iter()
            .map(|p| {
                std::fs::read_to_string(p)
                    .map(|s| s.trim().to_string())
                    .with_context(|| format!("reading {}", p.display()))
            })
            .collect::<Result<_>>()?
    };
    let jobs = match a.mode {
        Mode::Aeg => {
            let n = a.count.ok_or_else(|| anyhow!("--count is required for aeg"))?;
            let shown = if a.aeg_exemplars { exemplars } else { Vec::new() };
            plan_aeg_jobs(n, seed, &shown)
        }
        Mode::Spi => {
            let records = match &a.records {
                Some(p) => {
                    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                    read_records(std::io::BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?
                }
                None => bundled_records(),
            };
            if records.is_empty() {
                bail!("no structured records");
            }
            let n = a.count.unwrap_or(records.len());
            let chosen: Vec<_> = (0..n).map(|i| records[i % records.len()].clone()).collect();
            plan_spi_jobs(&chosen, &load_pools(ctx)?, &exemplars, seed, a.email)?
        }
    };
    let transport = open_transport(ctx, &a.endpoint)?;
    let results = generate(&jobs, &transport, &retry_policy(ctx), concurrency(ctx, &a.endpoint));
    let mut notes = Vec::new();
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(g) => notes.push(g.record),
            Err(e) => {
                failed += 1;
                log::error!("job {}: {e}", i + 1);
            }
        }
    }
    write_corpus(&a.out, &notes)?;
    let mode = match a.mode {
        Mode::Aeg => GenerationMode::Aeg,
        Mode::Spi => GenerationMode::Spi,
    };
    eprintln!(
        "generated {} {mode} notes ({} calls) -> {}",
        notes.len(),
        transport.calls(),
        a.out.display()
    );
    if failed > 0 {
        bail!("{failed} of {} generation jobs failed", jobs.len());
    }
    Ok(())
}

fn cmd_mix(ctx: &Ctx, a: MixArgs) -> Result<()> {
    let mixed = mix_corpora(read_corpus(&a.a)?, read_corpus(&a.b)?, a.seed.unwrap_or(ctx.cfg.seed));
    write_corpus(&a.out, &mixed)?;
    eprintln!("mixed {} notes -> {}", mixed.len(), a.out.display());
    Ok(())
}

fn cmd_tag(ctx: &Ctx, a: TagArgs) -> Result<()> {
    let rules = load_rules(ctx, Some(&a.rules))?;
    let notes = read_corpus(&a.input)?;
    let tagged = tag_corpus(&notes, &rules, ctx.exec);
    let out: Vec<NoteRecord> = notes.into_iter().zip(tagged).map(|(n, phi)| n.with_phi(phi)).collect();
    write_corpus(&a.out, &out)?;
    eprintln!("tagged {} notes -> {}", out.len(), a.out.display());
    Ok(())
}

fn cmd_annotate(ctx: &Ctx, a: AnnotateArgs) -> Result<()> {
    let notes = read_corpus(&a.input)?;
    let transport = open_transport(ctx, &a.endpoint)?;
    let outcomes = annotate_corpus(&notes, &transport, &retry_policy(ctx), concurrency(ctx, &a.endpoint));
    let mut out = Vec::new();
    let mut failed = 0;
    for (note, o) in notes.into_iter().zip(outcomes) {
        match o.result {
            Ok(ann) => out.push(note.with_phi(ann.phi)),
            Err(e) => {
                failed += 1;
                log::error!("note {}: {e}", o.id);
                out.push(NoteRecord { phi: None, ..note });
            }
        }
    }
    write_corpus(&a.out, &out)?;
    eprintln!(
        "annotated {} notes ({} calls) -> {}",
        out.len() - failed,
        transport.calls(),
        a.out.display()
    );
    if failed > 0 {
        bail!("{failed} notes could not be annotated");
    }
    Ok(())
}

#[derive(Serialize)]
struct DeidLine<'a> {
    id: &'a str,
    text: &'a str,
    replacements: &'a [Replacement],
    residuals: &'a [Residual],
}

fn cmd_deid(ctx: &Ctx, a: DeidArgs) -> Result<()> {
    let policy = match a.label_format {
        Some(f) => {
            let mut p = lppa_core::deid::DeidPolicy::with_label_format(f)?;
            p.case_insensitive = ctx.cfg.deid.case_insensitive;
            p.word_boundary = ctx.cfg.deid.word_boundary;
            p
        }
        None => ctx.cfg.deid.clone(),
    };
    let notes = read_corpus(&a.input)?;
    let empty = PhiDictionary::new();
    let items: Vec<(&str, &PhiDictionary)> = notes
        .iter()
        .map(|n| {
            if n.phi.is_none() {
                log::warn!("note {} has no phi; copied unchanged", n.id);
            }
            (n.text.as_str(), n.phi.as_ref().unwrap_or(&empty))
        })
        .collect();
    let results = deidentify_batch(&items, &policy, ctx.exec);
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut leaks = 0;
    for ((note, (_, phi)), d) in notes.iter().zip(&items).zip(&results) {
        for f in verify_clean(d, phi, &policy) {
            if matches!(f, lppa_core::deid::Finding::Leaked { .. }) {
                leaks += 1;
                log::error!("note {}: {f:?}", note.id);
            }
        }
        for r in &d.residuals {
            log::warn!("note {}: {} mention not found in text", note.id, r.entity);
        }
        let line = DeidLine {
            id: &note.id,
            text: &d.text,
            replacements: &d.replacements,
            residuals: &d.residuals,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("de-identified {} notes -> {}", results.len(), a.out.display());
    if leaks > 0 {
        bail!("{leaks} mentions survived de-identification");
    }
    Ok(())
}

#[derive(Serialize)]
struct SystemReport<'a> {
    system: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_test_vs_baseline: Option<TTestResult>,
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let gold = read_corpus(&a.gold)?;
    let mut reports = Vec::new();
    for spec in &a.preds {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| spec.clone());
                (stem, p)
            }
        };
        let preds = read_corpus(&path)?;
        let by_id: std::collections::HashMap<&str, &NoteRecord> = preds.iter().map(|n| (n.id.as_str(), n)).collect();
        let mut pairs = Vec::with_capacity(gold.len());
        for g in &gold {
            let gphi = g.phi.clone().ok_or_else(|| anyhow!("gold note {} has no phi", g.id))?;
            let pphi = match by_id.get(g.id.as_str()) {
                Some(p) => p.phi.clone().unwrap_or_default(),
                None => {
                    log::warn!("{name}: no prediction for note {}; scored as empty", g.id);
                    PhiDictionary::new()
                }
            };
            pairs.push((gphi, pphi));
        }
        let extra = preds.len() - preds.iter().filter(|p| gold.iter().any(|g| g.id == p.id)).count();
        if extra > 0 {
            log::warn!("{name}: {extra} predicted notes have no gold and were ignored");
        }
        reports.push((name, score_corpus(&pairs, &ctx.cfg.normalization, ctx.exec)?));
    }
    let baseline = a.baseline.unwrap_or_else(|| reports[0].0.clone());
    println!("{}", render_report(&reports, &baseline)?);
    if let Some(path) = a.json {
        let base = &reports
            .iter()
            .find(|(n, _)| *n == baseline)
            .expect("baseline checked by render")
            .1;
        let out: Vec<SystemReport> = reports
            .iter()
            .map(|(name, r)| SystemReport {
                system: name,
                report: r,
                t_test_vs_baseline: (*name != baseline)
                    .then(|| paired_t_test(&r.per_note_overall_f1, &base.per_note_overall_f1).ok())
                    .flatten(),
            })
            .collect();
        std::fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_synthqual(ctx: &Ctx, a: SynthqualArgs) -> Result<()> {
    let texts = |p: &Path| -> Result<Vec<String>> { Ok(read_corpus(p)?.into_iter().map(|n| n.text).collect()) };
    let corpus = texts(&a.input)?;
    let reference = texts(&a.reference)?;
    let ontology = match a.ontology.as_ref().or(ctx.cfg.ontology.as_ref()) {
        Some(p) => {
            Ontology::from_lines(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => Ontology::bundled(),
    };
    let config = QualityConfig {
        max_n: a.max_n,
        lm_order: a.order,
        smoothing_k: a.k,
    };
    let report = quality_report(&corpus, &reference, &ontology, config, ctx.exec)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let notes = read_corpus(&a.input)?;
    let w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let n = export_training_set(&notes, w)?;
    eprintln!("exported {n} examples -> {}", a.out.display());
    Ok(())
}

fn cmd_cost(ctx: &Ctx, a: CostArgs) -> Result<()> {
    let pricing = match (a.in_price, a.out_price) {
        (Some(i), Some(o)) => PricingConfig::new(a.model.clone().unwrap_or_else(|| "custom".into()), i, o)?,
        _ => {
            let path = a
                .pricing
                .as_ref()
                .or(ctx.cfg.pricing.as_ref())
                .ok_or_else(|| anyhow!("give --in-price/--out-price or a pricing file"))?;
            let model = a
                .model
                .as_ref()
                .or(ctx.cfg.model.as_ref())
                .ok_or_else(|| anyhow!("--model selects the pricing entry"))?;
            let table = cost::load_pricing(path)?;
            cost::find_pricing(&table, model)?.clone()
        }
    };
    let (avg_in, avg_out) = match &a.sample {
        Some(p) => {
            let notes = read_corpus(p)?;
            let prompts: Vec<String> = notes
                .iter()
                .map(|n| {
                    let r = build_task_prompt(&n.text);
                    r.system + &r.user
                })
                .collect();
            let replies: Vec<String> = notes
                .iter()
                .filter_map(|n| n.phi.as_ref().map(|d| d.to_json()))
                .collect();
            (
                average_tokens(&prompts, &CharHeuristic),
                average_tokens(&replies, &CharHeuristic),
            )
        }
        None => (
            a.avg_in.ok_or_else(|| anyhow!("--avg-in or --sample is required"))?,
            a.avg_out.ok_or_else(|| anyhow!("--avg-out or --sample is required"))?,
        ),
    };
    let est = estimate_cost(a.calls, avg_in, avg_out, &pricing);
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}
