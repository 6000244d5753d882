use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use trace_core::condense::read_sidecar;
use trace_core::config::{ConfigError, PipelineConfig};
use trace_core::corpus::{ingest_corpus, write_notes};
use trace_core::evaluate::{evaluate, read_gold, sample_spans_for_review, write_review, EvalReport};
use trace_core::metrics::{estimate_tokens, project_cost, render_text, summarize};
use trace_core::pipeline::{attach_sidecar, run_pipeline, with_workers, write_outputs, write_report};
use trace_core::synth::{generate, write_gold, write_truth, SynthParams};

#[derive(Parser)]
#[command(
    name = "trace",
    version,
    about = "Remove templated and copied text from clinical note corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reference module, then frequency module, then condense and report.
    Run(RunArgs),
    /// Reference module only.
    Reference(RunArgs),
    /// Frequency module only.
    Frequency(RunArgs),
    /// Character-level precision/recall of a sidecar against gold spans.
    Eval(EvalArgs),
    /// Blinded span sample for manual review.
    SampleReview(SampleArgs),
    /// Corpus report from a corpus and its annotation sidecar.
    Report(ReportArgs),
    /// Token and dollar projection.
    Cost(CostArgs),
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, env = "TRACE_CONFIG")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set frequency.patient_threshold=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct CostFlags {
    #[arg(long)]
    price_per_mtok: Option<f64>,
    #[arg(long)]
    chars_per_token: Option<f64>,
    #[arg(long)]
    encounters: Option<u64>,
    #[arg(long)]
    queries_per_encounter: Option<f64>,
    /// Externally computed token count for the removed text.
    #[arg(long)]
    exact_tokens: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    cost: CostFlags,
    /// Corpus JSONL.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated module list (reference,frequency).
    #[arg(long)]
    modules: Option<String>,
    /// Use a saved chunk index instead of building one.
    #[arg(long)]
    index_in: Option<PathBuf>,
    #[arg(long)]
    index_out: Option<PathBuf>,
    /// Text inserted at each removal site.
    #[arg(long)]
    marker: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Annotation sidecar from a run.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Corpus used to bounds-check gold spans.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Only count spans found by this module.
    #[arg(long)]
    module: Option<String>,
    #[arg(long)]
    min_gold_span: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 150)]
    n_per_set: usize,
    /// Blinded rows CSV.
    #[arg(long)]
    out: PathBuf,
    /// Answer key CSV.
    #[arg(long)]
    key: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    cost: CostFlags,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    txt: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    cost: CostFlags,
    /// Characters removed across the cohort.
    #[arg(long, conflicts_with = "tokens_per_patient")]
    chars: Option<u64>,
    /// Patients the removal is spread over.
    #[arg(long, default_value_t = 1)]
    patients: u64,
    #[arg(long)]
    tokens_per_patient: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus JSONL to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSONL to write.
    #[arg(long)]
    truth: PathBuf,
    /// Gold annotations JSONL to write.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    templates: usize,
    #[arg(long, default_value_t = 100)]
    patients: usize,
    #[arg(long, default_value_t = 10)]
    notes_per_patient: usize,
    #[arg(long, default_value_t = 3)]
    slots_per_note: usize,
    #[arg(long, default_value_t = 0.3)]
    template_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    copy_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    edit_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    attribution_rate: f64,
}

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(UsageError(format!("{:#}", e.into())))
}

fn config_error(e: ConfigError) -> anyhow::Error {
    match e {
        ConfigError::Io { .. } => anyhow::Error::new(e),
        other => usage(other),
    }
}

fn build_config(common: &Common, overrides: Vec<(&str, String)>) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path).map_err(config_error)?;
    }
    let mut pairs = Vec::new();
    for raw in &common.set {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got {raw:?}")))?;
        pairs.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    if let Some(w) = common.workers {
        pairs.push(("workers".into(), w.to_string()));
    }
    if let Some(s) = common.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    pairs.extend(overrides.into_iter().map(|(k, v)| (k.to_owned(), v)));
    for (k, v) in pairs {
        config.set(&k, &v).map_err(config_error)?;
    }
    config.validate().map_err(config_error)?;
    Ok(config)
}

fn cost_overrides(c: &CostFlags) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    if let Some(v) = c.price_per_mtok {
        out.push(("cost.price_per_mtok", v.to_string()));
    }
    if let Some(v) = c.chars_per_token {
        out.push(("cost.chars_per_token", v.to_string()));
    }
    if let Some(v) = c.encounters {
        out.push(("cost.encounters", v.to_string()));
    }
    if let Some(v) = c.queries_per_encounter {
        out.push(("cost.queries_per_encounter", v.to_string()));
    }
    if let Some(v) = c.exact_tokens {
        out.push(("cost.exact_tokens", v.to_string()));
    }
    out
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_run(args: RunArgs, forced_modules: Option<&str>) -> anyhow::Result<()> {
    let mut overrides = cost_overrides(&args.cost);
    let opt = |key: &'static str, v: &Option<PathBuf>| v.as_deref().map(|p| (key, path_str(p)));
    overrides.extend(opt("input", &args.input));
    overrides.extend(opt("output_dir", &args.out));
    overrides.extend(opt("index_in", &args.index_in));
    overrides.extend(opt("index_out", &args.index_out));
    if let Some(m) = &args.marker {
        overrides.push(("condense.marker", m.clone()));
    }
    if let Some(m) = forced_modules.map(str::to_owned).or(args.modules.clone()) {
        overrides.push(("modules", m));
    }
    let config = build_config(&args.common, overrides)?;
    let input = config
        .input
        .clone()
        .ok_or_else(|| usage(anyhow!("--input is required")))?;
    let out_dir = config
        .output_dir
        .clone()
        .ok_or_else(|| usage(anyhow!("--out is required")))?;

    let corpus = ingest_corpus(&input)?;
    info!("loaded {} notes from {}", corpus.len(), input.display());
    let output = run_pipeline(&corpus, &config)?;
    for w in &output.warnings {
        warn!("{w}");
    }
    let t = &output.timings;
    info!(
        "reference {:.2?} ({} alignments), index {:.2?}, frequency {:.2?}, condense {:.2?}",
        t.reference, output.alignments, t.index, t.frequency, t.condense
    );
    let paths = write_outputs(&out_dir, &output, &config)?;
    info!(
        "removed {} of {} characters ({:.1}%); wrote {}",
        output.report.chars_removed,
        output.report.chars_total,
        100.0 * output.report.reduction_fraction,
        paths.condensed.parent().map_or(String::new(), path_str)
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("undefined".to_owned(), |v| format!("{v:.4}"))
}

fn fmt_ci(x: Option<(f64, f64)>) -> String {
    x.map_or(String::new(), |(lo, hi)| format!(" (CI {lo:.4}-{hi:.4})"))
}

fn print_eval(r: &EvalReport) {
    println!("notes      {}", r.notes_evaluated);
    println!("precision  {}{}", fmt_opt(r.precision), fmt_ci(r.precision_ci));
    println!("recall     {}{}", fmt_opt(r.recall), fmt_ci(r.recall_ci));
    println!(
        "chars      flagged {} true-positive {} eligible {} eligible-hit {}",
        r.counts.flagged, r.counts.true_positive, r.counts.eligible, r.counts.eligible_hit
    );
    println!(
        "flagged by gold label: templated {} author {} structured {}",
        fmt_opt(r.flagged_templated_fraction),
        fmt_opt(r.flagged_author_fraction),
        fmt_opt(r.flagged_structured_fraction)
    );
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut overrides = Vec::new();
    if let Some(m) = &args.module {
        overrides.push(("eval.module", m.clone()));
    }
    if let Some(v) = args.min_gold_span {
        overrides.push(("eval.min_gold_span", v.to_string()));
    }
    if let Some(v) = args.bootstrap {
        overrides.push(("eval.bootstrap_resamples", v.to_string()));
    }
    let config = build_config(&args.common, overrides)?;
    let pred = read_sidecar(&args.pred)?;
    let gold = read_gold(&args.gold)?;
    if let Some(path) = &args.corpus {
        let corpus = ingest_corpus(path)?;
        for g in &gold {
            let note = corpus
                .note(&g.note_id)
                .ok_or_else(|| anyhow!("gold note {} is not in the corpus", g.note_id))?;
            g.check_bounds(note.char_len())?;
        }
    }
    let report = evaluate(&pred, &gold, &config.eval)?;
    for id in &report.missing_predictions {
        warn!("note {id}: gold annotation without prediction record");
    }
    for id in &report.missing_gold {
        warn!("note {id}: prediction record without gold annotation");
    }
    print_eval(&report);
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_sample_review(args: SampleArgs) -> anyhow::Result<()> {
    let config = build_config(&args.common, vec![])?;
    let corpus = ingest_corpus(&args.input)?;
    let annotated = attach_sidecar(&corpus, read_sidecar(&args.annotations)?)?;
    let pairs: Vec<_> = annotated.iter().map(|(n, s)| (n, s.as_slice())).collect();
    let sample = sample_spans_for_review(&pairs, args.n_per_set, config.seed)?;
    write_review(&sample, &args.out, &args.key)?;
    info!("wrote {} blinded rows to {}", sample.rows.len(), args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let config = build_config(&args.common, cost_overrides(&args.cost))?;
    let corpus = ingest_corpus(&args.input)?;
    let annotated = attach_sidecar(&corpus, read_sidecar(&args.annotations)?)?;
    let pairs: Vec<_> = annotated.iter().map(|(n, s)| (n, s.as_slice())).collect();
    let report = with_workers(config.workers, || summarize(&pairs))?;
    match (&args.json, &args.txt) {
        (Some(json), Some(txt)) => {
            write_report(&report, &config, json, txt)?;
        }
        (None, None) => {
            let cost = trace_core::metrics::cost_summary(&report, &config.cost, config.exact_tokens)?;
            print!("{}", render_text(&report, Some(&cost)));
        }
        _ => return Err(usage(anyhow!("--json and --txt go together"))),
    }
    Ok(())
}

fn cmd_cost(args: CostArgs) -> anyhow::Result<()> {
    let config = build_config(&args.common, cost_overrides(&args.cost))?;
    if args.patients == 0 {
        return Err(usage(anyhow!("--patients must be positive")));
    }
    let per_patient = match (args.tokens_per_patient, args.chars, config.exact_tokens) {
        (Some(t), _, _) => t,
        (None, _, Some(tokens)) => tokens as f64 / args.patients as f64,
        (None, Some(chars), None) => {
            let tokens = estimate_tokens(chars, &config.cost)?;
            println!("tokens removed    {tokens}");
            tokens as f64 / args.patients as f64
        }
        (None, None, None) => {
            return Err(usage(anyhow!("give --chars, --exact-tokens or --tokens-per-patient")));
        }
    };
    let p = project_cost(per_patient, &config.cost);
    println!("tokens/patient    {per_patient:.1}");
    println!("per query         {}", p.per_query);
    println!("annual            {}", p.annual);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let config = build_config(&args.common, vec![])?;
    for (name, rate) in [
        ("template-rate", args.template_rate),
        ("copy-rate", args.copy_rate),
        ("edit-rate", args.edit_rate),
        ("attribution-rate", args.attribution_rate),
    ] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(usage(anyhow!("--{name} must lie in [0, 1]")));
        }
    }
    if args.template_rate + args.copy_rate > 1.0 {
        return Err(usage(anyhow!("--template-rate plus --copy-rate must not exceed 1")));
    }
    if args.patients == 0 || args.notes_per_patient == 0 {
        return Err(usage(anyhow!("--patients and --notes-per-patient must be positive")));
    }
    let params = SynthParams {
        templates: args.templates,
        patients: args.patients,
        notes_per_patient: args.notes_per_patient,
        slots_per_note: args.slots_per_note,
        template_rate: args.template_rate,
        copy_rate: args.copy_rate,
        edit_rate: args.edit_rate,
        attribution_rate: args.attribution_rate,
        seed: config.seed,
    };
    let corpus = generate(&params);
    write_notes(&args.out, corpus.notes.iter())?;
    write_truth(&args.truth, &corpus.truth).with_context(|| format!("writing {}", args.truth.display()))?;
    if let Some(gold) = &args.gold {
        write_gold(gold, &corpus.gold).with_context(|| format!("writing {}", gold.display()))?;
    }
    info!("wrote {} notes to {}", corpus.notes.len(), args.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(a, None),
        Command::Reference(a) => cmd_run(a, Some("reference")),
        Command::Frequency(a) => cmd_run(a, Some("frequency")),
        Command::Eval(a) => cmd_eval(a),
        Command::SampleReview(a) => cmd_sample_review(a),
        Command::Report(a) => cmd_report(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !message.contains(&cause) {
                    message = format!("{message}: {cause}");
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(if e.is::<UsageError>() { 1 } else { 2 })
        }
    }
}
