//! `itersynth`: runs, resumes and analyses iterative synthetic-data
//! experiments, and exposes the loop's single steps for inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use itersynth::analysis::emit_report;
use itersynth::corpus::{load_corpus, read_jsonl, save_corpus, write_jsonl, Corpus, CorpusRole};
use itersynth::engine::{
    derive_seed, embed_all, evaluate, plan, predict_all, resume, resume_with, run, score_all,
    Corpora, PredictionCache, RunConfig, Runtime, MANIFEST_FILE,
};
use itersynth::modelio::StudentState;
use itersynth::scoring::Score;
use itersynth::selection::{self, Strategy};
use itersynth::synthgen::{generate_batch, BatchSpec, DedupHistory};
use itersynth::Error;

#[derive(Parser, Debug)]
#[command(
    name = "itersynth",
    version,
    about = "Iterative synthetic data generation with student-guided selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set selection.m=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use a single replicate with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the configuration and print the plan without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full loop for every replicate.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue the run in the output directory if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Continue an interrupted or budget-stopped run.
    Resume {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Raise a budget cap, e.g. `--set budget.teacher.max_total=5000000`.
        /// Only `budget.*` keys may change.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score the seed corpus with the base student; writes scores.jsonl.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Select exemplars from a scores file; writes selected.jsonl.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scores to select from (default: scores.jsonl in the output directory).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Synthesize one batch from selected exemplars; writes synthetic.jsonl and outcomes.jsonl.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Exemplars (default: selected.jsonl in the output directory).
        #[arg(long)]
        selected: Option<PathBuf>,
    },
    /// Evaluate a student on the test corpus; writes evaluation.json and verdicts.jsonl.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Student state as JSON (default: the base student).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Turn finished runs into CSV tables and SVG figures.
    Analyze {
        /// Run directories.
        runs: Vec<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_runtime() { 2 } else { 1 },
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.paths.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn dry_run(cfg: &RunConfig) -> CmdResult {
    Ok(json!({ "dry_run": true, "plan": plan(cfg)? }))
}

fn ledger_json(rt: &Runtime) -> serde_json::Value {
    serde_json::to_value(rt.ledger.snapshot()).unwrap_or_default()
}

fn setup(cfg: &RunConfig) -> Result<(Runtime, Corpora), Error> {
    let rt = Runtime::new(cfg)?;
    rt.probe(cfg)?;
    let corpora = Corpora::load(cfg, rt.world.as_deref())?;
    Ok((rt, corpora))
}

fn replicate(cfg: &RunConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn cmd_run(args: &ConfigArgs, resume_existing: bool) -> CmdResult {
    let cfg = load_config(args)?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let out = cfg.paths.output.clone();
    let manifest = if resume_existing && out.join(MANIFEST_FILE).exists() {
        resume(&out)?
    } else {
        run(&cfg)?
    };
    finish_run(&out, &manifest)
}

fn finish_run(out: &Path, manifest: &itersynth::engine::RunManifest) -> CmdResult {
    if manifest.stopped_on_budget() {
        let reasons: Vec<String> = manifest
            .replicates
            .iter()
            .filter_map(|r| {
                r.stop_reason
                    .as_ref()
                    .map(|s| format!("replicate {}: {s}", r.seed))
            })
            .collect();
        return Err(Failure {
            code: 2,
            kind: "budget",
            message: format!(
                "budget exhausted ({}); continue with `itersynth resume --out {} --set budget.<role>.<cap>=<higher>`",
                reasons.join("; "),
                out.display()
            ),
        });
    }
    Ok(json!({
        "output": out,
        "config_hash": manifest.config_hash,
        "complete": manifest.is_complete(),
        "learning_curve": manifest.learning_curve()?,
    }))
}

fn cmd_score(args: &ConfigArgs) -> CmdResult {
    let cfg = load_config(args)?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let (rt, corpora) = setup(&cfg)?;
    let state = rt.base_student();
    let samples = corpora.seed.samples();
    let preds = predict_all(&rt, &state, samples, &PredictionCache::new())?;
    let scores = score_all(
        &rt,
        &cfg,
        &state,
        samples,
        &preds,
        derive_seed(replicate(&cfg), "score", 1),
    )?;
    mkdir(&cfg.paths.output)?;
    let path = cfg.paths.output.join("scores.jsonl");
    write_jsonl(&path, &scores)?;
    Ok(json!({ "scores": path, "count": scores.len(), "ledger": ledger_json(&rt) }))
}

fn cmd_select(args: &ConfigArgs, scores_path: Option<&PathBuf>) -> CmdResult {
    let cfg = load_config(args)?;
    let scores_path = scores_path
        .cloned()
        .unwrap_or_else(|| cfg.paths.output.join("scores.jsonl"));
    if args.dry_run {
        return dry_run(&cfg);
    }
    let scores: Vec<Score> = read_jsonl(&scores_path)?;
    let (rt, corpora) = setup(&cfg)?;
    let seed = replicate(&cfg);
    let embeddings = if cfg.selection.strategy == Strategy::Badge {
        let ids: Vec<String> = scores.iter().map(|s| s.sample_id.clone()).collect();
        let candidates = Corpus::selected_from(&corpora.seed, &ids)?;
        let state = rt.base_student();
        let preds = predict_all(&rt, &state, candidates.samples(), &PredictionCache::new())?;
        embed_all(
            &rt,
            &cfg,
            &state,
            candidates.samples(),
            &preds,
            derive_seed(seed, "score", 1),
        )?
    } else {
        Vec::new()
    };
    let ids = selection::select(
        &cfg.selection,
        &scores,
        &embeddings,
        derive_seed(seed, "select", 1),
    )?;
    let selected = Corpus::selected_from(&corpora.seed, &ids)?;
    mkdir(&cfg.paths.output)?;
    let path = cfg.paths.output.join("selected.jsonl");
    save_corpus(&selected, &path)?;
    Ok(json!({ "selected": path, "count": selected.len() }))
}

fn cmd_generate(args: &ConfigArgs, selected_path: Option<&PathBuf>) -> CmdResult {
    let cfg = load_config(args)?;
    let selected_path = selected_path
        .cloned()
        .unwrap_or_else(|| cfg.paths.output.join("selected.jsonl"));
    if args.dry_run {
        return dry_run(&cfg);
    }
    let selected = load_corpus(&selected_path, CorpusRole::Selected)?;
    let (rt, corpora) = setup(&cfg)?;
    let mut history = DedupHistory::new();
    let batch = generate_batch(
        &BatchSpec {
            teacher: &rt.teacher,
            template: &rt.template,
            seed_corpus: &corpora.seed,
            exemplars: selected.samples(),
            quota: selected.len(),
            iteration: 1,
            dedup_threshold: cfg.dedup.then_some(cfg.dedup_threshold),
            params: &cfg.generation,
            seed: derive_seed(replicate(&cfg), "synth", 0),
            parallelism: rt.parallelism,
        },
        &mut history,
    )?;
    mkdir(&cfg.paths.output)?;
    let synth_path = cfg.paths.output.join("synthetic.jsonl");
    save_corpus(
        &Corpus::new(CorpusRole::Synthetic, batch.accepted.clone())?,
        &synth_path,
    )?;
    write_jsonl(cfg.paths.output.join("outcomes.jsonl"), &batch.outcomes)?;
    if batch.budget_exhausted {
        return Err(Failure {
            code: 2,
            kind: "budget",
            message: format!(
                "teacher budget exhausted after {} of {} samples",
                batch.accepted.len(),
                selected.len()
            ),
        });
    }
    Ok(json!({
        "synthetic": synth_path,
        "accepted": batch.accepted.len(),
        "attempted": batch.outcomes.len(),
        "ledger": ledger_json(&rt),
    }))
}

fn cmd_evaluate(args: &ConfigArgs, student: Option<&PathBuf>) -> CmdResult {
    let cfg = load_config(args)?;
    if args.dry_run {
        return dry_run(&cfg);
    }
    let (rt, corpora) = setup(&cfg)?;
    let state: StudentState = match student {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => rt.base_student(),
    };
    let acc = evaluate(&rt, &state, &corpora.test, &PredictionCache::new())?;
    mkdir(&cfg.paths.output)?;
    write_jsonl(cfg.paths.output.join("verdicts.jsonl"), &acc.verdicts)?;
    let summary = json!({
        "checkpoint": state.checkpoint,
        "accuracy": acc.mean,
        "std_err": acc.std_err,
        "n": acc.verdicts.len(),
    });
    let path = cfg.paths.output.join("evaluation.json");
    std::fs::write(&path, format!("{:#}\n", summary)).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn cmd_analyze(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    // Every report failure is an input problem.
    let files = emit_report(runs, out).map_err(|e| Failure {
        code: 1,
        kind: e.kind(),
        message: e.to_string(),
    })?;
    for f in &files.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn report(result: CmdResult) -> ExitCode {
    match result {
        Ok(value) => {
            println!("{value:#}");
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": f.kind, "message": f.message, "exit_code": f.code })
    );
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match &cli.command {
        Command::Run { config, resume } => report(cmd_run(config, *resume)),
        Command::Resume { out, set } => report(
            resume_with(out, set)
                .map_err(Failure::from)
                .and_then(|m| finish_run(out, &m)),
        ),
        Command::Score { config } => report(cmd_score(config)),
        Command::Select { config, scores } => report(cmd_select(config, scores.as_ref())),
        Command::Generate { config, selected } => report(cmd_generate(config, selected.as_ref())),
        Command::Evaluate { config, student } => report(cmd_evaluate(config, student.as_ref())),
        Command::Analyze { runs, out } => match cmd_analyze(runs, out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(f) => fail(f),
        },
    }
}
