//! The iterative loop: predict, score, select, synthesize, accumulate,
//! fine-tune from base and evaluate, for every replicate seed, with a
//! manifest written after each iteration so runs can be resumed.

pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{
    load_corpus, merge_accumulate, read_jsonl, save_corpus, write_jsonl, Corpus, CorpusRole,
    GenerationRecord, Sample,
};
use crate::error::{Error, Result};
use crate::modelio::{
    default_capabilities, BudgetLedger, CallRecord, Capability, EndpointConfig, HttpBackend,
    HttpConfig, ModelEndpoint, ModelRole, SimBackend, SimWorld, StudentState, Transport,
};
use crate::scoring::{GradEmbedding, Score, ScoringContext};
use crate::selection::{self, Strategy};
use crate::synthgen::{
    generate_batch, BatchSpec, DatasetKind, DedupHistory, PromptTemplate, SynthesisOutcome,
};
use crate::util::{sha256_hex, stable_hash};
use crate::verify::{eval_accuracy, Accuracy, Verdict, Verifier};

pub use config::{PathsConfig, RunConfig, SimSection, VerifierKind};
pub use manifest::{
    CorpusStamp, EvalSummary, IterationState, ReplicateRecord, ReplicateStatus, RunManifest,
    SoftwareStamp,
};

pub const CONFIG_FILE: &str = "run.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const LEARNING_CURVE_FILE: &str = "learning_curve.csv";

/// Files written for each completed iteration.
pub const ITERATION_ARTIFACTS: [&str; 7] = [
    "scores.jsonl",
    "selected.jsonl",
    "synthetic.jsonl",
    "outcomes.jsonl",
    "generation.jsonl",
    "verdicts.jsonl",
    "calls.jsonl",
];

pub fn replicate_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("replicate-{seed}"))
}

pub fn iteration_dir(out: &Path, seed: u64, t: u32) -> PathBuf {
    replicate_dir(out, seed).join(format!("iter-{t}"))
}

/// Seed for one purpose (scoring, selection, synthesis) of a replicate.
pub fn derive_seed(replicate: u64, purpose: &str, t: u32) -> u64 {
    stable_hash([
        purpose.as_bytes(),
        &replicate.to_le_bytes(),
        &t.to_le_bytes(),
    ])
}

/// Fine-tuning seed of a replicate. It does not depend on the iteration,
/// so a student is a function of its training corpus alone.
pub fn finetune_seed(replicate: u64) -> u64 {
    derive_seed(replicate, "finetune", 0)
}

/// Endpoints, corpora-independent helpers and shared state for one run.
pub struct Runtime {
    pub world: Option<Arc<SimWorld>>,
    pub ledger: Arc<BudgetLedger>,
    pub teacher: ModelEndpoint,
    pub student: ModelEndpoint,
    pub reward: Option<ModelEndpoint>,
    pub verifier: Verifier,
    pub template: PromptTemplate,
    pub pool: rayon::ThreadPool,
    pub parallelism: usize,
}

fn build_endpoint(
    role: ModelRole,
    cfg: &EndpointConfig,
    world: Option<&Arc<SimWorld>>,
    ledger: &Arc<BudgetLedger>,
) -> Result<ModelEndpoint> {
    let caps = match &cfg.capabilities {
        Some(c) => c.iter().copied().collect(),
        None => default_capabilities(role),
    };
    let backend: Arc<dyn crate::modelio::Backend> = match cfg.transport {
        Transport::Simulated => {
            let w = world.ok_or_else(|| {
                Error::Config("simulated endpoint without a simulated world".into())
            })?;
            Arc::new(SimBackend::new(w.clone(), role))
        }
        Transport::Remote => Arc::new(HttpBackend::new(HttpConfig::from_endpoint(cfg)?)?),
    };
    ModelEndpoint::new(role, caps, cfg.transport, backend, ledger.clone())
}

impl Runtime {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.endpoints;
        let any_sim = [
            Some(&e.teacher),
            Some(&e.student),
            e.reward.as_ref(),
            e.judge.as_ref(),
        ]
        .into_iter()
        .flatten()
        .any(|c| c.transport == Transport::Simulated);
        let world = any_sim.then(|| Arc::new(SimWorld::new(cfg.sim.world.clone())));
        let ledger = Arc::new(BudgetLedger::with_caps(cfg.budget.clone()));
        let teacher = build_endpoint(ModelRole::Teacher, &e.teacher, world.as_ref(), &ledger)?;
        let student = build_endpoint(ModelRole::Student, &e.student, world.as_ref(), &ledger)?;
        let reward = match &e.reward {
            Some(r) => {
                let ep = build_endpoint(ModelRole::Reward, r, world.as_ref(), &ledger)?;
                Some(if cfg.include_reward_tokens {
                    ep.charging_as(ModelRole::Teacher)
                } else {
                    ep
                })
            }
            None => None,
        };
        let verifier = match cfg.verifier {
            VerifierKind::BoxedMatch => Verifier::BoxedMatch,
            VerifierKind::Arithmetic24 => Verifier::Arithmetic24,
            VerifierKind::LlmJudge => {
                let j = e
                    .judge
                    .as_ref()
                    .ok_or_else(|| Error::Config("llm_judge needs endpoints.judge".into()))?;
                Verifier::LlmJudge {
                    judge: build_endpoint(ModelRole::Judge, j, world.as_ref(), &ledger)?,
                    kind: cfg.dataset,
                }
            }
        };
        let mut template = match &cfg.templates_dir {
            Some(dir) => PromptTemplate::from_dir(cfg.dataset, dir)?,
            None => PromptTemplate::builtin(cfg.dataset),
        };
        if let Some(k) = cfg.few_shot_k {
            template.few_shot_k = k;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Runtime {
            world,
            ledger,
            teacher,
            student,
            reward,
            verifier,
            template,
            pool,
            parallelism: cfg.parallelism,
        })
    }

    /// Checks every remote endpoint serves the capabilities the run needs
    /// before anything is generated.
    pub fn probe(&self, cfg: &RunConfig) -> Result<()> {
        let mut eps = vec![&self.teacher, &self.student];
        eps.extend(self.reward.as_ref());
        if let Verifier::LlmJudge { judge, .. } = &self.verifier {
            eps.push(judge);
        }
        for ep in eps {
            if ep.transport() == Transport::Remote {
                ep.probe()?;
            }
        }
        if cfg.selection.strategy == Strategy::Badge
            && !self.student.supports(Capability::GradEmbedding)
        {
            return Err(Error::Unsupported {
                role: "student".into(),
                capability: Capability::GradEmbedding.to_string(),
            });
        }
        Ok(())
    }

    pub fn base_student(&self) -> StudentState {
        match (&self.world, self.student.transport()) {
            (Some(w), Transport::Simulated) => w.base_state(),
            _ => StudentState::base(),
        }
    }
}

/// Seed, validation and test corpora of a run.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub seed: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

impl Corpora {
    /// Loads configured corpora, generating missing ones from the simulated
    /// world. Generated corpora depend only on the simulator settings, so
    /// every replicate and every strategy sees the same data.
    pub fn load(cfg: &RunConfig, world: Option<&SimWorld>) -> Result<Self> {
        let get =
            |path: &Option<PathBuf>, role: CorpusRole, n: usize, prefix: &str| -> Result<Corpus> {
                match (path, world) {
                    (Some(p), _) => load_corpus(p, role),
                    (None, Some(w)) if cfg.dataset == DatasetKind::Game24Backward => {
                        w.generate_24_corpus(role, n, prefix)
                    }
                    (None, Some(w)) => w.generate_corpus(role, n, prefix),
                    (None, None) => Err(Error::Config(format!("no {role} corpus configured"))),
                }
            };
        let s = &cfg.sim;
        Ok(Corpora {
            seed: get(&cfg.paths.seed, CorpusRole::Seed, s.seed_size, "seed")?,
            validation: get(
                &cfg.paths.validation,
                CorpusRole::Validation,
                s.validation_size,
                "val",
            )?,
            test: get(&cfg.paths.test, CorpusRole::Test, s.test_size, "test")?,
        })
    }
}

/// Greedy student answers keyed by (checkpoint, prompt).
#[derive(Debug, Default)]
pub struct PredictionCache {
    map: Mutex<HashMap<(String, String), String>>,
}

impl PredictionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Greedy answers of `state` to every sample's answer prompt, in order.
pub fn predict_all(
    rt: &Runtime,
    state: &StudentState,
    samples: &[Sample],
    cache: &PredictionCache,
) -> Result<Vec<String>> {
    rt.pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let prompt = rt.template.render_answer_prompt(&s.question)?;
                let key = (state.checkpoint.clone(), prompt);
                if let Some(hit) = cache.map.lock().expect("cache lock").get(&key) {
                    return Ok(hit.clone());
                }
                let answer = rt.student.student_greedy_generate(state, &key.1)?;
                cache
                    .map
                    .lock()
                    .expect("cache lock")
                    .insert(key, answer.clone());
                Ok(answer)
            })
            .collect()
    })
}

pub fn scoring_context<'a>(
    rt: &'a Runtime,
    state: &'a StudentState,
    seed: u64,
) -> ScoringContext<'a> {
    ScoringContext {
        student: &rt.student,
        state,
        template: &rt.template,
        teacher: Some(&rt.teacher),
        reward: rt.reward.as_ref(),
        verifier: Some(&rt.verifier),
        seed,
    }
}

pub fn score_all(
    rt: &Runtime,
    cfg: &RunConfig,
    state: &StudentState,
    samples: &[Sample],
    predictions: &[String],
    seed: u64,
) -> Result<Vec<Score>> {
    let ctx = scoring_context(rt, state, seed);
    rt.pool.install(|| {
        samples
            .par_iter()
            .zip(predictions)
            .map(|(s, p)| ctx.score(cfg.scorer, s, Some(p)))
            .collect()
    })
}

pub fn embed_all(
    rt: &Runtime,
    cfg: &RunConfig,
    state: &StudentState,
    samples: &[Sample],
    predictions: &[String],
    seed: u64,
) -> Result<Vec<GradEmbedding>> {
    let ctx = scoring_context(rt, state, seed);
    rt.pool.install(|| {
        samples
            .par_iter()
            .zip(predictions)
            .map(|(s, p)| ctx.embed(s, p, cfg.selection.projection_dim))
            .collect()
    })
}

pub fn evaluate(
    rt: &Runtime,
    state: &StudentState,
    test: &Corpus,
    cache: &PredictionCache,
) -> Result<Accuracy> {
    let preds = predict_all(rt, state, test.samples(), cache)?;
    let map: BTreeMap<String, String> = test.ids().map(str::to_string).zip(preds).collect();
    eval_accuracy(test, &map, &rt.verifier)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Protocol(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// What a run will do, for dry runs.
#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub name: String,
    pub config_hash: String,
    pub output: PathBuf,
    pub iterations: u32,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub scorer: String,
    pub strategy: Strategy,
    pub dataset: DatasetKind,
    pub simulated: bool,
    pub expected_training_sizes: Vec<usize>,
}

pub fn plan(cfg: &RunConfig) -> Result<Plan> {
    cfg.validate()?;
    Ok(Plan {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        output: cfg.paths.output.clone(),
        iterations: cfg.iterations,
        seeds: cfg.seeds.clone(),
        batch_size: cfg.selection.m,
        scorer: cfg.scorer.to_string(),
        strategy: cfg.selection.strategy,
        dataset: cfg.dataset,
        simulated: cfg.endpoints.all_simulated(),
        expected_training_sizes: (1..=cfg.iterations as usize)
            .map(|t| t * cfg.selection.m)
            .collect(),
    })
}

/// Per-replicate mutable state carried between iterations.
struct ReplicateState {
    state: StudentState,
    accumulated: Corpus,
    history: DedupHistory,
    previously_selected: Vec<String>,
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    rt: Runtime,
    corpora: Corpora,
    out: PathBuf,
    manifest: RunManifest,
    timing: BTreeMap<String, f64>,
}

/// Starts a fresh run in `cfg.paths.output`, which must not already hold a
/// manifest.
pub fn run(cfg: &RunConfig) -> Result<RunManifest> {
    let out = cfg.paths.output.clone();
    if out.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or choose another output directory",
            out.display()
        )));
    }
    let rt = Runtime::new(cfg)?;
    rt.probe(cfg)?;
    let corpora = Corpora::load(cfg, rt.world.as_deref())?;
    check_sizes(cfg, &corpora)?;
    mkdir(&out)?;
    let data = out.join("data");
    mkdir(&data)?;
    // The stored copy points at its own directory so the run can be moved.
    let mut stored = cfg.clone();
    stored.paths.output = PathBuf::from(".");
    fs::write(out.join(CONFIG_FILE), stored.to_toml()?)
        .map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
    let mut stamps = BTreeMap::new();
    for (name, c) in [
        ("seed", &corpora.seed),
        ("validation", &corpora.validation),
        ("test", &corpora.test),
    ] {
        let file = format!("data/{name}.jsonl");
        save_corpus(c, out.join(&file))?;
        stamps.insert(
            name.to_string(),
            CorpusStamp {
                sha256: file_sha(&out.join(&file))?,
                file,
                len: c.len(),
            },
        );
    }
    let manifest = RunManifest::new(cfg, stamps);
    let mut d = Driver {
        cfg,
        rt,
        corpora,
        out,
        manifest,
        timing: BTreeMap::new(),
    };
    d.save()?;
    d.drive()
}

/// Continues the run in `out` from its first incomplete iteration. Completed
/// artifacts are verified against their recorded hashes and left untouched.
pub fn resume(out: impl AsRef<Path>) -> Result<RunManifest> {
    resume_with(out, &[])
}

/// [`resume`] with `budget.*` overrides, so a budget-stopped run can go on
/// under a higher cap. The new caps are written back to the stored config.
pub fn resume_with(out: impl AsRef<Path>, budget_overrides: &[String]) -> Result<RunManifest> {
    let out = out.as_ref().to_path_buf();
    if let Some(o) = budget_overrides
        .iter()
        .find(|o| !o.trim_start().starts_with("budget."))
    {
        return Err(Error::Config(format!(
            "only budget.* keys can change on resume, not {o:?}"
        )));
    }
    let mut manifest = RunManifest::load(&out.join(MANIFEST_FILE))?;
    let mut cfg = RunConfig::load(out.join(CONFIG_FILE), budget_overrides)?;
    if !budget_overrides.is_empty() {
        let mut stored = cfg.clone();
        stored.paths.output = PathBuf::from(".");
        let path = out.join(CONFIG_FILE);
        fs::write(&path, stored.to_toml()?).map_err(|e| Error::io(&path, e))?;
    }
    cfg.paths.output = out.clone();
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Integrity(format!(
            "config hash {} does not match manifest {}",
            cfg.hash(),
            manifest.config_hash
        )));
    }
    manifest.verify_artifacts(&out)?;
    if manifest.is_complete() {
        return Ok(manifest);
    }
    let rt = Runtime::new(&cfg)?;
    rt.probe(&cfg)?;
    rt.ledger.restore(&manifest.ledger);
    let load = |name: &str, role| -> Result<Corpus> {
        let stamp = manifest
            .corpora
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("manifest lacks the {name} corpus")))?;
        load_corpus(out.join(&stamp.file), role)
    };
    let corpora = Corpora {
        seed: load("seed", CorpusRole::Seed)?,
        validation: load("validation", CorpusRole::Validation)?,
        test: load("test", CorpusRole::Test)?,
    };
    for r in &mut manifest.replicates {
        if r.status == ReplicateStatus::BudgetExhausted {
            r.status = ReplicateStatus::Running;
            r.stop_reason = None;
        }
    }
    let timing = fs::read_to_string(out.join(TIMING_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let mut d = Driver {
        cfg: &cfg,
        rt,
        corpora,
        out,
        manifest,
        timing,
    };
    d.drive()
}

fn check_sizes(cfg: &RunConfig, c: &Corpora) -> Result<()> {
    let pool = c.seed.len();
    let needed = if cfg.selection.exclude_previous {
        cfg.selection.m * cfg.iterations as usize
    } else {
        cfg.selection.m
    };
    if needed > pool {
        return Err(Error::Config(format!(
            "seed corpus has {pool} samples but the run selects {needed}"
        )));
    }
    if c.test.is_empty() {
        return Err(Error::Config("test corpus is empty".into()));
    }
    Ok(())
}

impl Driver<'_> {
    fn save(&mut self) -> Result<()> {
        self.manifest.ledger = self.rt.ledger.snapshot();
        write_json(&self.out.join(MANIFEST_FILE), &self.manifest)?;
        write_json(&self.out.join(TIMING_FILE), &self.timing)
    }

    fn drive(&mut self) -> Result<RunManifest> {
        for i in 0..self.manifest.replicates.len() {
            match self.drive_replicate(i) {
                Ok(()) => {}
                Err(e @ Error::Budget { .. }) => {
                    self.stop_on_budget(i, e.to_string())?;
                    break;
                }
                Err(e) => {
                    self.save()?;
                    return Err(e);
                }
            }
            if self.manifest.replicates[i].status == ReplicateStatus::BudgetExhausted {
                break;
            }
        }
        if self.manifest.is_complete() {
            self.write_learning_curve()?;
        }
        self.save()?;
        Ok(self.manifest.clone())
    }

    /// Records a budget stop. Calls charged by the unfinished iteration are
    /// appended to a per-replicate log so that the call logs still sum to
    /// the ledger.
    fn stop_on_budget(&mut self, i: usize, reason: String) -> Result<()> {
        let seed = self.manifest.replicates[i].seed;
        let calls = self.rt.ledger.drain_calls();
        if !calls.is_empty() {
            let dir = replicate_dir(&self.out, seed);
            mkdir(&dir)?;
            let path = dir.join("aborted-calls.jsonl");
            let mut all: Vec<CallRecord> = if path.exists() {
                read_jsonl(&path)?
            } else {
                Vec::new()
            };
            all.extend(calls);
            write_jsonl(&path, &all)?;
        }
        let r = &mut self.manifest.replicates[i];
        r.status = ReplicateStatus::BudgetExhausted;
        r.stop_reason = Some(reason);
        self.save()
    }

    fn restore_replicate(&self, i: usize) -> Result<ReplicateState> {
        let r = &self.manifest.replicates[i];
        let mut accumulated = Corpus::empty(CorpusRole::Synthetic)?;
        let mut history = DedupHistory::new();
        let mut previously_selected = Vec::new();
        for it in &r.iterations {
            let dir = iteration_dir(&self.out, r.seed, it.t);
            let synth = load_corpus(dir.join("synthetic.jsonl"), CorpusRole::Synthetic)?;
            let outcomes: Vec<SynthesisOutcome> = read_jsonl(dir.join("outcomes.jsonl"))?;
            for o in outcomes.iter().filter(|o| o.accepted) {
                history.push(&o.question);
            }
            accumulated = merge_accumulate(&synth, &accumulated)?;
            previously_selected.extend(it.selected_ids.iter().cloned());
        }
        let state = match r.iterations.last() {
            Some(it) => it.student.clone(),
            None => self.rt.base_student(),
        };
        Ok(ReplicateState {
            state,
            accumulated,
            history,
            previously_selected,
        })
    }

    fn drive_replicate(&mut self, i: usize) -> Result<()> {
        let seed = self.manifest.replicates[i].seed;
        if self.manifest.replicates[i].status == ReplicateStatus::Complete {
            return Ok(());
        }
        self.manifest.replicates[i].status = ReplicateStatus::Running;
        let cache = PredictionCache::new();
        let mut st = self.restore_replicate(i)?;
        if self.manifest.replicates[i].baseline.is_none() {
            let started = Instant::now();
            let acc = evaluate(&self.rt, &st.state, &self.corpora.test, &cache)?;
            let dir = replicate_dir(&self.out, seed);
            mkdir(&dir)?;
            write_jsonl(dir.join("baseline-verdicts.jsonl"), &acc.verdicts)?;
            write_jsonl(
                dir.join("baseline-calls.jsonl"),
                &self.rt.ledger.drain_calls(),
            )?;
            self.manifest.replicates[i].baseline = Some(EvalSummary {
                accuracy: acc.mean,
                std_err: acc.std_err,
            });
            self.timing.insert(
                format!("replicate-{seed}/baseline"),
                started.elapsed().as_secs_f64(),
            );
            self.save()?;
        }
        let first = self.manifest.replicates[i].iterations.len() as u32 + 1;
        for t in first..=self.cfg.iterations {
            let started = Instant::now();
            let budget_exhausted = self.run_iteration(i, t, &mut st, &cache)?;
            self.timing.insert(
                format!("replicate-{seed}/iter-{t}"),
                started.elapsed().as_secs_f64(),
            );
            if budget_exhausted {
                let r = &mut self.manifest.replicates[i];
                r.status = ReplicateStatus::BudgetExhausted;
                r.stop_reason = Some(format!("teacher budget exhausted during iteration {t}"));
                self.save()?;
                return Ok(());
            }
            self.save()?;
        }
        self.manifest.replicates[i].status = ReplicateStatus::Complete;
        self.save()
    }

    /// One pass of the loop. Returns whether synthesis ran out of budget.
    fn run_iteration(
        &mut self,
        i: usize,
        t: u32,
        st: &mut ReplicateState,
        cache: &PredictionCache,
    ) -> Result<bool> {
        let cfg = self.cfg;
        let rt = &self.rt;
        let seed = self.manifest.replicates[i].seed;
        let dir = iteration_dir(&self.out, seed, t);

        // Candidate pool and the current student's predictions on it.
        let candidates: Vec<Sample> = self
            .corpora
            .seed
            .iter()
            .filter(|s| !(cfg.selection.exclude_previous && st.previously_selected.contains(&s.id)))
            .cloned()
            .collect();
        let predictions = predict_all(rt, &st.state, &candidates, cache)?;
        let score_seed = derive_seed(seed, "score", t);
        let scores = score_all(rt, cfg, &st.state, &candidates, &predictions, score_seed)?;
        let embeddings = if cfg.selection.strategy == Strategy::Badge {
            embed_all(rt, cfg, &st.state, &candidates, &predictions, score_seed)?
        } else {
            Vec::new()
        };
        let selected_ids = selection::select(
            &cfg.selection,
            &scores,
            &embeddings,
            derive_seed(seed, "select", t),
        )?;
        let selected = Corpus::selected_from(&self.corpora.seed, &selected_ids)?;

        // Synthesis.
        let batch = generate_batch(
            &BatchSpec {
                teacher: &rt.teacher,
                template: &rt.template,
                seed_corpus: &self.corpora.seed,
                exemplars: selected.samples(),
                quota: selected.len(),
                iteration: t,
                dedup_threshold: cfg.dedup.then_some(cfg.dedup_threshold),
                params: &cfg.generation,
                seed: derive_seed(seed, "synth", 0),
                parallelism: rt.parallelism,
            },
            &mut st.history,
        )?;
        let synthetic = Corpus::new(CorpusRole::Synthetic, batch.accepted.clone())?;

        // Provenance and fidelity records, scored by the selecting student.
        let score_of: HashMap<&str, f64> = scores
            .iter()
            .map(|s| (s.sample_id.as_str(), s.value))
            .collect();
        let (child_scores, child_correct) = if cfg.score_children && !synthetic.is_empty() {
            let child_preds = predict_all(rt, &st.state, synthetic.samples(), cache)?;
            let cs = score_all(
                rt,
                cfg,
                &st.state,
                synthetic.samples(),
                &child_preds,
                score_seed,
            )?;
            let cc: Vec<Verdict> = rt.pool.install(|| {
                synthetic
                    .samples()
                    .par_iter()
                    .zip(&child_preds)
                    .map(|(s, p)| rt.verifier.check(s, p))
                    .collect::<Result<Vec<_>>>()
            })?;
            (
                cs.into_iter().map(|s| Some(s.value)).collect(),
                cc.into_iter().map(|v| Some(v.correct)).collect(),
            )
        } else {
            (vec![None; synthetic.len()], vec![None; synthetic.len()])
        };
        let records: Vec<GenerationRecord> = synthetic
            .iter()
            .zip(child_scores.into_iter().zip(child_correct))
            .map(|(s, (score, correct))| {
                let parent = s
                    .parent_id
                    .clone()
                    .expect("synthetic samples carry a parent");
                GenerationRecord {
                    selection_score: score_of.get(parent.as_str()).copied(),
                    parent_id: parent,
                    child_id: s.id.clone(),
                    iteration: t,
                    scorer_kind: cfg.scorer.to_string(),
                    child_score: score,
                    child_correct: correct,
                }
            })
            .collect();

        // Accumulate and retrain from base.
        let accumulated = merge_accumulate(&synthetic, &st.accumulated)?;
        let state = if accumulated.is_empty() {
            st.state.clone()
        } else {
            rt.student.student_finetune(
                &accumulated,
                &self.corpora.validation,
                &cfg.finetune_hyperparams()?,
                finetune_seed(seed),
            )?
        };
        let acc = evaluate(rt, &state, &self.corpora.test, cache)?;

        // Artifacts.
        mkdir(&dir)?;
        write_jsonl(dir.join("scores.jsonl"), &scores)?;
        save_corpus(&selected, dir.join("selected.jsonl"))?;
        save_corpus(&synthetic, dir.join("synthetic.jsonl"))?;
        write_jsonl(dir.join("outcomes.jsonl"), &batch.outcomes)?;
        write_jsonl(dir.join("generation.jsonl"), &records)?;
        write_jsonl(dir.join("verdicts.jsonl"), &acc.verdicts)?;
        write_jsonl(dir.join("calls.jsonl"), &rt.ledger.drain_calls())?;
        let mut artifacts = BTreeMap::new();
        for name in ITERATION_ARTIFACTS {
            artifacts.insert(name.to_string(), file_sha(&dir.join(name))?);
        }

        self.manifest.replicates[i].iterations.push(IterationState {
            t,
            selected_ids: selected_ids.clone(),
            accepted: synthetic.len(),
            attempted: batch.outcomes.len(),
            training_size: accumulated.len(),
            student: state.clone(),
            accuracy: acc.mean,
            std_err: acc.std_err,
            budget_exhausted: batch.budget_exhausted,
            ledger: rt.ledger.snapshot(),
            artifacts,
        });
        st.state = state;
        st.accumulated = accumulated;
        st.previously_selected.extend(selected_ids);
        Ok(batch.budget_exhausted)
    }

    fn write_learning_curve(&self) -> Result<()> {
        let curve = self.manifest.learning_curve()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "mean", "std_err", "replicates"])
            .map_err(|e| Error::Protocol(e.to_string()))?;
        for p in &curve.points {
            w.write_record([
                p.n.to_string(),
                format!("{:.6}", p.mean),
                format!("{:.6}", p.std_err),
                p.replicates.to_string(),
            ])
            .map_err(|e| Error::Protocol(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Protocol(e.to_string()))?;
        let path = self.out.join(LEARNING_CURVE_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> RunConfig {
        let mut c = RunConfig::from_toml_str(
            r#"
name = "t"
iterations = 2
seeds = [1, 2]
[selection]
m = 8
[sim]
seed_size = 40
validation_size = 20
test_size = 30
"#,
            &[],
        )
        .unwrap();
        c.paths.output = out.to_path_buf();
        c
    }

    #[test]
    fn run_accumulates_and_writes_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("out"));
        let m = run(&cfg).unwrap();
        assert!(m.is_complete());
        for r in &m.replicates {
            let sizes: Vec<usize> = r.iterations.iter().map(|i| i.training_size).collect();
            assert_eq!(sizes, vec![8, 16]);
            assert!(r.baseline.is_some());
        }
        let out = &cfg.paths.output;
        for f in [
            CONFIG_FILE,
            MANIFEST_FILE,
            LEARNING_CURVE_FILE,
            "data/seed.jsonl",
        ] {
            assert!(out.join(f).exists(), "{f}");
        }
        for name in ITERATION_ARTIFACTS {
            assert!(iteration_dir(out, 2, 2).join(name).exists());
        }
        assert!(run(&cfg).is_err(), "refuses to overwrite a run");
    }

    #[test]
    fn fresh_retrain_reproduces_student() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("out"));
        let m = run(&cfg).unwrap();
        let rt = Runtime::new(&cfg).unwrap();
        let val = load_corpus(
            cfg.paths.output.join("data/validation.jsonl"),
            CorpusRole::Validation,
        )
        .unwrap();
        let mut acc = Corpus::empty(CorpusRole::Synthetic).unwrap();
        for it in &m.replicates[0].iterations {
            let synth = load_corpus(
                iteration_dir(&cfg.paths.output, 1, it.t).join("synthetic.jsonl"),
                CorpusRole::Synthetic,
            )
            .unwrap();
            acc = merge_accumulate(&synth, &acc).unwrap();
            let again = rt
                .student
                .student_finetune(
                    &acc,
                    &val,
                    &cfg.finetune_hyperparams().unwrap(),
                    finetune_seed(1),
                )
                .unwrap();
            assert_eq!(again, it.student);
        }
    }

    #[test]
    fn resume_after_partial_run_matches_full_run() {
        let dir = tempfile::tempdir().unwrap();
        let full_cfg = small(&dir.path().join("full"));
        run(&full_cfg).unwrap();
        let mut short = small(&dir.path().join("part"));
        short.iterations = 1;
        run(&short).unwrap();
        // Rewrite the partial run's config to the full length so hashes match.
        let part = dir.path().join("part");
        let mut m = RunManifest::load(&part.join(MANIFEST_FILE)).unwrap();
        let mut full_for_part = full_cfg.clone();
        full_for_part.paths.output = part.clone();
        fs::write(part.join(CONFIG_FILE), full_for_part.to_toml().unwrap()).unwrap();
        m.config_hash = full_for_part.hash();
        m.iterations = full_for_part.iterations;
        for r in &mut m.replicates {
            r.status = ReplicateStatus::Running;
        }
        write_json(&part.join(MANIFEST_FILE), &m).unwrap();
        let before = fs::read(iteration_dir(&part, 1, 1).join("synthetic.jsonl")).unwrap();
        let resumed = resume(&part).unwrap();
        assert!(resumed.is_complete());
        assert_eq!(
            before,
            fs::read(iteration_dir(&part, 1, 1).join("synthetic.jsonl")).unwrap()
        );
        for seed in [1, 2] {
            for t in 1..=2 {
                for name in ITERATION_ARTIFACTS {
                    let a = fs::read(iteration_dir(&dir.path().join("full"), seed, t).join(name))
                        .unwrap();
                    let b = fs::read(iteration_dir(&part, seed, t).join(name)).unwrap();
                    assert_eq!(a, b, "replicate {seed} iter {t} {name}");
                }
            }
        }
        // A complete run resumes as a no-op.
        let again = resume(&part).unwrap();
        assert_eq!(again, resumed);
    }

    #[test]
    fn resume_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir.path().join("out"));
        run(&cfg).unwrap();
        let out = &cfg.paths.output;
        let victim = iteration_dir(out, 1, 1).join("scores.jsonl");
        fs::write(&victim, "{}\n").unwrap();
        assert!(matches!(resume(out), Err(Error::Integrity(_))));
        let dir2 = tempfile::tempdir().unwrap();
        let cfg2 = small(&dir2.path().join("out"));
        run(&cfg2).unwrap();
        let mut changed = cfg2.clone();
        changed.selection.m = 9;
        fs::write(
            cfg2.paths.output.join(CONFIG_FILE),
            changed.to_toml().unwrap(),
        )
        .unwrap();
        assert!(matches!(
            resume(&cfg2.paths.output),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn budget_stop_is_graceful_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(&dir.path().join("out"));
        cfg.budget.insert(
            ModelRole::Teacher,
            crate::modelio::TokenCap {
                max_total: Some(6000),
                ..Default::default()
            },
        );
        let m = run(&cfg).unwrap();
        assert!(m.stopped_on_budget());
        assert!(!m.is_complete());
        assert!(m.ledger.get(ModelRole::Teacher).total() <= 6000);
        let again = resume(&cfg.paths.output).unwrap();
        assert!(again.stopped_on_budget());
        assert!(resume_with(&cfg.paths.output, &["selection.m=4".into()]).is_err());
        let done = resume_with(
            &cfg.paths.output,
            &["budget.teacher.max_total=10000000".into()],
        )
        .unwrap();
        assert!(done.is_complete());
        // The iteration cut short by the cap keeps what it had accepted.
        assert!(done.replicates.iter().all(|r| r.iterations.len() == 2));
        assert!(done.learning_curve().unwrap().points.len() >= 3);
    }

    #[test]
    fn plan_lists_sizes() {
        let p = plan(&small(Path::new("x"))).unwrap();
        assert_eq!(p.expected_training_sizes, vec![8, 16]);
        assert!(p.simulated);
    }
}
