//! Teacher-side synthesis: prompt rendering, question-then-answer
//! generation, ROUGE-L deduplication and Game-of-24 backward reasoning.

pub mod templates;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{synthetic_id, Corpus, Sample};
use crate::error::{Error, Result};
use crate::modelio::{ChatRequest, ModelEndpoint};
use crate::util::{rng_from, stable_hash};
use crate::verify::{check_24, extract_boxed, parse_expression, puzzle_numbers};

pub use templates::{choose_few_shot, render, DatasetKind, PromptTemplate};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate,
    VerifierFailed,
    TeacherError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub exemplar_id: String,
    pub question: String,
    pub answer: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl SynthesisOutcome {
    fn accepted(exemplar: &Sample, question: String, answer: String) -> Self {
        SynthesisOutcome {
            exemplar_id: exemplar.id.clone(),
            question,
            answer,
            accepted: true,
            reject_reason: None,
            detail: None,
            meta: BTreeMap::new(),
        }
    }

    fn rejected(exemplar: &Sample, reason: RejectReason, detail: impl Into<String>) -> Self {
        SynthesisOutcome {
            exemplar_id: exemplar.id.clone(),
            question: String::new(),
            answer: String::new(),
            accepted: false,
            reject_reason: Some(reason),
            detail: Some(detail.into()),
            meta: BTreeMap::new(),
        }
    }

    fn reject(&mut self, reason: RejectReason, detail: impl Into<String>) {
        self.accepted = false;
        self.reject_reason = Some(reason);
        self.detail = Some(detail.into());
    }
}

/// Decoding settings for teacher generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.7,
            max_output_tokens: 1024,
        }
    }
}

impl GenerationParams {
    fn request(&self, prompt: String, seed: u64) -> ChatRequest {
        let mut r = ChatRequest::user(prompt)
            .with_temperature(self.temperature)
            .with_seed(seed);
        r.max_output_tokens = self.max_output_tokens;
        r
    }
}

/// The expression of a Game-of-24 solution sample: its boxed content,
/// else the text after the last `Answer:`, else the whole answer, with any
/// trailing `= 24` removed.
pub fn solution_expression(sample: &Sample) -> String {
    let raw = extract_boxed(&sample.answer).unwrap_or_else(|_| {
        sample
            .answer
            .rsplit("Answer:")
            .next()
            .unwrap_or(&sample.answer)
            .to_string()
    });
    raw.split('=').next().unwrap_or("").trim().to_string()
}

/// A teacher reply, or the failure message when the call failed for a
/// reason other than budget. Budget errors propagate so callers can stop.
fn teacher_text(
    teacher: &ModelEndpoint,
    request: &ChatRequest,
) -> Result<std::result::Result<String, String>> {
    match teacher.chat(request) {
        Ok(r) => Ok(Ok(r.text)),
        Err(e @ Error::Budget { .. }) => Err(e),
        Err(e) => Ok(Err(e.to_string())),
    }
}

/// Teacher prompt asking for a new question modelled on `exemplar`.
pub fn render_question_prompt(
    template: &PromptTemplate,
    few_shot: &[Sample],
    exemplar: &Sample,
) -> Result<ChatRequest> {
    let prompt = match template.dataset_kind {
        DatasetKind::Game24Backward => {
            let numbers = puzzle_numbers(exemplar)
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let solution = solution_expression(exemplar);
            render(
                &template.question_template,
                &[("numbers", &numbers), ("solution", &solution)],
            )?
        }
        kind => {
            let examples = few_shot
                .iter()
                .map(|s| template.render_few_shot(s))
                .collect::<Result<Vec<_>>>()?
                .join("\n");
            let mut bindings = vec![
                ("examples", examples.as_str()),
                ("question", exemplar.question.as_str()),
            ];
            if kind == DatasetKind::MathCategoryStyle {
                let category = exemplar
                    .meta
                    .get("category")
                    .ok_or_else(|| Error::Template("category".into()))?;
                bindings.push(("category", category.as_str()));
            }
            render(&template.question_template, &bindings)?
        }
    };
    Ok(ChatRequest::user(prompt))
}

/// Two teacher calls: a new question from the exemplar, then an answer to
/// it using the dataset's answer prompt. Teacher failures become rejected
/// outcomes, except budget exhaustion, which is returned as an error.
pub fn synthesize_pair(
    teacher: &ModelEndpoint,
    template: &PromptTemplate,
    few_shot: &[Sample],
    exemplar: &Sample,
    params: &GenerationParams,
    seed: u64,
) -> Result<SynthesisOutcome> {
    let prompt = render_question_prompt(template, few_shot, exemplar)?;
    let question = match teacher_text(
        teacher,
        &params.request(prompt.last_user().to_string(), seed),
    )? {
        Ok(text) => text.trim().to_string(),
        Err(e) => {
            return Ok(SynthesisOutcome::rejected(
                exemplar,
                RejectReason::TeacherError,
                e,
            ))
        }
    };
    if question.is_empty() {
        return Ok(SynthesisOutcome::rejected(
            exemplar,
            RejectReason::TeacherError,
            "empty question",
        ));
    }
    let answer_prompt = template.render_answer_prompt(&question)?;
    let answer = match teacher_text(teacher, &params.request(answer_prompt, seed))? {
        Ok(text) => text.trim().to_string(),
        Err(e) => {
            return Ok(SynthesisOutcome::rejected(
                exemplar,
                RejectReason::TeacherError,
                e,
            ))
        }
    };
    let mut out = SynthesisOutcome::accepted(exemplar, question, answer);
    if let Some(c) = exemplar.meta.get("category") {
        out.meta.insert("category".into(), c.clone());
    }
    Ok(out)
}

/// New Game-of-24 puzzle by backward reasoning from a known solution. The
/// teacher's boxed expression must verify before a second call turns it
/// into worked steps, which become the answer.
pub fn backward_24_generate(
    teacher: &ModelEndpoint,
    template: &PromptTemplate,
    solution: &Sample,
    params: &GenerationParams,
    seed: u64,
) -> Result<SynthesisOutcome> {
    let solution_expr = solution_expression(solution);
    if parse_expression(&solution_expr).is_err() {
        return Err(Error::validation(format!(
            "solution {} is not an arithmetic expression: {solution_expr:?}",
            solution.id
        )));
    }
    let prompt = render_question_prompt(template, &[], solution)?;
    let reply = match teacher_text(
        teacher,
        &params.request(prompt.last_user().to_string(), seed),
    )? {
        Ok(text) => text,
        Err(e) => {
            return Ok(SynthesisOutcome::rejected(
                solution,
                RejectReason::TeacherError,
                e,
            ))
        }
    };
    let expr = match extract_boxed(&reply) {
        Ok(e) => e,
        Err(_) => {
            return Ok(SynthesisOutcome::rejected(
                solution,
                RejectReason::VerifierFailed,
                "no boxed expression",
            ))
        }
    };
    let literals = match parse_expression(&expr) {
        Ok(e) => e.literals(),
        Err(e) => {
            return Ok(SynthesisOutcome::rejected(
                solution,
                RejectReason::VerifierFailed,
                format!("unparseable expression {expr:?}: {e}"),
            ))
        }
    };
    if literals.len() != 4 {
        return Ok(SynthesisOutcome::rejected(
            solution,
            RejectReason::VerifierFailed,
            format!("expression uses {} numbers", literals.len()),
        ));
    }
    let check = check_24(&literals, &expr);
    if !check.ok {
        return Ok(SynthesisOutcome::rejected(
            solution,
            RejectReason::VerifierFailed,
            check.detail.unwrap_or_default(),
        ));
    }
    let question = literals
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let steps_prompt = render(
        &template.reasoning_template,
        &[("question", &question), ("answer", &expr)],
    )?;
    let answer = match teacher_text(teacher, &params.request(steps_prompt, seed))? {
        Ok(text) => text.trim().to_string(),
        Err(e) => {
            return Ok(SynthesisOutcome::rejected(
                solution,
                RejectReason::TeacherError,
                e,
            ))
        }
    };
    let mut out = SynthesisOutcome::accepted(solution, question.clone(), answer);
    out.meta.insert("numbers".into(), question);
    out.meta.insert("expression".into(), expr);
    Ok(out)
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_tokens_f1(a: &[String], b: &[String]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(a, b) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / a.len() as f64;
    let r = lcs / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L F1 over lowercased whitespace tokens.
pub fn rouge_l(a: &str, b: &str) -> f64 {
    rouge_tokens_f1(&rouge_tokens(a), &rouge_tokens(b))
}

/// True (accept) unless some history item reaches `threshold`.
pub fn dedup_filter(candidate: &str, history: &[String], threshold: f64) -> bool {
    let c = rouge_tokens(candidate);
    !history
        .iter()
        .any(|h| rouge_tokens_f1(&c, &rouge_tokens(h)) >= threshold)
}

/// Every question generated so far in a run, kept tokenized.
#[derive(Debug, Clone, Default)]
pub struct DedupHistory {
    items: Vec<Vec<String>>,
}

impl DedupHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_questions<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        DedupHistory {
            items: questions.into_iter().map(rouge_tokens).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_similarity(&self, candidate: &str) -> f64 {
        let c = rouge_tokens(candidate);
        self.items
            .par_iter()
            .map(|h| rouge_tokens_f1(&c, h))
            .reduce(|| 0.0, f64::max)
    }

    pub fn admits(&self, candidate: &str, threshold: f64) -> bool {
        self.max_similarity(candidate) < threshold
    }

    pub fn push(&mut self, question: &str) {
        self.items.push(rouge_tokens(question));
    }
}

/// One iteration's synthesis job.
pub struct BatchSpec<'a> {
    pub teacher: &'a ModelEndpoint,
    pub template: &'a PromptTemplate,
    pub seed_corpus: &'a Corpus,
    /// Selected exemplars in rank order.
    pub exemplars: &'a [Sample],
    pub quota: usize,
    pub iteration: u32,
    /// `None` disables deduplication.
    pub dedup_threshold: Option<f64>,
    pub params: &'a GenerationParams,
    pub seed: u64,
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub accepted: Vec<Sample>,
    /// Every attempt in order, accepted or not.
    pub outcomes: Vec<SynthesisOutcome>,
    pub budget_exhausted: bool,
}

/// Generates up to `quota` accepted samples. Attempts run in waves: each
/// wave's teacher calls run concurrently, then outcomes are deduplicated
/// one by one in exemplar order, so the result does not depend on thread
/// timing. Rejected attempts are retried with the next exemplar in rank
/// order (cycling) until the quota or `3 * quota` attempts is reached.
/// Game-of-24 puzzles are never deduplicated.
pub fn generate_batch(spec: &BatchSpec<'_>, history: &mut DedupHistory) -> Result<BatchResult> {
    let threshold = match spec.template.dataset_kind {
        DatasetKind::Game24Backward => None,
        _ => spec.dedup_threshold,
    };
    if spec.exemplars.is_empty() || spec.quota == 0 {
        return Ok(BatchResult {
            accepted: Vec::new(),
            outcomes: Vec::new(),
            budget_exhausted: false,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cap = 3 * spec.quota;
    let mut attempts = 0usize;
    let mut accepted = Vec::new();
    let mut outcomes = Vec::new();
    let mut budget_exhausted = false;
    while accepted.len() < spec.quota && attempts < cap && !budget_exhausted {
        let wave = (spec.quota - accepted.len()).min(cap - attempts);
        let jobs: Vec<usize> = (attempts..attempts + wave).collect();
        let results: Vec<Result<SynthesisOutcome>> =
            pool.install(|| jobs.par_iter().map(|&a| attempt(spec, a)).collect());
        attempts += wave;
        for (r, &a) in results.into_iter().zip(&jobs) {
            let mut out = match r {
                Ok(out) => out,
                Err(e @ Error::Budget { .. }) => {
                    budget_exhausted = true;
                    let exemplar = &spec.exemplars[a % spec.exemplars.len()];
                    SynthesisOutcome::rejected(exemplar, RejectReason::TeacherError, e.to_string())
                }
                Err(e) => return Err(e),
            };
            if out.accepted {
                if let Some(t) = threshold {
                    let sim = history.max_similarity(&out.question);
                    if sim >= t {
                        out.reject(RejectReason::Duplicate, format!("rouge-l {sim:.4}"));
                    }
                }
            }
            if out.accepted {
                history.push(&out.question);
                let mut s = Sample::synthetic(
                    synthetic_id(spec.iteration, accepted.len()),
                    out.question.clone(),
                    out.answer.clone(),
                    out.exemplar_id.clone(),
                    spec.iteration,
                );
                s.meta = out.meta.clone();
                accepted.push(s);
            }
            outcomes.push(out);
        }
        if spec
            .teacher
            .ledger()
            .check_open(spec.teacher.charge_role())
            .is_err()
        {
            budget_exhausted = true;
        }
    }
    Ok(BatchResult {
        accepted,
        outcomes,
        budget_exhausted,
    })
}

fn attempt(spec: &BatchSpec<'_>, a: usize) -> Result<SynthesisOutcome> {
    let exemplar = &spec.exemplars[a % spec.exemplars.len()];
    let req_seed = stable_hash([
        b"synth".as_slice(),
        &spec.seed.to_le_bytes(),
        &spec.iteration.to_le_bytes(),
        &(a as u64).to_le_bytes(),
    ]);
    if spec.template.dataset_kind == DatasetKind::Game24Backward {
        return backward_24_generate(spec.teacher, spec.template, exemplar, spec.params, req_seed);
    }
    let mut rng = rng_from([b"few-shot".as_slice(), &req_seed.to_le_bytes()]);
    let few_shot = choose_few_shot(
        spec.seed_corpus,
        exemplar,
        spec.template.dataset_kind,
        spec.template.few_shot_k,
        &mut rng,
    );
    synthesize_pair(
        spec.teacher,
        spec.template,
        &few_shot,
        exemplar,
        spec.params,
        req_seed,
    )
}
