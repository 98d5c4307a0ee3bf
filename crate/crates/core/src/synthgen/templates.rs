//! Prompt assets and a minimal placeholder renderer.
//!
//! Templates use `{{name}}` slots. A `{{#name}}...{{/name}}` section is kept
//! only when `name` is bound to a non-empty value, which is how the few-shot
//! block disappears when no examples are given.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample};
use crate::error::{Error, Result};

pub const GSM8K_QUESTION: &str = include_str!("../../templates/gsm8k_question.txt");
pub const GSM8K_ANSWER: &str = include_str!("../../templates/gsm8k_answer.txt");
pub const GSM8K_FEW_SHOT: &str = include_str!("../../templates/gsm8k_few_shot.txt");
pub const MATH_QUESTION: &str = include_str!("../../templates/math_question.txt");
pub const MATH_ANSWER: &str = include_str!("../../templates/math_answer.txt");
pub const MATH_FEW_SHOT: &str = include_str!("../../templates/math_few_shot.txt");
pub const PRONTO_QUESTION: &str = include_str!("../../templates/pronto_question.txt");
pub const PRONTO_ANSWER: &str = include_str!("../../templates/pronto_answer.txt");
pub const PRONTO_FEW_SHOT: &str = include_str!("../../templates/pronto_few_shot.txt");
pub const GAME24_BACKWARD: &str = include_str!("../../templates/game24_backward.txt");
pub const GAME24_REASONING: &str = include_str!("../../templates/game24_reasoning.txt");
pub const GAME24_ANSWER: &str = include_str!("../../templates/game24_answer.txt");
pub const EVAL_USER: &str = include_str!("../../templates/eval_user.txt");
pub const EVAL_SYSTEM_GSM8K: &str = include_str!("../../templates/eval_system_gsm8k.txt");
pub const EVAL_SYSTEM_PRONTO: &str = include_str!("../../templates/eval_system_pronto.txt");
pub const JUDGE_SYSTEM: &str = include_str!("../../templates/judge_system.txt");
pub const JUDGE_PAIR: &str = include_str!("../../templates/judge_pair.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gsm8kStyle,
    MathCategoryStyle,
    ProntoStyle,
    Game24Backward,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Gsm8kStyle => "gsm8k_style",
            DatasetKind::MathCategoryStyle => "math_category_style",
            DatasetKind::ProntoStyle => "pronto_style",
            DatasetKind::Game24Backward => "game24_backward",
        })
    }
}

/// Per-dataset prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub dataset_kind: DatasetKind,
    /// Teacher prompt producing a new question from an exemplar.
    pub question_template: String,
    /// Prompt used to answer a question, by the teacher and the student.
    pub answer_template: String,
    pub few_shot_k: usize,
    /// Rendering of one few-shot example inside the question prompt.
    pub few_shot_format: String,
    /// Second-stage prompt turning a verified expression into worked steps
    /// (Game of 24 only; empty otherwise).
    #[serde(default)]
    pub reasoning_template: String,
}

impl PromptTemplate {
    pub fn builtin(kind: DatasetKind) -> Self {
        let (q, a, fs, r) = match kind {
            DatasetKind::Gsm8kStyle => (GSM8K_QUESTION, GSM8K_ANSWER, GSM8K_FEW_SHOT, ""),
            DatasetKind::MathCategoryStyle => (MATH_QUESTION, MATH_ANSWER, MATH_FEW_SHOT, ""),
            DatasetKind::ProntoStyle => (PRONTO_QUESTION, PRONTO_ANSWER, PRONTO_FEW_SHOT, ""),
            DatasetKind::Game24Backward => (GAME24_BACKWARD, GAME24_ANSWER, "", GAME24_REASONING),
        };
        PromptTemplate {
            dataset_kind: kind,
            question_template: q.to_string(),
            answer_template: a.to_string(),
            few_shot_k: if kind == DatasetKind::Game24Backward {
                0
            } else {
                5
            },
            few_shot_format: fs.to_string(),
            reasoning_template: r.to_string(),
        }
    }

    /// Built-in set with any of `question.txt`, `answer.txt`,
    /// `few_shot.txt`, `reasoning.txt` found in `dir` substituted.
    pub fn from_dir(kind: DatasetKind, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = PromptTemplate::builtin(kind);
        let slots: [(&str, &mut String); 4] = [
            ("question.txt", &mut t.question_template),
            ("answer.txt", &mut t.answer_template),
            ("few_shot.txt", &mut t.few_shot_format),
            ("reasoning.txt", &mut t.reasoning_template),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }

    pub fn render_answer_prompt(&self, question: &str) -> Result<String> {
        render(&self.answer_template, &[("question", question)])
    }

    pub fn render_few_shot(&self, sample: &Sample) -> Result<String> {
        let category = sample
            .meta
            .get("category")
            .map(String::as_str)
            .unwrap_or("");
        let context = sample
            .meta
            .get("context")
            .map(String::as_str)
            .unwrap_or(&sample.question);
        let query = sample.meta.get("query").map(String::as_str).unwrap_or("");
        render(
            &self.few_shot_format,
            &[
                ("question", sample.question.as_str()),
                ("answer", sample.answer.as_str()),
                ("category", category),
                ("context", context),
                ("query", query),
            ],
        )
    }
}

/// Substitutes `{{name}}` slots and resolves `{{#name}}...{{/name}}`
/// sections. Every slot must be bound; bound values are inserted verbatim
/// and never re-scanned.
pub fn render(template: &str, bindings: &[(&str, &str)]) -> Result<String> {
    let map: BTreeMap<&str, &str> = bindings.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| {
            Error::Template(format!("unterminated slot near {:?}", truncate(after)))
        })?;
        let tag = after[..end].trim();
        rest = &after[end + 2..];
        if let Some(name) = tag.strip_prefix('#') {
            let close = format!("{{{{/{name}}}}}");
            let close_at = rest
                .find(&close)
                .ok_or_else(|| Error::Template(format!("unclosed section {name}")))?;
            let body = &rest[..close_at];
            rest = &rest[close_at + close.len()..];
            if map.get(name).is_some_and(|v| !v.is_empty()) {
                out.push_str(&render(body, bindings)?);
            }
        } else if tag.starts_with('/') {
            return Err(Error::Template(format!("stray section end {tag}")));
        } else {
            let value = map
                .get(tag)
                .ok_or_else(|| Error::Template(tag.to_string()))?;
            out.push_str(value);
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn truncate(s: &str) -> String {
    s.chars().take(20).collect()
}

/// Draws up to `k` few-shot examples uniformly from the seed corpus,
/// excluding the exemplar itself. Category-style datasets only draw from
/// samples of the exemplar's category.
pub fn choose_few_shot<R: Rng + ?Sized>(
    seed: &Corpus,
    exemplar: &Sample,
    kind: DatasetKind,
    k: usize,
    rng: &mut R,
) -> Vec<Sample> {
    if k == 0 {
        return Vec::new();
    }
    let category = exemplar.meta.get("category");
    let pool: Vec<&Sample> = seed
        .iter()
        .filter(|s| s.id != exemplar.id)
        .filter(|s| kind != DatasetKind::MathCategoryStyle || s.meta.get("category") == category)
        .collect();
    pool.choose_multiple(rng, k).map(|s| (*s).clone()).collect()
}
