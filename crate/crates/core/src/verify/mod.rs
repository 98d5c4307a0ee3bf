//! Answer checking: boxed-answer extraction, exact Game-of-24 arithmetic,
//! judge-model verdicts and accuracy aggregation.

mod expr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::modelio::{ChatRequest, ModelEndpoint};
use crate::synthgen::templates::{self, DatasetKind};

pub use expr::{parse_expression, EvalError, Expr, Op, ParseError, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    BoxedMatch,
    Arithmetic24,
    LlmJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: String,
    pub correct: bool,
    pub method: VerifyMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Content of the last `\boxed{...}` in `text`, matched with balanced
/// braces and trimmed.
pub fn extract_boxed(text: &str) -> Result<String> {
    const TAG: &str = "\\boxed{";
    let mut search_end = text.len();
    while let Some(start) = text[..search_end].rfind(TAG) {
        let body = &text[start + TAG.len()..];
        let mut depth = 1usize;
        for (i, c) in body.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(body[..i].trim().to_string());
                    }
                }
                _ => {}
            }
        }
        // Unbalanced tail: fall back to an earlier box.
        search_end = start;
    }
    Err(Error::Extraction)
}

/// Outcome of checking a Game-of-24 expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check24 {
    pub ok: bool,
    pub detail: Option<String>,
}

impl Check24 {
    fn fail(detail: impl Into<String>) -> Self {
        Check24 {
            ok: false,
            detail: Some(detail.into()),
        }
    }
}

pub fn check_24(numbers: &[i64], expression: &str) -> Check24 {
    let e = match parse_expression(expression) {
        Ok(e) => e,
        Err(err) => return Check24::fail(format!("parse failure: {err}")),
    };
    let mut want = numbers.to_vec();
    let mut got = e.literals();
    want.sort_unstable();
    got.sort_unstable();
    if want != got {
        return Check24::fail(format!("numbers used {got:?}, expected {want:?}"));
    }
    match e.eval() {
        Err(EvalError::DivisionByZero) => Check24::fail("division by zero"),
        Ok(v) if v == Rational::from_integer(24) => Check24 {
            ok: true,
            detail: None,
        },
        Ok(v) => Check24::fail(format!("evaluates to {v}")),
    }
}

/// True iff the expression evaluates exactly to 24 and uses precisely the
/// given multiset of numbers.
pub fn verify_24(numbers: &[i64], expression: &str) -> bool {
    check_24(numbers, expression).ok
}

/// Integer tokens of a puzzle statement such as `"4 4 6 8"` or `"4, 4, 6, 8"`.
pub fn parse_numbers(text: &str) -> Vec<i64> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect()
}

/// Some expression over `numbers` that evaluates to 24, found by exhaustive
/// search over combination orders.
pub fn solve_24(numbers: &[i64]) -> Option<Expr> {
    let items: Vec<(Rational, Expr)> = numbers
        .iter()
        .map(|&n| (Rational::from_integer(n as i128), Expr::Num(n)))
        .collect();
    solve_rec(items, Rational::from_integer(24))
}

fn solve_rec(items: Vec<(Rational, Expr)>, target: Rational) -> Option<Expr> {
    if items.len() == 1 {
        return (items[0].0 == target).then(|| items[0].1.clone());
    }
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let rest: Vec<_> = items
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i && *k != j)
                .map(|(_, x)| x.clone())
                .collect();
            for op in Op::ALL {
                // Commutative ops only need one operand order.
                if matches!(op, Op::Add | Op::Mul) && i > j {
                    continue;
                }
                if let Some(v) = op.apply(items[i].0, items[j].0) {
                    let mut next = rest.clone();
                    next.push((v, Expr::bin(op, items[i].1.clone(), items[j].1.clone())));
                    if let Some(e) = solve_rec(next, target) {
                        return Some(e);
                    }
                }
            }
        }
    }
    None
}

/// Parsed judge verdict: `Some(true/false)` or `None` with a reason.
pub fn parse_verdict(completion: &str) -> (bool, Option<String>) {
    let norm: String = completion
        .chars()
        .filter(|c| !matches!(c, '*' | '#' | '_' | '`'))
        .collect::<String>()
        .to_lowercase();
    let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
    let norm = norm.replace("verdict :", "verdict:");
    let correct = norm.contains("final verdict: correct");
    let incorrect = norm.contains("final verdict: incorrect");
    match (correct, incorrect) {
        (true, false) => (true, None),
        (false, true) => (false, None),
        (true, true) => (false, Some("ambiguous verdict".into())),
        (false, false) => (false, Some("no verdict".into())),
    }
}

/// Asks a judge model whether `student_answer` matches `ground_truth`.
/// Decodes greedily; a completion with no verdict is asked once more.
pub fn llm_judge_verify(
    judge: &ModelEndpoint,
    question: &str,
    ground_truth: &str,
    student_answer: &str,
    kind: DatasetKind,
) -> Result<(bool, Option<String>)> {
    let system = match kind {
        DatasetKind::Gsm8kStyle => templates::EVAL_SYSTEM_GSM8K,
        DatasetKind::ProntoStyle => templates::EVAL_SYSTEM_PRONTO,
        other => {
            return Err(Error::validation(format!(
                "{other} answers are checked locally, not by a judge"
            )))
        }
    };
    let user = templates::render(
        templates::EVAL_USER,
        &[
            ("question", question),
            ("reference", ground_truth),
            ("student", student_answer),
        ],
    )?;
    let mut last = (false, Some("no verdict".to_string()));
    for attempt in 0..2u64 {
        let req = ChatRequest::user(user.clone())
            .with_system(system)
            .with_seed(attempt);
        let reply = judge.chat(&req)?;
        last = parse_verdict(&reply.text);
        if last.1.as_deref() != Some("no verdict") {
            break;
        }
    }
    Ok(last)
}

/// How answers of a dataset are checked.
#[derive(Debug, Clone)]
pub enum Verifier {
    /// Compare the last boxed answer with the reference's boxed answer (or
    /// the whole reference when it has no box).
    BoxedMatch,
    /// Exact arithmetic check of the student's expression.
    Arithmetic24,
    LlmJudge {
        judge: ModelEndpoint,
        kind: DatasetKind,
    },
}

impl Verifier {
    pub fn method(&self) -> VerifyMethod {
        match self {
            Verifier::BoxedMatch => VerifyMethod::BoxedMatch,
            Verifier::Arithmetic24 => VerifyMethod::Arithmetic24,
            Verifier::LlmJudge { .. } => VerifyMethod::LlmJudge,
        }
    }

    pub fn check(&self, sample: &Sample, answer: &str) -> Result<Verdict> {
        let (correct, detail) = match self {
            Verifier::BoxedMatch => boxed_match(&sample.answer, answer),
            Verifier::Arithmetic24 => {
                let numbers = puzzle_numbers(sample);
                let expr = extract_boxed(answer).ok().or_else(|| {
                    answer
                        .rsplit("Answer:")
                        .next()
                        .filter(|_| answer.contains("Answer:"))
                        .map(str::to_string)
                });
                match expr {
                    Some(e) => {
                        let c = check_24(&numbers, &e);
                        (c.ok, c.detail)
                    }
                    None => (false, Some("no expression found".into())),
                }
            }
            Verifier::LlmJudge { judge, kind } => {
                llm_judge_verify(judge, &sample.question, &sample.answer, answer, *kind)?
            }
        };
        Ok(Verdict {
            sample_id: sample.id.clone(),
            correct,
            method: self.method(),
            detail,
        })
    }
}

/// The four puzzle numbers: the `numbers` metadata entry if present,
/// otherwise the integers in the question.
pub fn puzzle_numbers(sample: &Sample) -> Vec<i64> {
    match sample.meta.get("numbers") {
        Some(n) => parse_numbers(n),
        None => parse_numbers(&sample.question),
    }
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<String>()
        .trim_end_matches('.')
        .trim_start_matches('$')
        .trim_end_matches('$')
        .to_string()
}

fn boxed_match(reference: &str, answer: &str) -> (bool, Option<String>) {
    let want = extract_boxed(reference).unwrap_or_else(|_| reference.trim().to_string());
    match extract_boxed(answer) {
        Ok(got) if normalize_answer(&got) == normalize_answer(&want) => (true, None),
        Ok(got) => (false, Some(format!("boxed {got:?} != {want:?}"))),
        Err(_) => (false, Some("no boxed answer".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub std_err: f64,
    pub verdicts: Vec<Verdict>,
}

/// Fraction of `test` answered correctly, with its binomial standard error.
pub fn eval_accuracy(
    test: &Corpus,
    predictions: &BTreeMap<String, String>,
    verifier: &Verifier,
) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty corpus"));
    }
    let mut verdicts = Vec::with_capacity(test.len());
    for s in test.iter() {
        let answer = predictions
            .get(&s.id)
            .ok_or_else(|| Error::validation(format!("missing prediction for {}", s.id)))?;
        verdicts.push(verifier.check(s, answer)?);
    }
    let (mean, std_err) = accuracy_from(&verdicts);
    Ok(Accuracy {
        mean,
        std_err,
        verdicts,
    })
}

/// (p, sqrt(p(1-p)/n)) over a verdict list.
pub fn accuracy_from(verdicts: &[Verdict]) -> (f64, f64) {
    let n = verdicts.len() as f64;
    let p = verdicts.iter().filter(|v| v.correct).count() as f64 / n;
    (p, (p * (1.0 - p) / n).sqrt())
}
