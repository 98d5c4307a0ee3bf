//! Per-sample scores against the current student: sequence loss, reward,
//! pairwise judge scores, correctness, and gradient embeddings.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::modelio::{ChatRequest, GradFeatures, ModelEndpoint, StudentState};
use crate::synthgen::templates::{self, PromptTemplate};
use crate::util::{rng_from, stable_hash, unit_from_hash};
use crate::verify::Verifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    LossSelf,
    LossGt,
    RewardSelf,
    RewardGt,
    JudgePair,
    Correctness,
    Random,
}

impl ScorerKind {
    /// Whether the score is computed on the student's own prediction.
    pub fn uses_prediction(self) -> bool {
        matches!(
            self,
            ScorerKind::LossSelf
                | ScorerKind::RewardSelf
                | ScorerKind::JudgePair
                | ScorerKind::Correctness
        )
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::LossSelf => "loss_self",
            ScorerKind::LossGt => "loss_gt",
            ScorerKind::RewardSelf => "reward_self",
            ScorerKind::RewardGt => "reward_gt",
            ScorerKind::JudgePair => "judge_pair",
            ScorerKind::Correctness => "correctness",
            ScorerKind::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub sample_id: String,
    pub scorer_kind: ScorerKind,
    pub value: f64,
    /// (teacher score, student score) for pairwise judging.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEmbedding {
    pub sample_id: String,
    pub vector: Vec<f64>,
}

/// Mean negative log-probability of a token sequence.
pub fn sequence_loss(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Degenerate("sequence loss of an empty answer".into()));
    }
    if let Some(lp) = logprobs.iter().find(|lp| !(**lp <= 0.0)) {
        return Err(Error::validation(format!("logprob {lp} is not <= 0")));
    }
    Ok(-logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Two judge scores from a completion: the first line if it holds exactly
/// two numbers, otherwise the last two numbers anywhere. Clamped to [1, 10].
pub fn parse_judge_scores(text: &str) -> Option<(f64, f64)> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let first_nums = numbers_in(first);
    let only_numbers = first
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .all(|t| t.parse::<f64>().is_ok());
    let pair = if first_nums.len() == 2 && only_numbers {
        (first_nums[0], first_nums[1])
    } else {
        let all = numbers_in(text);
        if all.len() < 2 {
            return None;
        }
        (all[all.len() - 2], all[all.len() - 1])
    };
    Some((pair.0.clamp(1.0, 10.0), pair.1.clamp(1.0, 10.0)))
}

fn numbers_in(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() || (c == '.' && !cur.is_empty() && !cur.contains('.')) {
            cur.push(c);
        } else if !cur.is_empty() {
            if let Ok(v) = cur.trim_end_matches('.').parse() {
                out.push(v);
            }
            cur.clear();
        }
    }
    out
}

/// Pairwise judging: the teacher answers the question itself, then scores
/// its own answer (first) against the student's (second). Unparseable
/// verdicts are asked again up to twice.
pub fn judge_pair_score(
    teacher: &ModelEndpoint,
    template: &PromptTemplate,
    question: &str,
    student_answer: &str,
) -> Result<(f64, f64)> {
    let own = teacher
        .chat(&ChatRequest::user(template.render_answer_prompt(question)?))?
        .text;
    let prompt = templates::render(
        templates::JUDGE_PAIR,
        &[
            ("question", question),
            ("answer_1", &own),
            ("answer_2", student_answer),
        ],
    )?;
    let mut raw = String::new();
    for attempt in 0..3u64 {
        let req = ChatRequest::user(prompt.clone())
            .with_system(templates::JUDGE_SYSTEM)
            .with_seed(attempt);
        raw = teacher.chat(&req)?.text;
        if let Some(pair) = parse_judge_scores(&raw) {
            return Ok(pair);
        }
    }
    Err(Error::JudgeParse { raw })
}

/// 1 if the verifier accepts the student's answer, else 0.
pub fn correctness_score(
    sample: &Sample,
    student_answer: &str,
    verifier: &Verifier,
) -> Result<f64> {
    Ok(if verifier.check(sample, student_answer)?.correct {
        1.0
    } else {
        0.0
    })
}

/// Gradient of the mean cross-entropy with respect to the weights of a
/// softmax output head, `mean_t (p_t - onehot(y_t)) ⊗ h_t`, laid out with
/// index `v * hidden + k`.
pub fn grad_embedding(
    probs: &[Vec<f64>],
    targets: &[usize],
    hidden: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.len() != targets.len() || probs.len() != hidden.len() {
        return Err(Error::validation(
            "gradient embedding needs one distribution, target and hidden vector per position",
        ));
    }
    let v = probs[0].len();
    let h = hidden[0].len();
    let mut out = vec![0.0; v * h];
    for ((p, &t), x) in probs.iter().zip(targets).zip(hidden) {
        if p.len() != v || x.len() != h {
            return Err(Error::validation(
                "inconsistent vocabulary or hidden size across positions",
            ));
        }
        if t >= v {
            return Err(Error::validation(format!(
                "target {t} outside vocabulary of {v}"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "distribution sums to {total}, not 1"
            )));
        }
        for (vi, &pv) in p.iter().enumerate() {
            let err = pv - if vi == t { 1.0 } else { 0.0 };
            for (k, &hk) in x.iter().enumerate() {
                out[vi * h + k] += err * hk;
            }
        }
    }
    let n = probs.len() as f64;
    out.iter_mut().for_each(|g| *g /= n);
    Ok(out)
}

/// Raw gradient vector for a feature report.
pub fn features_to_gradient(features: &GradFeatures) -> Result<Vec<f64>> {
    match features {
        GradFeatures::Head {
            probs,
            targets,
            hidden,
        } => grad_embedding(probs, targets, hidden),
        GradFeatures::Raw(v) => Ok(v.clone()),
    }
}

pub const PROJECTION_DENSITY: f64 = 3.0;
pub const DEFAULT_PROJECTION_DIM: usize = 1024;

/// Sparse random projection `R x` to `d` dimensions. Entries of `R` are
/// `±sqrt(s/d)` with probability `1/(2s)` each and 0 otherwise (`s = 3`),
/// so squared norms are preserved in expectation. Column `j` of `R` is
/// generated from `(seed, input dim, d, j)` alone, which keeps the map
/// deterministic and linear.
pub fn sparse_project(x: &[f64], d: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::validation("projection dimension must be >= 1"));
    }
    if d > x.len() {
        return Err(Error::validation(format!(
            "projection dimension {d} exceeds input dimension {}",
            x.len()
        )));
    }
    let scale = (PROJECTION_DENSITY / d as f64).sqrt();
    let q = 1.0 / PROJECTION_DENSITY;
    let log_miss = (1.0 - q).ln();
    let mut y = vec![0.0; d];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let mut rng = rng_from([
            b"proj".as_slice(),
            &seed.to_le_bytes(),
            &(x.len() as u64).to_le_bytes(),
            &(d as u64).to_le_bytes(),
            &(j as u64).to_le_bytes(),
        ]);
        // Geometric gaps between the nonzero rows of this column.
        let gap = |rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / log_miss).floor() as usize
        };
        let mut i = gap(&mut rng);
        while i < d {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            y[i] += sign * scale * xj;
            i = i.saturating_add(1 + gap(&mut rng));
        }
    }
    Ok(y)
}

/// Everything needed to score a sample against the current student.
pub struct ScoringContext<'a> {
    pub student: &'a ModelEndpoint,
    pub state: &'a StudentState,
    pub template: &'a PromptTemplate,
    pub teacher: Option<&'a ModelEndpoint>,
    pub reward: Option<&'a ModelEndpoint>,
    pub verifier: Option<&'a Verifier>,
    pub seed: u64,
}

impl ScoringContext<'_> {
    /// Scores one sample. `prediction` is the student's greedy answer and
    /// is required by the self-prediction scorers.
    pub fn score(
        &self,
        kind: ScorerKind,
        sample: &Sample,
        prediction: Option<&str>,
    ) -> Result<Score> {
        let answer = match (kind.uses_prediction(), prediction) {
            (true, Some(p)) => p,
            (true, None) => {
                return Err(Error::validation(format!(
                    "{kind} scoring of {} needs a student prediction",
                    sample.id
                )))
            }
            (false, _) => sample.answer.as_str(),
        };
        let mut aux = None;
        let value = match kind {
            ScorerKind::LossSelf | ScorerKind::LossGt => {
                let prompt = self.template.render_answer_prompt(&sample.question)?;
                let lps = self.student.answer_logprobs(self.state, &prompt, answer)?;
                let lps: Vec<f64> = lps.iter().map(|t| t.logprob).collect();
                sequence_loss(&lps)?
            }
            ScorerKind::RewardSelf | ScorerKind::RewardGt => {
                let reward = self.reward.ok_or_else(|| {
                    Error::Config("reward scoring needs a reward endpoint".into())
                })?;
                reward.reward_score(&sample.question, answer)?
            }
            ScorerKind::JudgePair => {
                let teacher = self
                    .teacher
                    .ok_or_else(|| Error::Config("judge scoring needs a teacher".into()))?;
                let (t, s) = judge_pair_score(teacher, self.template, &sample.question, answer)?;
                aux = Some((t, s));
                t - s
            }
            ScorerKind::Correctness => {
                let verifier = self
                    .verifier
                    .ok_or_else(|| Error::Config("correctness scoring needs a verifier".into()))?;
                correctness_score(sample, answer, verifier)?
            }
            ScorerKind::Random => unit_from_hash(stable_hash([
                b"random-score".as_slice(),
                &self.seed.to_le_bytes(),
                sample.id.as_bytes(),
            ])),
        };
        if !value.is_finite() {
            return Err(Error::Protocol(format!(
                "non-finite {kind} score for {}",
                sample.id
            )));
        }
        Ok(Score {
            sample_id: sample.id.clone(),
            scorer_kind: kind,
            value,
            aux,
        })
    }

    /// Gradient embedding of the student's prediction, projected to `d`
    /// dimensions when the raw gradient is larger than that.
    pub fn embed(&self, sample: &Sample, prediction: &str, d: usize) -> Result<GradEmbedding> {
        let prompt = self.template.render_answer_prompt(&sample.question)?;
        let features = self
            .student
            .grad_features(self.state, &prompt, prediction)?;
        let raw = features_to_gradient(&features)?;
        let vector = if raw.len() > d {
            sparse_project(&raw, d, self.seed)?
        } else {
            raw
        };
        Ok(GradEmbedding {
            sample_id: sample.id.clone(),
            vector,
        })
    }
}
