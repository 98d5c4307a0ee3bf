//! Deterministic simulated world standing in for real teacher, student and
//! reward models.
//!
//! Every question carries a latent topic and difficulty, embedded in its
//! text as a marker such as `[sim k=2 d=0.41370 id=ab12cd34]` (text without
//! a marker gets a latent derived from its hash). The student holds a
//! mastery level per topic. It answers a question correctly under greedy
//! decoding iff `logistic(a * (mastery - difficulty)) >= 0.5`, and its token
//! log-probabilities come from that same confidence, so uncertainty scores
//! peak near the edge of what the student knows. Fine-tuning moves mastery
//! toward samples slightly harder than the current level.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    Backend, Capability, ChatRequest, ChatResponse, FinetuneHyperparams, GradFeatures,
    HealthReport, ModelRole, StudentState, TokenLogprob, TokenUsage,
};
use crate::corpus::{Corpus, CorpusRole, Sample};
use crate::error::{Error, Result};
use crate::util::{count_tokens, rng_from, stable_hash, unit_from_hash};
use crate::verify::{extract_boxed, parse_expression, parse_numbers, solve_24, Expr, Op};

/// How the simulated student assigns probability to answer tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenModel {
    /// Every token gets the student's confidence in the answer as a whole.
    Mastery,
    /// Every token has probability 1.
    Certain,
    /// Every token is one of `vocab` equally likely symbols.
    Uniform { vocab: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub topics: usize,
    pub base_mastery: f64,
    /// Logistic slope `a` mapping mastery minus difficulty to confidence.
    pub steepness: f64,
    pub learning_rate: f64,
    /// Training gain peaks for samples this much harder than current mastery.
    pub bump_offset: f64,
    pub bump_width: f64,
    /// Standard deviation of a synthesized child's difficulty around its parent's.
    pub child_noise: f64,
    /// Per-question jitter of effective difficulty, fixed by question id.
    pub question_noise: f64,
    pub reward_noise: f64,
    pub teacher_slip_rate: f64,
    pub token_model: TokenModel,
    pub grad_vocab: usize,
    pub grad_hidden: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topics: 4,
            base_mastery: 0.3,
            steepness: 12.0,
            learning_rate: 0.005,
            bump_offset: 0.05,
            bump_width: 0.1,
            child_noise: 0.1,
            question_noise: 0.0,
            reward_noise: 0.1,
            teacher_slip_rate: 0.1,
            token_model: TokenModel::Mastery,
            grad_vocab: 8,
            grad_hidden: 16,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.topics > self.grad_hidden {
            return Err(Error::Config(
                "sim topics must be in 1..=grad_hidden".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.base_mastery) {
            return Err(Error::Config("sim base_mastery must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("sim learning_rate must lie in (0, 1]".into()));
        }
        if self.grad_vocab < 2 {
            return Err(Error::Config("sim grad_vocab must be at least 2".into()));
        }
        if let TokenModel::Uniform { vocab } = self.token_model {
            if vocab < 1 {
                return Err(Error::Config("uniform token model needs vocab >= 1".into()));
            }
        }
        let non_negative = [
            self.steepness,
            self.bump_width,
            self.child_noise,
            self.question_noise,
            self.reward_noise,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) || self.bump_width == 0.0 {
            return Err(Error::Config(
                "sim noise scales must be >= 0 and bump_width > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_slip_rate) {
            return Err(Error::Config(
                "sim teacher_slip_rate must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden attributes of a simulated question.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub topic: usize,
    pub difficulty: f64,
    pub id: String,
}

impl Latent {
    pub fn marker(&self) -> String {
        format!(
            "[sim k={} d={:.5} id={}]",
            self.topic, self.difficulty, self.id
        )
    }
}

const SYLLABLES: [&str; 24] = [
    "ba", "ko", "ri", "tem", "lu", "ska", "vo", "ne", "dri", "mo", "pla", "qui", "sor", "fen",
    "ga", "hul", "ji", "wex", "zan", "tro", "mi", "bel", "cu", "yo",
];

const WORDS_PER_TOPIC: u64 = 160;
const SHARED_WORDS: u64 = 120;

fn pseudo_word(group: u64, idx: u64) -> String {
    let h = stable_hash([b"word".as_slice(), &group.to_le_bytes(), &idx.to_le_bytes()]);
    let n = 2 + (h % 2) as usize;
    (0..n)
        .map(|i| SYLLABLES[((h >> (8 * (i + 1))) % SYLLABLES.len() as u64) as usize])
        .collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_from_hash(h: u64) -> f64 {
    let mut rng = crate::util::seeded_rng(h);
    StandardNormal.sample(&mut rng)
}

/// The simulated world: a pure function of its configuration.
#[derive(Debug, Clone)]
pub struct SimWorld {
    cfg: SimConfig,
}

impl SimWorld {
    pub fn new(cfg: SimConfig) -> Self {
        SimWorld { cfg }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn base_state(&self) -> StudentState {
        StudentState {
            checkpoint: "base".into(),
            mastery: Some(vec![self.cfg.base_mastery; self.cfg.topics]),
            best_validation: None,
        }
    }

    /// Mastery vector of a student handle; handles without one are the base model.
    pub fn mastery_of(&self, student: Option<&StudentState>) -> Vec<f64> {
        student
            .and_then(|s| s.mastery.clone())
            .filter(|m| m.len() == self.cfg.topics)
            .unwrap_or_else(|| vec![self.cfg.base_mastery; self.cfg.topics])
    }

    /// Latent of the last marker in `text`, or one derived from its hash.
    pub fn latent_of(&self, text: &str) -> Latent {
        if let Some(l) = parse_marker(text) {
            if l.topic < self.cfg.topics {
                return l;
            }
        }
        let h = stable_hash([b"latent".as_slice(), text.trim().as_bytes()]);
        Latent {
            topic: (h % self.cfg.topics as u64) as usize,
            difficulty: unit_from_hash(stable_hash([h.to_le_bytes()])),
            id: format!("{:08x}", h as u32),
        }
    }

    /// Difficulty after the per-question jitter, clamped to [0, 1].
    pub fn effective_difficulty(&self, latent: &Latent) -> f64 {
        if self.cfg.question_noise == 0.0 {
            return latent.difficulty;
        }
        let z = normal_from_hash(stable_hash([b"qnoise".as_slice(), latent.id.as_bytes()]));
        (latent.difficulty + self.cfg.question_noise * z).clamp(0.0, 1.0)
    }

    /// Probability the student's greedy answer is right.
    pub fn confidence(&self, mastery: &[f64], latent: &Latent) -> f64 {
        logistic(self.cfg.steepness * (mastery[latent.topic] - self.effective_difficulty(latent)))
    }

    pub fn greedy_correct(&self, mastery: &[f64], question: &str) -> bool {
        self.confidence(mastery, &self.latent_of(question)) >= 0.5
    }

    /// A fresh question text with the given latent.
    pub fn make_question(&self, latent: &Latent) -> String {
        let mut rng = rng_from([
            b"qtext".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            latent.id.as_bytes(),
        ]);
        let n = rng.random_range(10..16);
        let words: Vec<String> = (0..n)
            .map(|_| {
                if rng.random_bool(0.7) {
                    pseudo_word(
                        latent.topic as u64 + 1,
                        rng.random_range(0..WORDS_PER_TOPIC),
                    )
                } else {
                    pseudo_word(0, rng.random_range(0..SHARED_WORDS))
                }
            })
            .collect();
        format!("{}? {}", words.join(" "), latent.marker())
    }

    fn answer_value(latent: &Latent) -> u64 {
        stable_hash([b"value".as_slice(), latent.id.as_bytes()]) % 1000
    }

    fn reasoning_words(latent: &Latent) -> String {
        let h = stable_hash([b"reason".as_slice(), latent.id.as_bytes()]);
        (0..6)
            .map(|i| pseudo_word(0, (h >> (i * 8)) % SHARED_WORDS))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The answer the world regards as right for a question.
    pub fn correct_answer(&self, question: &str) -> String {
        let l = self.latent_of(question);
        format!(
            "{} The answer is \\boxed{{{}}}",
            Self::reasoning_words(&l),
            Self::answer_value(&l)
        )
    }

    /// The wrong answer a student gives when it does not know.
    pub fn incorrect_answer(&self, question: &str) -> String {
        let l = self.latent_of(question);
        let bump = 1 + stable_hash([b"wrong".as_slice(), l.id.as_bytes()]) % 9;
        format!(
            "{} The answer is \\boxed{{{}}}",
            Self::reasoning_words(&l),
            Self::answer_value(&l) + bump
        )
    }

    /// Whether `answer` states the designated value for `question`.
    pub fn is_correct(&self, question: &str, answer: &str) -> bool {
        let l = self.latent_of(question);
        extract_boxed(answer).is_ok_and(|v| v == Self::answer_value(&l).to_string())
    }

    /// One generated sample per index, with topic and difficulty drawn
    /// uniformly. Ids are `{prefix}-{index}`.
    pub fn generate_corpus(&self, role: CorpusRole, n: usize, prefix: &str) -> Result<Corpus> {
        let mut rng = rng_from([
            b"corpus".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            prefix.as_bytes(),
        ]);
        let samples = (0..n)
            .map(|i| {
                let latent = Latent {
                    topic: rng.random_range(0..self.cfg.topics),
                    difficulty: rng.random::<f64>(),
                    id: format!("{:08x}", rng.random::<u32>()),
                };
                let question = self.make_question(&latent);
                let answer = self.correct_answer(&question);
                Sample::seed(format!("{prefix}-{i}"), question, answer)
                    .with_meta("topic", latent.topic.to_string())
                    .with_meta("difficulty", format!("{:.5}", latent.difficulty))
            })
            .collect();
        Corpus::new(role, samples)
    }

    /// Game-of-24 puzzles: four numbers in 1..=13 with at least one solution.
    pub fn generate_24_corpus(&self, role: CorpusRole, n: usize, prefix: &str) -> Result<Corpus> {
        let mut rng = rng_from([
            b"g24".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            prefix.as_bytes(),
        ]);
        let mut samples = Vec::with_capacity(n);
        while samples.len() < n {
            let nums: Vec<i64> = (0..4).map(|_| rng.random_range(1..=13)).collect();
            if let Some(e) = solve_24(&nums) {
                let q = nums
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                samples.push(
                    Sample::seed(
                        format!("{prefix}-{}", samples.len()),
                        q.clone(),
                        e.to_string(),
                    )
                    .with_meta("numbers", q),
                );
            }
        }
        Corpus::new(role, samples)
    }

    fn token_logprob(&self, correct_conf: f64, answer_is_correct: bool) -> f64 {
        match self.cfg.token_model {
            TokenModel::Mastery => {
                let p = if answer_is_correct {
                    correct_conf
                } else {
                    1.0 - correct_conf
                };
                p.max(1e-12).ln()
            }
            TokenModel::Certain => 0.0,
            TokenModel::Uniform { vocab } => -(vocab as f64).ln(),
        }
    }

    pub fn answer_logprobs(
        &self,
        mastery: &[f64],
        question: &str,
        answer: &str,
    ) -> Vec<TokenLogprob> {
        let conf = self.confidence(mastery, &self.latent_of(question));
        let lp = self.token_logprob(conf, self.is_correct(question, answer));
        answer
            .split_whitespace()
            .map(|t| TokenLogprob {
                token: t.to_string(),
                logprob: lp,
            })
            .collect()
    }

    /// Student reply to a prompt. Greedy at temperature 0, otherwise the
    /// answer is right with probability equal to the confidence.
    pub fn student_reply(
        &self,
        mastery: &[f64],
        prompt: &str,
        temperature: f64,
        seed: Option<u64>,
    ) -> String {
        let latent = self.latent_of(prompt);
        let conf = self.confidence(mastery, &latent);
        let right = if temperature == 0.0 {
            conf >= 0.5
        } else {
            let mut rng = rng_from([
                b"sample".as_slice(),
                &self.cfg.seed.to_le_bytes(),
                &seed.unwrap_or(0).to_le_bytes(),
                prompt.as_bytes(),
            ]);
            rng.random::<f64>() < conf
        };
        if is_24_prompt(prompt) {
            let nums = last_input_numbers(prompt);
            return match (right, solve_24(&nums)) {
                (true, Some(e)) => format!("Steps: combine the numbers. \\boxed{{{e}}}"),
                _ => {
                    let naive = nums
                        .iter()
                        .map(|n| n.to_string())
                        .collect::<Vec<_>>()
                        .join("+");
                    format!("Steps: add everything. \\boxed{{{naive}}}")
                }
            };
        }
        if right {
            self.correct_answer(prompt)
        } else {
            self.incorrect_answer(prompt)
        }
    }

    pub fn reward(&self, question: &str, answer: &str) -> f64 {
        let l = self.latent_of(question);
        let z = normal_from_hash(stable_hash([
            b"reward".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            question.as_bytes(),
            answer.as_bytes(),
        ]));
        -l.difficulty + self.cfg.reward_noise * z
    }

    /// Softmax-head inputs for each answer token: the target token's
    /// probability comes from the token model, the rest is spread evenly,
    /// and the hidden state is the topic direction plus fixed noise.
    pub fn grad_features(&self, mastery: &[f64], question: &str, answer: &str) -> GradFeatures {
        let v = self.cfg.grad_vocab;
        let hdim = self.cfg.grad_hidden;
        let latent = self.latent_of(question);
        let lps = self.answer_logprobs(mastery, question, answer);
        let mut probs = Vec::with_capacity(lps.len());
        let mut targets = Vec::with_capacity(lps.len());
        let mut hidden = Vec::with_capacity(lps.len());
        for (pos, lp) in lps.iter().enumerate() {
            let target = (stable_hash([lp.token.as_bytes()]) % v as u64) as usize;
            let pt = lp.logprob.exp();
            let rest = (1.0 - pt) / (v - 1) as f64;
            let mut p = vec![rest; v];
            p[target] = pt;
            let mut rng = rng_from([
                b"hidden".as_slice(),
                latent.id.as_bytes(),
                &(pos as u64).to_le_bytes(),
            ]);
            let mut h: Vec<f64> = (0..hdim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.25 * z
                })
                .collect();
            h[latent.topic] += 1.0;
            probs.push(p);
            targets.push(target);
            hidden.push(h);
        }
        GradFeatures::Head {
            probs,
            targets,
            hidden,
        }
    }

    fn gain(&self, mastery: f64, difficulty: f64) -> f64 {
        let x = difficulty - mastery - self.cfg.bump_offset;
        self.cfg.learning_rate
            * (1.0 - mastery)
            * (-(x * x) / (2.0 * self.cfg.bump_width.powi(2))).exp()
    }

    fn validation_accuracy(&self, mastery: &[f64], validation: &Corpus) -> f64 {
        if validation.is_empty() {
            return 0.0;
        }
        let hits = validation
            .iter()
            .filter(|s| self.greedy_correct(mastery, &s.question))
            .count();
        hits as f64 / validation.len() as f64
    }

    /// Trains from base mastery for `hp.epochs` shuffled passes and returns
    /// the epoch with the best validation accuracy (earliest on ties).
    pub fn finetune(
        &self,
        train: &Corpus,
        validation: &Corpus,
        hp: &FinetuneHyperparams,
        seed: u64,
    ) -> StudentState {
        let latents: Vec<Latent> = train.iter().map(|s| self.latent_of(&s.question)).collect();
        let mut mastery = vec![self.cfg.base_mastery; self.cfg.topics];
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut order: Vec<usize> = (0..latents.len()).collect();
        for epoch in 0..hp.epochs {
            let mut rng = rng_from([
                b"epoch".as_slice(),
                &self.cfg.seed.to_le_bytes(),
                &seed.to_le_bytes(),
                &epoch.to_le_bytes(),
            ]);
            order.shuffle(&mut rng);
            for &i in &order {
                let l = &latents[i];
                let m = mastery[l.topic];
                mastery[l.topic] = (m + self.gain(m, self.effective_difficulty(l))).clamp(0.0, 1.0);
            }
            let acc = self.validation_accuracy(&mastery, validation);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, mastery.clone()));
            }
        }
        let (acc, mastery) = best.expect("at least one epoch");
        let bits: Vec<u8> = mastery
            .iter()
            .flat_map(|m| m.to_bits().to_le_bytes())
            .collect();
        StudentState {
            checkpoint: format!("sim-{:016x}", stable_hash([bits])),
            mastery: Some(mastery),
            best_validation: Some(acc),
        }
    }

    /// Teacher (or judge) behaviour, dispatched on the prompt's wording.
    pub fn teacher_reply(&self, request: &ChatRequest) -> String {
        let prompt = request.last_user();
        let system = request.system_prompt().unwrap_or("");
        if system.contains("Final Verdict") {
            return self.verify_reply(prompt);
        }
        if prompt.contains("[The Start of Assistant 1's Answer]") {
            return self.judge_pair_reply(prompt);
        }
        if prompt.contains("backward thinking method") {
            return self.backward_reply(prompt, request.seed);
        }
        if prompt.contains("Provide the steps to obtain the final answer") {
            let answer = between(prompt, "Here is the final answer: ", "\n")
                .unwrap_or("")
                .trim();
            return format!("Combine the numbers step by step. \\boxed{{{answer}}}");
        }
        if prompt.contains("#Rewritten Instruction#") {
            return self.rewrite_question(prompt, request.seed);
        }
        if is_24_prompt(prompt) {
            let nums = last_input_numbers(prompt);
            return match solve_24(&nums) {
                Some(e) => format!("Steps: combine the numbers. \\boxed{{{e}}}"),
                None => "No solution. \\boxed{null}".into(),
            };
        }
        self.correct_answer(prompt)
    }

    fn rewrite_question(&self, prompt: &str, seed: Option<u64>) -> String {
        let parent = self.latent_of(prompt);
        let mut rng = rng_from([
            b"child".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            &seed.unwrap_or(0).to_le_bytes(),
            prompt.as_bytes(),
        ]);
        let noise = Normal::new(0.0, self.cfg.child_noise).expect("child_noise validated");
        let child = Latent {
            topic: parent.topic,
            difficulty: (parent.difficulty + noise.sample(&mut rng)).clamp(0.0, 1.0),
            id: format!("{:08x}", rng.random::<u32>()),
        };
        self.make_question(&child)
    }

    fn judge_pair_reply(&self, prompt: &str) -> String {
        let question = between(prompt, "[Instruction]\n", "\n\n[The Start").unwrap_or(prompt);
        let first = between(
            prompt,
            "[The Start of Assistant 1's Answer]\n",
            "[The End of Assistant 1's Answer]",
        )
        .unwrap_or("");
        let second = between(
            prompt,
            "[The Start of Assistant 2's Answer]\n",
            "[The End of Assistant 2's Answer]",
        )
        .unwrap_or("");
        let l = self.latent_of(question);
        let score = |answer: &str, slot: u8| -> i64 {
            let z = normal_from_hash(stable_hash([
                b"judge".as_slice(),
                &[slot],
                question.as_bytes(),
                answer.as_bytes(),
            ]));
            let base = if self.is_correct(question, answer) {
                9.0
            } else {
                1.0 + (5.0 * (1.0 - l.difficulty)).round()
            };
            (base + 0.5 * z).round().clamp(1.0, 10.0) as i64
        };
        format!(
            "{} {}\nAssistant 1 is compared with Assistant 2 on accuracy and detail.",
            score(first, 1),
            score(second, 2)
        )
    }

    fn verify_reply(&self, prompt: &str) -> String {
        let reference =
            between(prompt, "Problem Setter’s answer:", "Student’s answer:").unwrap_or("");
        let student = prompt.split("Student’s answer:").nth(1).unwrap_or("");
        let key = |s: &str| extract_boxed(s).ok().or_else(|| last_number(s));
        let same = match (key(reference), key(student)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        if same {
            "Error Analysis: The final answers match. Final Verdict: Correct".into()
        } else {
            "Error Analysis: The final answers differ. Final Verdict: Incorrect".into()
        }
    }

    /// Replaces one literal product `a*b` in the solution by `b'*a'` with
    /// `a'*b' = a*b`, occasionally slipping to a wrong value.
    fn backward_reply(&self, prompt: &str, seed: Option<u64>) -> String {
        let solution = between(prompt, "Here is the current solution ", " again")
            .map(str::trim)
            .unwrap_or("");
        let Ok(expr) = parse_expression(solution) else {
            return "I cannot parse the solution. \\boxed{null}".into();
        };
        let mut rng = rng_from([
            b"backward".as_slice(),
            &self.cfg.seed.to_le_bytes(),
            &seed.unwrap_or(0).to_le_bytes(),
            prompt.as_bytes(),
        ]);
        match rewrite_product(&expr, &mut rng) {
            Some(mut e) => {
                if rng.random_bool(self.cfg.teacher_slip_rate) {
                    e = slip(&e);
                }
                format!("Let a and b be the two factors and solve for a. \\boxed{{{e}}}")
            }
            None => "No product to rewrite. \\boxed{null}".into(),
        }
    }
}

fn rewrite_product<R: Rng + ?Sized>(e: &Expr, rng: &mut R) -> Option<Expr> {
    match e {
        Expr::Num(_) => None,
        Expr::Bin(Op::Mul, l, r) => {
            if let (Expr::Num(a), Expr::Num(b)) = (l.as_ref(), r.as_ref()) {
                let p = a * b;
                let divisors: Vec<i64> = (2..p)
                    .filter(|d| p % d == 0 && *d != *a && *d != *b)
                    .collect();
                if divisors.is_empty() {
                    return None;
                }
                let d = divisors[rng.random_range(0..divisors.len())];
                return Some(Expr::bin(Op::Mul, Expr::Num(d), Expr::Num(p / d)));
            }
            rewrite_children(Op::Mul, l, r, rng)
        }
        Expr::Bin(op, l, r) => rewrite_children(*op, l, r, rng),
    }
}

fn rewrite_children<R: Rng + ?Sized>(op: Op, l: &Expr, r: &Expr, rng: &mut R) -> Option<Expr> {
    if let Some(nl) = rewrite_product(l, rng) {
        return Some(Expr::bin(op, nl, r.clone()));
    }
    rewrite_product(r, rng).map(|nr| Expr::bin(op, l.clone(), nr))
}

/// Bumps the first literal by one.
fn slip(e: &Expr) -> Expr {
    match e {
        Expr::Num(n) => Expr::Num(n + 1),
        Expr::Bin(op, l, r) => Expr::bin(*op, slip(l), r.as_ref().clone()),
    }
}

fn parse_marker(text: &str) -> Option<Latent> {
    let start = text.rfind("[sim ")?;
    let end = start + text[start..].find(']')?;
    let mut topic = None;
    let mut difficulty = None;
    let mut id = None;
    for field in text[start + 5..end].split_whitespace() {
        let (k, v) = field.split_once('=')?;
        match k {
            "k" => topic = v.parse().ok(),
            "d" => difficulty = v.parse::<f64>().ok().filter(|d| (0.0..=1.0).contains(d)),
            "id" => id = Some(v.to_string()),
            _ => {}
        }
    }
    Some(Latent {
        topic: topic?,
        difficulty: difficulty?,
        id: id?,
    })
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.rfind(start)? + start.len();
    let rest = &text[s..];
    Some(rest.find(end).map_or(rest, |e| &rest[..e]))
}

fn last_number(text: &str) -> Option<String> {
    parse_numbers(text).last().map(|n| n.to_string())
}

fn is_24_prompt(prompt: &str) -> bool {
    prompt.contains("obtain 24")
}

fn last_input_numbers(prompt: &str) -> Vec<i64> {
    let line = prompt
        .lines()
        .rev()
        .find(|l| l.starts_with("Input:"))
        .unwrap_or(prompt);
    parse_numbers(line)
}

/// [`Backend`] view of a [`SimWorld`] for one role.
#[derive(Debug, Clone)]
pub struct SimBackend {
    world: Arc<SimWorld>,
    role: ModelRole,
}

impl SimBackend {
    pub fn new(world: Arc<SimWorld>, role: ModelRole) -> Self {
        SimBackend { world, role }
    }

    fn usage(input: &str, output: &str) -> TokenUsage {
        TokenUsage::new(count_tokens(input), count_tokens(output))
    }
}

impl Backend for SimBackend {
    fn chat(&self, request: &ChatRequest, student: Option<&StudentState>) -> Result<ChatResponse> {
        let w = &self.world;
        let text = match self.role {
            ModelRole::Student => {
                let mastery = w.mastery_of(student);
                w.student_reply(
                    &mastery,
                    request.last_user(),
                    request.temperature,
                    request.seed,
                )
            }
            ModelRole::Teacher | ModelRole::Judge => w.teacher_reply(request),
            ModelRole::Reward => {
                return Err(Error::Unsupported {
                    role: "reward".into(),
                    capability: Capability::Generate.to_string(),
                })
            }
        };
        let token_logprobs = request.want_logprobs.then(|| {
            let mastery = w.mastery_of(student);
            w.answer_logprobs(&mastery, request.last_user(), &text)
        });
        Ok(ChatResponse {
            usage: TokenUsage::new(request.input_tokens(), count_tokens(&text)),
            text,
            token_logprobs,
        })
    }

    fn answer_logprobs(
        &self,
        student: Option<&StudentState>,
        prompt: &str,
        answer: &str,
    ) -> Result<(Vec<TokenLogprob>, TokenUsage)> {
        let mastery = self.world.mastery_of(student);
        let lps = self.world.answer_logprobs(&mastery, prompt, answer);
        Ok((
            lps,
            TokenUsage::new(count_tokens(prompt) + count_tokens(answer), 0),
        ))
    }

    fn reward(&self, question: &str, answer: &str) -> Result<(f64, TokenUsage)> {
        Ok((
            self.world.reward(question, answer),
            TokenUsage::new(count_tokens(question) + count_tokens(answer), 0),
        ))
    }

    fn grad_features(
        &self,
        student: Option<&StudentState>,
        prompt: &str,
        answer: &str,
    ) -> Result<(GradFeatures, TokenUsage)> {
        let mastery = self.world.mastery_of(student);
        Ok((
            self.world.grad_features(&mastery, prompt, answer),
            Self::usage(&format!("{prompt} {answer}"), ""),
        ))
    }

    fn finetune(
        &self,
        train: &Corpus,
        validation: &Corpus,
        hp: &FinetuneHyperparams,
        seed: u64,
    ) -> Result<StudentState> {
        Ok(self.world.finetune(train, validation, hp, seed))
    }

    fn health(&self) -> Result<HealthReport> {
        Ok(HealthReport {
            capabilities: super::default_capabilities(self.role).into_iter().collect(),
            model: format!("sim-{}", self.role),
            max_context: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::{BudgetLedger, ModelEndpoint};
    use crate::verify::verify_24;

    fn world() -> SimWorld {
        SimWorld::new(SimConfig::default())
    }

    fn latent(topic: usize, d: f64) -> Latent {
        Latent {
            topic,
            difficulty: d,
            id: "00c0ffee".into(),
        }
    }

    #[test]
    fn marker_round_trip() {
        let w = world();
        let l = latent(2, 0.4137);
        let q = w.make_question(&l);
        assert_eq!(w.latent_of(&q), l);
        let prompt = format!("few shot {} then {}", w.make_question(&latent(1, 0.9)), q);
        assert_eq!(w.latent_of(&prompt).topic, 2);
    }

    #[test]
    fn full_mastery_answers_correctly() {
        let w = world();
        let q = w.make_question(&latent(0, 1.0));
        let full = vec![1.0; 4];
        assert_eq!(w.student_reply(&full, &q, 0.0, None), w.correct_answer(&q));
        let none = vec![0.0; 4];
        assert!(w.confidence(&none, &latent(0, 1.0)) < 0.5);
        assert_eq!(
            w.student_reply(&none, &q, 0.0, None),
            w.incorrect_answer(&q)
        );
        assert!(!w.is_correct(&q, &w.incorrect_answer(&q)));
    }

    #[test]
    fn token_models() {
        let q = world().make_question(&latent(0, 0.5));
        let certain = SimWorld::new(SimConfig {
            token_model: TokenModel::Certain,
            ..Default::default()
        });
        let a = certain.correct_answer(&q);
        assert!(certain
            .answer_logprobs(&[0.3; 4], &q, &a)
            .iter()
            .all(|t| t.logprob == 0.0));
        let uni = SimWorld::new(SimConfig {
            token_model: TokenModel::Uniform { vocab: 2 },
            ..Default::default()
        });
        let lps = uni.answer_logprobs(&[0.3; 4], &q, "one two three four five");
        assert_eq!(lps.len(), 5);
        assert!(lps.iter().all(|t| (t.logprob + 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn reward_formula() {
        let w = SimWorld::new(SimConfig {
            reward_noise: 0.0,
            ..Default::default()
        });
        assert_eq!(w.reward(&w.make_question(&latent(0, 0.0)), "x"), 0.0);
        assert_eq!(w.reward(&w.make_question(&latent(0, 0.8)), "x"), -0.8);
        let noisy = world();
        let q = noisy.make_question(&latent(1, 0.5));
        assert_eq!(noisy.reward(&q, "a"), noisy.reward(&q, "a"));
    }

    #[test]
    fn finetune_raises_topic_mastery_and_is_deterministic() {
        let w = world();
        let samples: Vec<Sample> = (0..20)
            .map(|i| {
                let q = w.make_question(&Latent {
                    topic: 1,
                    difficulty: 0.35,
                    id: format!("t{i}"),
                });
                let a = w.correct_answer(&q);
                Sample::seed(format!("s{i}"), q, a)
            })
            .collect();
        let train = Corpus::new(CorpusRole::Selected, samples).unwrap();
        let val = w
            .generate_corpus(CorpusRole::Validation, 50, "val")
            .unwrap();
        let hp = FinetuneHyperparams {
            epochs: 2,
            ..Default::default()
        };
        let a = w.finetune(&train, &val, &hp, 7);
        let b = w.finetune(&train, &val, &hp, 7);
        assert_eq!(a, b);
        let m = a.mastery.unwrap();
        assert!(m[1] > 0.3);
        assert_eq!(m[0], 0.3);
        assert!(m.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn teacher_rewrites_keep_topic_and_jitter_difficulty() {
        let w = world();
        let parent = w.make_question(&latent(3, 0.5));
        let prompt = format!("#Given Instruction#:\n{parent}\n#Rewritten Instruction#:");
        let req = ChatRequest::user(prompt.clone()).with_seed(1);
        let child = w.teacher_reply(&req);
        assert_eq!(child, w.teacher_reply(&req));
        let cl = w.latent_of(&child);
        assert_eq!(cl.topic, 3);
        assert_ne!(cl.id, "00c0ffee");
        let diffs: Vec<f64> = (0..400)
            .map(|s| {
                let c = w.teacher_reply(&ChatRequest::user(prompt.clone()).with_seed(s));
                w.latent_of(&c).difficulty - 0.5
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd =
            (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((sd - 0.1).abs() < 0.02, "{sd}");
    }

    #[test]
    fn backward_transform_yields_valid_puzzles_mostly() {
        let w = world();
        let template = crate::synthgen::templates::GAME24_BACKWARD;
        let prompt = crate::synthgen::templates::render(
            template,
            &[("numbers", "8 8 10 13"), ("solution", "13*8-10*8")],
        )
        .unwrap();
        let mut ok = 0;
        for s in 0..50 {
            let reply = w.teacher_reply(&ChatRequest::user(prompt.clone()).with_seed(s));
            let e = extract_boxed(&reply).unwrap();
            let nums = parse_numbers(&e);
            ok += verify_24(&nums, &e) as usize;
        }
        assert!(ok >= 35 && ok < 50, "{ok}");
    }

    #[test]
    fn endpoint_charges_sim_usage() {
        let ledger = Arc::new(BudgetLedger::new());
        let w = Arc::new(world());
        let teacher = ModelEndpoint::simulated(ModelRole::Teacher, w.clone(), ledger.clone());
        let req = ChatRequest::user("hello there [sim k=0 d=0.5 id=x]").with_logprobs();
        let r1 = teacher.chat(&req).unwrap();
        let r2 = teacher.chat(&req).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            r1.token_logprobs.as_ref().unwrap().len(),
            count_tokens(&r1.text) as usize
        );
        let t = ledger.totals(ModelRole::Teacher);
        assert_eq!(t.input_tokens, 2 * req.input_tokens());
    }

    #[test]
    fn corpora_are_deterministic_and_24_puzzles_solvable() {
        let w = world();
        let a = w.generate_corpus(CorpusRole::Seed, 30, "seed").unwrap();
        let b = w.generate_corpus(CorpusRole::Seed, 30, "seed").unwrap();
        assert_eq!(a.samples(), b.samples());
        for s in a.iter() {
            assert!(w.is_correct(&s.question, &s.answer));
        }
        let g = w.generate_24_corpus(CorpusRole::Seed, 10, "g").unwrap();
        for s in g.iter() {
            assert!(verify_24(&parse_numbers(&s.question), &s.answer));
        }
    }
}
