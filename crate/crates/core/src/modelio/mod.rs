//! Backend contracts for teacher, student, reward and judge models.
//!
//! Every model is reached through a [`ModelEndpoint`]: a role, a declared
//! capability set, a [`Backend`] implementation (remote HTTP, simulated, or
//! scripted) and a shared [`BudgetLedger`] that every call is charged to.

mod http;
mod ledger;
mod scripted;
pub mod sim;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::util::count_tokens;

pub use http::{HttpBackend, HttpConfig, RetryPolicy};
pub use ledger::{BudgetLedger, CallRecord, LedgerSnapshot, TokenCap};
pub use scripted::ScriptedBackend;
pub use sim::{SimBackend, SimConfig, SimWorld, TokenModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Teacher,
    Student,
    Reward,
    /// Answer-verification model (e.g. a small hosted model acting as grader).
    Judge,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
            ModelRole::Reward => "reward",
            ModelRole::Judge => "judge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Generate,
    Logprobs,
    GradEmbedding,
    Finetune,
    Reward,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Generate => "generate",
            Capability::Logprobs => "logprobs",
            Capability::GradEmbedding => "grad_embedding",
            Capability::Finetune => "finetune",
            Capability::Reward => "reward",
        })
    }
}

pub type Capabilities = BTreeSet<Capability>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Remote,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user message, greedy decoding.
    pub fn user(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::user(content)],
            temperature: 0.0,
            max_output_tokens: 1024,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.messages.insert(0, ChatMessage::system(system));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    /// Content of the last user message (empty if none).
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::validation("chat request needs at least one message"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::validation("temperature must be >= 0"));
        }
        Ok(())
    }

    pub fn input_tokens(&self) -> u64 {
        self.messages.iter().map(|m| count_tokens(&m.content)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    /// Natural-log probability.
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Set when counts come from the whitespace fallback rather than the
    /// upstream tokenizer.
    #[serde(default)]
    pub approximate: bool,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
            approximate: false,
        }
    }

    pub fn approximate(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
            approximate: true,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
        self.approximate |= rhs.approximate;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: TokenUsage,
}

/// Opaque handle to a fine-tuned student. Remote students are addressed
/// by `checkpoint`; the simulator additionally carries its mastery vector
/// so that a handle fully determines the simulated student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentState {
    pub checkpoint: String,
    #[serde(default)]
    pub mastery: Option<Vec<f64>>,
    #[serde(default)]
    pub best_validation: Option<f64>,
}

impl StudentState {
    /// The untrained base model.
    pub fn base() -> Self {
        StudentState {
            checkpoint: "base".into(),
            mastery: None,
            best_validation: None,
        }
    }
}

/// Output-head features from which a gradient embedding is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GradFeatures {
    /// Per answer position: predictive distribution over the vocabulary,
    /// the target token index and the input to the output head.
    Head {
        probs: Vec<Vec<f64>>,
        targets: Vec<usize>,
        hidden: Vec<Vec<f64>>,
    },
    /// Gradient already computed by the backend.
    Raw(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Linear,
    CosineToMin,
}

/// Adapter fine-tuning settings. The named presets are the tuned values
/// per dataset and training-data kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneHyperparams {
    pub adapter_rank: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    pub grad_norm_clip: f64,
    pub warmup_fraction: f64,
    pub schedule: LrSchedule,
    pub min_lr: f64,
}

impl Default for FinetuneHyperparams {
    fn default() -> Self {
        FinetuneHyperparams {
            adapter_rank: 32,
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 24,
            grad_accum_steps: 2,
            grad_norm_clip: 2.0,
            warmup_fraction: 0.15,
            schedule: LrSchedule::Linear,
            min_lr: 1e-9,
        }
    }
}

impl FinetuneHyperparams {
    pub const PRESETS: &'static [&'static str] = &[
        "gsm8k_seed",
        "gsm8k_synthetic",
        "math_seed",
        "math_synthetic",
        "prontoqa_seed",
        "prontoqa_synthetic",
        "game24_seed",
        "game24_synthetic",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let (rank, lr, epochs) = match name {
            "gsm8k_seed" | "gsm8k_synthetic" => (32, 1e-4, 10),
            "math_seed" => (32, 1e-6, 13),
            "math_synthetic" => (64, 1e-4, 13),
            "prontoqa_seed" | "prontoqa_synthetic" => (32, 1e-5, 13),
            "game24_seed" => (16, 1e-5, 13),
            "game24_synthetic" => (16, 5e-4, 30),
            other => return Err(Error::Config(format!("unknown fine-tune preset {other:?}"))),
        };
        let schedule = if name.starts_with("game24") {
            LrSchedule::CosineToMin
        } else {
            LrSchedule::Linear
        };
        Ok(FinetuneHyperparams {
            adapter_rank: rank,
            learning_rate: lr,
            epochs,
            schedule,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.adapter_rank > 0
            && self.learning_rate > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && self.grad_accum_steps > 0
            && self.grad_norm_clip > 0.0
            && self.min_lr > 0.0;
        if !positive {
            return Err(Error::validation(
                "fine-tune hyperparameters must all be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::validation("warmup_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub capabilities: Vec<Capability>,
    pub model: String,
    #[serde(default)]
    pub max_context: Option<u64>,
}

/// A model implementation. Methods a backend cannot serve keep the default
/// body, which reports the capability as unsupported.
pub trait Backend: Send + Sync {
    /// `student` selects the fine-tuned student to decode with; `None`
    /// means the endpoint's base model.
    fn chat(&self, request: &ChatRequest, student: Option<&StudentState>) -> Result<ChatResponse>;

    /// Log-probabilities of `answer` given `prompt`, one per answer token.
    fn answer_logprobs(
        &self,
        _student: Option<&StudentState>,
        _prompt: &str,
        _answer: &str,
    ) -> Result<(Vec<TokenLogprob>, TokenUsage)> {
        Err(unsupported("student", Capability::Logprobs))
    }

    fn reward(&self, _question: &str, _answer: &str) -> Result<(f64, TokenUsage)> {
        Err(unsupported("reward", Capability::Reward))
    }

    fn grad_features(
        &self,
        _student: Option<&StudentState>,
        _prompt: &str,
        _answer: &str,
    ) -> Result<(GradFeatures, TokenUsage)> {
        Err(unsupported("student", Capability::GradEmbedding))
    }

    /// Trains a fresh adapter on the base weights and returns the
    /// checkpoint with the best validation score.
    fn finetune(
        &self,
        _train: &Corpus,
        _validation: &Corpus,
        _hp: &FinetuneHyperparams,
        _seed: u64,
    ) -> Result<StudentState> {
        Err(unsupported("student", Capability::Finetune))
    }

    fn health(&self) -> Result<HealthReport>;
}

fn unsupported(role: &str, capability: Capability) -> Error {
    Error::Unsupported {
        role: role.into(),
        capability: capability.to_string(),
    }
}

/// Endpoint settings as they appear in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub transport: Transport,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key. The key
    /// itself is never stored in configuration.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub capabilities: Option<Vec<Capability>>,
}

impl EndpointConfig {
    pub fn simulated() -> Self {
        EndpointConfig {
            transport: Transport::Simulated,
            base_url: None,
            model: None,
            api_key_env: None,
            capabilities: None,
        }
    }
}

/// A role-bound handle on a backend, charging every call to a ledger.
#[derive(Clone)]
pub struct ModelEndpoint {
    role: ModelRole,
    charge_as: ModelRole,
    capabilities: Capabilities,
    transport: Transport,
    backend: Arc<dyn Backend>,
    ledger: Arc<BudgetLedger>,
}

impl fmt::Debug for ModelEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelEndpoint")
            .field("role", &self.role)
            .field("capabilities", &self.capabilities)
            .field("transport", &self.transport)
            .finish()
    }
}

pub fn default_capabilities(role: ModelRole) -> Capabilities {
    use Capability::*;
    match role {
        ModelRole::Teacher | ModelRole::Judge => [Generate].into(),
        ModelRole::Student => [Generate, Logprobs, GradEmbedding, Finetune].into(),
        ModelRole::Reward => [Reward].into(),
    }
}

impl ModelEndpoint {
    pub fn new(
        role: ModelRole,
        capabilities: Capabilities,
        transport: Transport,
        backend: Arc<dyn Backend>,
        ledger: Arc<BudgetLedger>,
    ) -> Result<Self> {
        match role {
            ModelRole::Reward if !capabilities.contains(&Capability::Reward) => {
                return Err(Error::validation(
                    "reward endpoints must expose the reward capability",
                ))
            }
            ModelRole::Student
                if !(capabilities.contains(&Capability::Generate)
                    && capabilities.contains(&Capability::Logprobs)) =>
            {
                return Err(Error::validation(
                    "student endpoints must expose at least generate and logprobs",
                ))
            }
            _ => {}
        }
        Ok(ModelEndpoint {
            role,
            charge_as: role,
            capabilities,
            transport,
            backend,
            ledger,
        })
    }

    /// Endpoint backed by the simulator for `role`.
    pub fn simulated(role: ModelRole, world: Arc<SimWorld>, ledger: Arc<BudgetLedger>) -> Self {
        let caps = default_capabilities(role);
        ModelEndpoint::new(
            role,
            caps,
            Transport::Simulated,
            Arc::new(SimBackend::new(world, role)),
            ledger,
        )
        .expect("default capabilities satisfy role invariants")
    }

    /// Charges this endpoint's usage to another role's ledger entry.
    pub fn charging_as(mut self, role: ModelRole) -> Self {
        self.charge_as = role;
        self
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    /// The ledger entry this endpoint's usage is charged to.
    pub fn charge_role(&self) -> ModelRole {
        self.charge_as
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    pub fn ledger(&self) -> &Arc<BudgetLedger> {
        &self.ledger
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn supports(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    fn require(&self, cap: Capability) -> Result<()> {
        if self.supports(cap) {
            Ok(())
        } else {
            Err(Error::Unsupported {
                role: self.role.to_string(),
                capability: cap.to_string(),
            })
        }
    }

    fn require_role(&self, role: ModelRole) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "operation needs a {role} endpoint, got {}",
                self.role
            )))
        }
    }

    /// Sends a chat request, validates the reply against the protocol
    /// contract and charges its usage.
    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        self.chat_as(request, None)
    }

    fn chat_as(
        &self,
        request: &ChatRequest,
        student: Option<&StudentState>,
    ) -> Result<ChatResponse> {
        self.require(Capability::Generate)?;
        request.validate()?;
        self.ledger.check_open(self.charge_as)?;
        let response = self.backend.chat(request, student)?;
        if request.want_logprobs {
            let lps = response
                .token_logprobs
                .as_ref()
                .ok_or_else(|| Error::Protocol("logprobs requested but not returned".into()))?;
            check_logprobs(lps)?;
        }
        self.ledger.charge(self.charge_as, "chat", response.usage)?;
        Ok(response)
    }

    /// Temperature-0 decoding by the given student.
    pub fn student_greedy_generate(&self, student: &StudentState, prompt: &str) -> Result<String> {
        self.require_role(ModelRole::Student)?;
        let req = ChatRequest::user(prompt);
        Ok(self.chat_as(&req, Some(student))?.text)
    }

    pub fn answer_logprobs(
        &self,
        student: &StudentState,
        prompt: &str,
        answer: &str,
    ) -> Result<Vec<TokenLogprob>> {
        self.require(Capability::Logprobs)?;
        self.ledger.check_open(self.charge_as)?;
        let (lps, usage) = self
            .backend
            .answer_logprobs(Some(student), prompt, answer)?;
        check_logprobs(&lps)?;
        self.ledger.charge(self.charge_as, "logprobs", usage)?;
        Ok(lps)
    }

    pub fn reward_score(&self, question: &str, answer: &str) -> Result<f64> {
        self.require_role(ModelRole::Reward)?;
        self.require(Capability::Reward)?;
        self.ledger.check_open(self.charge_as)?;
        let (score, usage) = self.backend.reward(question, answer)?;
        if !score.is_finite() {
            return Err(Error::Protocol(format!("non-finite reward {score}")));
        }
        self.ledger.charge(self.charge_as, "reward", usage)?;
        Ok(score)
    }

    pub fn grad_features(
        &self,
        student: &StudentState,
        prompt: &str,
        answer: &str,
    ) -> Result<GradFeatures> {
        self.require(Capability::GradEmbedding)?;
        self.ledger.check_open(self.charge_as)?;
        let (features, usage) = self.backend.grad_features(Some(student), prompt, answer)?;
        self.ledger
            .charge(self.charge_as, "grad_embedding", usage)?;
        Ok(features)
    }

    /// Fine-tunes from base weights with a freshly initialised adapter.
    pub fn student_finetune(
        &self,
        train: &Corpus,
        validation: &Corpus,
        hp: &FinetuneHyperparams,
        seed: u64,
    ) -> Result<StudentState> {
        self.require(Capability::Finetune)?;
        if train.is_empty() {
            return Err(Error::validation(
                "fine-tune needs a non-empty training corpus",
            ));
        }
        hp.validate()?;
        self.backend.finetune(train, validation, hp, seed)
    }

    /// Queries the backend's capability report and refuses to proceed if it
    /// lacks anything this endpoint declares.
    pub fn probe(&self) -> Result<HealthReport> {
        let report = self.backend.health()?;
        for cap in &self.capabilities {
            if !report.capabilities.contains(cap) {
                return Err(Error::Unsupported {
                    role: self.role.to_string(),
                    capability: cap.to_string(),
                });
            }
        }
        Ok(report)
    }
}

fn check_logprobs(lps: &[TokenLogprob]) -> Result<()> {
    for lp in lps {
        if !(lp.logprob <= 0.0) {
            return Err(Error::Protocol(format!(
                "logprob {} for token {:?} is not <= 0",
                lp.logprob, lp.token
            )));
        }
    }
    Ok(())
}
