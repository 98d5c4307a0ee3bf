//! Client for the OpenAI-compatible wire protocol plus the auxiliary
//! `/logprobs`, `/reward`, `/grad_embedding`, `/finetune` and `/health`
//! routes. Field-level documentation lives in `docs/protocol.md`.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, ChatRequest, ChatResponse, EndpointConfig, FinetuneHyperparams, GradFeatures,
    HealthReport, StudentState, TokenLogprob, TokenUsage,
};
use crate::corpus::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::util::count_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Prefix of every route, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(600),
            retry: RetryPolicy::default(),
        }
    }

    /// Resolves an endpoint entry of a run configuration, reading the API
    /// key from the named environment variable.
    pub fn from_endpoint(cfg: &EndpointConfig) -> Result<Self> {
        let base = cfg
            .base_url
            .clone()
            .ok_or_else(|| Error::Config("remote endpoint needs base_url".into()))?;
        let mut out = HttpConfig::new(base, cfg.model.clone().unwrap_or_default());
        if let Some(var) = &cfg.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
            out.api_key = Some(key);
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    cfg: HttpConfig,
    client: Client,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl From<WireUsage> for TokenUsage {
    fn from(u: WireUsage) -> Self {
        TokenUsage::new(u.prompt_tokens, u.completion_tokens)
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireLogprob>>,
}

#[derive(Deserialize)]
struct WireLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct LogprobsReply {
    tokens: Vec<WireLogprob>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct RewardReply {
    score: f64,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct GradReply {
    vector: Vec<f64>,
    vocab_size: usize,
    hidden_size: usize,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct FinetuneReply {
    checkpoint: String,
    #[serde(default)]
    best_validation: Option<f64>,
}

#[derive(Serialize)]
struct WireSample<'a> {
    id: &'a str,
    question: &'a str,
    answer: &'a str,
}

impl<'a> From<&'a Sample> for WireSample<'a> {
    fn from(s: &'a Sample) -> Self {
        WireSample {
            id: &s.id,
            question: &s.question,
            answer: &s.answer,
        }
    }
}

fn usage_or_estimate(usage: Option<WireUsage>, input: &str, output: &str) -> TokenUsage {
    usage
        .map(TokenUsage::from)
        .unwrap_or_else(|| TokenUsage::approximate(count_tokens(input), count_tokens(output)))
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Transport(format!("building HTTP client: {e}")))?;
        Ok(HttpBackend { cfg, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn model_for(&self, student: Option<&StudentState>) -> String {
        match student {
            Some(s) if s.checkpoint != "base" => s.checkpoint.clone(),
            _ => self.cfg.model.clone(),
        }
    }

    /// Sends one request with retries on transport failures and 5xx
    /// replies. 501 maps to an unsupported capability, other 4xx replies
    /// are surfaced verbatim.
    fn call<T: DeserializeOwned>(&self, route: &str, body: Option<&Value>) -> Result<T> {
        let url = format!("{}/{}", self.cfg.base_url, route.trim_start_matches('/'));
        let mut delay = self.cfg.retry.base_delay;
        let attempts = self.cfg.retry.attempts.max(1);
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            let mut req = match body {
                Some(b) => self
                    .client
                    .post(&url)
                    .header("content-type", "application/json")
                    .body(serde_json::to_vec(b).expect("JSON values serialize")),
                None => self.client.get(&url),
            };
            if let Some(key) = &self.cfg.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last_err = format!("{url}: {e}");
                    tracing::warn!(attempt, error = %last_err, "transport failure");
                    continue;
                }
            };
            let status = resp.status();
            let text = match resp.text() {
                Ok(t) => t,
                Err(e) => {
                    last_err = format!("{url}: reading body: {e}");
                    continue;
                }
            };
            if status.is_server_error() && status != StatusCode::NOT_IMPLEMENTED {
                last_err = format!("{url}: HTTP {status}: {text}");
                tracing::warn!(attempt, error = %last_err, "server error");
                continue;
            }
            if status == StatusCode::NOT_IMPLEMENTED {
                return Err(Error::Unsupported {
                    role: self.cfg.model.clone(),
                    capability: route.trim_start_matches('/').to_string(),
                });
            }
            if !status.is_success() {
                return Err(Error::Remote(format!("{url}: HTTP {status}: {text}")));
            }
            return serde_json::from_str(&text)
                .map_err(|e| Error::Protocol(format!("{url}: malformed reply ({e}): {text}")));
        }
        Err(Error::Transport(format!(
            "{last_err} (after {attempts} attempts)"
        )))
    }
}

impl Backend for HttpBackend {
    fn chat(&self, request: &ChatRequest, student: Option<&StudentState>) -> Result<ChatResponse> {
        let mut body = json!({
            "model": self.model_for(student),
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "logprobs": request.want_logprobs,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let reply: ChatCompletion = self.call("chat/completions", Some(&body))?;
        let choice = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Protocol("chat completion without choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let token_logprobs = choice.logprobs.and_then(|l| l.content).map(|c| {
            c.into_iter()
                .map(|t| TokenLogprob {
                    token: t.token,
                    logprob: t.logprob,
                })
                .collect::<Vec<_>>()
        });
        let input: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(ChatResponse {
            usage: usage_or_estimate(reply.usage, &input, &text),
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
        let body = json!({ "model": self.model_for(student), "prompt": prompt, "answer": answer });
        let reply: LogprobsReply = self.call("logprobs", Some(&body))?;
        let usage = usage_or_estimate(reply.usage, &format!("{prompt} {answer}"), "");
        let lps = reply
            .tokens
            .into_iter()
            .map(|t| TokenLogprob {
                token: t.token,
                logprob: t.logprob,
            })
            .collect();
        Ok((lps, usage))
    }

    fn reward(&self, question: &str, answer: &str) -> Result<(f64, TokenUsage)> {
        let body = json!({ "model": self.cfg.model, "question": question, "answer": answer });
        let reply: RewardReply = self.call("reward", Some(&body))?;
        let usage = usage_or_estimate(reply.usage, &format!("{question} {answer}"), "");
        Ok((reply.score, usage))
    }

    fn grad_features(
        &self,
        student: Option<&StudentState>,
        prompt: &str,
        answer: &str,
    ) -> Result<(GradFeatures, TokenUsage)> {
        let body = json!({ "model": self.model_for(student), "prompt": prompt, "answer": answer });
        let reply: GradReply = self.call("grad_embedding", Some(&body))?;
        if reply.vector.len() != reply.vocab_size * reply.hidden_size {
            return Err(Error::Protocol(format!(
                "gradient of length {} does not match vocab {} x hidden {}",
                reply.vector.len(),
                reply.vocab_size,
                reply.hidden_size
            )));
        }
        let usage = usage_or_estimate(reply.usage, &format!("{prompt} {answer}"), "");
        Ok((GradFeatures::Raw(reply.vector), usage))
    }

    fn finetune(
        &self,
        train: &Corpus,
        validation: &Corpus,
        hp: &FinetuneHyperparams,
        seed: u64,
    ) -> Result<StudentState> {
        let train: Vec<WireSample> = train.iter().map(WireSample::from).collect();
        let validation: Vec<WireSample> = validation.iter().map(WireSample::from).collect();
        let body = json!({
            "model": self.cfg.model,
            "train": train,
            "validation": validation,
            "hyperparams": hp,
            "seed": seed,
        });
        let reply: FinetuneReply = self.call("finetune", Some(&body))?;
        Ok(StudentState {
            checkpoint: reply.checkpoint,
            mastery: None,
            best_validation: reply.best_validation,
        })
    }

    fn health(&self) -> Result<HealthReport> {
        self.call("health", None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::BudgetLedger;
    use crate::modelio::{Capability, ModelEndpoint, ModelRole, Transport};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the canned (status, body) replies in order, recording the
    /// request lines and bodies it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream);
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l.to_string();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((
                    format!("{} {auth}", request_line.trim_end()),
                    String::from_utf8(buf).unwrap(),
                ));
                let mut stream = reader.into_inner();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn backend(url: &str) -> HttpBackend {
        let mut cfg = HttpConfig::new(url, "teacher-model");
        cfg.retry.base_delay = Duration::from_millis(5);
        cfg.api_key = Some("sekret".into());
        HttpBackend::new(cfg).unwrap()
    }

    const CHAT_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"two words"},
        "logprobs":{"content":[{"token":"two","logprob":-0.5},{"token":" words","logprob":-0.25}]}}],
        "usage":{"prompt_tokens":12,"completion_tokens":2}}"#;

    #[test]
    fn chat_round_trip_with_logprobs() {
        let (url, seen) = serve(vec![(200, CHAT_OK.into())]);
        let b = backend(&url);
        let req = ChatRequest::user("hi").with_logprobs().with_seed(9);
        let r = b.chat(&req, None).unwrap();
        assert_eq!(r.text, "two words");
        assert_eq!(r.usage, TokenUsage::new(12, 2));
        assert_eq!(r.token_logprobs.unwrap()[1].logprob, -0.25);
        let seen = seen.lock().unwrap();
        assert!(seen[0].0.starts_with("POST /v1/chat/completions"));
        assert!(seen[0].0.contains("Bearer sekret"));
        let body: Value = serde_json::from_str(&seen[0].1).unwrap();
        assert_eq!(body["model"], "teacher-model");
        assert_eq!(body["seed"], 9);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![
            (503, "{}".into()),
            (500, "oops".into()),
            (200, CHAT_OK.into()),
        ]);
        let r = backend(&url).chat(&ChatRequest::user("hi"), None).unwrap();
        assert_eq!(r.text, "two words");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, seen) = serve(vec![
            (502, "a".into()),
            (502, "b".into()),
            (502, "c".into()),
            (200, CHAT_OK.into()),
        ]);
        let err = backend(&url)
            .chat(&ChatRequest::user("hi"), None)
            .unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
        assert!(err.is_runtime());
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":"empty corpus"}"#.into())]);
        let err = backend(&url)
            .chat(&ChatRequest::user("hi"), None)
            .unwrap_err();
        assert!(matches!(err, Error::Remote(ref m) if m.contains("empty corpus")));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn not_implemented_is_unsupported() {
        let (url, _) = serve(vec![(501, "{}".into())]);
        let err = backend(&url).reward("q", "a").unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }

    #[test]
    fn malformed_payload_is_protocol_error() {
        let (url, _) = serve(vec![(200, r#"{"choices":"nope"}"#.into())]);
        let err = backend(&url)
            .chat(&ChatRequest::user("hi"), None)
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn missing_usage_falls_back_to_whitespace_counts() {
        let body = r#"{"choices":[{"message":{"content":"a b c"}}]}"#;
        let (url, _) = serve(vec![(200, body.into())]);
        let r = backend(&url)
            .chat(&ChatRequest::user("one two"), None)
            .unwrap();
        assert_eq!(r.usage, TokenUsage::approximate(2, 3));
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = backend(&format!("http://{addr}")).health().unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
    }

    #[test]
    fn auxiliary_routes() {
        let (url, seen) = serve(vec![
            (200, r#"{"tokens":[{"token":"a","logprob":-1.0}],"usage":{"prompt_tokens":3,"completion_tokens":0}}"#.into()),
            (200, r#"{"score":0.75}"#.into()),
            (200, r#"{"vector":[1,2,3,4,5,6],"vocab_size":2,"hidden_size":3}"#.into()),
            (200, r#"{"checkpoint":"ckpt-7","best_validation":0.61}"#.into()),
            (200, r#"{"capabilities":["generate","logprobs"],"model":"m","max_context":4096}"#.into()),
        ]);
        let b = backend(&url);
        let student = StudentState {
            checkpoint: "ckpt-3".into(),
            mastery: None,
            best_validation: None,
        };
        let (lps, u) = b.answer_logprobs(Some(&student), "q", "a").unwrap();
        assert_eq!((lps.len(), u.input_tokens), (1, 3));
        let (score, u) = b.reward("q x", "a").unwrap();
        assert_eq!(score, 0.75);
        assert!(u.approximate);
        let (g, _) = b.grad_features(None, "q", "a").unwrap();
        assert_eq!(g, GradFeatures::Raw(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let train = Corpus::new(
            crate::corpus::CorpusRole::Synthetic,
            vec![Sample::synthetic("synth-0-0", "q", "a", "p", 0)],
        )
        .unwrap();
        let val = Corpus::empty(crate::corpus::CorpusRole::Validation).unwrap();
        let st = b
            .finetune(&train, &val, &FinetuneHyperparams::default(), 4)
            .unwrap();
        assert_eq!(st.checkpoint, "ckpt-7");
        let h = b.health().unwrap();
        assert_eq!(
            h.capabilities,
            vec![Capability::Generate, Capability::Logprobs]
        );
        let seen = seen.lock().unwrap();
        let routes: Vec<&str> = seen
            .iter()
            .map(|(l, _)| l.split_whitespace().nth(1).unwrap())
            .collect();
        assert_eq!(
            routes,
            [
                "/v1/logprobs",
                "/v1/reward",
                "/v1/grad_embedding",
                "/v1/finetune",
                "/v1/health"
            ]
        );
        let lp_body: Value = serde_json::from_str(&seen[0].1).unwrap();
        assert_eq!(lp_body["model"], "ckpt-3");
        let ft: Value = serde_json::from_str(&seen[3].1).unwrap();
        assert_eq!(ft["hyperparams"]["batch_size"], 24);
        assert_eq!(ft["train"][0]["id"], "synth-0-0");
    }

    #[test]
    fn probe_refuses_missing_capability() {
        let (url, _) = serve(vec![(
            200,
            r#"{"capabilities":["reward"],"model":"rm"}"#.into(),
        )]);
        let ep = ModelEndpoint::new(
            ModelRole::Student,
            [Capability::Generate, Capability::Logprobs].into(),
            Transport::Remote,
            Arc::new(backend(&url)),
            Arc::new(BudgetLedger::new()),
        )
        .unwrap();
        assert!(matches!(ep.probe(), Err(Error::Unsupported { .. })));
    }
}
