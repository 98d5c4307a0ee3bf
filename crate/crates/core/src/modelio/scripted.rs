use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Backend, ChatRequest, ChatResponse, HealthReport, StudentState, TokenUsage};
use crate::error::Result;
use crate::util::count_tokens;

type ReplyFn = dyn Fn(&ChatRequest, usize) -> Result<String> + Send + Sync;

/// Chat backend returning canned replies, for exercising prompt and parse
/// paths without a model. Usage is counted in whitespace tokens.
pub struct ScriptedBackend {
    reply: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("calls", &self.calls)
            .finish()
    }
}

impl ScriptedBackend {
    /// Replies in order; the last one repeats once the list is used up.
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(
            !replies.is_empty(),
            "scripted backend needs at least one reply"
        );
        Self::from_fn(move |_, i| Ok(replies[i.min(replies.len() - 1)].clone()))
    }

    /// Reply computed from the request and the zero-based call index.
    pub fn from_fn(
        f: impl Fn(&ChatRequest, usize) -> Result<String> + Send + Sync + 'static,
    ) -> Self {
        ScriptedBackend {
            reply: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest, _student: Option<&StudentState>) -> Result<ChatResponse> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.reply)(request, i)?;
        let token_logprobs = request.want_logprobs.then(|| {
            text.split_whitespace()
                .map(|t| super::TokenLogprob {
                    token: t.into(),
                    logprob: 0.0,
                })
                .collect()
        });
        Ok(ChatResponse {
            usage: TokenUsage::new(request.input_tokens(), count_tokens(&text)),
            text,
            token_logprobs,
        })
    }

    fn health(&self) -> Result<HealthReport> {
        Ok(HealthReport {
            capabilities: vec![super::Capability::Generate],
            model: "scripted".into(),
            max_context: None,
        })
    }
}
