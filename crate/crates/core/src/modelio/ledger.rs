use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ModelRole, TokenUsage};
use crate::error::{Error, Result};

/// Hard caps on a role's cumulative token counts. `None` means unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenCap {
    pub max_input: Option<u64>,
    pub max_output: Option<u64>,
    pub max_total: Option<u64>,
}

impl TokenCap {
    fn exceeded_by(&self, u: &TokenUsage) -> Option<String> {
        if let Some(m) = self.max_input.filter(|&m| u.input_tokens > m) {
            return Some(format!("input tokens {} > cap {m}", u.input_tokens));
        }
        if let Some(m) = self.max_output.filter(|&m| u.output_tokens > m) {
            return Some(format!("output tokens {} > cap {m}", u.output_tokens));
        }
        if let Some(m) = self.max_total.filter(|&m| u.total() > m) {
            return Some(format!("total tokens {} > cap {m}", u.total()));
        }
        None
    }

    fn reached_by(&self, u: &TokenUsage) -> bool {
        self.max_input.is_some_and(|m| u.input_tokens >= m)
            || self.max_output.is_some_and(|m| u.output_tokens >= m)
            || self.max_total.is_some_and(|m| u.total() >= m)
    }
}

/// One charged call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: ModelRole,
    pub purpose: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub approximate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub totals: BTreeMap<ModelRole, TokenUsage>,
}

impl LedgerSnapshot {
    pub fn get(&self, role: ModelRole) -> TokenUsage {
        self.totals.get(&role).copied().unwrap_or_default()
    }
}

#[derive(Debug, Default)]
struct State {
    totals: BTreeMap<ModelRole, TokenUsage>,
    caps: BTreeMap<ModelRole, TokenCap>,
    calls: Vec<CallRecord>,
}

/// Cumulative per-role token accounting. Charges are atomic: a charge that
/// would push a role past its cap is rejected and leaves the totals
/// untouched.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    state: Mutex<State>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_caps(caps: BTreeMap<ModelRole, TokenCap>) -> Self {
        BudgetLedger {
            state: Mutex::new(State {
                caps,
                ..Default::default()
            }),
        }
    }

    /// Restores totals from a snapshot (used when resuming a run).
    pub fn restore(&self, snapshot: &LedgerSnapshot) {
        let mut s = self.state.lock().expect("ledger lock");
        s.totals = snapshot.totals.clone();
    }

    /// Fails if the role has already reached one of its caps.
    pub fn check_open(&self, role: ModelRole) -> Result<()> {
        let s = self.state.lock().expect("ledger lock");
        let used = s.totals.get(&role).copied().unwrap_or_default();
        match s.caps.get(&role) {
            Some(cap) if cap.reached_by(&used) => Err(Error::Budget {
                role: role.to_string(),
                detail: "cap reached".into(),
            }),
            _ => Ok(()),
        }
    }

    pub fn charge(&self, role: ModelRole, purpose: &str, usage: TokenUsage) -> Result<()> {
        let mut s = self.state.lock().expect("ledger lock");
        let mut next = s.totals.get(&role).copied().unwrap_or_default();
        next += usage;
        if let Some(detail) = s.caps.get(&role).and_then(|c| c.exceeded_by(&next)) {
            return Err(Error::Budget {
                role: role.to_string(),
                detail,
            });
        }
        s.totals.insert(role, next);
        s.calls.push(CallRecord {
            role,
            purpose: purpose.to_string(),
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            approximate: usage.approximate,
        });
        Ok(())
    }

    pub fn totals(&self, role: ModelRole) -> TokenUsage {
        let s = self.state.lock().expect("ledger lock");
        s.totals.get(&role).copied().unwrap_or_default()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let s = self.state.lock().expect("ledger lock");
        LedgerSnapshot {
            totals: s.totals.clone(),
        }
    }

    /// Takes the call log accumulated since the last drain. Records are
    /// sorted so the log does not depend on the order in which concurrent
    /// calls completed.
    pub fn drain_calls(&self) -> Vec<CallRecord> {
        let mut s = self.state.lock().expect("ledger lock");
        let mut calls = std::mem::take(&mut s.calls);
        calls.sort();
        calls
    }
}
