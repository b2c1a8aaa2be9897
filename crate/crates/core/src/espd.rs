//! Early-warning inference over a conversation stream.
//!
//! A window of the last `window_len` messages slides forward one message at
//! a time. Each window is scored by the classifier and labelled positive when
//! its probability reaches `proba_threshold`. A warning is raised as soon as
//! at least `skepticism` of the most recent `history_len` labels are positive;
//! before `history_len` labels exist the rule looks at however many there are.
//! Warnings are final. A conversation is only called negative once it has
//! ended without a warning.

use std::collections::VecDeque;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Label, Message};
use crate::embed::{Embedder, Span};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::model::LogisticModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EspdConfig {
    pub window_len: usize,
    pub history_len: usize,
    pub skepticism: usize,
    pub proba_threshold: f64,
}

impl Default for EspdConfig {
    fn default() -> Self {
        Self {
            window_len: 50,
            history_len: 10,
            skepticism: 5,
            proba_threshold: 0.5,
        }
    }
}

impl EspdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::invalid("espd.window_len", "must be at least 1"));
        }
        if self.skepticism == 0 || self.history_len == 0 {
            return Err(Error::invalid("espd.skepticism", "skepticism and history_len must be at least 1"));
        }
        if self.skepticism > self.history_len {
            return Err(Error::invalid("espd.skepticism", "must not exceed history_len"));
        }
        if !(self.proba_threshold > 0.0 && self.proba_threshold < 1.0) {
            return Err(Error::invalid("espd.proba_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn with_threshold(self, proba_threshold: f64) -> Self {
        Self { proba_threshold, ..self }
    }
}

/// Message ranges of the sliding windows over `n` messages.
pub fn window_ranges(n: usize, l: usize) -> Result<Vec<Range<usize>>> {
    if l == 0 {
        return Err(Error::invalid("window_len", "must be at least 1"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n <= l {
        return Ok(std::iter::once(0..n).collect());
    }
    Ok((0..=n - l).map(|s| s..s + l).collect())
}

pub fn windows(conv: &Conversation, l: usize) -> Result<Vec<&[Message]>> {
    Ok(window_ranges(conv.messages.len(), l)?
        .into_iter()
        .map(|r| &conv.messages[r])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StreamState {
    /// Messages may still arrive.
    Undecided,
    /// `latency` is the 1-based index of the last message in the triggering
    /// window.
    Warned { latency: usize },
    /// The stream ended without a warning.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub proba: f64,
    pub positive: bool,
}

/// Incremental form of the warning rule.
#[derive(Debug, Clone)]
pub struct WarningMonitor {
    cfg: EspdConfig,
    history: VecDeque<bool>,
    positives: usize,
    state: StreamState,
    trace: Vec<WindowScore>,
}

impl WarningMonitor {
    pub fn new(cfg: EspdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            history: VecDeque::with_capacity(cfg.history_len),
            positives: 0,
            state: StreamState::Undecided,
            trace: Vec::new(),
        })
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn trace(&self) -> &[WindowScore] {
        &self.trace
    }

    /// Feed the score of the window ending at message `last_message`
    /// (1-based). Scores after a warning or after [`finish`](Self::finish)
    /// are ignored.
    pub fn push(&mut self, proba: f64, last_message: usize) -> Result<StreamState> {
        if !proba.is_finite() {
            return Err(Error::NonFinite("window probability".into()));
        }
        if self.state != StreamState::Undecided {
            return Ok(self.state);
        }
        let positive = proba >= self.cfg.proba_threshold;
        self.trace.push(WindowScore { proba, positive });
        if self.history.len() == self.cfg.history_len && self.history.pop_front() == Some(true) {
            self.positives -= 1;
        }
        self.history.push_back(positive);
        self.positives += positive as usize;
        if self.positives >= self.cfg.skepticism {
            self.state = StreamState::Warned { latency: last_message };
        }
        Ok(self.state)
    }

    /// Mark the stream complete.
    pub fn finish(&mut self) -> StreamState {
        if self.state == StreamState::Undecided {
            self.state = StreamState::Negative;
        }
        self.state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationVerdict {
    pub conversation_id: String,
    pub true_label: Label,
    pub state: StreamState,
    pub n_messages: usize,
    pub window_trace: Vec<WindowScore>,
}

impl ConversationVerdict {
    pub fn warned(&self) -> bool {
        matches!(self.state, StreamState::Warned { .. })
    }

    pub fn warning_latency(&self) -> Option<usize> {
        match self.state {
            StreamState::Warned { latency } => Some(latency),
            _ => None,
        }
    }
}

/// Per-window probabilities of a conversation with the 1-based index of each
/// window's last message.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredConversation {
    pub conversation_id: String,
    pub label: Label,
    pub n_messages: usize,
    pub scores: Vec<f64>,
    pub window_ends: Vec<usize>,
}

fn score_window(model: &LogisticModel, embedder: &Embedder, conv: &Conversation, r: Range<usize>) -> Result<f64> {
    let span = Span {
        conversation_id: &conv.id,
        messages: &conv.messages[r],
        hidden_label: Some(conv.label),
    };
    model.predict_proba(&embedder.embed(&span)?)
}

fn check_dims(model: &LogisticModel, embedder: &Embedder) -> Result<()> {
    if model.dim() != embedder.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: embedder.dimension(),
        });
    }
    Ok(())
}

pub fn score_conversation(
    model: &LogisticModel,
    embedder: &Embedder,
    conv: &Conversation,
    window_len: usize,
) -> Result<ScoredConversation> {
    check_dims(model, embedder)?;
    let ranges = window_ranges(conv.messages.len(), window_len)?;
    let window_ends = ranges.iter().map(|r| r.end).collect();
    let scores = ranges
        .into_iter()
        .map(|r| score_window(model, embedder, conv, r))
        .collect::<Result<_>>()?;
    Ok(ScoredConversation {
        conversation_id: conv.id.clone(),
        label: conv.label,
        n_messages: conv.messages.len(),
        scores,
        window_ends,
    })
}

pub fn score_testset(
    model: &LogisticModel,
    embedder: &Embedder,
    convs: &[Conversation],
    window_len: usize,
) -> Result<Vec<ScoredConversation>> {
    convs
        .par_iter()
        .map(|c| score_conversation(model, embedder, c, window_len))
        .collect()
}

/// Run the warning rule over a complete, pre-scored stream.
pub fn classify_scores(scored: &ScoredConversation, cfg: &EspdConfig) -> Result<ConversationVerdict> {
    if scored.scores.len() != scored.window_ends.len() {
        return Err(Error::DimensionMismatch {
            expected: scored.window_ends.len(),
            actual: scored.scores.len(),
        });
    }
    let mut mon = WarningMonitor::new(*cfg)?;
    for (&p, &end) in scored.scores.iter().zip(&scored.window_ends) {
        if let StreamState::Warned { .. } = mon.push(p, end)? {
            break;
        }
    }
    let state = mon.finish();
    Ok(ConversationVerdict {
        conversation_id: scored.conversation_id.clone(),
        true_label: scored.label,
        state,
        n_messages: scored.n_messages,
        window_trace: mon.trace,
    })
}

/// Stream a conversation window by window, stopping at the first warning.
pub fn classify_stream(
    model: &LogisticModel,
    embedder: &Embedder,
    conv: &Conversation,
    cfg: &EspdConfig,
) -> Result<ConversationVerdict> {
    check_dims(model, embedder)?;
    let mut mon = WarningMonitor::new(*cfg)?;
    for r in window_ranges(conv.messages.len(), cfg.window_len)? {
        let end = r.end;
        let p = score_window(model, embedder, conv, r)?;
        if let StreamState::Warned { .. } = mon.push(p, end)? {
            break;
        }
    }
    let state = mon.finish();
    Ok(ConversationVerdict {
        conversation_id: conv.id.clone(),
        true_label: conv.label,
        state,
        n_messages: conv.messages.len(),
        window_trace: mon.trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestsetEvaluation {
    pub verdicts: Vec<ConversationVerdict>,
    pub counts: ConfusionCounts,
    /// Latencies of warned positive conversations, in input order.
    pub latencies: Vec<usize>,
}

pub fn tally(verdicts: Vec<ConversationVerdict>) -> TestsetEvaluation {
    let mut counts = ConfusionCounts::default();
    let mut latencies = Vec::new();
    for v in &verdicts {
        match (v.true_label.is_positive(), v.warning_latency()) {
            (true, Some(l)) => {
                counts.tp += 1;
                latencies.push(l);
            }
            (true, None) => counts.fn_ += 1,
            (false, Some(_)) => counts.fp += 1,
            (false, None) => counts.tn += 1,
        }
    }
    TestsetEvaluation {
        verdicts,
        counts,
        latencies,
    }
}

pub fn evaluate_scored(scored: &[ScoredConversation], cfg: &EspdConfig) -> Result<TestsetEvaluation> {
    let verdicts = scored.iter().map(|s| classify_scores(s, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(tally(verdicts))
}

/// Classify every conversation and tally conversation-level confusion.
pub fn evaluate_testset(
    model: &LogisticModel,
    embedder: &Embedder,
    convs: &[Conversation],
    cfg: &EspdConfig,
) -> Result<TestsetEvaluation> {
    cfg.validate()?;
    if convs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let verdicts = convs
        .par_iter()
        .map(|c| classify_stream(model, embedder, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(tally(verdicts))
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    id: &'a str,
    label: Label,
    warned: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency: Option<usize>,
    trace_len: usize,
}

pub fn write_verdicts<W: std::io::Write>(mut w: W, verdicts: &[ConversationVerdict]) -> Result<()> {
    for v in verdicts {
        let line = serde_json::to_string(&VerdictLine {
            id: &v.conversation_id,
            label: v.true_label,
            warned: v.warned(),
            latency: v.warning_latency(),
            trace_len: v.window_trace.len(),
        })
        .map_err(|source| Error::Json {
            context: "verdicts".into(),
            source,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io("verdicts", e))?;
    }
    Ok(())
}
