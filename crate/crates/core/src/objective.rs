//! Token-level broadcast of step advantages and the clipped, KL-regularized
//! surrogate objective.
//!
//! Executor feedback stays in context but is masked out of the objective:
//! tokens inside `<result>` bodies (and tokens outside any segment, such as
//! the tags themselves) get `loss_mask = 0` and contribute nothing, whatever
//! their log-probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credit::StepAdvantages;
use crate::trajectory::{SegmentKind, Span, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("{field} has length {got}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("no token has loss_mask = 1")]
    EmptyMask,
    #[error("loss_mask[{0}] must be 0 or 1")]
    InvalidMask(usize),
    #[error("non-finite {field} at unmasked token {index}")]
    NonFinite { field: &'static str, index: usize },
    #[error("{kind:?} segment at chars {}..{} has no tokens", span.start, span.end)]
    AlignmentGap { kind: SegmentKind, span: Span },
    #[error("token {0} overlaps more than one segment")]
    AmbiguousToken(usize),
    #[error("token spans must be ordered and non-overlapping (token {0})")]
    UnorderedTokens(usize),
    #[error("invalid objective config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenSpan {
    fn span(&self) -> Span {
        Span::new(self.char_start, self.char_end)
    }
}

/// Character spans of each token of a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    pub token_spans: Vec<TokenSpan>,
    pub length: usize,
}

impl TokenAlignment {
    pub fn new(token_spans: Vec<TokenSpan>) -> Result<Self, ObjectiveError> {
        let mut prev_end = 0;
        for (i, tok) in token_spans.iter().enumerate() {
            if tok.token_index != i || tok.char_start > tok.char_end || tok.char_start < prev_end {
                return Err(ObjectiveError::UnorderedTokens(i));
            }
            prev_end = tok.char_end;
        }
        Ok(TokenAlignment {
            length: token_spans.len(),
            token_spans,
        })
    }

    /// Whitespace tokenization: every maximal run of non-whitespace
    /// characters is one token.
    pub fn whitespace(text: &str) -> Self {
        let mut spans = Vec::new();
        let mut start = None;
        let mut n = 0;
        for (pos, ch) in text.chars().enumerate() {
            match (ch.is_whitespace(), start) {
                (false, None) => start = Some(pos),
                (true, Some(s)) => {
                    spans.push(TokenSpan { token_index: spans.len(), char_start: s, char_end: pos });
                    start = None;
                }
                _ => {}
            }
            n = pos + 1;
        }
        if let Some(s) = start {
            spans.push(TokenSpan { token_index: spans.len(), char_start: s, char_end: n });
        }
        TokenAlignment {
            length: spans.len(),
            token_spans: spans,
        }
    }
}

/// Per-token advantages and loss mask for one trajectory.
///
/// Tokens in step `t`'s reasoning, tool call and feedback carry
/// `a_mixed[t]`; final reasoning and answer tokens carry `a_mixed[T]`.
pub fn broadcast_advantages(
    traj: &Trajectory,
    adv: &StepAdvantages,
    align: &TokenAlignment,
) -> Result<(Vec<f64>, Vec<u8>), ObjectiveError> {
    let num_steps = traj.steps.len();
    if adv.a_mixed.len() != num_steps + 1 {
        return Err(ObjectiveError::LengthMismatch {
            field: "a_mixed",
            got: adv.a_mixed.len(),
            expected: num_steps + 1,
        });
    }
    // (span, kind, step) in source order.
    let mut segments: Vec<(Span, SegmentKind, usize)> = Vec::new();
    for step in &traj.steps {
        for seg in [&step.reasoning, &step.action, &step.feedback] {
            segments.push((seg.span, seg.kind, step.index));
        }
    }
    for seg in traj.final_reasoning.iter().chain(traj.answer.iter()) {
        segments.push((seg.span, seg.kind, num_steps));
    }

    let mut advantage = vec![0.0; align.length];
    let mut mask = vec![0u8; align.length];
    let mut covered = vec![false; segments.len()];
    let mut first = 0;
    for tok in &align.token_spans {
        let span = tok.span();
        while first < segments.len() && segments[first].0.end <= span.start {
            first += 1;
        }
        let mut hit = None;
        for (k, (seg_span, _, _)) in segments.iter().enumerate().skip(first) {
            if seg_span.start >= span.end {
                break;
            }
            if seg_span.overlaps(&span) {
                if hit.is_some() {
                    return Err(ObjectiveError::AmbiguousToken(tok.token_index));
                }
                hit = Some(k);
            }
        }
        if let Some(k) = hit {
            let (_, kind, step) = segments[k];
            covered[k] = true;
            advantage[tok.token_index] = adv.a_mixed[step];
            mask[tok.token_index] = u8::from(kind != SegmentKind::Feedback);
        }
    }
    let texts: Vec<&str> = traj.segments().into_iter().map(|s| s.text.as_str()).collect();
    for (k, (span, kind, _)) in segments.iter().enumerate() {
        if !covered[k] && !texts[k].trim().is_empty() {
            return Err(ObjectiveError::AlignmentGap { kind: *kind, span: *span });
        }
    }
    Ok((advantage, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over every unmasked token of the batch.
    #[default]
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub aggregation: Aggregation,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            clip_eps: 0.2,
            kl_coef: 1e-3,
            aggregation: Aggregation::TokenMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTensor {
    pub advantage: Vec<f64>,
    pub loss_mask: Vec<u8>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

impl TokenTensor {
    pub fn len(&self) -> usize {
        self.advantage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantage.is_empty()
    }

    /// Checks shapes, mask values, and finiteness of unmasked entries.
    /// Returns the unmasked token indices.
    pub fn validate(&self) -> Result<Vec<usize>, ObjectiveError> {
        let n = self.advantage.len();
        for (field, len) in [
            ("loss_mask", self.loss_mask.len()),
            ("logp_new", self.logp_new.len()),
            ("logp_old", self.logp_old.len()),
            ("logp_ref", self.logp_ref.len()),
        ] {
            if len != n {
                return Err(ObjectiveError::LengthMismatch { field, got: len, expected: n });
            }
        }
        let mut active = Vec::new();
        for (i, &m) in self.loss_mask.iter().enumerate() {
            match m {
                0 => {}
                1 => active.push(i),
                _ => return Err(ObjectiveError::InvalidMask(i)),
            }
        }
        if active.is_empty() {
            return Err(ObjectiveError::EmptyMask);
        }
        for &i in &active {
            for (field, v) in [
                ("advantage", self.advantage[i]),
                ("logp_new", self.logp_new[i]),
                ("logp_old", self.logp_old[i]),
                ("logp_ref", self.logp_ref[i]),
            ] {
                if !v.is_finite() {
                    return Err(ObjectiveError::NonFinite { field, index: i });
                }
            }
        }
        Ok(active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub clipped_fraction: f64,
    pub kl: f64,
}

fn check_config(cfg: &ObjectiveConfig) -> Result<(), ObjectiveError> {
    if !(cfg.clip_eps > 0.0 && cfg.clip_eps.is_finite()) {
        return Err(ObjectiveError::Config(format!("clip_eps must be positive, got {}", cfg.clip_eps)));
    }
    if !(cfg.kl_coef >= 0.0 && cfg.kl_coef.is_finite()) {
        return Err(ObjectiveError::Config(format!("kl_coef must be non-negative, got {}", cfg.kl_coef)));
    }
    Ok(())
}

struct TokenTerm {
    ratio: f64,
    term: f64,
    clipped: bool,
    kl: f64,
    /// `logp_ref - logp_new`
    log_ref_ratio: f64,
}

fn token_term(t: &TokenTensor, i: usize, clip_eps: f64) -> TokenTerm {
    let ratio = (t.logp_new[i] - t.logp_old[i]).exp();
    let a = t.advantage[i];
    let unclipped = ratio * a;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
    let log_ref_ratio = t.logp_ref[i] - t.logp_new[i];
    TokenTerm {
        ratio,
        term: unclipped.min(clipped),
        clipped: clipped < unclipped,
        kl: log_ref_ratio.exp() - log_ref_ratio - 1.0,
        log_ref_ratio,
    }
}

/// Token-mean of `min(ratio * A, clip(ratio) * A) - kl_coef * kl` over the
/// unmasked tokens, with the `exp(x) - x - 1` KL estimator
/// (`x = logp_ref - logp_new`).
pub fn surrogate_objective(t: &TokenTensor, cfg: &ObjectiveConfig) -> Result<ObjectiveValue, ObjectiveError> {
    check_config(cfg)?;
    let active = t.validate()?;
    let mut total = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    for &i in &active {
        let tok = token_term(t, i, cfg.clip_eps);
        total += tok.term - cfg.kl_coef * tok.kl;
        kl_total += tok.kl;
        clipped += usize::from(tok.clipped);
    }
    let n = active.len() as f64;
    Ok(ObjectiveValue {
        value: total / n,
        clipped_fraction: clipped as f64 / n,
        kl: kl_total / n,
    })
}

/// Gradient of [`surrogate_objective`]'s `value` with respect to each
/// token's `logp_new`. Masked tokens and tokens on the active clip branch
/// have zero policy-term gradient.
pub fn surrogate_gradient(t: &TokenTensor, cfg: &ObjectiveConfig) -> Result<Vec<f64>, ObjectiveError> {
    check_config(cfg)?;
    let active = t.validate()?;
    let n = active.len() as f64;
    let mut grad = vec![0.0; t.len()];
    for &i in &active {
        let tok = token_term(t, i, cfg.clip_eps);
        let policy = if tok.clipped { 0.0 } else { tok.ratio * t.advantage[i] };
        // d/dlogp_new of exp(x) - x - 1 with x = logp_ref - logp_new
        let kl = 1.0 - tok.log_ref_ratio.exp();
        grad[i] = (policy - cfg.kl_coef * kl) / n;
    }
    Ok(grad)
}
