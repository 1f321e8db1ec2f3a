//! Multi-turn transcript model and parser.
//!
//! A transcript is a flat sequence of tagged segments:
//!
//! ```text
//! <reasoning> ... </reasoning>
//! <tool_call> {"name": "sql_executor", "arguments": {"sql": "..."}} </tool_call>
//! <result> ... </result>
//! ... (repeated once per interaction step)
//! <reasoning> ... </reasoning>
//! <answer> final SQL </answer>
//! ```
//!
//! Segment bodies are raw text: once a segment opens, everything up to its own
//! closing tag belongs to it, including text that looks like other tags. Such
//! stray tags do not break parsing; [`check_format`] reports them.
//!
//! Spans are half-open character (Unicode scalar) offsets into the source.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of interaction steps kept from a transcript.
pub const DEFAULT_MAX_TURNS: usize = 10;

/// Name of the only tool a transcript may call.
pub const TOOL_NAME: &str = "sql_executor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Reasoning,
    ToolCall,
    Feedback,
    Answer,
}

impl SegmentKind {
    fn label(self) -> &'static str {
        match self {
            SegmentKind::Reasoning => "reasoning",
            SegmentKind::ToolCall => "tool_call",
            SegmentKind::Feedback => "result",
            SegmentKind::Answer => "answer",
        }
    }
}

/// Half-open `[start, end)` interval of character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Extracts the characters covered by this span.
    pub fn slice<'a>(&self, source: &'a str) -> &'a str {
        let begin = char_to_byte(source, self.start);
        let end = char_to_byte(source, self.end);
        &source[begin..end]
    }
}

fn char_to_byte(source: &str, chars: usize) -> usize {
    source
        .char_indices()
        .nth(chars)
        .map(|(b, _)| b)
        .unwrap_or(source.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Tag name the segment was written with (`reasoning` or `think` for
    /// reasoning segments).
    pub tag: &'static str,
    pub text: String,
    /// Span of the body, excluding the surrounding tags.
    pub span: Span,
}

impl Segment {
    pub fn open_tag(&self) -> String {
        format!("<{}>", self.tag)
    }

    pub fn close_tag(&self) -> String {
        format!("</{}>", self.tag)
    }

    /// The body wrapped in its opening and closing tags.
    pub fn wrapped(&self) -> String {
        format!("{}{}{}", self.open_tag(), self.text, self.close_tag())
    }

    /// Span of the segment including its tags.
    pub fn outer_span(&self) -> Span {
        Span::new(
            self.span.start - self.open_tag().chars().count(),
            self.span.end + self.close_tag().chars().count(),
        )
    }
}

/// One interaction cycle: reasoning, a tool call, and the executor's feedback.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Step {
    pub index: usize,
    pub reasoning: Segment,
    pub action: Segment,
    pub feedback: Segment,
    /// SQL decoded from the tool-call envelope; `None` when the payload is
    /// not a well-formed `sql_executor` call.
    pub parsed_sql: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_reasoning: Option<Segment>,
    pub answer: Option<Segment>,
    pub source: String,
    pub truncated: bool,
    /// Non-fatal grammar problems noticed while parsing (empty input, text
    /// outside any segment).
    pub diagnostics: Vec<String>,
}

impl Trajectory {
    /// Number of interaction steps, `T`.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// The final SQL with surrounding whitespace removed, if an answer exists.
    pub fn answer_sql(&self) -> Option<&str> {
        self.answer.as_ref().map(|a| a.text.trim())
    }

    /// All segments in source order.
    pub fn segments(&self) -> Vec<&Segment> {
        let mut out = Vec::with_capacity(self.steps.len() * 3 + 2);
        for step in &self.steps {
            out.push(&step.reasoning);
            out.push(&step.action);
            out.push(&step.feedback);
        }
        out.extend(self.final_reasoning.iter());
        out.extend(self.answer.iter());
        out
    }
}

/// Which tag names open a reasoning segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReasoningTag {
    #[default]
    Reasoning,
    Think,
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseConfig {
    pub max_turns: usize,
    pub reasoning_tag: ReasoningTag,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig {
            max_turns: DEFAULT_MAX_TURNS,
            reasoning_tag: ReasoningTag::Reasoning,
        }
    }
}

impl ParseConfig {
    pub fn with_max_turns(max_turns: usize) -> Self {
        ParseConfig {
            max_turns,
            ..Default::default()
        }
    }

    fn segment_tags(&self) -> Vec<(&'static str, SegmentKind)> {
        let mut tags = Vec::with_capacity(5);
        match self.reasoning_tag {
            ReasoningTag::Reasoning => tags.push(("reasoning", SegmentKind::Reasoning)),
            ReasoningTag::Think => tags.push(("think", SegmentKind::Reasoning)),
            ReasoningTag::Either => {
                tags.push(("reasoning", SegmentKind::Reasoning));
                tags.push(("think", SegmentKind::Reasoning));
            }
        }
        tags.push(("tool_call", SegmentKind::ToolCall));
        tags.push(("result", SegmentKind::Feedback));
        tags.push(("answer", SegmentKind::Answer));
        tags
    }
}

/// Every tag name the grammar knows about, regardless of configuration.
const ALL_TAGS: [&str; 5] = ["reasoning", "think", "tool_call", "result", "answer"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed transcript at char {offset}: {message}")]
pub struct MalformedTranscript {
    pub offset: usize,
    pub message: String,
}

impl MalformedTranscript {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        MalformedTranscript {
            offset,
            message: message.into(),
        }
    }
}

/// Parses a transcript with the default tag vocabulary.
pub fn parse_transcript(text: &str, max_turns: usize) -> Result<Trajectory, MalformedTranscript> {
    parse_transcript_with(text, &ParseConfig::with_max_turns(max_turns))
}

pub fn parse_transcript_with(
    text: &str,
    config: &ParseConfig,
) -> Result<Trajectory, MalformedTranscript> {
    let max_turns = config.max_turns.max(1);
    let mut diagnostics = Vec::new();
    if text.trim().is_empty() {
        diagnostics.push("empty transcript".to_string());
    }
    let segments = lex_segments(text, config, &mut diagnostics)?;

    let mut steps: Vec<Step> = Vec::new();
    let mut final_reasoning = None;
    let mut answer = None;
    let mut pending_reasoning: Option<Segment> = None;
    let mut pending_action: Option<Segment> = None;

    for seg in segments {
        let offset = seg.span.start;
        if answer.is_some() {
            return Err(MalformedTranscript::new(
                offset,
                format!("<{}> segment after the answer", seg.tag),
            ));
        }
        match seg.kind {
            SegmentKind::Reasoning => {
                if pending_reasoning.is_some() {
                    return Err(MalformedTranscript::new(
                        offset,
                        "two reasoning segments without an action between them",
                    ));
                }
                if pending_action.is_some() {
                    return Err(MalformedTranscript::new(offset, "tool call without a result"));
                }
                pending_reasoning = Some(seg);
            }
            SegmentKind::ToolCall => {
                if pending_action.is_some() {
                    return Err(MalformedTranscript::new(offset, "tool call without a result"));
                }
                if pending_reasoning.is_none() {
                    return Err(MalformedTranscript::new(
                        offset,
                        "tool call without preceding reasoning",
                    ));
                }
                pending_action = Some(seg);
            }
            SegmentKind::Feedback => {
                let (Some(reasoning), Some(action)) = (pending_reasoning.take(), pending_action.take())
                else {
                    return Err(MalformedTranscript::new(offset, "result without a tool call"));
                };
                let parsed_sql = decode_tool_payload(&action.text);
                steps.push(Step {
                    index: steps.len(),
                    reasoning,
                    action,
                    feedback: seg,
                    parsed_sql,
                });
            }
            SegmentKind::Answer => {
                if pending_action.is_some() {
                    return Err(MalformedTranscript::new(offset, "tool call without a result"));
                }
                final_reasoning = pending_reasoning.take();
                answer = Some(seg);
            }
        }
    }
    if let Some(action) = pending_action {
        return Err(MalformedTranscript::new(
            action.span.end,
            "tool call without a result",
        ));
    }
    if final_reasoning.is_none() {
        final_reasoning = pending_reasoning;
    }

    let mut truncated = false;
    if steps.len() > max_turns {
        steps.truncate(max_turns);
        truncated = true;
        final_reasoning = None;
        answer = None;
    }

    Ok(Trajectory {
        steps,
        final_reasoning,
        answer,
        source: text.to_string(),
        truncated,
        diagnostics,
    })
}

/// Splits the source into top-level segments. Byte offsets are converted to
/// character offsets on the way out.
fn lex_segments(
    text: &str,
    config: &ParseConfig,
    diagnostics: &mut Vec<String>,
) -> Result<Vec<Segment>, MalformedTranscript> {
    let tags = config.segment_tags();
    let mut chars = CharCounter::new(text);
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut stray_start: Option<usize> = None;

    while pos < text.len() {
        let rest = &text[pos..];
        let opened = tags.iter().find(|(name, _)| {
            rest.strip_prefix('<')
                .and_then(|r| r.strip_prefix(name))
                .is_some_and(|r| r.starts_with('>'))
        });
        if let Some(&(name, kind)) = opened {
            flush_stray(text, &mut stray_start, pos, &mut chars, diagnostics);
            let body_start = pos + name.len() + 2;
            let close = format!("</{name}>");
            let open = format!("<{name}>");
            let Some(rel_end) = text[body_start..].find(&close) else {
                return Err(MalformedTranscript::new(
                    chars.at(pos),
                    format!("unclosed <{name}> tag"),
                ));
            };
            let body_end = body_start + rel_end;
            if let Some(rel_nested) = text[body_start..body_end].find(&open) {
                return Err(MalformedTranscript::new(
                    chars.at(body_start + rel_nested),
                    format!("nested <{name}> inside <{name}>"),
                ));
            }
            let start = chars.at(body_start);
            let end = chars.at(body_end);
            out.push(Segment {
                kind,
                tag: name,
                text: text[body_start..body_end].to_string(),
                span: Span::new(start, end),
            });
            pos = body_end + close.len();
            continue;
        }
        if let Some(name) = closing_tag_at(rest, &tags) {
            return Err(MalformedTranscript::new(
                chars.at(pos),
                format!("closing </{name}> without a matching opening tag"),
            ));
        }
        let ch = rest.chars().next().expect("non-empty remainder");
        if !ch.is_whitespace() && stray_start.is_none() {
            stray_start = Some(pos);
        }
        if ch.is_whitespace() {
            flush_stray(text, &mut stray_start, pos, &mut chars, diagnostics);
        }
        pos += ch.len_utf8();
    }
    flush_stray(text, &mut stray_start, text.len(), &mut chars, diagnostics);
    Ok(out)
}

fn flush_stray(
    text: &str,
    stray_start: &mut Option<usize>,
    end: usize,
    chars: &mut CharCounter<'_>,
    diagnostics: &mut Vec<String>,
) {
    if let Some(start) = stray_start.take() {
        let word: String = text[start..end].chars().take(24).collect();
        diagnostics.push(format!(
            "text outside any segment at char {}: {:?}",
            chars.at(start),
            word
        ));
    }
}

fn closing_tag_at(rest: &str, tags: &[(&'static str, SegmentKind)]) -> Option<&'static str> {
    let after = rest.strip_prefix("</")?;
    tags.iter()
        .map(|(name, _)| *name)
        .find(|name| after.starts_with(name) && after[name.len()..].starts_with('>'))
}

/// Converts monotonically non-decreasing byte offsets to character offsets.
struct CharCounter<'a> {
    text: &'a str,
    byte: usize,
    chars: usize,
}

impl<'a> CharCounter<'a> {
    fn new(text: &'a str) -> Self {
        CharCounter {
            text,
            byte: 0,
            chars: 0,
        }
    }

    fn at(&mut self, byte: usize) -> usize {
        if byte < self.byte {
            return self.text[..byte].chars().count();
        }
        self.chars += self.text[self.byte..byte].chars().count();
        self.byte = byte;
        self.chars
    }
}

/// Decodes the `{"name": "sql_executor", "arguments": {"sql": ...}}` envelope.
///
/// `arguments` may also be a JSON string holding the object, which some
/// chat templates emit.
pub fn decode_tool_payload(payload: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(payload.trim()).ok()?;
    let obj = value.as_object()?;
    if obj.get("name")?.as_str()? != TOOL_NAME {
        return None;
    }
    let args = match obj.get("arguments")? {
        serde_json::Value::String(raw) => serde_json::from_str(raw).ok()?,
        other => other.clone(),
    };
    let sql = args.as_object()?.get("sql")?.as_str()?.trim();
    if sql.is_empty() {
        None
    } else {
        Some(sql.to_string())
    }
}

/// Encodes a tool-call payload. `</` is escaped as `<\/` so the payload can
/// never close the surrounding segment.
pub fn encode_tool_payload(sql: &str) -> String {
    let envelope = serde_json::json!({
        "name": TOOL_NAME,
        "arguments": { "sql": sql },
    });
    envelope.to_string().replace("</", "<\\/")
}

/// `(span, kind)` for every segment, in source order.
pub fn segment_roles(traj: &Trajectory) -> Vec<(Span, SegmentKind)> {
    traj.segments().into_iter().map(|s| (s.span, s.kind)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormatReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Checks the full response grammar: every step well formed, a final
/// reasoning segment followed by an answer, no truncation, and no stray
/// tags hidden inside segment bodies.
pub fn check_format(traj: &Trajectory) -> FormatReport {
    let mut violations = traj.diagnostics.clone();
    if traj.truncated {
        violations.push("truncated at max turns".to_string());
    }
    match &traj.answer {
        None => violations.push("missing answer".to_string()),
        Some(answer) => {
            if answer.text.trim().is_empty() {
                violations.push("empty answer".to_string());
            }
            if traj.final_reasoning.is_none() {
                violations.push("missing reasoning before answer".to_string());
            }
        }
    }
    for seg in traj.segments() {
        for name in ALL_TAGS {
            let open = format!("<{name}>");
            let close = format!("</{name}>");
            if seg.text.contains(&open) || seg.text.contains(&close) {
                violations.push(format!(
                    "stray <{name}> tag inside {} segment at char {}",
                    seg.kind.label(),
                    seg.span.start
                ));
            }
        }
    }
    FormatReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// Parses a transcript, folding structural errors into a format-invalid
/// trajectory with no steps and no answer.
pub fn parse_or_invalid(text: &str, config: &ParseConfig) -> Trajectory {
    parse_transcript_with(text, config).unwrap_or_else(|err| Trajectory {
        steps: Vec::new(),
        final_reasoning: None,
        answer: None,
        source: text.to_string(),
        truncated: false,
        diagnostics: vec![err.to_string()],
    })
}

/// One line of a trajectory JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub database_id: String,
    pub gold_sql: String,
    pub transcript: String,
    /// Which group (sampling round) of `prompt_id` this trajectory belongs to.
    pub group_index: usize,
    /// Position within the group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupError {
    #[error("group {prompt_id}/{group_index} has {size} trajectories, need at least 2")]
    TooSmall {
        prompt_id: String,
        group_index: usize,
        size: usize,
    },
    #[error("group {prompt_id}/{group_index} mixes database or gold SQL values")]
    Inconsistent { prompt_id: String, group_index: usize },
}

/// The `G` trajectories sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: String,
    pub group_index: usize,
    pub database_id: String,
    pub gold_sql: String,
    pub trajectories: Vec<Trajectory>,
}

impl Group {
    pub fn new(
        prompt_id: impl Into<String>,
        group_index: usize,
        database_id: impl Into<String>,
        gold_sql: impl Into<String>,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self, GroupError> {
        let prompt_id = prompt_id.into();
        if trajectories.len() < 2 {
            return Err(GroupError::TooSmall {
                prompt_id,
                group_index,
                size: trajectories.len(),
            });
        }
        Ok(Group {
            prompt_id,
            group_index,
            database_id: database_id.into(),
            gold_sql: gold_sql.into(),
            trajectories,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// JSONL records for this group, one per trajectory.
    pub fn records(&self) -> Vec<TrajectoryRecord> {
        self.trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryRecord {
                prompt_id: self.prompt_id.clone(),
                database_id: self.database_id.clone(),
                gold_sql: self.gold_sql.clone(),
                transcript: t.source.clone(),
                group_index: self.group_index,
                sample_index: Some(i),
                policy: None,
            })
            .collect()
    }
}

/// Reassembles groups from records keyed by `(prompt_id, group_index)`.
/// Groups come out in order of first appearance; trajectories keep file
/// order. Unparseable transcripts become format-invalid trajectories.
pub fn group_records(
    records: &[TrajectoryRecord],
    config: &ParseConfig,
) -> Result<Vec<Group>, GroupError> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut buckets: std::collections::HashMap<(String, usize), Vec<&TrajectoryRecord>> =
        std::collections::HashMap::new();
    for rec in records {
        let key = (rec.prompt_id.clone(), rec.group_index);
        let bucket = buckets.entry(key.clone()).or_default();
        if bucket.is_empty() {
            order.push(key);
        }
        bucket.push(rec);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &buckets[&key];
            let head = members[0];
            if members
                .iter()
                .any(|r| r.database_id != head.database_id || r.gold_sql != head.gold_sql)
            {
                return Err(GroupError::Inconsistent {
                    prompt_id: key.0.clone(),
                    group_index: key.1,
                });
            }
            let trajectories = members
                .iter()
                .map(|r| parse_or_invalid(&r.transcript, config))
                .collect();
            Group::new(
                key.0.clone(),
                key.1,
                head.database_id.clone(),
                head.gold_sql.clone(),
                trajectories,
            )
        })
        .collect()
}
