//! Scripted rollouts and evaluation metrics.
//!
//! A [`ScriptedPolicy`] stands in for a sampled model response: the harness
//! plays its emissions through the real executor, wraps each result as tool
//! feedback, and produces a transcript in the standard tagged layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{exact_match, serialize_feedback, ExecError, ExecErrorKind, ExecutionResult, Limits, SqlExecutor};
use crate::trajectory::{
    encode_tool_payload, parse_transcript_with, Group, GroupError, MalformedTranscript, ParseConfig,
    Trajectory, DEFAULT_MAX_TURNS,
};

/// Default character cap for feedback written into transcripts.
pub const DEFAULT_FEEDBACK_CAP: usize = 1024;

/// Repeats used for VES timing.
pub const VES_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Sql(String),
    Answer(String),
    Garbage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    #[serde(alias = "reasoning_text")]
    pub reasoning: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub name: String,
    pub script: Vec<Emission>,
}

/// A question with its gold SQL and the scripted policies forming one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub prompt_id: Option<String>,
    pub question: String,
    #[serde(default)]
    pub hint: String,
    pub database_id: String,
    pub gold_sql: String,
    pub policies: Vec<ScriptedPolicy>,
}

impl Scenario {
    pub fn prompt_id(&self) -> String {
        self.prompt_id.clone().unwrap_or_else(|| self.database_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("policy {policy}: {message}")]
    InvalidScript { policy: String, message: String },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("synthesized transcript failed to parse: {0}")]
    Synthesis(#[from] MalformedTranscript),
    #[error("evaluation needs at least one question")]
    NoQuestions,
    #[error("group {prompt_id} has {size} trajectories, fewer than k = {k}")]
    GroupTooSmall { prompt_id: String, size: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

const TAG_NAMES: [&str; 5] = ["reasoning", "think", "tool_call", "result", "answer"];

fn contains_tag(text: &str) -> Option<&'static str> {
    TAG_NAMES
        .into_iter()
        .find(|name| text.contains(&format!("<{name}>")) || text.contains(&format!("</{name}>")))
}

/// Neutralizes tag-like text in executor output so database contents cannot
/// alter the transcript structure.
fn escape_tags(text: &str) -> String {
    let mut out = text.to_string();
    for name in TAG_NAMES {
        out = out
            .replace(&format!("</{name}>"), &format!("&lt;/{name}>"))
            .replace(&format!("<{name}>"), &format!("&lt;{name}>"));
    }
    out
}

impl ScriptedPolicy {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |message: String| HarnessError::InvalidScript {
            policy: self.name.clone(),
            message,
        };
        for (i, emission) in self.script.iter().enumerate() {
            if let Some(tag) = contains_tag(&emission.reasoning) {
                return Err(fail(format!("emission {i}: reasoning contains a <{tag}> tag")));
            }
            match &emission.action {
                Action::Answer(sql) => {
                    if i + 1 != self.script.len() {
                        return Err(fail(format!("emission {i}: answer must be the last emission")));
                    }
                    if let Some(tag) = contains_tag(sql) {
                        return Err(fail(format!("emission {i}: answer contains a <{tag}> tag")));
                    }
                }
                Action::Garbage(raw) => {
                    if raw.contains("<tool_call>") || raw.contains("</tool_call>") {
                        return Err(fail(format!("emission {i}: garbage payload contains tool_call tags")));
                    }
                }
                Action::Sql(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessConfig {
    pub max_turns: usize,
    pub feedback_limits: Limits,
    pub feedback_cap: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            max_turns: DEFAULT_MAX_TURNS,
            feedback_limits: Limits::feedback(),
            feedback_cap: DEFAULT_FEEDBACK_CAP,
        }
    }
}

/// Plays one policy and returns its transcript.
pub fn synthesize_transcript(
    policy: &ScriptedPolicy,
    database_id: &str,
    executor: &SqlExecutor,
    config: &HarnessConfig,
) -> Result<String, HarnessError> {
    policy.validate()?;
    let mut text = String::new();
    let mut turns = 0;
    for emission in &policy.script {
        let is_tool_turn = !matches!(emission.action, Action::Answer(_));
        if is_tool_turn && turns == config.max_turns {
            break;
        }
        text.push_str(&format!("<reasoning>\n{}\n</reasoning>\n", emission.reasoning.trim()));
        match &emission.action {
            Action::Answer(sql) => {
                text.push_str(&format!("<answer>\n{}\n</answer>\n", sql.trim()));
            }
            Action::Sql(sql) => {
                turns += 1;
                let outcome = executor.execute(sql, database_id, &config.feedback_limits);
                if let Err(err) = &outcome {
                    if err.kind == ExecErrorKind::MissingDatabase {
                        return Err(err.clone().into());
                    }
                }
                let feedback = serialize_feedback(&outcome, config.feedback_cap);
                text.push_str(&format!(
                    "<tool_call>\n{}\n</tool_call>\n<result>\n{}\n</result>\n",
                    encode_tool_payload(sql.trim()),
                    escape_tags(&feedback)
                ));
            }
            Action::Garbage(raw) => {
                turns += 1;
                let err: Result<ExecutionResult, ExecError> = Err(ExecError::new(
                    ExecErrorKind::Syntax,
                    "tool call payload is not a valid sql_executor call",
                ));
                text.push_str(&format!(
                    "<tool_call>\n{}\n</tool_call>\n<result>\n{}\n</result>\n",
                    raw,
                    serialize_feedback(&err, config.feedback_cap)
                ));
            }
        }
    }
    Ok(text)
}

/// Plays every policy of a scenario through the executor.
pub fn run_group(
    policies: &[ScriptedPolicy],
    scenario: &Scenario,
    group_index: usize,
    executor: &SqlExecutor,
    config: &HarnessConfig,
) -> Result<Group, HarnessError> {
    if !executor.has_database(&scenario.database_id) {
        return Err(ExecError::new(
            ExecErrorKind::MissingDatabase,
            format!("unknown database: {}", scenario.database_id),
        )
        .into());
    }
    let parse_config = ParseConfig::with_max_turns(config.max_turns);
    let mut trajectories = Vec::with_capacity(policies.len());
    for policy in policies {
        let text = synthesize_transcript(policy, &scenario.database_id, executor, config)?;
        trajectories.push(parse_transcript_with(&text, &parse_config)?);
    }
    Ok(Group::new(
        scenario.prompt_id(),
        group_index,
        scenario.database_id.clone(),
        scenario.gold_sql.clone(),
        trajectories,
    )?)
}

pub fn run_scenario(
    scenario: &Scenario,
    group_index: usize,
    executor: &SqlExecutor,
    config: &HarnessConfig,
) -> Result<Group, HarnessError> {
    run_group(&scenario.policies, scenario, group_index, executor, config)
}

/// Majority vote over execution results: the lowest index of the largest
/// class of mutually matching successful results. Errors are singletons.
/// Returns `None` for an empty list.
pub fn select_self_consistent<S>(answers: &[(S, Result<ExecutionResult, ExecError>)]) -> Option<usize> {
    let mut class_of: Vec<usize> = Vec::with_capacity(answers.len());
    let mut sizes: Vec<usize> = Vec::new();
    let mut heads: Vec<usize> = Vec::new();
    for (i, (_, outcome)) in answers.iter().enumerate() {
        let existing = match outcome {
            Ok(res) => heads.iter().position(|&h| match &answers[h].1 {
                Ok(head) => exact_match(res, head),
                Err(_) => false,
            }),
            Err(_) => None,
        };
        match existing {
            Some(c) => {
                sizes[c] += 1;
                class_of.push(c);
            }
            None => {
                heads.push(i);
                sizes.push(1);
                class_of.push(heads.len() - 1);
            }
        }
    }
    // Classes are numbered by first member, so the first maximal class also
    // holds the lowest index.
    let best = sizes
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |acc, (c, &n)| match acc {
            Some((_, best_n)) if best_n >= n => acc,
            _ => Some((c, n)),
        })?;
    Some(heads[best.0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Accuracy of the first sample of each group (the greedy analogue).
    pub ex: f64,
    /// Mean over questions of `1[voted answer correct] * sqrt(t_gold / t_pred)`.
    pub ves: f64,
    pub mean_tool_calls: f64,
    pub mean_response_chars: f64,
    /// Accuracy of the self-consistency vote over the first `k` samples.
    pub voting_ex: f64,
    /// Share of questions with at least one correct answer among `k` samples.
    pub pass_at_k: f64,
    pub questions: usize,
    pub k: usize,
}

/// Per-question outcome used by [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionOutcome {
    pub correct: Vec<bool>,
    pub voted: usize,
}

fn answer_outcome(traj: &Trajectory, database_id: &str, executor: &SqlExecutor) -> Result<ExecutionResult, ExecError> {
    match traj.answer_sql().filter(|s| !s.is_empty()) {
        Some(sql) => executor.execute(sql, database_id, &Limits::uncapped()),
        None => Err(ExecError::new(ExecErrorKind::Syntax, "no answer")),
    }
}

pub fn question_outcome(group: &Group, k: usize, executor: &SqlExecutor) -> Result<QuestionOutcome, HarnessError> {
    let gold = executor.execute(&group.gold_sql, &group.database_id, &Limits::uncapped())?;
    let answers: Vec<(Option<&str>, Result<ExecutionResult, ExecError>)> = group
        .trajectories
        .iter()
        .take(k)
        .map(|t| (t.answer_sql(), answer_outcome(t, &group.database_id, executor)))
        .collect();
    let correct = answers
        .iter()
        .map(|(_, r)| matches!(r, Ok(res) if exact_match(res, &gold)))
        .collect();
    let voted = select_self_consistent(&answers).unwrap_or(0);
    Ok(QuestionOutcome { correct, voted })
}

pub fn evaluate(groups: &[Group], k: usize, executor: &SqlExecutor) -> Result<EvalMetrics, HarnessError> {
    if groups.is_empty() {
        return Err(HarnessError::NoQuestions);
    }
    if k == 0 {
        return Err(HarnessError::ZeroK);
    }
    if let Some(g) = groups.iter().find(|g| g.size() < k) {
        return Err(HarnessError::GroupTooSmall {
            prompt_id: g.prompt_id.clone(),
            size: g.size(),
            k,
        });
    }
    let mut greedy = 0.0;
    let mut voting = 0.0;
    let mut pass = 0.0;
    let mut ves = 0.0;
    let mut tool_calls = 0usize;
    let mut chars = 0usize;
    let mut samples = 0usize;
    for group in groups {
        let outcome = question_outcome(group, k, executor)?;
        greedy += f64::from(u8::from(outcome.correct[0]));
        pass += f64::from(u8::from(outcome.correct.iter().any(|c| *c)));
        if outcome.correct[outcome.voted] {
            voting += 1.0;
            let pred_sql = group.trajectories[outcome.voted]
                .answer_sql()
                .expect("correct answers exist");
            let t_gold = executor.timed_execute(&group.gold_sql, &group.database_id, VES_REPEATS)?;
            let t_pred = executor.timed_execute(pred_sql, &group.database_id, VES_REPEATS)?;
            ves += (t_gold.as_secs_f64() / t_pred.as_secs_f64().max(f64::MIN_POSITIVE)).sqrt();
        }
        for traj in group.trajectories.iter().take(k) {
            tool_calls += traj.steps.len();
            chars += traj.source.chars().count();
            samples += 1;
        }
    }
    let n = groups.len() as f64;
    Ok(EvalMetrics {
        ex: greedy / n,
        ves: ves / n,
        mean_tool_calls: tool_calls as f64 / samples as f64,
        mean_response_chars: chars as f64 / samples as f64,
        voting_ex: voting / n,
        pass_at_k: pass / n,
        questions: groups.len(),
        k,
    })
}
