//! Outcome and process rewards for a single trajectory.
//!
//! The outcome reward is `format + execution` with `format ∈ {0, 1}` and
//! `execution ∈ {0, 2}`. Each interaction step earns a process reward
//! `hard · (1 + recall)` where `hard` gates out invalid or repeated actions
//! and `recall` is the share of gold result cells the step's result covers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{
    exact_match, flatten_cells, ExecError, ExecErrorKind, ExecutionResult, Limits, SqlExecutor,
};
use crate::trajectory::{check_format, Step, Trajectory};

/// Guard in the recall denominator.
pub const RECALL_EPS: f64 = 1e-6;

pub const FORMAT_REWARD: f64 = 1.0;
pub const EXECUTION_REWARD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReward {
    pub r_fmt: f64,
    pub r_exec: f64,
    pub total: f64,
}

impl OutcomeReward {
    pub fn new(r_fmt: f64, r_exec: f64) -> Self {
        OutcomeReward {
            r_fmt,
            r_exec,
            total: r_fmt + r_exec,
        }
    }

    pub fn success(&self) -> bool {
        self.r_exec > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub hard: f64,
    pub soft: f64,
    #[serde(rename = "proc")]
    pub process: f64,
}

impl StepReward {
    pub fn new(hard: f64, soft: f64) -> Self {
        StepReward {
            hard,
            soft,
            process: hard * (1.0 + soft),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLedger {
    pub outcome: OutcomeReward,
    pub steps: Vec<StepReward>,
}

impl RewardLedger {
    /// Ledger for a transcript that could not be parsed at all.
    pub fn format_invalid() -> Self {
        RewardLedger {
            outcome: OutcomeReward::new(0.0, 0.0),
            steps: Vec::new(),
        }
    }

    pub fn mean_hard(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.hard))
    }

    pub fn mean_soft(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.soft))
    }

    pub fn process_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.process).collect()
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

pub fn format_reward(traj: &Trajectory) -> f64 {
    if check_format(traj).ok {
        FORMAT_REWARD
    } else {
        0.0
    }
}

/// Normal form used for duplicate detection: unquoted text lowercased,
/// whitespace runs collapsed to one space, trailing semicolons dropped.
/// Quoted literals and identifiers are kept verbatim.
pub fn normalize_sql(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut chars = sql.trim().chars().peekable();
    let mut pending_space = false;
    // Everything before this byte offset is quoted text and is never trimmed.
    let mut protected = 0;
    while let Some(c) = chars.next() {
        let closing = match c {
            '\'' => Some('\''),
            '"' => Some('"'),
            '`' => Some('`'),
            '[' => Some(']'),
            _ => None,
        };
        if let Some(close) = closing {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
            while let Some(inner) = chars.next() {
                out.push(inner);
                if inner == close {
                    // Doubled quote is an escaped quote, not the end.
                    if close != ']' && chars.peek() == Some(&close) {
                        out.push(chars.next().expect("peeked"));
                        continue;
                    }
                    break;
                }
            }
            protected = out.len();
        } else if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        }
    }
    while out.len() > protected && (out.ends_with(';') || out.ends_with(' ')) {
        out.pop();
    }
    out
}

/// Validity gate for a step, given the outcome of executing its SQL (`None`
/// when the payload did not decode, so nothing was executed).
///
/// Zero when the action is undecodable, fails to compile, violates the
/// read-only sandbox, times out, or repeats an earlier step's SQL.
pub fn hard_constraint(
    step: &Step,
    history: &[Step],
    execution: Option<&Result<ExecutionResult, ExecError>>,
) -> f64 {
    let Some(sql) = step.parsed_sql.as_deref() else {
        return 0.0;
    };
    if let Some(Err(err)) = execution {
        if matches!(
            err.kind,
            ExecErrorKind::Syntax
                | ExecErrorKind::ReadOnlyViolation
                | ExecErrorKind::Timeout
                | ExecErrorKind::MissingDatabase
        ) {
            return 0.0;
        }
    }
    let normalized = normalize_sql(sql);
    let repeated = history
        .iter()
        .filter(|h| h.index < step.index)
        .filter_map(|h| h.parsed_sql.as_deref())
        .any(|prev| normalize_sql(prev) == normalized);
    if repeated {
        0.0
    } else {
        1.0
    }
}

/// Cell-level recall `|E(step) ∩ E(gold)| / (|E(gold)| + eps)`.
pub fn soft_recall(step_result: &ExecutionResult, gold_result: &ExecutionResult, eps: f64) -> f64 {
    let gold = flatten_cells(gold_result);
    let step = flatten_cells(step_result);
    step.intersection_len(&gold) as f64 / (gold.len() as f64 + eps)
}

/// Combines the gate and recall. Recall only counts when the gate is open and
/// the step actually produced a result.
pub fn process_reward(
    step: &Step,
    history: &[Step],
    execution: Option<&Result<ExecutionResult, ExecError>>,
    gold_result: &ExecutionResult,
    eps: f64,
) -> StepReward {
    let hard = hard_constraint(step, history, execution);
    let soft = match execution {
        Some(Ok(result)) if hard > 0.0 => soft_recall(result, gold_result, eps),
        _ => 0.0,
    };
    StepReward::new(hard, soft)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("missing database: {0}")]
    MissingDatabase(ExecError),
    #[error("gold SQL failed: {0}")]
    GoldFailed(ExecError),
}

impl From<ExecError> for ScoreError {
    fn from(err: ExecError) -> Self {
        if err.kind == ExecErrorKind::MissingDatabase {
            ScoreError::MissingDatabase(err)
        } else {
            ScoreError::GoldFailed(err)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub recall_eps: f64,
    /// Limits for step, answer and gold executions during scoring.
    pub limits: Limits,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            recall_eps: RECALL_EPS,
            limits: Limits::uncapped(),
        }
    }
}

/// Scores trajectories against gold SQL using a shared executor.
#[derive(Debug, Clone)]
pub struct Scorer {
    executor: SqlExecutor,
    config: RewardConfig,
}

impl Scorer {
    pub fn new(executor: SqlExecutor) -> Self {
        Self::with_config(executor, RewardConfig::default())
    }

    pub fn with_config(executor: SqlExecutor, config: RewardConfig) -> Self {
        Scorer { executor, config }
    }

    pub fn executor(&self) -> &SqlExecutor {
        &self.executor
    }

    pub fn gold_result(&self, gold_sql: &str, database_id: &str) -> Result<ExecutionResult, ScoreError> {
        Ok(self.executor.execute(gold_sql, database_id, &self.config.limits)?)
    }

    pub fn execution_reward(
        &self,
        answer_sql: Option<&str>,
        gold_sql: &str,
        database_id: &str,
    ) -> Result<f64, ScoreError> {
        let gold = self.gold_result(gold_sql, database_id)?;
        Ok(self.execution_reward_against(answer_sql, &gold, database_id))
    }

    pub fn execution_reward_against(
        &self,
        answer_sql: Option<&str>,
        gold: &ExecutionResult,
        database_id: &str,
    ) -> f64 {
        let Some(sql) = answer_sql.filter(|s| !s.trim().is_empty()) else {
            return 0.0;
        };
        match self.executor.execute(sql, database_id, &self.config.limits) {
            Ok(pred) if exact_match(&pred, gold) => EXECUTION_REWARD,
            _ => 0.0,
        }
    }

    pub fn score_trajectory(
        &self,
        traj: &Trajectory,
        gold_sql: &str,
        database_id: &str,
    ) -> Result<RewardLedger, ScoreError> {
        let gold = self.gold_result(gold_sql, database_id)?;
        Ok(self.score_with_gold(traj, &gold, database_id))
    }

    /// Scores against an already executed gold result.
    pub fn score_with_gold(
        &self,
        traj: &Trajectory,
        gold: &ExecutionResult,
        database_id: &str,
    ) -> RewardLedger {
        let outcome = OutcomeReward::new(
            format_reward(traj),
            self.execution_reward_against(traj.answer_sql(), gold, database_id),
        );
        let steps = traj
            .steps
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let execution = step
                    .parsed_sql
                    .as_deref()
                    .map(|sql| self.executor.execute(sql, database_id, &self.config.limits));
                process_reward(
                    step,
                    &traj.steps[..i],
                    execution.as_ref(),
                    gold,
                    self.config.recall_eps,
                )
            })
            .collect();
        RewardLedger { outcome, steps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::Cell;
    use crate::fixtures;
    use crate::trajectory::{encode_tool_payload, parse_transcript};

    fn scorer() -> (tempfile::TempDir, Scorer) {
        let dir = tempfile::tempdir().unwrap();
        let registry = fixtures::materialize(dir.path()).unwrap();
        (dir, Scorer::new(SqlExecutor::new(registry)))
    }

    fn transcript(steps: &[&str], answer: Option<&str>) -> Trajectory {
        let mut text = String::new();
        for sql in steps {
            text.push_str(&format!(
                "<reasoning>probe</reasoning>\n<tool_call>{}</tool_call>\n<result>ok</result>\n",
                encode_tool_payload(sql)
            ));
        }
        if let Some(answer) = answer {
            text.push_str(&format!("<reasoning>done</reasoning>\n<answer>{answer}</answer>"));
        }
        parse_transcript(&text, 10).unwrap()
    }

    fn texts(values: &[&str]) -> ExecutionResult {
        ExecutionResult::from_rows(
            vec!["v".into()],
            values.iter().map(|v| vec![Cell::Text(v.to_string())]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(format_reward(&transcript(&["SELECT 1"], Some("SELECT 1"))), 1.0);
        assert_eq!(format_reward(&transcript(&["SELECT 1"], None)), 0.0);
        let mut text = String::new();
        for i in 0..11 {
            text.push_str(&format!(
                "<reasoning>r</reasoning><tool_call>{}</tool_call><result>x</result>",
                encode_tool_payload(&format!("SELECT {i}"))
            ));
        }
        text.push_str("<reasoning>r</reasoning><answer>SELECT 1</answer>");
        let truncated = parse_transcript(&text, 10).unwrap();
        assert!(truncated.truncated);
        assert_eq!(format_reward(&truncated), 0.0);
    }

    #[test]
    fn execution_reward_cases() {
        let (_dir, s) = scorer();
        let gold = "SELECT name FROM people ORDER BY id";
        let reordered = "SELECT name FROM people ORDER BY name DESC";
        // Oracle: exact_match on the two results.
        let a = s.gold_result(gold, "people").unwrap();
        let b = s.gold_result(reordered, "people").unwrap();
        assert!(exact_match(&a, &b));
        assert_eq!(s.execution_reward(Some(reordered), gold, "people").unwrap(), 2.0);
        assert_eq!(s.execution_reward(None, gold, "people").unwrap(), 0.0);
        assert_eq!(s.execution_reward(Some("SELEC name"), gold, "people").unwrap(), 0.0);
        assert_eq!(
            s.execution_reward(Some("SELECT name FROM people WHERE id < 3"), gold, "people").unwrap(),
            0.0
        );
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_sql("SELECT  *\n FROM t ;"), "select * from t");
        assert_eq!(normalize_sql("select * from t"), "select * from t");
        assert_eq!(
            normalize_sql("SELECT 'Hello  World' FROM T"),
            "select 'Hello  World' from t"
        );
        assert_eq!(normalize_sql("SELECT 'it''s  X'"), "select 'it''s  X'");
        assert_eq!(normalize_sql("SELECT \"Enrollment (K-12)\""), "select \"Enrollment (K-12)\"");
        assert_ne!(normalize_sql("SELECT 'A'"), normalize_sql("SELECT 'a'"));
    }

    #[test]
    fn hard_constraint_cases() {
        let traj = transcript(&["SELECT name FROM people", "select name\n  FROM people;"], None);
        let ok: Result<ExecutionResult, ExecError> = Ok(texts(&["x"]));
        assert_eq!(hard_constraint(&traj.steps[0], &[], Some(&ok)), 1.0);
        assert_eq!(hard_constraint(&traj.steps[1], &traj.steps[..1], Some(&ok)), 0.0);

        let garbage = parse_transcript(
            "<reasoning>r</reasoning><tool_call>SELECT 1</tool_call><result>x</result>",
            10,
        )
        .unwrap();
        assert_eq!(hard_constraint(&garbage.steps[0], &[], None), 0.0);

        for kind in [ExecErrorKind::Syntax, ExecErrorKind::ReadOnlyViolation, ExecErrorKind::Timeout] {
            let err = Err(ExecError::new(kind, "x"));
            assert_eq!(hard_constraint(&traj.steps[0], &[], Some(&err)), 0.0);
        }
        let runtime = Err(ExecError::new(ExecErrorKind::EngineError, "integer overflow"));
        assert_eq!(hard_constraint(&traj.steps[0], &[], Some(&runtime)), 1.0);
    }

    #[test]
    fn recall_cases() {
        let gold = texts(&["A", "B", "C"]);
        let step = texts(&["A", "B", "C", "D", "E"]);
        let r = soft_recall(&step, &gold, 1e-6);
        assert_eq!(r, 3.0 / (3.0 + 1e-6));
        assert_eq!(soft_recall(&texts(&["X"]), &gold, 1e-6), 0.0);
        let empty = ExecutionResult::from_rows(vec!["v".into()], vec![]).unwrap();
        assert_eq!(soft_recall(&step, &empty, 1e-6), 0.0);
    }

    #[test]
    fn process_reward_cases() {
        let traj = transcript(&["SELECT 1"], None);
        let gold = texts(&["A", "B"]);
        let invalid = Err(ExecError::new(ExecErrorKind::Syntax, "x"));
        assert_eq!(process_reward(&traj.steps[0], &[], Some(&invalid), &gold, 1e-6).process, 0.0);

        let half = Ok(texts(&["A", "Z"]));
        let r = process_reward(&traj.steps[0], &[], Some(&half), &gold, 0.0);
        assert_eq!(r.soft, 0.5);
        assert_eq!(r.process, 1.5);

        let full = Ok(texts(&["A", "B"]));
        let r = process_reward(&traj.steps[0], &[], Some(&full), &gold, 1e-6);
        assert!((r.process - 2.0).abs() < 1e-5);

        let empty = Ok(ExecutionResult::from_rows(vec!["v".into()], vec![]).unwrap());
        let r = process_reward(&traj.steps[0], &[], Some(&empty), &gold, 1e-6);
        assert_eq!((r.hard, r.soft, r.process), (1.0, 0.0, 1.0));
    }

    #[test]
    fn zero_step_direct_answer() {
        let (_dir, s) = scorer();
        let traj = transcript(&[], Some("SELECT name FROM people WHERE age > 40"));
        let ledger = s
            .score_trajectory(&traj, "SELECT name FROM people WHERE id = 3", "people")
            .unwrap();
        assert!(ledger.steps.is_empty());
        assert_eq!(ledger.outcome, OutcomeReward::new(1.0, 2.0));
        assert_eq!(ledger.outcome.total, 3.0);
    }

    #[test]
    fn repeated_step_is_gated_even_with_full_recall() {
        let (_dir, s) = scorer();
        let traj = transcript(&["SELECT name FROM people", "SELECT name FROM people;"], Some("SELECT name FROM people"));
        let ledger = s.score_trajectory(&traj, "SELECT name FROM people", "people").unwrap();
        assert_eq!(ledger.steps[0].hard, 1.0);
        assert_eq!(ledger.steps[1].hard, 0.0);
        assert_eq!(ledger.steps[1].process, 0.0);
    }

    #[test]
    fn missing_database_propagates() {
        let (_dir, s) = scorer();
        let traj = transcript(&[], Some("SELECT 1"));
        assert!(matches!(
            s.score_trajectory(&traj, "SELECT 1", "nowhere"),
            Err(ScoreError::MissingDatabase(_))
        ));
    }

    #[test]
    fn ledger_json_shape() {
        let ledger = RewardLedger {
            outcome: OutcomeReward::new(1.0, 2.0),
            steps: vec![StepReward::new(1.0, 0.5)],
        };
        let json = serde_json::to_value(&ledger).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "outcome": {"r_fmt": 1.0, "r_exec": 2.0, "total": 3.0},
                "steps": [{"hard": 1.0, "soft": 0.5, "proc": 1.5}]
            })
        );
    }
}
