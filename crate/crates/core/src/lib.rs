//! Step-level credit assignment for tool-using Text-to-SQL policies.
//!
//! The pipeline runs left to right through the modules:
//! [`trajectory`] parses transcripts into steps, [`executor`] runs SQL
//! against read-only SQLite databases, [`rewards`] scores outcomes and steps,
//! [`credit`] turns group rewards into per-step advantages, and [`objective`]
//! broadcasts them to tokens for the clipped surrogate. [`harness`] drives
//! scripted rollouts and computes evaluation metrics.

pub mod credit;
pub mod executor;
pub mod fixtures;
pub mod harness;
pub mod objective;
pub mod rewards;
pub mod trajectory;

pub use credit::{grpo_advantages, step_advantages, CreditConfig, StepAdvantages, TrajectoryRewards};
pub use executor::{exact_match, flatten_cells, serialize_feedback, Cell, ExecError, ExecErrorKind, ExecutionResult, Limits, SqlExecutor};
pub use harness::{evaluate, run_group, select_self_consistent, EvalMetrics, HarnessConfig, Scenario};
pub use objective::{broadcast_advantages, surrogate_objective, ObjectiveConfig, TokenAlignment};
pub use rewards::{RewardLedger, Scorer, StepReward};
pub use trajectory::{parse_transcript, Group, Step, Trajectory, TrajectoryRecord};
