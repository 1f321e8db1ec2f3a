//! Sandboxed SQL execution over embedded SQLite databases, plus the result
//! algebra rewards are built on (exact match, cell flattening, feedback
//! serialization).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use rusqlite::config::DbConfig;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_FEEDBACK_ROWS: usize = 50;
pub const DEFAULT_WORKERS: usize = 8;

/// Canonical form of SQL `NULL` inside a [`CellSet`]. The embedded NUL bytes
/// keep it from colliding with any ordinary text value.
pub const NULL_SENTINEL: &str = "\u{0}NULL\u{0}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    /// Builds a real cell, rejecting NaN and infinities.
    pub fn real(value: f64) -> Option<Cell> {
        value.is_finite().then_some(Cell::Real(value))
    }

    /// Canonical string used for set membership and row comparison.
    ///
    /// Integers print in decimal, reals in shortest round-trip form (so
    /// `2.0` and `2` coincide), text verbatim, blobs as `X'..'` hex.
    pub fn canonical(&self) -> String {
        match self {
            Cell::Null => NULL_SENTINEL.to_string(),
            Cell::Integer(v) => v.to_string(),
            Cell::Real(v) => {
                if *v == 0.0 {
                    "0".to_string()
                } else {
                    format!("{v}")
                }
            }
            Cell::Text(s) => s.clone(),
            Cell::Blob(bytes) => {
                let mut out = String::with_capacity(bytes.len() * 2 + 3);
                out.push_str("X'");
                for b in bytes {
                    out.push_str(&format!("{b:02X}"));
                }
                out.push('\'');
                out
            }
        }
    }

    fn display(&self) -> String {
        match self {
            Cell::Null => "NULL".to_string(),
            Cell::Text(s) => s.replace('\n', "\\n"),
            other => other.canonical(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
    pub truncated_rows: bool,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl ExecutionResult {
    /// Builds a result from in-memory rows, checking row widths and cells.
    pub fn from_rows(columns: Vec<String>, rows: Vec<Vec<Cell>>) -> Result<Self, ExecError> {
        if let Some(bad) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(ExecError::new(
                ExecErrorKind::EngineError,
                format!("row {bad} has {} cells, expected {}", rows[bad].len(), columns.len()),
            ));
        }
        if rows
            .iter()
            .flatten()
            .any(|c| matches!(c, Cell::Real(v) if !v.is_finite()))
        {
            return Err(ExecError::new(ExecErrorKind::EngineError, "non-finite real value"));
        }
        Ok(ExecutionResult {
            columns,
            rows,
            elapsed: Duration::ZERO,
            truncated_rows: false,
        })
    }

    fn canonical_rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::canonical).collect())
            .collect();
        rows.sort();
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecErrorKind {
    Syntax,
    Timeout,
    ReadOnlyViolation,
    MissingDatabase,
    EngineError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

impl ExecError {
    pub fn new(kind: ExecErrorKind, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.is_empty() {
            message = format!("{kind:?}");
        }
        ExecError { kind, message }
    }
}

/// Set of canonical cell strings, `E(.)` for a result.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CellSet(BTreeSet<String>);

impl CellSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, value: &str) -> bool {
        self.0.contains(value)
    }

    pub fn intersection_len(&self, other: &CellSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl FromIterator<String> for CellSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        CellSet(iter.into_iter().collect())
    }
}

/// Execution accuracy predicate: equal column counts and equal multisets of
/// rows under canonical cell comparison. Row order and column names are
/// ignored.
pub fn exact_match(pred: &ExecutionResult, gold: &ExecutionResult) -> bool {
    pred.columns.len() == gold.columns.len()
        && pred.rows.len() == gold.rows.len()
        && pred.canonical_rows() == gold.canonical_rows()
}

pub fn flatten_cells(res: &ExecutionResult) -> CellSet {
    res.rows.iter().flatten().map(Cell::canonical).collect()
}

const TRUNCATION_MARKER: &str = "...[truncated]";

/// Renders an execution outcome as tool feedback of at most `max_chars`
/// characters.
///
/// ```text
/// | name | age |
/// | Alice | 30 |
/// (1 row)
/// ```
pub fn serialize_feedback(outcome: &Result<ExecutionResult, ExecError>, max_chars: usize) -> String {
    let full = match outcome {
        Err(err) => format!("Error: {}", err.message),
        Ok(res) => {
            let mut out = String::new();
            out.push_str(&table_line(res.columns.iter().map(|c| c.replace('\n', "\\n"))));
            for row in &res.rows {
                out.push_str(&table_line(row.iter().map(Cell::display)));
            }
            let n = res.rows.len();
            let noun = if n == 1 { "row" } else { "rows" };
            if res.truncated_rows {
                out.push_str(&format!("({n} {noun} shown, more truncated)"));
            } else {
                out.push_str(&format!("({n} {noun})"));
            }
            out
        }
    };
    cap_chars(full, max_chars)
}

fn table_line(cells: impl Iterator<Item = String>) -> String {
    let mut line = String::from("|");
    for cell in cells {
        line.push(' ');
        line.push_str(&cell);
        line.push_str(" |");
    }
    line.push('\n');
    line
}

fn cap_chars(text: String, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text;
    }
    let marker_len = TRUNCATION_MARKER.chars().count();
    if max_chars < marker_len {
        return text.chars().take(max_chars).collect();
    }
    let mut out: String = text.chars().take(max_chars - marker_len).collect();
    out.push_str(TRUNCATION_MARKER);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub timeout: Duration,
    /// `None` means uncapped.
    pub max_rows: Option<usize>,
}

impl Limits {
    /// Limits for tool feedback during rollouts.
    pub fn feedback() -> Self {
        Limits {
            timeout: DEFAULT_TIMEOUT,
            max_rows: Some(DEFAULT_FEEDBACK_ROWS),
        }
    }

    /// Limits for gold and scoring executions: no row cap.
    pub fn uncapped() -> Self {
        Limits {
            timeout: DEFAULT_TIMEOUT,
            max_rows: None,
        }
    }
}

impl Default for Limits {
    fn default() -> Self {
        Limits::feedback()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseEntry {
    pub database_id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry directory {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, #[source] serde_json::Error),
    #[error("duplicate database id {0:?}")]
    Duplicate(String),
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Databases keyed by id.
///
/// Loaded from a directory: either a `manifest.json` listing
/// `{database_id, path, description}` entries (paths relative to the
/// directory), or, without a manifest, every `*.sqlite` / `*.db` file keyed by
/// its file stem.
#[derive(Debug, Clone, Default)]
pub struct DatabaseRegistry {
    root: Option<PathBuf>,
    entries: BTreeMap<String, DatabaseEntry>,
}

impl DatabaseRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref().to_path_buf();
        let mut registry = DatabaseRegistry {
            root: Some(dir.clone()),
            entries: BTreeMap::new(),
        };
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            let raw = std::fs::read_to_string(&manifest)
                .map_err(|e| RegistryError::Io(manifest.clone(), e))?;
            let listed: Vec<DatabaseEntry> =
                serde_json::from_str(&raw).map_err(|e| RegistryError::Manifest(manifest.clone(), e))?;
            for mut entry in listed {
                if entry.path.is_relative() {
                    entry.path = dir.join(&entry.path);
                }
                registry.insert(entry)?;
            }
            return Ok(registry);
        }
        let listing = std::fs::read_dir(&dir).map_err(|e| RegistryError::Io(dir.clone(), e))?;
        let mut paths = Vec::new();
        for item in listing {
            let path = item.map_err(|e| RegistryError::Io(dir.clone(), e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if path.is_file() && (ext == "sqlite" || ext == "db") {
                paths.push(path);
            }
        }
        paths.sort();
        for path in paths {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            registry.insert(DatabaseEntry {
                database_id: id,
                path,
                description: String::new(),
            })?;
        }
        Ok(registry)
    }

    pub fn insert(&mut self, entry: DatabaseEntry) -> Result<(), RegistryError> {
        if self.entries.contains_key(&entry.database_id) {
            return Err(RegistryError::Duplicate(entry.database_id));
        }
        self.entries.insert(entry.database_id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, database_id: &str) -> Option<&DatabaseEntry> {
        self.entries.get(database_id)
    }

    /// Registered ids in sorted order.
    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }
}

/// FIFO admission gate bounding the number of simultaneous statements.
#[derive(Debug)]
struct WorkerGate {
    capacity: usize,
    state: Mutex<GateState>,
    cond: Condvar,
}

#[derive(Debug, Default)]
struct GateState {
    next_ticket: u64,
    next_admit: u64,
    active: usize,
}

struct GatePermit<'a>(&'a WorkerGate);

impl WorkerGate {
    fn new(capacity: usize) -> Self {
        WorkerGate {
            capacity: capacity.max(1),
            state: Mutex::new(GateState::default()),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = state.next_ticket;
        state.next_ticket += 1;
        while !(state.next_admit == ticket && state.active < self.capacity) {
            state = self.cond.wait(state).unwrap_or_else(|p| p.into_inner());
        }
        state.next_admit += 1;
        state.active += 1;
        self.cond.notify_all();
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut state = self.0.state.lock().unwrap_or_else(|p| p.into_inner());
        state.active -= 1;
        self.0.cond.notify_all();
    }
}

/// Read-only SQL executor over a [`DatabaseRegistry`].
///
/// Cloning shares the registry and the worker bound.
#[derive(Debug, Clone)]
pub struct SqlExecutor {
    registry: Arc<RwLock<DatabaseRegistry>>,
    gate: Arc<WorkerGate>,
}

/// Leading keywords rejected before the engine ever sees the statement.
const DENIED_KEYWORDS: &[&str] = &[
    "insert", "update", "delete", "replace", "upsert", "merge", "drop", "create", "alter",
    "truncate", "attach", "detach", "vacuum", "reindex", "analyze", "begin", "commit", "end",
    "rollback", "savepoint", "release", "grant", "revoke",
];

impl SqlExecutor {
    pub fn new(registry: DatabaseRegistry) -> Self {
        Self::with_workers(registry, DEFAULT_WORKERS)
    }

    pub fn with_workers(registry: DatabaseRegistry, workers: usize) -> Self {
        SqlExecutor {
            registry: Arc::new(RwLock::new(registry)),
            gate: Arc::new(WorkerGate::new(workers)),
        }
    }

    pub fn workers(&self) -> usize {
        self.gate.capacity
    }

    pub fn database_ids(&self) -> Vec<String> {
        self.registry.read().unwrap_or_else(|p| p.into_inner()).ids()
    }

    pub fn has_database(&self, database_id: &str) -> bool {
        self.registry
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(database_id)
            .is_some()
    }

    /// Re-reads the registry directory, picking up added or removed
    /// databases. A registry built in memory is left untouched.
    pub fn reload(&self) -> Result<usize, RegistryError> {
        let root = self
            .registry
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .root()
            .map(Path::to_path_buf);
        let Some(root) = root else {
            return Ok(self.database_ids().len());
        };
        let fresh = DatabaseRegistry::from_dir(root)?;
        let n = fresh.len();
        *self.registry.write().unwrap_or_else(|p| p.into_inner()) = fresh;
        Ok(n)
    }

    pub fn execute(
        &self,
        sql: &str,
        database_id: &str,
        limits: &Limits,
    ) -> Result<ExecutionResult, ExecError> {
        let sql = sql.trim();
        if sql.is_empty() {
            return Err(ExecError::new(ExecErrorKind::Syntax, "empty statement"));
        }
        deny_writes(sql)?;
        let path = {
            let registry = self.registry.read().unwrap_or_else(|p| p.into_inner());
            let entry = registry.get(database_id).ok_or_else(|| {
                ExecError::new(
                    ExecErrorKind::MissingDatabase,
                    format!("unknown database: {database_id}"),
                )
            })?;
            entry.path.clone()
        };
        if !path.is_file() {
            return Err(ExecError::new(
                ExecErrorKind::MissingDatabase,
                format!("database file missing: {database_id}"),
            ));
        }
        let _permit = self.gate.acquire();
        run_statement(&path, sql, limits)
    }

    /// Median wall-clock time of `repeats` uncapped executions.
    pub fn timed_execute(
        &self,
        sql: &str,
        database_id: &str,
        repeats: usize,
    ) -> Result<Duration, ExecError> {
        let repeats = repeats.max(3);
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            samples.push(self.execute(sql, database_id, &Limits::uncapped())?.elapsed);
        }
        samples.sort();
        Ok(samples[samples.len() / 2])
    }
}

fn deny_writes(sql: &str) -> Result<(), ExecError> {
    let body = strip_leading_comments(sql);
    let keyword: String = body
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    if DENIED_KEYWORDS.contains(&keyword.as_str()) {
        return Err(ExecError::new(
            ExecErrorKind::ReadOnlyViolation,
            format!(
                "read-only violation: {} statements are not permitted",
                keyword.to_ascii_uppercase()
            ),
        ));
    }
    if keyword == "pragma" && body.contains('=') {
        return Err(ExecError::new(
            ExecErrorKind::ReadOnlyViolation,
            "read-only violation: PRAGMA assignments are not permitted",
        ));
    }
    Ok(())
}

fn strip_leading_comments(mut sql: &str) -> &str {
    loop {
        sql = sql.trim_start_matches(|c: char| c.is_whitespace() || c == '(');
        if let Some(rest) = sql.strip_prefix("--") {
            sql = rest.split_once('\n').map(|(_, r)| r).unwrap_or("");
        } else if let Some(rest) = sql.strip_prefix("/*") {
            sql = rest.split_once("*/").map(|(_, r)| r).unwrap_or("");
        } else {
            return sql;
        }
    }
}

fn engine_error(err: rusqlite::Error) -> ExecError {
    ExecError::new(ExecErrorKind::EngineError, err.to_string())
}

fn sqlite_message(err: &rusqlite::Error) -> String {
    let msg = match err {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    };
    plain_column_message(&msg)
}

/// Recent SQLite builds quote the identifier in "no such column" errors and
/// append a hint about string literals; feedback keeps the bare form.
fn plain_column_message(msg: &str) -> String {
    let Some(rest) = msg.strip_prefix("no such column: ") else {
        return msg.to_string();
    };
    let name = rest.split(" - should this be").next().unwrap_or(rest);
    let name = name
        .strip_prefix('"')
        .and_then(|n| n.strip_suffix('"'))
        .map(|n| n.replace("\"\"", "\""))
        .unwrap_or_else(|| name.to_string());
    format!("no such column: {name}")
}

fn run_statement(path: &Path, sql: &str, limits: &Limits) -> Result<ExecutionResult, ExecError> {
    let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    let conn = Connection::open_with_flags(path, flags).map_err(|e| {
        ExecError::new(
            ExecErrorKind::MissingDatabase,
            format!("cannot open database: {}", sqlite_message(&e)),
        )
    })?;
    // Unresolved double-quoted identifiers must not silently become strings.
    conn.set_db_config(DbConfig::SQLITE_DBCONFIG_DQS_DML, false)
        .map_err(engine_error)?;
    conn.set_db_config(DbConfig::SQLITE_DBCONFIG_DQS_DDL, false)
        .map_err(engine_error)?;
    conn.pragma_update(None, "query_only", true).map_err(engine_error)?;

    let started = Instant::now();
    let deadline = started + limits.timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
    let timed_out = |err: &rusqlite::Error| {
        matches!(err, rusqlite::Error::SqliteFailure(e, _) if e.code == rusqlite::ErrorCode::OperationInterrupted)
            || Instant::now() >= deadline
    };
    let timeout_error = || {
        ExecError::new(
            ExecErrorKind::Timeout,
            format!("statement exceeded {} ms", limits.timeout.as_millis()),
        )
    };

    let mut stmt = match conn.prepare(sql) {
        Ok(stmt) => stmt,
        Err(rusqlite::Error::MultipleStatement) => {
            return Err(ExecError::new(
                ExecErrorKind::Syntax,
                "only a single statement is allowed",
            ))
        }
        Err(e) if timed_out(&e) => return Err(timeout_error()),
        Err(e) => return Err(ExecError::new(ExecErrorKind::Syntax, sqlite_message(&e))),
    };
    if !stmt.readonly() {
        return Err(ExecError::new(
            ExecErrorKind::ReadOnlyViolation,
            "read-only violation: statement modifies the database",
        ));
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
    let width = columns.len();
    let mut rows_out = Vec::new();
    let mut truncated_rows = false;
    let mut rows = stmt.query([]).map_err(|e| {
        if timed_out(&e) {
            timeout_error()
        } else {
            ExecError::new(ExecErrorKind::EngineError, sqlite_message(&e))
        }
    })?;
    loop {
        let row = match rows.next() {
            Ok(Some(row)) => row,
            Ok(None) => break,
            Err(e) if timed_out(&e) => return Err(timeout_error()),
            Err(rusqlite::Error::SqliteFailure(e, msg))
                if e.code == rusqlite::ErrorCode::ReadOnly =>
            {
                return Err(ExecError::new(
                    ExecErrorKind::ReadOnlyViolation,
                    msg.unwrap_or_else(|| "attempt to write a readonly database".into()),
                ))
            }
            Err(e) => return Err(ExecError::new(ExecErrorKind::EngineError, sqlite_message(&e))),
        };
        if limits.max_rows.is_some_and(|cap| rows_out.len() >= cap) {
            truncated_rows = true;
            break;
        }
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            let cell = match row.get_ref(i).map_err(engine_error)? {
                ValueRef::Null => Cell::Null,
                ValueRef::Integer(v) => Cell::Integer(v),
                ValueRef::Real(v) => Cell::real(v).ok_or_else(|| {
                    ExecError::new(ExecErrorKind::EngineError, "non-finite real value in result")
                })?,
                ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
            };
            cells.push(cell);
        }
        rows_out.push(cells);
    }
    Ok(ExecutionResult {
        columns,
        rows: rows_out,
        elapsed: started.elapsed(),
        truncated_rows,
    })
}

impl fmt::Display for ExecErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ExecErrorKind::Syntax => "syntax",
            ExecErrorKind::Timeout => "timeout",
            ExecErrorKind::ReadOnlyViolation => "read_only_violation",
            ExecErrorKind::MissingDatabase => "missing_database",
            ExecErrorKind::EngineError => "engine_error",
        };
        f.write_str(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn people() -> (tempfile::TempDir, SqlExecutor) {
        let dir = tempfile::tempdir().unwrap();
        let registry = fixtures::materialize(dir.path()).unwrap();
        (dir, SqlExecutor::new(registry))
    }

    fn table(rows: Vec<Vec<Cell>>) -> ExecutionResult {
        let width = rows.first().map(|r| r.len()).unwrap_or(1);
        ExecutionResult::from_rows((0..width).map(|i| format!("c{i}")).collect(), rows).unwrap()
    }

    #[test]
    fn constant_query() {
        let (_dir, exec) = people();
        let res = exec.execute("SELECT 1", "people", &Limits::feedback()).unwrap();
        assert_eq!(res.columns, vec!["1"]);
        assert_eq!(res.rows, vec![vec![Cell::Integer(1)]]);
    }

    #[test]
    fn malformed_keyword_is_syntax() {
        let (_dir, exec) = people();
        let err = exec.execute("SELEC 1", "people", &Limits::feedback()).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
    }

    #[test]
    fn fixture_names_in_id_order() {
        let (_dir, exec) = people();
        let res = exec
            .execute("SELECT name FROM people ORDER BY id", "people", &Limits::feedback())
            .unwrap();
        // Hand-enumerated fixture contents.
        let names: Vec<_> = res.rows.iter().map(|r| r[0].clone()).collect();
        assert_eq!(
            names,
            vec![
                Cell::Text("Alice".into()),
                Cell::Text("Bob".into()),
                Cell::Text("Carol".into())
            ]
        );
    }

    #[test]
    fn writes_are_rejected() {
        let (_dir, exec) = people();
        for sql in [
            "DROP TABLE people",
            "DELETE FROM people",
            "  insert into people values (9, 'x', 1)",
            "/* sneaky */ UPDATE people SET name = 'x'",
            "WITH t AS (SELECT 1) DELETE FROM people",
            "PRAGMA query_only = 0",
            "CREATE TABLE z (a)",
        ] {
            let err = exec.execute(sql, "people", &Limits::feedback()).unwrap_err();
            assert_eq!(err.kind, ExecErrorKind::ReadOnlyViolation, "{sql}: {err}");
        }
        let res = exec.execute("SELECT count(*) FROM people", "people", &Limits::feedback()).unwrap();
        assert_eq!(res.rows[0][0], Cell::Integer(3));
    }

    #[test]
    fn multiple_statements_rejected() {
        let (_dir, exec) = people();
        let err = exec
            .execute("SELECT 1; DROP TABLE people", "people", &Limits::feedback())
            .unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
        assert!(exec.execute("SELECT 1;", "people", &Limits::feedback()).is_ok());
    }

    #[test]
    fn unknown_database() {
        let (_dir, exec) = people();
        let err = exec.execute("SELECT 1", "nope", &Limits::feedback()).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::MissingDatabase);
    }

    #[test]
    fn double_quoted_unknown_column_is_an_error() {
        let (_dir, exec) = people();
        let err = exec
            .execute("SELECT name FROM people ORDER BY \"Enrollment (K-12)\"", "people", &Limits::feedback())
            .unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
        assert_eq!(err.message, "no such column: Enrollment (K-12)");
    }

    #[test]
    fn runaway_query_times_out() {
        let (_dir, exec) = people();
        let limits = Limits {
            timeout: Duration::from_millis(50),
            max_rows: Some(1),
        };
        let sql = "WITH RECURSIVE n(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM n) SELECT count(*) FROM n";
        let err = exec.execute(sql, "people", &limits).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Timeout);
    }

    #[test]
    fn row_cap_sets_flag() {
        let (_dir, exec) = people();
        let limits = Limits {
            timeout: DEFAULT_TIMEOUT,
            max_rows: Some(2),
        };
        let res = exec.execute("SELECT * FROM people", "people", &limits).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert!(res.truncated_rows);
        let res = exec.execute("SELECT * FROM people", "people", &Limits::uncapped()).unwrap();
        assert_eq!(res.rows.len(), 3);
        assert!(!res.truncated_rows);
    }

    #[test]
    fn exact_match_ignores_order_and_names() {
        let a = table(vec![
            vec![Cell::Integer(1), Cell::Text("x".into())],
            vec![Cell::Integer(2), Cell::Text("y".into())],
        ]);
        let mut b = a.clone();
        b.rows.reverse();
        b.columns = vec!["p".into(), "q".into()];
        // Oracle: sort then compare.
        let mut ra = a.rows.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>();
        let mut rb = b.rows.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>();
        ra.sort();
        rb.sort();
        assert_eq!(ra == rb, exact_match(&a, &b));
        assert!(exact_match(&a, &b));

        let mut c = a.clone();
        c.rows[1][1] = Cell::Text("z".into());
        assert!(!exact_match(&a, &c));

        let e1 = ExecutionResult::from_rows(vec!["a".into()], vec![]).unwrap();
        let e2 = ExecutionResult::from_rows(vec!["b".into()], vec![]).unwrap();
        assert!(exact_match(&e1, &e2));
        let e3 = ExecutionResult::from_rows(vec!["a".into(), "b".into()], vec![]).unwrap();
        assert!(!exact_match(&e1, &e3));
    }

    #[test]
    fn exact_match_is_multiset_not_set() {
        let a = table(vec![vec![Cell::Integer(1)], vec![Cell::Integer(1)]]);
        let b = table(vec![vec![Cell::Integer(1)]]);
        assert!(!exact_match(&a, &b));
    }

    #[test]
    fn flatten_examples() {
        let res = table(vec![
            vec![Cell::Integer(1), Cell::Text("Alice".into())],
            vec![Cell::Integer(2), Cell::Text("Alice".into())],
        ]);
        let set = flatten_cells(&res);
        let expected: CellSet = ["1", "2", "Alice"].into_iter().map(String::from).collect();
        assert_eq!(set, expected);

        let empty = ExecutionResult::from_rows(vec!["a".into()], vec![]).unwrap();
        assert!(flatten_cells(&empty).is_empty());

        let null = table(vec![vec![Cell::Null]]);
        let set = flatten_cells(&null);
        assert_eq!(set.len(), 1);
        assert!(set.contains(NULL_SENTINEL));
        assert!(!set.contains("NULL"));
    }

    #[test]
    fn canonical_numbers() {
        assert_eq!(Cell::Real(2.0).canonical(), "2");
        assert_eq!(Cell::Real(2.50).canonical(), "2.5");
        assert_eq!(Cell::Real(-0.0).canonical(), "0");
        assert_eq!(Cell::Real(0.1).canonical(), "0.1");
        assert_eq!(Cell::Integer(-7).canonical(), "-7");
        assert_eq!(Cell::Blob(vec![0xab, 1]).canonical(), "X'AB01'");
        assert!(Cell::real(f64::NAN).is_none());
        assert!(Cell::real(f64::INFINITY).is_none());
        let bad = ExecutionResult::from_rows(vec!["a".into()], vec![vec![Cell::Real(f64::NAN)]]);
        assert!(bad.is_err());
    }

    #[test]
    fn feedback_rendering() {
        let err = Err(ExecError::new(ExecErrorKind::Syntax, "no such column: x"));
        assert_eq!(serialize_feedback(&err, 256), "Error: no such column: x");

        let empty = Ok(ExecutionResult::from_rows(vec!["name".into()], vec![]).unwrap());
        assert_eq!(serialize_feedback(&empty, 256), "| name |\n(0 rows)");

        let one = Ok(ExecutionResult::from_rows(
            vec!["OpenDate".into()],
            vec![vec![Cell::Text("2006-08-29".into())]],
        )
        .unwrap());
        assert_eq!(serialize_feedback(&one, 256), "| OpenDate |\n| 2006-08-29 |\n(1 row)");

        let many = Ok(ExecutionResult::from_rows(
            vec!["n".into()],
            (0..100).map(|i| vec![Cell::Integer(i)]).collect(),
        )
        .unwrap());
        let text = serialize_feedback(&many, 64);
        assert!(text.chars().count() <= 64);
        assert!(text.ends_with(TRUNCATION_MARKER));
        assert_eq!(serialize_feedback(&many, 5).chars().count(), 5);
    }

    #[test]
    fn timed_execute_median() {
        let (_dir, exec) = people();
        let a = exec.timed_execute("SELECT * FROM people", "people", 5).unwrap();
        let b = exec.timed_execute("SELECT * FROM people", "people", 5).unwrap();
        assert!(a > Duration::ZERO && b > Duration::ZERO);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        // Loose stability bound for a desk-scale query; the floor absorbs
        // scheduler noise on sub-millisecond timings.
        assert!(hi <= lo * 5 + Duration::from_millis(2), "{a:?} vs {b:?}");
        let err = exec.timed_execute("SELEC", "people", 5).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
    }

    #[test]
    fn reload_picks_up_new_files() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::write_database(&dir.path().join("a.sqlite"), fixtures::PEOPLE_SQL).unwrap();
        let exec = SqlExecutor::new(DatabaseRegistry::from_dir(dir.path()).unwrap());
        assert_eq!(exec.database_ids(), vec!["a"]);
        fixtures::write_database(&dir.path().join("b.sqlite"), fixtures::PEOPLE_SQL).unwrap();
        assert_eq!(exec.reload().unwrap(), 2);
        assert_eq!(exec.database_ids(), vec!["a", "b"]);
    }

    #[test]
    fn worker_gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let gate = Arc::new(WorkerGate::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, live, peak) = (gate.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
