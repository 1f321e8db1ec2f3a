//! Built-in fixture databases and scenarios.
//!
//! `california_schools` is a five-school miniature of the schools / frpm /
//! satscores schema, sized so the two shipped case-study rollouts behave as
//! annotated: the K-12 enrollment leader opened on 2006-08-29, while the
//! school with the most 12th graders in `satscores` has no open date.

use std::path::Path;

use rusqlite::Connection;

use crate::executor::{DatabaseEntry, DatabaseRegistry, RegistryError, MANIFEST_FILE};
use crate::harness::Scenario;

pub const PEOPLE_SQL: &str = "
CREATE TABLE people (id INTEGER PRIMARY KEY, name TEXT NOT NULL, age INTEGER);
INSERT INTO people VALUES (1, 'Alice', 34), (2, 'Bob', 27), (3, 'Carol', 41);
";

pub const SCHOOLS_SQL: &str = r#"
CREATE TABLE schools (
    CDSCode TEXT PRIMARY KEY,
    School TEXT,
    County TEXT,
    OpenDate TEXT
);
CREATE TABLE frpm (
    CDSCode TEXT PRIMARY KEY REFERENCES schools (CDSCode),
    "School Name" TEXT,
    "Enrollment (K-12)" REAL
);
CREATE TABLE satscores (
    cds TEXT PRIMARY KEY REFERENCES schools (CDSCode),
    sname TEXT,
    enroll12 INTEGER
);
INSERT INTO schools VALUES
    ('01100170109835', 'Lincoln High', 'Alameda', '2006-08-29'),
    ('01100170112607', 'Oak Academy', 'Alameda', '1998-09-01'),
    ('01100170118489', 'Bayview Charter', 'Alameda', NULL),
    ('01100170123968', 'Hillcrest Elementary', 'Alameda', '1985-08-15'),
    ('01316170131763', 'Riverbend School', 'Contra Costa', '2011-08-22');
INSERT INTO frpm VALUES
    ('01100170109835', 'Lincoln High', 1820.0),
    ('01100170112607', 'Oak Academy', 640.0),
    ('01100170118489', 'Bayview Charter', 410.0),
    ('01100170123968', 'Hillcrest Elementary', 355.0),
    ('01316170131763', 'Riverbend School', 980.0);
INSERT INTO satscores VALUES
    ('01100170109835', 'Lincoln High', 402),
    ('01100170112607', 'Oak Academy', 150),
    ('01100170118489', 'Bayview Charter', 515),
    ('01316170131763', 'Riverbend School', 220);
"#;

pub const SHOP_SQL: &str = "
CREATE TABLE customers (id INTEGER PRIMARY KEY, name TEXT, city TEXT);
CREATE TABLE products (id INTEGER PRIMARY KEY, title TEXT, price REAL);
CREATE TABLE orders (
    id INTEGER PRIMARY KEY,
    customer_id INTEGER REFERENCES customers (id),
    product_id INTEGER REFERENCES products (id),
    quantity INTEGER
);
INSERT INTO customers VALUES
    (1, 'Ada', 'London'), (2, 'Grace', 'New York'), (3, 'Linus', 'Helsinki'), (4, 'Barbara', 'London');
INSERT INTO products VALUES
    (1, 'Keyboard', 49.5), (2, 'Monitor', 199.0), (3, 'Mouse', 19.25), (4, 'Cable', 5.0);
INSERT INTO orders VALUES
    (1, 1, 1, 2), (2, 1, 3, 1), (3, 2, 2, 1), (4, 3, 4, 10), (5, 4, 2, 2), (6, 4, 3, 3);
";

pub const DATABASES: &[(&str, &str, &str)] = &[
    ("people", PEOPLE_SQL, "three-row people table"),
    (
        "california_schools",
        SCHOOLS_SQL,
        "miniature schools / frpm / satscores schema",
    ),
    ("shop", SHOP_SQL, "customers, products and orders"),
];

const SCENARIO_SOURCES: &[(&str, &str)] = &[
    ("schools_case_study", include_str!("../fixtures/scenarios/schools_case_study.json")),
    ("people_oldest", include_str!("../fixtures/scenarios/people_oldest.json")),
    ("shop_london_spend", include_str!("../fixtures/scenarios/shop_london_spend.json")),
    ("shop_voting_trap", include_str!("../fixtures/scenarios/shop_voting_trap.json")),
];

/// Creates (or replaces) a database file from a SQL script.
pub fn write_database(path: &Path, script: &str) -> rusqlite::Result<()> {
    if path.exists() {
        let _ = std::fs::remove_file(path);
    }
    let conn = Connection::open(path)?;
    conn.execute_batch(script)?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("building fixture database {0}: {1}")]
    Sqlite(String, #[source] rusqlite::Error),
    #[error("writing manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Writes every fixture database plus a manifest into `dir` and returns the
/// resulting registry.
pub fn materialize(dir: &Path) -> Result<DatabaseRegistry, FixtureError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for (id, script, description) in DATABASES {
        let file = format!("{id}.sqlite");
        write_database(&dir.join(&file), script)
            .map_err(|e| FixtureError::Sqlite(id.to_string(), e))?;
        manifest.push(DatabaseEntry {
            database_id: id.to_string(),
            path: file.into(),
            description: description.to_string(),
        });
    }
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), body)?;
    Ok(DatabaseRegistry::from_dir(dir)?)
}

/// The shipped scenario suite, in a fixed order.
pub fn scenarios() -> Vec<Scenario> {
    SCENARIO_SOURCES
        .iter()
        .map(|(name, raw)| {
            serde_json::from_str(raw).unwrap_or_else(|e| panic!("fixture scenario {name}: {e}"))
        })
        .collect()
}

pub fn scenario(name: &str) -> Option<Scenario> {
    SCENARIO_SOURCES
        .iter()
        .position(|(n, _)| *n == name)
        .map(|i| scenarios().swap_remove(i))
}

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIO_SOURCES.iter().map(|(n, _)| *n).collect()
}

/// Raw JSON of a shipped scenario, as it would appear in a scenario file.
pub fn scenario_json(name: &str) -> Option<&'static str> {
    SCENARIO_SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, raw)| *raw)
}
