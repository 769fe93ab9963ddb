//! Shared fixtures for integration tests: the vendored Spider dev split and
//! small synthetic databases built from its schemas.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use petsql::catalog::{DatabaseCatalog, DbSchema};
use rusqlite::Connection;
use serde::Deserialize;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[derive(Debug, Clone, Deserialize)]
pub struct DevExample {
    pub db_id: String,
    pub question: String,
    pub query: String,
}

pub fn dev_examples() -> Vec<DevExample> {
    let text = std::fs::read_to_string(fixture_dir().join("spider_dev/dev.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn dev_catalog() -> DatabaseCatalog {
    petsql::catalog::load_catalog(&fixture_dir().join("spider_dev/tables.json")).unwrap()
}

/// One line of the offline reference-parser output for a dev instance.
#[derive(Debug, Clone)]
pub struct OfficialParse {
    pub hardness: String,
    pub parsed: bool,
    pub tables: BTreeSet<String>,
}

/// Hardness labels and table sets produced offline by the reference parser
/// (see `tests/oracle/spider_oracle.py`).
pub fn official_parses() -> Vec<OfficialParse> {
    let text =
        std::fs::read_to_string(fixture_dir().join("spider_dev/official_parse.tsv")).unwrap();
    text.lines()
        .map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            OfficialParse {
                hardness: fields[1].to_string(),
                parsed: fields[2] == "1",
                tables: fields
                    .get(3)
                    .map(|t| {
                        t.split(',')
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default(),
            }
        })
        .collect()
}

pub const SYNTHETIC_ROWS: usize = 5;

fn synthetic_value(declared_type: &str, column: &str, row: usize) -> rusqlite::types::Value {
    use rusqlite::types::Value;
    match declared_type {
        "number" | "boolean" => Value::Integer(row as i64 + 1),
        _ => Value::Text(format!("{} {}", column.to_lowercase(), row + 1)),
    }
}

/// Build a small deterministic SQLite database for `schema` at
/// `<dir>/<db_id>/<db_id>.sqlite`. Integer columns hold 1..=n so joins on
/// key columns line up.
pub fn synthesize_db(schema: &DbSchema, dir: &Path) -> PathBuf {
    let path = petsql::catalog::database_file(dir, &schema.db_id);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    if path.exists() {
        return path;
    }
    let mut conn = Connection::open(&path).unwrap();
    let tx = conn.transaction().unwrap();
    for table in &schema.tables {
        if table.name.eq_ignore_ascii_case("sqlite_sequence") {
            // Reserved name: SQLite creates it for the first AUTOINCREMENT table.
            tx.execute_batch("CREATE TABLE petsql_autoinc (id INTEGER PRIMARY KEY AUTOINCREMENT);")
                .unwrap();
        } else {
            let cols: Vec<String> = table
                .columns
                .iter()
                .map(|c| {
                    let affinity = if c.declared_type == "number" {
                        "INTEGER"
                    } else {
                        "TEXT"
                    };
                    format!("\"{}\" {affinity}", c.name.replace('"', "\"\""))
                })
                .collect();
            tx.execute_batch(&format!(
                "CREATE TABLE \"{}\" ({});",
                table.name.replace('"', "\"\""),
                cols.join(", ")
            ))
            .unwrap();
        }
        let placeholders = vec!["?"; table.columns.len()].join(", ");
        let insert = format!(
            "INSERT INTO \"{}\" VALUES ({placeholders})",
            table.name.replace('"', "\"\"")
        );
        for row in 0..SYNTHETIC_ROWS {
            let values: Vec<rusqlite::types::Value> = table
                .columns
                .iter()
                .map(|c| synthetic_value(&c.declared_type, &c.name, row))
                .collect();
            tx.execute(&insert, rusqlite::params_from_iter(values))
                .unwrap();
        }
    }
    tx.commit().unwrap();
    path
}

/// Directory holding one database per dev schema: the real Spider
/// databases when `PETSQL_SPIDER_DIR` is set, synthetic ones otherwise.
pub fn dev_database_dir(scratch: &Path) -> (PathBuf, bool) {
    if let Ok(dir) = std::env::var("PETSQL_SPIDER_DIR") {
        return (PathBuf::from(dir), true);
    }
    for schema in dev_catalog().iter() {
        synthesize_db(schema, scratch);
    }
    (scratch.to_path_buf(), false)
}

/// A runnable mock setup: Spider-layout data root over synthetic databases,
/// a PreSQL model and three FinSQL models answering from fixtures.
pub struct MockRun {
    pub root: PathBuf,
    pub config_path: PathBuf,
}

/// Questions are the first `n_questions` dev examples on `dbs`; the next
/// `n_train` become the demonstration pool. Models `pre`, `f1` and `f2`
/// answer the gold query; `f3` always answers `SELECT 0`.
pub fn mock_run(
    root: &Path,
    dbs: &[&str],
    n_questions: usize,
    n_train: usize,
    extra_toml: &str,
) -> MockRun {
    use petsql::pipeline::{write_mock_fixtures, Pipeline, Question, RunConfig};
    use std::collections::BTreeMap;

    let data = root.join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::copy(
        fixture_dir().join("spider_dev/tables.json"),
        data.join("tables.json"),
    )
    .unwrap();
    let db_dir = data.join("database");
    for schema in dev_catalog().iter() {
        synthesize_db(schema, &db_dir);
    }
    let chosen: Vec<DevExample> = dev_examples()
        .into_iter()
        .filter(|e| dbs.contains(&e.db_id.as_str()))
        .collect();
    assert!(
        chosen.len() >= n_questions + n_train,
        "not enough dev examples"
    );
    let to_json = |xs: &[DevExample]| {
        serde_json::Value::Array(
            xs.iter()
                .map(|e| serde_json::json!({"db_id": e.db_id, "question": e.question, "query": e.query}))
                .collect(),
        )
        .to_string()
    };
    std::fs::write(data.join("dev.json"), to_json(&chosen[..n_questions])).unwrap();
    std::fs::write(
        data.join("train.json"),
        to_json(&chosen[n_questions..n_questions + n_train]),
    )
    .unwrap();

    let fixtures = root.join("fixtures");
    std::fs::create_dir_all(&fixtures).unwrap();
    let config = format!(
        r#"
run_id = "mock"
data_root = "data"
output_dir = "{out}"
presql_model = "pre"
finsql_models = ["f1", "f2", "f3"]
workers = 2
timeout_ms = 5000
{extra_toml}

[files]
train = ["train.json"]

[[models]]
model_id = "pre"
api_style = "mock"
mock_fixtures = "fixtures/pre.json"

[[models]]
model_id = "f1"
api_style = "mock"
mock_fixtures = "fixtures/fin.json"

[[models]]
model_id = "f2"
api_style = "mock"
mock_fixtures = "fixtures/fin.json"

[[models]]
model_id = "f3"
api_style = "mock"
mock_fallback = "SELECT 0"
"#,
        out = root.join("out").display()
    );
    let config_path = root.join("run.toml");
    std::fs::write(&config_path, config).unwrap();

    // Render the exact prompts the run will send and answer them.
    let cfg = RunConfig::load(&config_path).unwrap();
    let catalog = dev_catalog();
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let questions: Vec<Question> = petsql::pipeline::load_questions(&cfg.questions_path()).unwrap();
    let mut pre = BTreeMap::new();
    let mut fin = BTreeMap::new();
    for q in &questions {
        let gold = q.gold.clone().unwrap();
        let (_, demos) = pipeline.retrieve(q).unwrap();
        let prompt = pipeline.presql_prompt(q, &demos).unwrap().render();
        pre.insert(
            petsql::gateway::prompt_hash(&prompt),
            format!("```sql\n{gold}\n```"),
        );
        let linked = petsql::sqlanalysis::linked_tables(&gold, catalog.get(&q.db_id).unwrap())
            .unwrap()
            .tables;
        let pruned = (!linked.is_empty()).then_some(&linked);
        let prompt = pipeline.finsql_prompt(q, &demos, pruned).unwrap().render();
        fin.insert(petsql::gateway::prompt_hash(&prompt), format!("{gold};"));
    }
    write_mock_fixtures(&fixtures.join("pre.json"), &pre).unwrap();
    write_mock_fixtures(&fixtures.join("fin.json"), &fin).unwrap();
    MockRun {
        root: root.to_path_buf(),
        config_path,
    }
}
