use std::path::{Path, PathBuf};
use std::process::Command;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/concert_singer")
}

fn petsql() -> Command {
    Command::new(env!("CARGO_BIN_EXE_petsql"))
}

/// Spider layout with the concert_singer fixture as the only database.
fn data_root(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let db_dir = root.join("database/concert_singer");
    std::fs::create_dir_all(&db_dir).unwrap();
    std::fs::copy(fixtures().join("tables.json"), root.join("tables.json")).unwrap();
    let conn = rusqlite::Connection::open(db_dir.join("concert_singer.sqlite")).unwrap();
    conn.execute_batch("PRAGMA foreign_keys = OFF;").unwrap();
    conn.execute_batch(&std::fs::read_to_string(fixtures().join("concert_singer.sql")).unwrap())
        .unwrap();
    let dev = r#"[
        {"db_id": "concert_singer", "question": "How many singers do we have?", "query": "SELECT count(*) FROM singer"},
        {"db_id": "concert_singer", "question": "What is 1?", "query": "SELECT 1"}
    ]"#;
    std::fs::write(root.join("dev.json"), dev).unwrap();
    root
}

#[test]
fn link_prints_tables_and_grade() {
    let dir = tempfile::tempdir().unwrap();
    let sql = dir.path().join("q.sql");
    std::fs::write(
        &sql,
        "SELECT count(*) FROM singer\nSELECT T1.Name FROM singer AS T1 JOIN singer_in_concert AS T2 ON T1.Singer_ID = T2.Singer_ID\n",
    )
    .unwrap();
    let out = petsql()
        .args(["link", "--sql-file"])
        .arg(&sql)
        .args(["--db", "concert_singer", "--tables"])
        .arg(fixtures().join("tables.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["singer\teasy", "singer,singer_in_concert\teasy"]);
}

#[test]
fn eval_reports_execution_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let root = data_root(dir.path());
    let gold = dir.path().join("gold.sql");
    std::fs::write(&gold, "SELECT count(*) FROM singer\tconcert_singer\nSELECT Name FROM singer ORDER BY Age\tconcert_singer\n").unwrap();
    let pred = dir.path().join("pred.sql");
    std::fs::write(
        &pred,
        "SELECT 3\nSELECT Name FROM singer ORDER BY Age DESC\n",
    )
    .unwrap();
    let out = petsql()
        .arg("eval")
        .arg("--pred")
        .arg(&pred)
        .arg("--gold")
        .arg(&gold)
        .arg("--db-root")
        .arg(root.join("database"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("execution accuracy: 0.5000"), "{text}");
}

#[test]
fn run_with_mock_models_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    data_root(dir.path());
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
run_id = "cli"
data_root = "data"
output_dir = "OUT"
shots = 0
presql_model = "m"
finsql_models = ["m", "n"]

[[models]]
model_id = "m"
api_style = "mock"
mock_fallback = "SELECT count(*) FROM singer"

[[models]]
model_id = "n"
api_style = "mock"
"#
        .replace("OUT", &dir.path().join("out").display().to_string()),
    )
    .unwrap();
    let out = petsql()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("2 of 2 questions reached Vote"), "{stdout}");
    let preds = std::fs::read_to_string(dir.path().join("out/predictions.sql")).unwrap();
    assert_eq!(
        preds,
        "SELECT count(*) FROM singer\nSELECT count(*) FROM singer\n"
    );
    assert!(stdout.contains("execution accuracy: 0.5000"), "{stdout}");
}

#[test]
fn bad_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "run_id = \"x\"\ndata_root = \".\"\npresql_model = \"m\"\nfinsql_models = []\nmodels = []\n").unwrap();
    let out = petsql()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no [[models]] entry"));
}
