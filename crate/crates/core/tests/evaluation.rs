mod support;

use std::collections::BTreeSet;
use std::path::Path;

use petsql::catalog::database_file;
use petsql::evaluation::{
    ex_accuracy, recall_metrics, render_summary, table_stats, EvalError, EvalOptions, GoldInstance,
};
use petsql::prompting::{prune, render_zero_shot, PromptFlags};
use petsql::sqlanalysis::DifficultyGrade;
use proptest::prelude::*;

fn toy_db(dir: &Path) {
    let file = database_file(dir, "toy");
    std::fs::create_dir_all(file.parent().unwrap()).unwrap();
    let conn = rusqlite::Connection::open(file).unwrap();
    conn.execute_batch(
        "CREATE TABLE singer (id INTEGER, name TEXT, age INTEGER);
         INSERT INTO singer VALUES (1,'Joe',52),(2,'Tim',32),(3,'Rose',41),(4,'Ann',29),(5,'Bo',60);",
    )
    .unwrap();
}

fn gold(i: usize, sql: &str) -> GoldInstance {
    GoldInstance {
        question_id: i.to_string(),
        db_id: "toy".into(),
        sql: sql.into(),
    }
}

#[test]
fn execution_accuracy_compares_results_not_text() {
    let dir = tempfile::tempdir().unwrap();
    toy_db(dir.path());
    let golds = vec![
        gold(0, "SELECT count(*) FROM singer"),
        gold(1, "SELECT name FROM singer ORDER BY age"),
        gold(2, "SELECT name FROM singer WHERE age > 40"),
        gold(3, "SELECT name FROM singer ORDER BY age"),
        gold(4, "SELECT avg(age) FROM singer"),
    ];
    let preds = [
        "SELECT 5",
        "SELECT name FROM singer ORDER BY age DESC",
        "SELECT name FROM singer WHERE age >= 41 ORDER BY name",
        "SELECT name FROM singer ORDER BY age ASC",
        "SELECT nonsense",
    ];
    let report = ex_accuracy(&preds, &golds, dir.path(), &EvalOptions::default()).unwrap();
    let verdicts: Vec<bool> = report.per_question.iter().map(|q| q.correct).collect();
    assert_eq!(verdicts, [true, false, true, true, false]);
    assert!((report.ex_overall - 0.6).abs() < 1e-12);
    assert!(report.per_question[1].order_sensitive);
    assert!(!report.per_question[2].order_sensitive);

    let easy = &report.ex_by_grade[&DifficultyGrade::Easy];
    let total: usize = report.ex_by_grade.values().map(|g| g.count).sum();
    assert_eq!(total, 5);
    assert!(easy.count >= 1);
    assert!(render_summary(&report).contains("execution accuracy: 0.6000"));
}

#[test]
fn input_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    toy_db(dir.path());
    let golds = vec![gold(0, "SELECT 1")];
    assert_eq!(
        ex_accuracy(
            &["SELECT 1", "SELECT 2"],
            &golds,
            dir.path(),
            &EvalOptions::default()
        )
        .unwrap_err(),
        EvalError::LengthMismatch { left: 2, right: 1 }
    );
    let mut missing = gold(0, "SELECT 1");
    missing.db_id = "absent".into();
    assert!(matches!(
        ex_accuracy(
            &["SELECT 1"],
            &[missing],
            dir.path(),
            &EvalOptions::default()
        ),
        Err(EvalError::DatabaseMissing(_))
    ));
}

#[test]
fn float_tolerance_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    toy_db(dir.path());
    let golds = vec![gold(0, "SELECT avg(age) FROM singer")];
    let preds = ["SELECT 42.8000001"];
    assert!(
        !ex_accuracy(&preds, &golds, dir.path(), &EvalOptions::default())
            .unwrap()
            .per_question[0]
            .correct
    );
    let loose = EvalOptions {
        float_eps: 1e-6,
        ..EvalOptions::default()
    };
    assert!(
        ex_accuracy(&preds, &golds, dir.path(), &loose)
            .unwrap()
            .per_question[0]
            .correct
    );
}

#[test]
fn prompt_statistics_use_ratio_of_sums() {
    let scratch = tempfile::tempdir().unwrap();
    let (dir, _) = support::dev_database_dir(scratch.path());
    let catalog = support::dev_catalog();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for db in ["concert_singer", "pets_1", "car_1"] {
        let schema = catalog.get(db).unwrap();
        let file = database_file(&dir, db);
        let samples: Vec<_> = schema
            .tables
            .iter()
            .map(|t| petsql::catalog::sample_cells(&file, t, 3, 0).unwrap())
            .collect();
        let doc = render_zero_shot(schema, &samples, "How many?", PromptFlags::default()).unwrap();
        after.push(prune(&doc, &[&schema.tables[0].name]).doc);
        before.push(doc);
    }
    let stats = table_stats(&before, &after).unwrap();
    let tokens = |docs: &[petsql::prompting::PromptDoc]| -> f64 {
        docs.iter()
            .map(|d| d.render().split_whitespace().count() as f64)
            .sum()
    };
    let expected = 1.0 - tokens(&after) / tokens(&before);
    assert!((stats.token_reduction - expected).abs() < 1e-12);
    assert_eq!(stats.avg_tables_after, 1.0);
    assert!(stats.avg_tables_before > 1.0);
    assert_eq!(stats.n, 3);
}

fn table_set() -> impl Strategy<Value = BTreeSet<String>> {
    prop::collection::btree_set(
        prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from),
        0..4,
    )
}

proptest! {
    #[test]
    fn exact_recall_never_exceeds_subset_recall(
        pairs in prop::collection::vec((table_set(), table_set()), 1..20)
    ) {
        let (linked, gt): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let r = recall_metrics(&linked, &gt).unwrap();
        prop_assert!(r.r_e <= r.r_s);
        let exact = pairs.iter().filter(|(l, g)| l == g).count() as f64 / pairs.len() as f64;
        let subset = pairs.iter().filter(|(l, g)| g.iter().all(|t| l.contains(t))).count() as f64 / pairs.len() as f64;
        prop_assert!((r.r_e - exact).abs() < 1e-12);
        prop_assert!((r.r_s - subset).abs() < 1e-12);
        prop_assert_eq!(r.failures.len(), pairs.iter().filter(|(l, g)| l != g).count());
    }
}
