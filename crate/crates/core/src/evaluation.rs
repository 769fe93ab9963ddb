//! Execution accuracy, table recall and prompt-size statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::database_file;
use crate::execution::{execute, order_sensitive_for, same_result_eps, ExecStatus};
use crate::prompting::{char_count, whitespace_tokens, PromptDoc};
use crate::sqlanalysis::{grade_difficulty, DifficultyGrade};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("database file missing: {0}")]
    DatabaseMissing(String),
}

fn check_lengths(left: usize, right: usize) -> Result<(), EvalError> {
    if left == right {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { left, right })
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallFailure {
    pub question_id: String,
    pub linked: BTreeSet<String>,
    pub gt: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Share of instances whose linked tables equal the ground truth.
    pub r_e: f64,
    /// Share of instances whose linked tables contain the ground truth.
    pub r_s: f64,
    pub n: usize,
    /// Instances where linked and ground-truth sets differ.
    pub failures: Vec<RecallFailure>,
}

pub fn recall_metrics(
    linked: &[BTreeSet<String>],
    gt: &[BTreeSet<String>],
) -> Result<RecallReport, EvalError> {
    let ids: Vec<String> = (0..linked.len()).map(|i| i.to_string()).collect();
    recall_metrics_with_ids(&ids, linked, gt)
}

pub fn recall_metrics_with_ids(
    question_ids: &[String],
    linked: &[BTreeSet<String>],
    gt: &[BTreeSet<String>],
) -> Result<RecallReport, EvalError> {
    check_lengths(linked.len(), gt.len())?;
    check_lengths(question_ids.len(), gt.len())?;
    let mut exact = 0usize;
    let mut subset = 0usize;
    let mut failures = Vec::new();
    for ((id, l), g) in question_ids.iter().zip(linked).zip(gt) {
        if l == g {
            exact += 1;
        } else {
            failures.push(RecallFailure {
                question_id: id.clone(),
                linked: l.clone(),
                gt: g.clone(),
            });
        }
        if g.is_subset(l) {
            subset += 1;
        }
    }
    let n = gt.len();
    Ok(RecallReport {
        r_e: mean(exact as f64, n),
        r_s: mean(subset as f64, n),
        n,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldInstance {
    pub question_id: String,
    pub db_id: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub timeout_ms: u64,
    /// Numeric tolerance for cell comparison; 0 means exact.
    pub float_eps: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            timeout_ms: crate::execution::DEFAULT_TIMEOUT_MS,
            float_eps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEval {
    pub question_id: String,
    pub db_id: String,
    /// Hardness of the gold query.
    pub gold_grade: DifficultyGrade,
    pub correct: bool,
    pub order_sensitive: bool,
    pub pred_status: ExecStatus,
    pub gold_status: ExecStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradeStats {
    pub count: usize,
    pub correct: usize,
    pub ex: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub n: usize,
    pub avg_tables_before: f64,
    pub avg_tables_after: f64,
    pub avg_tokens_before: f64,
    pub avg_tokens_after: f64,
    /// 1 - after/before over whitespace tokens.
    pub token_reduction: f64,
    pub avg_chars_before: f64,
    pub avg_chars_after: f64,
    pub char_reduction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub ex_overall: f64,
    pub ex_by_grade: BTreeMap<DifficultyGrade, GradeStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_stats: Option<PromptStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<RecallReport>,
    pub per_question: Vec<QuestionEval>,
}

/// Execute each prediction and its gold query and compare the results.
pub fn ex_accuracy<S: AsRef<str> + Sync>(
    predictions: &[S],
    golds: &[GoldInstance],
    database_dir: &Path,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    check_lengths(predictions.len(), golds.len())?;
    let missing: BTreeSet<String> = golds
        .iter()
        .map(|g| &g.db_id)
        .filter(|db| !database_file(database_dir, db).is_file())
        .cloned()
        .collect();
    if let Some(db) = missing.into_iter().next() {
        return Err(EvalError::DatabaseMissing(
            database_file(database_dir, &db).display().to_string(),
        ));
    }

    let per_question: Vec<QuestionEval> = predictions
        .par_iter()
        .zip(golds.par_iter())
        .map(|(pred, gold)| {
            let db = database_file(database_dir, &gold.db_id);
            let order_sensitive = order_sensitive_for(&gold.sql);
            let gold_outcome = execute(&db, &gold.sql, options.timeout_ms);
            let pred_outcome = execute(&db, pred.as_ref(), options.timeout_ms);
            QuestionEval {
                question_id: gold.question_id.clone(),
                db_id: gold.db_id.clone(),
                gold_grade: grade_difficulty(&gold.sql).unwrap_or(DifficultyGrade::Easy),
                correct: same_result_eps(
                    &pred_outcome,
                    &gold_outcome,
                    order_sensitive,
                    options.float_eps,
                ),
                order_sensitive,
                pred_status: pred_outcome.status,
                gold_status: gold_outcome.status,
            }
        })
        .collect();
    Ok(summarize(per_question))
}

/// Aggregate per-question verdicts into overall and per-grade accuracy.
pub fn summarize(per_question: Vec<QuestionEval>) -> EvalReport {
    let mut by_grade: BTreeMap<DifficultyGrade, GradeStats> = BTreeMap::new();
    for q in &per_question {
        let entry = by_grade.entry(q.gold_grade).or_default();
        entry.count += 1;
        entry.correct += q.correct as usize;
    }
    for stats in by_grade.values_mut() {
        stats.ex = mean(stats.correct as f64, stats.count);
    }
    let correct = per_question.iter().filter(|q| q.correct).count();
    EvalReport {
        n: per_question.len(),
        ex_overall: mean(correct as f64, per_question.len()),
        ex_by_grade: by_grade,
        prompt_stats: None,
        recall: None,
        per_question,
    }
}

/// Table counts and sizes of prompts before and after pruning.
pub fn table_stats(before: &[PromptDoc], after: &[PromptDoc]) -> Result<PromptStats, EvalError> {
    check_lengths(before.len(), after.len())?;
    let n = before.len();
    let sum = |docs: &[PromptDoc], f: &dyn Fn(&PromptDoc) -> usize| -> f64 {
        docs.iter().map(|d| f(d) as f64).sum()
    };
    let tables_before = sum(before, &|d| d.table_count());
    let tables_after = sum(after, &|d| d.table_count());
    let tokens_before = sum(before, &|d| whitespace_tokens(&d.render()));
    let tokens_after = sum(after, &|d| whitespace_tokens(&d.render()));
    let chars_before = sum(before, &|d| char_count(&d.render()));
    let chars_after = sum(after, &|d| char_count(&d.render()));
    let reduction = |b: f64, a: f64| if b > 0.0 { 1.0 - a / b } else { 0.0 };
    Ok(PromptStats {
        n,
        avg_tables_before: mean(tables_before, n),
        avg_tables_after: mean(tables_after, n),
        avg_tokens_before: mean(tokens_before, n),
        avg_tokens_after: mean(tokens_after, n),
        token_reduction: reduction(tokens_before, tokens_after),
        avg_chars_before: mean(chars_before, n),
        avg_chars_after: mean(chars_after, n),
        char_reduction: reduction(chars_before, chars_after),
    })
}

/// Human-readable summary of a report.
pub fn render_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "questions: {}", report.n);
    let _ = writeln!(out, "execution accuracy: {:.4}", report.ex_overall);
    for (grade, stats) in &report.ex_by_grade {
        let _ = writeln!(
            out,
            "  {:<6} {:>5} questions  EX {:.4}",
            grade.as_str(),
            stats.count,
            stats.ex
        );
    }
    if let Some(recall) = &report.recall {
        let _ = writeln!(
            out,
            "table linking: R_e {:.4}  R_s {:.4}  over {}",
            recall.r_e, recall.r_s, recall.n
        );
    }
    if let Some(p) = &report.prompt_stats {
        let _ = writeln!(
            out,
            "tables per prompt: {:.2} -> {:.2}",
            p.avg_tables_before, p.avg_tables_after
        );
        let _ = writeln!(
            out,
            "whitespace tokens per prompt: {:.1} -> {:.1} ({:.1}% fewer)",
            p.avg_tokens_before,
            p.avg_tokens_after,
            100.0 * p.token_reduction
        );
        let _ = writeln!(
            out,
            "characters per prompt: {:.1} -> {:.1} ({:.1}% fewer)",
            p.avg_chars_before,
            p.avg_chars_after,
            100.0 * p.char_reduction
        );
    }
    let _ = writeln!(
        out,
        "note: single-database execution accuracy; the distilled database variants of the test suite are not used"
    );
    out
}
