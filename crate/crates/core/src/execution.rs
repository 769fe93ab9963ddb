//! Read-only query execution with a wall-clock cap, and result-set equivalence.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::open_read_only;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<ValueRef<'_>> for Value {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(f) => Value::Real(f),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<Value>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
    pub elapsed_ms: u64,
}

impl ExecutionOutcome {
    pub fn ok(rows: Vec<Vec<Value>>) -> Self {
        ExecutionOutcome {
            status: ExecStatus::Ok,
            rows: Some(rows),
            error_text: None,
            elapsed_ms: 0,
        }
    }

    pub fn error(text: impl Into<String>) -> Self {
        ExecutionOutcome {
            status: ExecStatus::Error,
            rows: None,
            error_text: Some(text.into()),
            elapsed_ms: 0,
        }
    }

    pub fn timeout(elapsed_ms: u64) -> Self {
        ExecutionOutcome {
            status: ExecStatus::Timeout,
            rows: None,
            error_text: None,
            elapsed_ms,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

fn run_query(conn: &rusqlite::Connection, sql: &str) -> rusqlite::Result<Vec<Vec<Value>>> {
    let mut stmt = conn.prepare(sql)?;
    let width = stmt.column_count();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let mut tuple = Vec::with_capacity(width);
        for i in 0..width {
            tuple.push(Value::from(row.get_ref(i)?));
        }
        out.push(tuple);
    }
    Ok(out)
}

/// Run one statement on a fresh read-only connection. Failures are reported in the outcome.
pub fn execute(db_file: &Path, sql: &str, timeout_ms: u64) -> ExecutionOutcome {
    let started = Instant::now();
    let conn = match open_read_only(db_file) {
        Ok(conn) => conn,
        Err(e) => {
            let mut outcome =
                ExecutionOutcome::error(format!("cannot open {}: {e}", db_file.display()));
            outcome.elapsed_ms = started.elapsed().as_millis() as u64;
            return outcome;
        }
    };

    let interrupt = conn.get_interrupt_handle();
    let fired = Arc::new(AtomicBool::new(false));
    let (done_tx, done_rx) = mpsc::channel::<()>();
    let watchdog = {
        let fired = Arc::clone(&fired);
        let budget = Duration::from_millis(timeout_ms);
        thread::spawn(move || {
            if let Err(mpsc::RecvTimeoutError::Timeout) = done_rx.recv_timeout(budget) {
                fired.store(true, AtomicOrdering::SeqCst);
                interrupt.interrupt();
            }
        })
    };

    let result = run_query(&conn, sql);
    let _ = done_tx.send(());
    let _ = watchdog.join();
    // An interrupted connection is never reused.
    drop(conn);

    let elapsed_ms = started.elapsed().as_millis() as u64;
    let mut outcome = match result {
        _ if fired.load(AtomicOrdering::SeqCst) => ExecutionOutcome::timeout(elapsed_ms),
        Ok(rows) => ExecutionOutcome::ok(rows),
        Err(e) => ExecutionOutcome::error(e.to_string()),
    };
    outcome.elapsed_ms = elapsed_ms;
    outcome
}

/// Value after numeric coercion: integral reals compare equal to integers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Canon {
    Null,
    Int(i64),
    Real(u64),
    Text(String),
    Blob(Vec<u8>),
}

const I64_BOUND: f64 = 9_223_372_036_854_775_808.0;

fn canon(v: &Value) -> Canon {
    match v {
        Value::Null => Canon::Null,
        Value::Integer(i) => Canon::Int(*i),
        Value::Real(f) => {
            if f.fract() == 0.0 && *f >= -I64_BOUND && *f < I64_BOUND {
                Canon::Int(*f as i64)
            } else if f.is_nan() {
                Canon::Real(f64::NAN.to_bits())
            } else {
                Canon::Real(f.to_bits())
            }
        }
        Value::Text(t) => Canon::Text(t.clone()),
        Value::Blob(b) => Canon::Blob(b.clone()),
    }
}

fn canon_rows(rows: &[Vec<Value>], order_sensitive: bool) -> Vec<Vec<Canon>> {
    let mut out: Vec<Vec<Canon>> = rows.iter().map(|r| r.iter().map(canon).collect()).collect();
    if !order_sensitive {
        out.sort();
    }
    out
}

/// Result-set equivalence used both for execution accuracy and for voting.
pub fn same_result(a: &ExecutionOutcome, b: &ExecutionOutcome, order_sensitive: bool) -> bool {
    match (&a.rows, &b.rows) {
        (Some(ra), Some(rb)) if a.is_ok() && b.is_ok() => {
            ra.len() == rb.len()
                && canon_rows(ra, order_sensitive) == canon_rows(rb, order_sensitive)
        }
        _ => false,
    }
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Integer(i) => Some(*i as f64),
        Value::Real(f) => Some(*f),
        _ => None,
    }
}

fn close_enough(a: &Value, b: &Value, eps: f64) -> bool {
    match (as_number(a), as_number(b)) {
        (Some(x), Some(y)) => (x - y).abs() <= eps,
        _ => canon(a) == canon(b),
    }
}

fn numeric_first_cmp(a: &[Value], b: &[Value]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = match (as_number(x), as_number(y)) {
            (Some(p), Some(q)) => p.total_cmp(&q),
            _ => canon(x).cmp(&canon(y)),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

/// Like [`same_result`] but numeric cells within `eps` of each other match.
/// With `eps == 0` this is exactly [`same_result`].
pub fn same_result_eps(
    a: &ExecutionOutcome,
    b: &ExecutionOutcome,
    order_sensitive: bool,
    eps: f64,
) -> bool {
    if eps <= 0.0 {
        return same_result(a, b, order_sensitive);
    }
    let (Some(ra), Some(rb)) = (&a.rows, &b.rows) else {
        return false;
    };
    if !a.is_ok() || !b.is_ok() || ra.len() != rb.len() {
        return false;
    }
    let mut ra: Vec<&Vec<Value>> = ra.iter().collect();
    let mut rb: Vec<&Vec<Value>> = rb.iter().collect();
    if !order_sensitive {
        ra.sort_by(|x, y| numeric_first_cmp(x, y));
        rb.sort_by(|x, y| numeric_first_cmp(x, y));
    }
    ra.iter().zip(&rb).all(|(x, y)| {
        x.len() == y.len() && x.iter().zip(y.iter()).all(|(p, q)| close_enough(p, q, eps))
    })
}

/// Hashable voting key. Equal keys for ok outcomes iff [`same_result`] holds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResultKey {
    Rows {
        digest: String,
        order_sensitive: bool,
    },
    Error,
    Timeout,
}

impl ResultKey {
    pub fn is_answer(&self) -> bool {
        matches!(self, ResultKey::Rows { .. })
    }
}

impl std::fmt::Display for ResultKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResultKey::Rows { digest, .. } => write!(f, "rows:{}", &digest[..digest.len().min(12)]),
            ResultKey::Error => f.write_str("error"),
            ResultKey::Timeout => f.write_str("timeout"),
        }
    }
}

fn feed_canon(hasher: &mut Sha256, value: &Canon) {
    match value {
        Canon::Null => hasher.update([0u8]),
        Canon::Int(i) => {
            hasher.update([1u8]);
            hasher.update(i.to_le_bytes());
        }
        Canon::Real(bits) => {
            hasher.update([2u8]);
            hasher.update(bits.to_le_bytes());
        }
        Canon::Text(t) => {
            hasher.update([3u8]);
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t.as_bytes());
        }
        Canon::Blob(b) => {
            hasher.update([4u8]);
            hasher.update((b.len() as u64).to_le_bytes());
            hasher.update(b);
        }
    }
}

pub fn result_key(outcome: &ExecutionOutcome, order_sensitive: bool) -> ResultKey {
    match (outcome.status, &outcome.rows) {
        (ExecStatus::Ok, Some(rows)) => {
            let mut hasher = Sha256::new();
            for row in canon_rows(rows, order_sensitive) {
                hasher.update((row.len() as u64).to_le_bytes());
                for value in &row {
                    feed_canon(&mut hasher, value);
                }
            }
            ResultKey::Rows {
                digest: hex::encode(hasher.finalize()),
                order_sensitive,
            }
        }
        (ExecStatus::Timeout, _) => ResultKey::Timeout,
        _ => ResultKey::Error,
    }
}

/// Whether results for this gold query must be compared in order.
/// Falls back to a textual check when the query does not parse.
pub fn order_sensitive_for(gold_sql: &str) -> bool {
    crate::sqlanalysis::has_top_level_order_by(gold_sql).unwrap_or_else(|_| {
        let normalized = gold_sql.split_whitespace().collect::<Vec<_>>().join(" ");
        normalized.to_ascii_lowercase().contains("order by")
    })
}

/// Render rows as tab-separated text for debugging.
pub fn render_rows(rows: &[Vec<Value>]) -> String {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|v| match v {
                Value::Null => "NULL".to_string(),
                Value::Integer(i) => i.to_string(),
                Value::Real(f) => f.to_string(),
                Value::Text(t) => t.clone(),
                Value::Blob(b) => format!("x'{}'", hex::encode(b)),
            })
            .collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}
