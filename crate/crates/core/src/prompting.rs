//! Reference-enhanced prompt documents.
//!
//! A [`PromptDoc`] keeps every schema, cell-value and foreign-key line tagged
//! with the table (or table pair) it describes, so pruning to a linked table
//! set is a filter over sections rather than string surgery. [`PromptDoc::render`]
//! is the only place that knows the text layout.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CellSample, DbSchema};

pub const INSTRUCTION_WITH_RULE: &str = "### Answer the question by SQLite SQL query only and with no explanation. You must minimize SQL execution time while ensuring correctness.";
pub const INSTRUCTION_PLAIN: &str =
    "### Answer the question by SQLite SQL query only and with no explanation.";
pub const SCHEMA_HEADER: &str = "### Sqlite SQL tables, with their properties:";
pub const CV_HEADER: &str = "### Here is some data information about database references.";
/// The trailing space is part of the format.
pub const FK_HEADER: &str = "### Foreign key information of SQLite tables, used for table joins: ";
pub const SHOTS_HEADER: &str = "### Some example pairs of questions and corresponding SQL queries are provided based on similar questions:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("cell values requested but no sample for table `{0}`")]
    MissingSample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptFlags {
    /// Optimization rule in the instruction.
    pub use_or: bool,
    /// Sampled cell values.
    pub use_cv: bool,
    /// Foreign key declarations.
    pub use_fk: bool,
    pub cv_rows: usize,
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self {
            use_or: true,
            use_cv: true,
            use_fk: true,
            cv_rows: 3,
        }
    }
}

impl PromptFlags {
    pub fn none() -> Self {
        Self {
            use_or: false,
            use_cv: false,
            use_fk: false,
            cv_rows: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub question: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDoc {
    pub instruction: String,
    /// `(table, line)`
    pub schema_lines: Vec<(String, String)>,
    /// Empty when the cell-value section is disabled.
    pub cv_header: String,
    pub cv_lines: Vec<(String, String)>,
    /// Empty when the foreign-key section is disabled or pruned away.
    pub fk_header: String,
    /// `((from_table, to_table), line)`
    pub fk_lines: Vec<((String, String), String)>,
    pub shots: Vec<Shot>,
    pub question: String,
}

impl PromptDoc {
    /// Serializes the document. Pure and byte-deterministic.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.shots.is_empty() {
            out.push_str(SHOTS_HEADER);
            out.push_str("\n\n");
            for shot in &self.shots {
                out.push_str("### ");
                out.push_str(&shot.question);
                out.push('\n');
                out.push_str(&shot.sql);
                out.push_str("\n\n");
            }
        }
        out.push_str(&self.instruction);
        out.push('\n');
        out.push_str(SCHEMA_HEADER);
        out.push_str("\n#\n");
        for (_, line) in &self.schema_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("#\n");

        let has_cv = !self.cv_header.is_empty();
        let has_fk = !self.fk_header.is_empty();
        if has_cv {
            out.push_str(&self.cv_header);
            out.push_str("\n#\n");
            for (_, line) in &self.cv_lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        if has_fk {
            if has_cv {
                out.push_str("#\n");
            }
            out.push_str(&self.fk_header);
            out.push_str("\n#\n");
            for (_, line) in &self.fk_lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        if has_cv || has_fk {
            out.push_str("# \n");
        }
        out.push_str("### Question: ");
        out.push_str(&self.question);
        out.push_str("\n### SQL: ");
        out
    }

    /// Tables described in the schema section.
    pub fn table_count(&self) -> usize {
        self.schema_lines.len()
    }
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn char_count(text: &str) -> usize {
    text.chars().count()
}

fn schema_line(table: &crate::catalog::TableSchema) -> String {
    let cols = table
        .columns
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join(",");
    format!("# {}({});", table.name, cols)
}

fn cv_line(table: &str, sample: &CellSample, rows: usize) -> String {
    let cols = sample
        .per_column_values
        .iter()
        .map(|(col, values)| {
            let shown = &values[..values.len().min(rows)];
            format!("{}[{}]", col, shown.join(","))
        })
        .collect::<Vec<_>>()
        .join(",");
    format!("# {table}({cols});")
}

/// Zero-shot prompt for one question.
pub fn render_zero_shot(
    schema: &DbSchema,
    samples: &[CellSample],
    question: &str,
    flags: PromptFlags,
) -> Result<PromptDoc, PromptError> {
    let instruction = if flags.use_or {
        INSTRUCTION_WITH_RULE
    } else {
        INSTRUCTION_PLAIN
    };
    let schema_lines = schema
        .tables
        .iter()
        .map(|t| (t.name.clone(), schema_line(t)))
        .collect();

    let (cv_header, cv_lines) = if flags.use_cv {
        let mut lines = Vec::with_capacity(schema.tables.len());
        for table in &schema.tables {
            let sample = samples
                .iter()
                .find(|s| s.table.eq_ignore_ascii_case(&table.name))
                .ok_or_else(|| PromptError::MissingSample(table.name.clone()))?;
            lines.push((
                table.name.clone(),
                cv_line(&table.name, sample, flags.cv_rows),
            ));
        }
        (CV_HEADER.to_string(), lines)
    } else {
        (String::new(), Vec::new())
    };

    let (fk_header, fk_lines) = if flags.use_fk {
        let lines = schema
            .foreign_keys
            .iter()
            .map(|fk| {
                (
                    (fk.from_table.clone(), fk.to_table.clone()),
                    format!(
                        "# {}({}) REFERENCES {}({});",
                        fk.from_table, fk.from_column, fk.to_table, fk.to_column
                    ),
                )
            })
            .collect();
        (FK_HEADER.to_string(), lines)
    } else {
        (String::new(), Vec::new())
    };

    Ok(PromptDoc {
        instruction: instruction.to_string(),
        schema_lines,
        cv_header,
        cv_lines,
        fk_header,
        fk_lines,
        shots: Vec::new(),
        question: question.to_string(),
    })
}

/// Prefixes demonstrations. `demos` should already be ordered with the most
/// similar one last.
pub fn render_few_shot(demos: &[(String, String)], base: &PromptDoc) -> PromptDoc {
    let mut doc = base.clone();
    doc.shots = demos
        .iter()
        .map(|(question, sql)| Shot {
            question: question.clone(),
            sql: sql.clone(),
        })
        .collect();
    doc
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pruned {
    pub doc: PromptDoc,
    /// Linked names that match no table of the document.
    pub unknown_tables: Vec<String>,
}

/// Restricts schema and cell-value lines to `linked` tables and keeps a
/// foreign-key line only when both endpoints are linked. If pruning removes
/// every foreign-key line the header goes too. Matching is case-insensitive.
pub fn prune<S: AsRef<str>>(doc: &PromptDoc, linked: &[S]) -> Pruned {
    let keep: BTreeSet<String> = linked.iter().map(|s| s.as_ref().to_lowercase()).collect();
    let known: BTreeSet<String> = doc
        .schema_lines
        .iter()
        .map(|(t, _)| t.to_lowercase())
        .collect();
    let unknown_tables: Vec<String> = keep.difference(&known).cloned().collect();
    for name in &unknown_tables {
        tracing::warn!(table = %name, "linked table not in prompt schema; ignored");
    }
    let is_linked = |t: &str| keep.contains(&t.to_lowercase());

    let mut out = doc.clone();
    out.schema_lines.retain(|(t, _)| is_linked(t));
    out.cv_lines.retain(|(t, _)| is_linked(t));
    out.fk_lines
        .retain(|((from, to), _)| is_linked(from) && is_linked(to));
    if !doc.fk_lines.is_empty() && out.fk_lines.is_empty() {
        out.fk_header.clear();
    }
    Pruned {
        doc: out,
        unknown_tables,
    }
}
