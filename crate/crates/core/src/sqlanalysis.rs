//! SQL extraction from model output, table linking and hardness grading.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, Expr, FunctionArguments, GroupByExpr, JoinConstraint, JoinOperator, ObjectName,
    ObjectNamePart, OrderByKind, Query, Select, SelectItem, SetExpr, Statement, TableWithJoins,
    UnaryOperator, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::catalog::DbSchema;
use crate::execution::ExecutionOutcome;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SqlError {
    #[error("no SQL statement found in model output")]
    NoSqlFound,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("expected exactly one statement, found {0}")]
    StatementCount(usize),
    #[error("statement is not a query")]
    NotAQuery,
}

/// Spider hardness level. Ordered from easiest to hardest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyGrade {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl DifficultyGrade {
    pub const ALL: [DifficultyGrade; 4] = [
        DifficultyGrade::Easy,
        DifficultyGrade::Medium,
        DifficultyGrade::Hard,
        DifficultyGrade::Extra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyGrade::Easy => "easy",
            DifficultyGrade::Medium => "medium",
            DifficultyGrade::Hard => "hard",
            DifficultyGrade::Extra => "extra",
        }
    }
}

impl fmt::Display for DifficultyGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DifficultyGrade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(DifficultyGrade::Easy),
            "medium" => Ok(DifficultyGrade::Medium),
            "hard" => Ok(DifficultyGrade::Hard),
            "extra" => Ok(DifficultyGrade::Extra),
            other => Err(format!("unknown difficulty grade `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Round {
    Presql,
    Finsql,
}

/// One generated query together with what we learned about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub model_id: String,
    pub round: Round,
    pub sql: String,
    #[serde(default)]
    pub linked_tables: BTreeSet<String>,
    #[serde(default)]
    pub grade: Option<DifficultyGrade>,
    #[serde(default)]
    pub outcome: Option<ExecutionOutcome>,
}

impl SqlCandidate {
    pub fn new(model_id: impl Into<String>, round: Round, sql: impl Into<String>) -> Self {
        SqlCandidate {
            model_id: model_id.into(),
            round,
            sql: sql.into(),
            linked_tables: BTreeSet::new(),
            grade: None,
            outcome: None,
        }
    }
}

const STATEMENT_KEYWORDS: &[&str] = &[
    "SELECT", "WITH", "INSERT", "UPDATE", "DELETE", "REPLACE", "CREATE", "DROP", "ALTER", "PRAGMA",
    "EXPLAIN", "VALUES",
];

fn keyword_at(text: &str, pos: usize, case_sensitive: bool) -> bool {
    let rest = &text[pos..];
    if pos > 0 {
        let prev = text[..pos].chars().next_back().unwrap();
        if prev.is_alphanumeric() || prev == '_' {
            return false;
        }
    }
    STATEMENT_KEYWORDS.iter().any(|kw| {
        let Some(head) = rest.get(..kw.len()) else {
            return false;
        };
        let matches = if case_sensitive {
            head == *kw
        } else {
            head.eq_ignore_ascii_case(kw)
        };
        matches
            && rest[kw.len()..]
                .chars()
                .next()
                .is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
    })
}

fn find_keyword(text: &str, case_sensitive: bool) -> Option<usize> {
    text.char_indices()
        .map(|(i, _)| i)
        .find(|&i| keyword_at(text, i, case_sensitive))
}

/// Body of the first fenced block, without its info string.
fn first_fence_body(raw: &str) -> Option<&str> {
    let open = raw.find("```")?;
    let after = &raw[open + 3..];
    let body_start = after.find('\n').map(|n| n + 1).unwrap_or(after.len());
    let info = after[..body_start].trim();
    // "```SELECT 1```" has no info string: the body starts right after the fence.
    let body = if info
        .chars()
        .all(|c| c.is_alphanumeric() || c == '_' || c == '-')
    {
        &after[body_start..]
    } else {
        after
    };
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// Cut a statement at an unquoted `;`, an unquoted fence, or a blank line.
fn cut_statement(text: &str) -> &str {
    let bytes = text.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                let close = if q == b'[' { b']' } else { q };
                if b == close {
                    quote = None;
                }
            }
            None => match b {
                b'`' if text[i..].starts_with("```") => return &text[..i],
                b'\'' | b'"' | b'`' | b'[' => quote = Some(b),
                b';' => return &text[..i],
                b'\n' => {
                    let rest = &text[i + 1..];
                    let line_end = rest.find('\n');
                    if let Some(end) = line_end {
                        if rest[..end].trim().is_empty() {
                            return &text[..i];
                        }
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    text
}

/// Pull the first SQL statement out of free-form model output.
pub fn extract_sql(raw: &str) -> Result<String, SqlError> {
    let trimmed = raw.trim_start();
    let source = if keyword_at(trimmed, 0, false) {
        trimmed
    } else {
        match first_fence_body(raw) {
            Some(body) if find_keyword(body, false).is_some() => body,
            _ => raw,
        }
    };
    let source = source.trim_start();
    let start = if keyword_at(source, 0, false) {
        0
    } else {
        find_keyword(source, true)
            .or_else(|| find_keyword(source, false))
            .ok_or(SqlError::NoSqlFound)?
    };
    let statement = cut_statement(&source[start..]).trim_end();
    if statement.is_empty() {
        return Err(SqlError::NoSqlFound);
    }
    Ok(statement.to_string())
}

/// Parse exactly one SQLite statement.
pub fn parse_statement(sql: &str) -> Result<Statement, SqlError> {
    let mut statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| SqlError::Parse(e.to_string()))?;
    if statements.len() != 1 {
        return Err(SqlError::StatementCount(statements.len()));
    }
    Ok(statements.pop().unwrap())
}

fn parse_query(sql: &str) -> Result<Box<Query>, SqlError> {
    match parse_statement(sql)? {
        Statement::Query(q) => Ok(q),
        _ => Err(SqlError::NotAQuery),
    }
}

fn relation_name(name: &ObjectName) -> Option<String> {
    match name.0.last()? {
        ObjectNamePart::Identifier(ident) => Some(ident.value.clone()),
        _ => None,
    }
}

/// Tables referenced by a statement, canonicalized against a schema.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLinks {
    pub tables: BTreeSet<String>,
    /// References that do not name a table of the schema. Dropped from `tables`.
    pub unknown: Vec<String>,
}

#[derive(Default)]
struct RelationCollector {
    cte_scopes: Vec<Vec<String>>,
    relations: Vec<String>,
}

impl RelationCollector {
    fn in_cte_scope(&self, name: &str) -> bool {
        self.cte_scopes
            .iter()
            .flatten()
            .any(|cte| cte.eq_ignore_ascii_case(name))
    }
}

impl Visitor for RelationCollector {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        let names = query
            .with
            .as_ref()
            .map(|w| {
                w.cte_tables
                    .iter()
                    .map(|c| c.alias.name.value.clone())
                    .collect()
            })
            .unwrap_or_default();
        self.cte_scopes.push(names);
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _query: &Query) -> ControlFlow<()> {
        self.cte_scopes.pop();
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        if let Some(name) = relation_name(relation) {
            if !self.in_cte_scope(&name) {
                self.relations.push(name);
            }
        }
        ControlFlow::Continue(())
    }
}

/// Every base table the statement reads or writes, with aliases and CTE names resolved away.
pub fn linked_tables(sql: &str, schema: &DbSchema) -> Result<TableLinks, SqlError> {
    let statement = parse_statement(sql)?;
    let mut collector = RelationCollector::default();
    let _ = statement.visit(&mut collector);
    let mut links = TableLinks::default();
    for name in collector.relations {
        match schema.table(&name) {
            Some(table) => {
                links.tables.insert(table.name.to_lowercase());
            }
            None => {
                if !links.unknown.iter().any(|u| u.eq_ignore_ascii_case(&name)) {
                    links.unknown.push(name);
                }
            }
        }
    }
    Ok(links)
}

/// Whether the outermost query orders its result.
pub fn has_top_level_order_by(sql: &str) -> Result<bool, SqlError> {
    let query = parse_query(sql)?;
    Ok(match &query.order_by {
        Some(order_by) => match &order_by.kind {
            OrderByKind::Expressions(exprs) => !exprs.is_empty(),
            OrderByKind::All(_) => true,
        },
        None => false,
    })
}

/// Component counts used by the hardness rules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HardnessCounts {
    pub component1: usize,
    pub component2: usize,
    pub others: usize,
}

impl HardnessCounts {
    pub fn grade(self) -> DifficultyGrade {
        let HardnessCounts {
            component1: c1,
            component2: c2,
            others,
        } = self;
        if c1 <= 1 && others == 0 && c2 == 0 {
            DifficultyGrade::Easy
        } else if (others <= 2 && c1 <= 1 && c2 == 0) || (c1 <= 2 && others < 2 && c2 == 0) {
            DifficultyGrade::Medium
        } else if (others > 2 && c1 <= 2 && c2 == 0)
            || (2 < c1 && c1 <= 3 && others <= 2 && c2 == 0)
            || (c1 <= 1 && others == 0 && c2 <= 1)
        {
            DifficultyGrade::Hard
        } else {
            DifficultyGrade::Extra
        }
    }
}

/// A flattened AND/OR chain: leaf conditions plus the connectors between them.
#[derive(Default)]
struct Conditions<'a> {
    leaves: Vec<&'a Expr>,
    ors: usize,
    connectors: usize,
}

impl<'a> Conditions<'a> {
    fn push(&mut self, expr: &'a Expr) {
        match expr {
            Expr::BinaryOp {
                left,
                op: op @ (BinaryOperator::And | BinaryOperator::Or),
                right,
            } => {
                self.push(left);
                self.connectors += 1;
                if *op == BinaryOperator::Or {
                    self.ors += 1;
                }
                self.push(right);
            }
            Expr::Nested(inner) if is_condition_chain(inner) => self.push(inner),
            leaf => self.leaves.push(leaf),
        }
    }

    fn append(&mut self, expr: &'a Expr) {
        if !self.leaves.is_empty() {
            self.connectors += 1;
        }
        self.push(expr);
    }

    fn likes(&self) -> usize {
        self.leaves
            .iter()
            .filter(|e| matches!(e, Expr::Like { .. } | Expr::ILike { .. }))
            .count()
    }

    fn negated(&self) -> usize {
        self.leaves
            .iter()
            .filter(|e| is_negated_condition(e))
            .count()
    }

    fn nested_values(&self) -> usize {
        self.leaves.iter().map(|e| subquery_operands(e)).sum()
    }
}

fn is_condition_chain(expr: &Expr) -> bool {
    match expr {
        Expr::BinaryOp {
            op: BinaryOperator::And | BinaryOperator::Or,
            ..
        } => true,
        Expr::Nested(inner) => is_condition_chain(inner),
        _ => false,
    }
}

fn is_negated_condition(expr: &Expr) -> bool {
    match expr {
        Expr::InList { negated, .. }
        | Expr::InSubquery { negated, .. }
        | Expr::Between { negated, .. }
        | Expr::Like { negated, .. }
        | Expr::ILike { negated, .. } => *negated,
        Expr::Exists { negated, .. } => *negated,
        Expr::UnaryOp {
            op: UnaryOperator::Not,
            ..
        } => true,
        _ => false,
    }
}

fn is_subquery(expr: &Expr) -> bool {
    match expr {
        Expr::Subquery(_) => true,
        Expr::Nested(inner) => is_subquery(inner),
        _ => false,
    }
}

/// How many value slots of a condition hold a subquery.
fn subquery_operands(expr: &Expr) -> usize {
    match expr {
        Expr::InSubquery { .. } | Expr::Exists { .. } => 1,
        Expr::Between { low, high, .. } => is_subquery(low) as usize + is_subquery(high) as usize,
        Expr::BinaryOp { left, right, .. } => {
            is_subquery(left) as usize + is_subquery(right) as usize
        }
        Expr::Like { pattern, .. } | Expr::ILike { pattern, .. } => is_subquery(pattern) as usize,
        Expr::UnaryOp {
            op: UnaryOperator::Not,
            expr,
        } => subquery_operands(expr),
        _ => 0,
    }
}

fn is_aggregate_call(expr: &Expr) -> bool {
    match expr {
        Expr::Function(f) => {
            let is_agg_name = relation_name(&f.name).is_some_and(|n| {
                matches!(
                    n.to_ascii_lowercase().as_str(),
                    "max" | "min" | "count" | "sum" | "avg"
                )
            });
            is_agg_name && matches!(f.args, FunctionArguments::List(_))
        }
        _ => false,
    }
}

fn leftmost_operand(expr: &Expr) -> &Expr {
    match expr {
        Expr::BinaryOp { left, op, .. } if is_arithmetic(op) => leftmost_operand(left),
        other => other,
    }
}

fn is_arithmetic(op: &BinaryOperator) -> bool {
    matches!(
        op,
        BinaryOperator::Plus
            | BinaryOperator::Minus
            | BinaryOperator::Multiply
            | BinaryOperator::Divide
    )
}

fn order_item_aggregates(expr: &Expr) -> usize {
    match expr {
        Expr::BinaryOp { left, op, right } if is_arithmetic(op) => {
            is_aggregate_call(left) as usize + is_aggregate_call(right) as usize
        }
        other => is_aggregate_call(other) as usize,
    }
}

fn join_constraint(op: &JoinOperator) -> Option<&JoinConstraint> {
    match op {
        JoinOperator::Join(c)
        | JoinOperator::Inner(c)
        | JoinOperator::Left(c)
        | JoinOperator::LeftOuter(c)
        | JoinOperator::Right(c)
        | JoinOperator::RightOuter(c)
        | JoinOperator::FullOuter(c)
        | JoinOperator::CrossJoin(c)
        | JoinOperator::Semi(c)
        | JoinOperator::LeftSemi(c)
        | JoinOperator::RightSemi(c)
        | JoinOperator::Anti(c)
        | JoinOperator::LeftAnti(c)
        | JoinOperator::RightAnti(c)
        | JoinOperator::StraightJoin(c) => Some(c),
        _ => None,
    }
}

fn count_table_units(from: &[TableWithJoins]) -> usize {
    from.iter().map(|t| 1 + t.joins.len()).sum()
}

fn join_conditions(from: &[TableWithJoins]) -> Conditions<'_> {
    let mut conds = Conditions::default();
    for twj in from {
        for join in &twj.joins {
            if let Some(JoinConstraint::On(expr)) = join_constraint(&join.join_operator) {
                conds.append(expr);
            }
        }
    }
    conds
}

/// The select block that carries the clauses of a (possibly compound) query,
/// plus whether the query is compound.
fn leading_select(body: &SetExpr) -> Option<(&Select, bool)> {
    match body {
        SetExpr::Select(select) => Some((select, false)),
        SetExpr::Query(inner) => leading_select(&inner.body),
        SetExpr::SetOperation { left, .. } => leading_select(left).map(|(s, _)| (s, true)),
        _ => None,
    }
}

fn hardness_counts_of(query: &Query) -> Result<HardnessCounts, SqlError> {
    let (select, compound) = leading_select(&query.body).ok_or(SqlError::NotAQuery)?;
    let set_op = matches!(query.body.as_ref(), SetExpr::SetOperation { .. });

    let from_conds = join_conditions(&select.from);
    let mut where_conds = Conditions::default();
    if let Some(selection) = &select.selection {
        where_conds.push(selection);
    }
    let mut having_conds = Conditions::default();
    if let Some(having) = &select.having {
        having_conds.push(having);
    }
    let group_by: &[Expr] = match &select.group_by {
        GroupByExpr::Expressions(exprs, _) => exprs,
        GroupByExpr::All(_) => &[],
    };
    // Trailing ORDER BY / LIMIT of a compound query attach to its last arm.
    let (order_exprs, has_limit) = if compound || set_op {
        (Vec::new(), false)
    } else {
        let exprs = match query.order_by.as_ref().map(|o| &o.kind) {
            Some(OrderByKind::Expressions(exprs)) => exprs.iter().map(|o| &o.expr).collect(),
            _ => Vec::new(),
        };
        (exprs, query.limit_clause.is_some())
    };

    let mut c1 = 0;
    c1 += !where_conds.leaves.is_empty() as usize;
    c1 += !group_by.is_empty() as usize;
    c1 += !order_exprs.is_empty() as usize;
    c1 += has_limit as usize;
    c1 += count_table_units(&select.from).saturating_sub(1);
    c1 += from_conds.ors + where_conds.ors + having_conds.ors;
    c1 += from_conds.likes() + where_conds.likes() + having_conds.likes();

    let mut c2 =
        from_conds.nested_values() + where_conds.nested_values() + having_conds.nested_values();
    c2 += (compound || set_op) as usize;

    let select_exprs: Vec<&Expr> = select
        .projection
        .iter()
        .filter_map(|item| match item {
            SelectItem::UnnamedExpr(e) | SelectItem::ExprWithAlias { expr: e, .. } => Some(e),
            _ => None,
        })
        .collect();
    let mut aggs = select_exprs
        .iter()
        .filter(|e| is_aggregate_call(leftmost_operand(e)))
        .count();
    aggs += where_conds.negated();
    aggs += group_by.iter().filter(|e| is_aggregate_call(e)).count();
    aggs += order_exprs
        .iter()
        .map(|e| order_item_aggregates(e))
        .sum::<usize>();
    // Connectors in HAVING count as aggregates, a quirk of the reference grader.
    aggs += having_conds.negated() + having_conds.connectors;

    let mut others = 0;
    others += (aggs > 1) as usize;
    others += (select.projection.len() > 1) as usize;
    others += (where_conds.leaves.len() > 1) as usize;
    others += (group_by.len() > 1) as usize;

    Ok(HardnessCounts {
        component1: c1,
        component2: c2,
        others,
    })
}

/// Component counts of a query under the Spider hardness rules.
pub fn hardness_counts(sql: &str) -> Result<HardnessCounts, SqlError> {
    hardness_counts_of(&*parse_query(sql)?)
}

/// Spider hardness label of a query.
pub fn grade_difficulty(sql: &str) -> Result<DifficultyGrade, SqlError> {
    hardness_counts(sql).map(HardnessCounts::grade)
}
