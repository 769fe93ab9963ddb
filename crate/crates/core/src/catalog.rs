//! Spider-format schema manifests and benchmark databases.
//!
//! A manifest (`tables.json`) is an array of database entries. Columns are
//! addressed globally: `column_names_original[i] = [table_index, name]`,
//! index 0 is the `*` pseudo-column with table index -1, and foreign keys
//! are pairs of global column indices `[from, to]`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Blob values longer than this are truncated when rendered.
pub const BLOB_RENDER_BYTES: usize = 16;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Format(String),
    #[error("table `{table}` not found in {db}")]
    TableMissing { table: String, db: PathBuf },
    #[error("query failed on {db}: {source}")]
    Query {
        db: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub declared_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    /// Original casing from the manifest.
    pub name: String,
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbSchema {
    pub db_id: String,
    /// Manifest order; prompt rendering follows it.
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<ForeignKey>,
    pub primary_keys: Vec<ColumnRef>,
}

impl DbSchema {
    /// Case-insensitive table lookup.
    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Lower-cased table names, the canonical form used for linking.
    pub fn canonical_tables(&self) -> BTreeSet<String> {
        self.tables.iter().map(|t| t.name.to_lowercase()).collect()
    }

    /// Checks the structural invariants: unique table and column names
    /// (case-insensitive), at least one column per table, resolvable keys.
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.db_id.is_empty() {
            return Err(CatalogError::Format("empty db_id".into()));
        }
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(CatalogError::Format(format!(
                    "{}: duplicate table `{}`",
                    self.db_id, table.name
                )));
            }
            if table.columns.is_empty() {
                return Err(CatalogError::Format(format!(
                    "{}: table `{}` has no columns",
                    self.db_id, table.name
                )));
            }
            let mut cols = HashSet::new();
            for col in &table.columns {
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(CatalogError::Format(format!(
                        "{}: duplicate column `{}.{}`",
                        self.db_id, table.name, col.name
                    )));
                }
            }
        }
        let resolves = |table: &str, column: &str| {
            self.table(table)
                .is_some_and(|t| t.column(column).is_some())
        };
        for fk in &self.foreign_keys {
            if !resolves(&fk.from_table, &fk.from_column) || !resolves(&fk.to_table, &fk.to_column)
            {
                return Err(CatalogError::Format(format!(
                    "{}: dangling foreign key {}.{} -> {}.{}",
                    self.db_id, fk.from_table, fk.from_column, fk.to_table, fk.to_column
                )));
            }
        }
        for pk in &self.primary_keys {
            if !resolves(&pk.table, &pk.column) {
                return Err(CatalogError::Format(format!(
                    "{}: dangling primary key {}.{}",
                    self.db_id, pk.table, pk.column
                )));
            }
        }
        Ok(())
    }
}

/// All databases of a benchmark split, keyed by `db_id`. Immutable once
/// loaded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseCatalog {
    databases: BTreeMap<String, DbSchema>,
}

impl DatabaseCatalog {
    pub fn from_schemas(schemas: impl IntoIterator<Item = DbSchema>) -> Result<Self, CatalogError> {
        let mut databases = BTreeMap::new();
        for schema in schemas {
            schema.validate()?;
            let id = schema.db_id.clone();
            if databases.insert(id.clone(), schema).is_some() {
                return Err(CatalogError::Format(format!("duplicate db_id `{id}`")));
            }
        }
        Ok(Self { databases })
    }

    /// Parses manifest JSON text.
    pub fn from_manifest_str(text: &str) -> Result<Self, CatalogError> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(text).map_err(|e| CatalogError::Format(e.to_string()))?;
        let schemas = entries
            .into_iter()
            .map(ManifestEntry::into_schema)
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_schemas(schemas)
    }

    pub fn get(&self, db_id: &str) -> Option<&DbSchema> {
        self.databases.get(db_id)
    }

    pub fn len(&self) -> usize {
        self.databases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.databases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DbSchema> {
        self.databases.values()
    }
}

/// Loads a Spider tables manifest.
pub fn load_catalog(manifest_path: &Path) -> Result<DatabaseCatalog, CatalogError> {
    let text = fs::read_to_string(manifest_path).map_err(|source| CatalogError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    DatabaseCatalog::from_manifest_str(&text).map_err(|e| match e {
        CatalogError::Format(msg) => {
            CatalogError::Format(format!("{}: {msg}", manifest_path.display()))
        }
        other => other,
    })
}

/// `<database_dir>/<db_id>/<db_id>.sqlite`
pub fn database_file(database_dir: &Path, db_id: &str) -> PathBuf {
    database_dir.join(db_id).join(format!("{db_id}.sqlite"))
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    foreign_keys: Vec<(usize, usize)>,
    primary_keys: Vec<PrimaryKeyEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PrimaryKeyEntry {
    Single(usize),
    Composite(Vec<usize>),
}

impl ManifestEntry {
    fn into_schema(self) -> Result<DbSchema, CatalogError> {
        let db = &self.db_id;
        if self.column_types.len() != self.column_names_original.len() {
            return Err(CatalogError::Format(format!(
                "{db}: {} column names but {} column types",
                self.column_names_original.len(),
                self.column_types.len()
            )));
        }
        let mut tables: Vec<TableSchema> = self
            .table_names_original
            .iter()
            .map(|name| TableSchema {
                name: name.clone(),
                columns: Vec::new(),
            })
            .collect();
        // global column index -> (table index, column name)
        let mut global = Vec::with_capacity(self.column_names_original.len());
        for ((table_idx, name), ty) in self.column_names_original.iter().zip(&self.column_types) {
            if *table_idx < 0 {
                global.push(None);
                continue;
            }
            let t = *table_idx as usize;
            let table = tables.get_mut(t).ok_or_else(|| {
                CatalogError::Format(format!(
                    "{db}: column `{name}` has table index {t} out of range"
                ))
            })?;
            table.columns.push(Column {
                name: name.clone(),
                declared_type: ty.clone(),
            });
            global.push(Some((t, name.clone())));
        }
        let resolve = |idx: usize| -> Result<ColumnRef, CatalogError> {
            match global.get(idx) {
                Some(Some((t, col))) => Ok(ColumnRef {
                    table: self.table_names_original[*t].clone(),
                    column: col.clone(),
                }),
                _ => Err(CatalogError::Format(format!(
                    "{db}: dangling column index {idx}"
                ))),
            }
        };
        let foreign_keys = self
            .foreign_keys
            .iter()
            .map(|&(from, to)| {
                let from = resolve(from)?;
                let to = resolve(to)?;
                Ok(ForeignKey {
                    from_table: from.table,
                    from_column: from.column,
                    to_table: to.table,
                    to_column: to.column,
                })
            })
            .collect::<Result<Vec<_>, CatalogError>>()?;
        let mut primary_keys = Vec::new();
        for pk in &self.primary_keys {
            match pk {
                PrimaryKeyEntry::Single(i) => primary_keys.push(resolve(*i)?),
                PrimaryKeyEntry::Composite(ids) => {
                    for i in ids {
                        primary_keys.push(resolve(*i)?);
                    }
                }
            }
        }
        Ok(DbSchema {
            db_id: self.db_id,
            tables,
            foreign_keys,
            primary_keys,
        })
    }
}

/// Sampled rows of one table, transposed per column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSample {
    pub table: String,
    pub per_column_values: Vec<(String, Vec<String>)>,
}

impl CellSample {
    /// Number of sampled rows.
    pub fn rows(&self) -> usize {
        self.per_column_values.first().map_or(0, |(_, v)| v.len())
    }
}

/// Opens a database file read-only; the file is never created.
pub fn open_read_only(path: &Path) -> rusqlite::Result<Connection> {
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.pragma_update(None, "query_only", true)?;
    Ok(conn)
}

/// Seed for one table, derived from the run seed so samples are fixed per
/// (database, table, run seed).
pub fn table_seed(global_seed: u64, db_id: &str, table: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(db_id.to_lowercase().as_bytes());
    hasher.update([0u8]);
    hasher.update(table.to_lowercase().as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Draws `n` whole rows without replacement. Values at the same position in
/// every column come from the same row; rows keep table (rowid) order.
pub fn sample_cells(
    db_file: &Path,
    schema: &TableSchema,
    n: usize,
    seed: u64,
) -> Result<CellSample, CatalogError> {
    let query_err = |source| CatalogError::Query {
        db: db_file.to_path_buf(),
        source,
    };
    if !db_file.is_file() {
        return Err(CatalogError::Io {
            path: db_file.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "database file not found"),
        });
    }
    let conn = open_read_only(db_file).map_err(query_err)?;
    let actual: Option<String> = conn
        .query_row(
            "SELECT name FROM sqlite_master WHERE type IN ('table', 'view') AND lower(name) = lower(?1)",
            [&schema.name],
            |row| row.get(0),
        )
        .map(Some)
        .or_else(|e| match e {
            rusqlite::Error::QueryReturnedNoRows => Ok(None),
            other => Err(other),
        })
        .map_err(query_err)?;
    let Some(table) = actual else {
        return Err(CatalogError::TableMissing {
            table: schema.name.clone(),
            db: db_file.to_path_buf(),
        });
    };
    let quoted = quote_ident(&table);
    let total: i64 = conn
        .query_row(&format!("SELECT count(*) FROM {quoted}"), [], |r| r.get(0))
        .map_err(query_err)?;
    let total = total.max(0) as usize;
    let mut picks: Vec<usize> = if total <= n {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, total, n).into_vec()
    };
    picks.sort_unstable();

    let select_list = schema
        .columns
        .iter()
        .map(|c| {
            let q = quote_ident(&c.name);
            format!("{q}, CAST({q} AS TEXT)")
        })
        .collect::<Vec<_>>()
        .join(", ");
    let ordered = format!("SELECT {select_list} FROM {quoted} ORDER BY rowid");
    let mut stmt = match conn.prepare(&ordered) {
        Ok(stmt) => stmt,
        // WITHOUT ROWID tables: fall back to scan order.
        Err(_) => conn
            .prepare(&format!("SELECT {select_list} FROM {quoted}"))
            .map_err(query_err)?,
    };
    let mut per_column: Vec<Vec<String>> =
        vec![Vec::with_capacity(picks.len()); schema.columns.len()];
    if let Some(&last) = picks.last() {
        let mut rows = stmt.query([]).map_err(query_err)?;
        let mut ordinal = 0usize;
        let mut next = 0usize;
        while let Some(row) = rows.next().map_err(query_err)? {
            if ordinal == picks[next] {
                for (i, values) in per_column.iter_mut().enumerate() {
                    let raw = row.get_ref(2 * i).map_err(query_err)?;
                    let text: Option<String> = row.get(2 * i + 1).ok();
                    values.push(render_cell(raw, text));
                }
                next += 1;
                if next == picks.len() {
                    break;
                }
            }
            if ordinal == last {
                break;
            }
            ordinal += 1;
        }
    }
    Ok(CellSample {
        table: schema.name.clone(),
        per_column_values: schema
            .columns
            .iter()
            .map(|c| c.name.clone())
            .zip(per_column)
            .collect(),
    })
}

fn render_cell(raw: ValueRef<'_>, text: Option<String>) -> String {
    match raw {
        ValueRef::Null => "None".to_string(),
        ValueRef::Blob(bytes) => {
            let shown = &bytes[..bytes.len().min(BLOB_RENDER_BYTES)];
            format!("x'{}'", hex::encode(shown))
        }
        _ => text.unwrap_or_default(),
    }
}
