//! Run configuration and the per-question two-round flow.
//!
//! Stages, in order: `presql` (retrieve demonstrations, render the full
//! prompt, ask the PreSQL model), `link` (tables of the PreSQL, its grade),
//! `finsql` (pruned prompt fanned out to every FinSQL model) and `vote`
//! (execute candidates and vote). Each finished stage is appended to a JSONL
//! state file so an interrupted run picks up where it stopped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    database_file, load_catalog, sample_cells, table_seed, CellSample, DatabaseCatalog,
};
use crate::consistency::{
    difficulty_vote_with, naive_vote_with, RoutingTable, VoteDecision, VoteOptions,
};
use crate::evaluation::{
    ex_accuracy, recall_metrics_with_ids, render_summary, table_stats, EvalOptions, EvalReport,
    GoldInstance,
};
use crate::execution::execute;
use crate::gateway::{prompt_hash, Gateway, GenerationRecord, ModelSpec, RetryPolicy};
use crate::prompting::{prune, render_few_shot, render_zero_shot, PromptDoc, PromptFlags};
use crate::retrieval::{build_pool, desemanticize, DemoPool, ProviderConfig, TrainInstance};
use crate::sqlanalysis::{
    extract_sql, grade_difficulty, linked_tables, DifficultyGrade, Round, SqlCandidate,
};

/// SQL written for questions where no candidate could be produced.
pub const PLACEHOLDER_SQL: &str = "SELECT 1";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Catalog(#[from] crate::catalog::CatalogError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Dev,
    Test,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMode {
    Naive,
    DifficultyAware,
}

/// File locations; unset entries follow the Spider layout under `data_root`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataFiles {
    pub tables: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub train: Vec<PathBuf>,
    pub database_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub data_root: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub files: DataFiles,
    /// Where state, predictions and reports go; defaults to `runs/<run_id>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub flags: PromptFlags,
    pub presql_model: String,
    pub finsql_models: Vec<String>,
    #[serde(default = "default_voting")]
    pub voting: VotingMode,
    #[serde(default = "RoutingTable::default_slots")]
    pub routing: RoutingTable,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub provider: ProviderConfig,
    /// Cached demonstration pool; built from the training files when absent.
    #[serde(default)]
    pub demo_pool: Option<PathBuf>,
    #[serde(default)]
    pub exclude_same_db_demos: bool,
    /// Give the FinSQL round the same demonstrations as the PreSQL round.
    #[serde(default = "default_true")]
    pub reuse_demos_for_finsql: bool,
    #[serde(default)]
    pub random_pick: Option<u64>,
    #[serde(default)]
    pub float_eps: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_parallelism")]
    pub model_parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub dump_prompts: bool,
    #[serde(default)]
    pub limit: Option<usize>,
    pub models: Vec<ModelSpec>,
}

fn default_split() -> Split {
    Split::Dev
}
fn default_shots() -> usize {
    crate::retrieval::DEFAULT_TOP_K
}
fn default_voting() -> VotingMode {
    VotingMode::Naive
}
fn default_timeout() -> u64 {
    crate::execution::DEFAULT_TIMEOUT_MS
}
fn default_true() -> bool {
    true
}
fn default_workers() -> usize {
    4
}
fn default_parallelism() -> usize {
    crate::gateway::DEFAULT_PARALLELISM
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            let anchor = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            anchor(&mut cfg.data_root);
            if let Some(p) = cfg.demo_pool.as_mut() {
                anchor(p);
            }
            for m in &mut cfg.models {
                if let Some(p) = m.mock_fixtures.as_mut() {
                    anchor(p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let known: BTreeSet<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        if known.len() != self.models.len() {
            return Err(PipelineError::Config(
                "duplicate model_id in [[models]]".into(),
            ));
        }
        for id in std::iter::once(&self.presql_model).chain(&self.finsql_models) {
            if !known.contains(id.as_str()) {
                return Err(PipelineError::Config(format!(
                    "model `{id}` has no [[models]] entry"
                )));
            }
        }
        for m in &self.models {
            m.validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.voting == VotingMode::DifficultyAware {
            self.routing
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.split == Split::Custom && self.files.questions.is_none() {
            return Err(PipelineError::Config(
                "custom split needs files.questions".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.run_id))
    }

    fn data_path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        match explicit {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.data_root.join(p),
            None => self.data_root.join(default),
        }
    }

    pub fn tables_path(&self) -> PathBuf {
        let default = if self.split == Split::Test {
            "test_tables.json"
        } else {
            "tables.json"
        };
        self.data_path(&self.files.tables, default)
    }

    pub fn questions_path(&self) -> PathBuf {
        let default = if self.split == Split::Test {
            "test.json"
        } else {
            "dev.json"
        };
        self.data_path(&self.files.questions, default)
    }

    pub fn database_dir(&self) -> PathBuf {
        let default = if self.split == Split::Test {
            "test_database"
        } else {
            "database"
        };
        self.data_path(&self.files.database_dir, default)
    }

    pub fn train_paths(&self) -> Vec<PathBuf> {
        if self.files.train.is_empty() {
            vec![self.data_root.join("train_spider.json")]
        } else {
            self.files
                .train
                .iter()
                .map(|p| self.data_path(&Some(p.clone()), ""))
                .collect()
        }
    }
}

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub gold: Option<String>,
}

#[derive(Deserialize)]
struct SpiderEntry {
    db_id: String,
    question: String,
    #[serde(default)]
    query: Option<String>,
}

/// Reads a Spider-format question file; ids are positions in the file.
pub fn load_questions(path: &Path) -> Result<Vec<Question>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let entries: Vec<SpiderEntry> = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| Question {
            question_id: i.to_string(),
            db_id: e.db_id,
            question: e.question,
            gold: e.query,
        })
        .collect())
}

pub fn load_train(paths: &[PathBuf]) -> Result<Vec<TrainInstance>, PipelineError> {
    let mut out = Vec::new();
    for path in paths {
        for q in load_questions(path)? {
            let sql = q.gold.ok_or_else(|| {
                PipelineError::Data(format!("{}: training entry without query", path.display()))
            })?;
            out.push(TrainInstance {
                db_id: q.db_id,
                question: q.question,
                sql,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Presql,
    Link,
    Finsql,
    Vote,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "presql" => Ok(Stage::Presql),
            "link" => Ok(Stage::Link),
            "finsql" => Ok(Stage::Finsql),
            "vote" => Ok(Stage::Vote),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRef {
    pub position: usize,
    pub similarity: f32,
    pub db_id: String,
    pub question: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresqlRecord {
    pub skeleton: String,
    /// Most similar first.
    pub demos: Vec<DemoRef>,
    pub prompt_hash: String,
    pub generation: Option<GenerationRecord>,
    pub sql: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub linked: BTreeSet<String>,
    pub unknown: Vec<String>,
    /// Hardness of the PreSQL, used for difficulty-aware voting.
    pub grade: Option<DifficultyGrade>,
    /// False when round two falls back to the full schema.
    pub pruned: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinsqlSlot {
    pub model_id: String,
    pub generation: Option<GenerationRecord>,
    pub sql: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinsqlRecord {
    pub prompt_hash: String,
    pub slots: Vec<FinsqlSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub final_sql: String,
    pub decision: Option<VoteDecision>,
    pub candidates: Vec<SqlCandidate>,
    pub error: Option<String>,
}

/// Everything known about one question, stage by stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionState {
    pub question: Question,
    pub presql: Option<PresqlRecord>,
    pub link: Option<LinkRecord>,
    pub finsql: Option<FinsqlRecord>,
    pub vote: Option<VoteRecord>,
}

impl QuestionState {
    pub fn new(question: Question) -> Self {
        QuestionState {
            question,
            presql: None,
            link: None,
            finsql: None,
            vote: None,
        }
    }

    pub fn completed(&self, stage: Stage) -> bool {
        match stage {
            Stage::Presql => self.presql.is_some(),
            Stage::Link => self.link.is_some(),
            Stage::Finsql => self.finsql.is_some(),
            Stage::Vote => self.vote.is_some(),
        }
    }

    pub fn final_sql(&self) -> Option<&str> {
        self.vote.as_ref().map(|v| v.final_sql.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateLine {
    run_id: String,
    question_id: String,
    stage: Stage,
    payload: serde_json::Value,
}

/// Append-only JSONL store of finished stages. One writer at a time.
pub struct StateStore {
    path: PathBuf,
    run_id: String,
    writer: Mutex<File>,
}

impl StateStore {
    pub fn open(path: &Path, run_id: &str) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(io_err(path))?;
        // A killed run may leave a partial last line; start on a fresh one.
        let len = file.metadata().map_err(io_err(path))?.len();
        if len > 0 {
            let bytes = fs::read(path).map_err(io_err(path))?;
            if bytes.last() != Some(&b'\n') {
                file.write_all(b"\n").map_err(io_err(path))?;
            }
        }
        Ok(StateStore {
            path: path.to_path_buf(),
            run_id: run_id.to_string(),
            writer: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stage payloads recorded for this run, keyed by question id.
    pub fn load(
        &self,
    ) -> Result<HashMap<String, BTreeMap<Stage, serde_json::Value>>, PipelineError> {
        let file = File::open(&self.path).map_err(io_err(&self.path))?;
        let mut out: HashMap<String, BTreeMap<Stage, serde_json::Value>> = HashMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&self.path))?;
            if line.trim().is_empty() {
                continue;
            }
            let Ok(record) = serde_json::from_str::<StateLine>(&line) else {
                tracing::warn!(path = %self.path.display(), "skipping malformed state line");
                continue;
            };
            if record.run_id == self.run_id {
                out.entry(record.question_id)
                    .or_default()
                    .insert(record.stage, record.payload);
            }
        }
        Ok(out)
    }

    pub fn append<T: Serialize>(
        &self,
        question_id: &str,
        stage: Stage,
        payload: &T,
    ) -> Result<(), PipelineError> {
        let line = StateLine {
            run_id: self.run_id.clone(),
            question_id: question_id.to_string(),
            stage,
            payload: serde_json::to_value(payload)
                .map_err(|e| PipelineError::Data(e.to_string()))?,
        };
        let mut text =
            serde_json::to_string(&line).map_err(|e| PipelineError::Data(e.to_string()))?;
        text.push('\n');
        let mut file = self.writer.lock().unwrap();
        file.write_all(text.as_bytes())
            .map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }
}

fn restore(
    question: Question,
    stages: Option<&BTreeMap<Stage, serde_json::Value>>,
) -> QuestionState {
    let mut state = QuestionState::new(question);
    let Some(stages) = stages else {
        return state;
    };
    let get = |stage| stages.get(&stage).cloned();
    state.presql = get(Stage::Presql).and_then(|v| serde_json::from_value(v).ok());
    if state.presql.is_some() {
        state.link = get(Stage::Link).and_then(|v| serde_json::from_value(v).ok());
    }
    if state.link.is_some() {
        state.finsql = get(Stage::Finsql).and_then(|v| serde_json::from_value(v).ok());
    }
    if state.finsql.is_some() {
        state.vote = get(Stage::Vote).and_then(|v| serde_json::from_value(v).ok());
    }
    state
}

/// Shared, read-only resources for a run.
pub struct Pipeline {
    cfg: RunConfig,
    catalog: DatabaseCatalog,
    database_dir: PathBuf,
    pool: Option<DemoPool>,
    gateway: Gateway,
    models: HashMap<String, ModelSpec>,
    samples: Mutex<HashMap<String, Arc<Vec<CellSample>>>>,
}

/// Result of [`Pipeline::run_split`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub states: Vec<QuestionState>,
    pub predictions_path: Option<PathBuf>,
    pub report: Option<EvalReport>,
    /// Questions that did not reach the requested stage.
    pub incomplete: usize,
}

impl Pipeline {
    /// Load catalog, databases and demonstration pool as configured.
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let catalog = load_catalog(&cfg.tables_path())?;
        let database_dir = cfg.database_dir();
        let pool = if cfg.shots == 0 {
            None
        } else {
            Some(Self::obtain_pool(&cfg)?)
        };
        let gateway = Gateway::new(cfg.retry.clone(), cfg.model_parallelism);
        Ok(Self::from_parts(cfg, catalog, database_dir, pool, gateway))
    }

    fn obtain_pool(cfg: &RunConfig) -> Result<DemoPool, PipelineError> {
        if let Some(path) = &cfg.demo_pool {
            if path.is_file() {
                return Ok(DemoPool::load(path)?);
            }
        }
        let train = load_train(&cfg.train_paths())?;
        let mut catalog = load_catalog(&cfg.tables_path())?;
        // Training databases may live in a separate manifest.
        let train_tables = cfg.data_root.join("tables.json");
        if train_tables != cfg.tables_path() && train_tables.is_file() {
            catalog = load_catalog(&train_tables)?;
        }
        let pool = build_pool(&train, &catalog, cfg.provider.build())?;
        if let Some(path) = &cfg.demo_pool {
            pool.save(path)?;
        }
        Ok(pool)
    }

    pub fn from_parts(
        cfg: RunConfig,
        catalog: DatabaseCatalog,
        database_dir: PathBuf,
        pool: Option<DemoPool>,
        gateway: Gateway,
    ) -> Self {
        let models = cfg
            .models
            .iter()
            .map(|m| (m.model_id.clone(), m.clone()))
            .collect();
        Pipeline {
            cfg,
            catalog,
            database_dir,
            pool,
            gateway,
            models,
            samples: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &DatabaseCatalog {
        &self.catalog
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn model(&self, id: &str) -> &ModelSpec {
        self.models.get(id).expect("validated model id")
    }

    fn cell_samples(&self, db_id: &str) -> Result<Arc<Vec<CellSample>>, PipelineError> {
        if let Some(s) = self.samples.lock().unwrap().get(db_id) {
            return Ok(s.clone());
        }
        let schema = self
            .catalog
            .get(db_id)
            .ok_or_else(|| PipelineError::Data(format!("unknown database `{db_id}`")))?;
        let file = database_file(&self.database_dir, db_id);
        let samples = schema
            .tables
            .iter()
            .map(|t| {
                sample_cells(
                    &file,
                    t,
                    self.cfg.flags.cv_rows,
                    table_seed(self.cfg.seed, db_id, &t.name),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let samples = Arc::new(samples);
        self.samples
            .lock()
            .unwrap()
            .insert(db_id.to_string(), samples.clone());
        Ok(samples)
    }

    /// Question skeleton and retrieved demonstrations, most similar first.
    pub fn retrieve(&self, q: &Question) -> Result<(String, Vec<DemoRef>), PipelineError> {
        let schema = self
            .catalog
            .get(&q.db_id)
            .ok_or_else(|| PipelineError::Data(format!("unknown database `{}`", q.db_id)))?;
        let skeleton = desemanticize(&q.question, schema);
        let Some(pool) = &self.pool else {
            return Ok((skeleton, Vec::new()));
        };
        let exclude_db = self.cfg.exclude_same_db_demos;
        let demos = pool
            .top_k_filtered(&skeleton, self.cfg.shots, |d| {
                !(exclude_db && d.db_id == q.db_id)
            })?
            .into_iter()
            .map(|s| DemoRef {
                position: s.position,
                similarity: s.similarity,
                db_id: s.demo.db_id.clone(),
                question: s.demo.question.clone(),
                sql: s.demo.sql.clone(),
            })
            .collect();
        Ok((skeleton, demos))
    }

    /// Zero-shot prompt over the full schema.
    pub fn base_prompt(&self, q: &Question) -> Result<PromptDoc, PipelineError> {
        let schema = self
            .catalog
            .get(&q.db_id)
            .ok_or_else(|| PipelineError::Data(format!("unknown database `{}`", q.db_id)))?;
        let samples = if self.cfg.flags.use_cv {
            self.cell_samples(&q.db_id)?
        } else {
            Arc::new(Vec::new())
        };
        render_zero_shot(schema, &samples, &q.question, self.cfg.flags)
            .map_err(|e| PipelineError::Data(e.to_string()))
    }

    fn with_demos(base: &PromptDoc, demos: &[DemoRef]) -> PromptDoc {
        // The most similar demonstration sits closest to the question.
        let pairs: Vec<(String, String)> = demos
            .iter()
            .rev()
            .map(|d| (d.question.clone(), d.sql.clone()))
            .collect();
        render_few_shot(&pairs, base)
    }

    /// Round-one prompt: demonstrations plus the full schema.
    pub fn presql_prompt(
        &self,
        q: &Question,
        demos: &[DemoRef],
    ) -> Result<PromptDoc, PipelineError> {
        Ok(Self::with_demos(&self.base_prompt(q)?, demos))
    }

    /// Round-two prompt: the round-one prompt pruned to `linked`, or left
    /// whole when `linked` is `None`.
    pub fn finsql_prompt(
        &self,
        q: &Question,
        demos: &[DemoRef],
        linked: Option<&BTreeSet<String>>,
    ) -> Result<PromptDoc, PipelineError> {
        let demos = if self.cfg.reuse_demos_for_finsql {
            demos
        } else {
            &[]
        };
        let full = Self::with_demos(&self.base_prompt(q)?, demos);
        Ok(match linked {
            Some(tables) => {
                let names: Vec<&String> = tables.iter().collect();
                prune(&full, &names).doc
            }
            None => full,
        })
    }

    fn dump_prompt(&self, q: &Question, round: &str, text: &str) {
        if !self.cfg.dump_prompts {
            return;
        }
        let dir = self.cfg.output_dir().join("prompts");
        if fs::create_dir_all(&dir).is_ok() {
            let _ = fs::write(dir.join(format!("{}.{round}.txt", q.question_id)), text);
        }
    }

    fn stage_presql(&self, q: &Question) -> Result<PresqlRecord, PipelineError> {
        let (skeleton, demos) = self.retrieve(q)?;
        let prompt = self.presql_prompt(q, &demos)?.render();
        self.dump_prompt(q, "presql", &prompt);
        let spec = self.model(&self.cfg.presql_model);
        let (generation, sql, error) = match self.gateway.generate(spec, &prompt) {
            Ok(rec) => match extract_sql(&rec.raw_output) {
                Ok(sql) => (Some(rec), Some(sql), None),
                Err(e) => (Some(rec), None, Some(e.to_string())),
            },
            Err(e) => (None, None, Some(e.to_string())),
        };
        Ok(PresqlRecord {
            skeleton,
            demos,
            prompt_hash: prompt_hash(&prompt),
            generation,
            sql,
            error,
        })
    }

    fn stage_link(&self, q: &Question, presql: &PresqlRecord) -> LinkRecord {
        let schema = self.catalog.get(&q.db_id).expect("checked in presql stage");
        let Some(sql) = &presql.sql else {
            return LinkRecord {
                linked: BTreeSet::new(),
                unknown: Vec::new(),
                grade: None,
                pruned: false,
                error: presql.error.clone(),
            };
        };
        match linked_tables(sql, schema) {
            Ok(links) => LinkRecord {
                pruned: !links.tables.is_empty(),
                grade: grade_difficulty(sql).ok(),
                linked: links.tables,
                unknown: links.unknown,
                error: None,
            },
            Err(e) => LinkRecord {
                linked: BTreeSet::new(),
                unknown: Vec::new(),
                grade: None,
                pruned: false,
                error: Some(e.to_string()),
            },
        }
    }

    fn stage_finsql(
        &self,
        q: &Question,
        presql: &PresqlRecord,
        link: &LinkRecord,
    ) -> Result<FinsqlRecord, PipelineError> {
        let linked = link.pruned.then_some(&link.linked);
        let prompt = self.finsql_prompt(q, &presql.demos, linked)?.render();
        self.dump_prompt(q, "finsql", &prompt);
        let requests: Vec<(ModelSpec, String)> = self
            .cfg
            .finsql_models
            .iter()
            .map(|id| (self.model(id).clone(), prompt.clone()))
            .collect();
        let slots = self
            .gateway
            .generate_all(&requests)
            .into_iter()
            .zip(&self.cfg.finsql_models)
            .map(|(result, model_id)| match result {
                Ok(rec) => match extract_sql(&rec.raw_output) {
                    Ok(sql) => FinsqlSlot {
                        model_id: model_id.clone(),
                        generation: Some(rec),
                        sql: Some(sql),
                        error: None,
                    },
                    Err(e) => FinsqlSlot {
                        model_id: model_id.clone(),
                        generation: Some(rec),
                        sql: None,
                        error: Some(e.to_string()),
                    },
                },
                Err(e) => FinsqlSlot {
                    model_id: model_id.clone(),
                    generation: None,
                    sql: None,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        Ok(FinsqlRecord {
            prompt_hash: prompt_hash(&prompt),
            slots,
        })
    }

    fn stage_vote(
        &self,
        q: &Question,
        presql: &PresqlRecord,
        link: &LinkRecord,
        finsql: &FinsqlRecord,
    ) -> VoteRecord {
        let db_file = database_file(&self.database_dir, &q.db_id);
        let mut candidates: Vec<SqlCandidate> = finsql
            .slots
            .iter()
            .filter_map(|slot| {
                let sql = slot.sql.as_ref()?;
                let mut c = SqlCandidate::new(&slot.model_id, Round::Finsql, sql);
                c.linked_tables = link.linked.clone();
                Some(c)
            })
            .collect();
        // The PreSQL votes last, and only when it parsed.
        if let (Some(sql), None) = (&presql.sql, &link.error) {
            let mut c = SqlCandidate::new(&self.cfg.presql_model, Round::Presql, sql);
            c.linked_tables = link.linked.clone();
            c.grade = link.grade;
            candidates.push(c);
        }
        for c in &mut candidates {
            c.outcome = Some(execute(&db_file, &c.sql, self.cfg.timeout_ms));
        }
        let options = VoteOptions {
            random_pick: self
                .cfg
                .random_pick
                .map(|seed| table_seed(seed, "vote", &q.question_id)),
        };
        let decision = match (self.cfg.voting, link.grade) {
            (VotingMode::DifficultyAware, Some(grade)) => {
                difficulty_vote_with(grade, &self.cfg.routing, &candidates, &options)
            }
            _ => naive_vote_with(&candidates, &options),
        };
        match decision {
            Ok(d) => VoteRecord {
                final_sql: d.chosen.sql.clone(),
                decision: Some(d),
                candidates,
                error: None,
            },
            Err(e) => VoteRecord {
                final_sql: PLACEHOLDER_SQL.to_string(),
                decision: None,
                candidates,
                error: Some(e.to_string()),
            },
        }
    }

    /// Advance one question through every stage up to and including `until`,
    /// persisting each newly finished stage.
    pub fn advance(
        &self,
        mut state: QuestionState,
        until: Stage,
        store: Option<&StateStore>,
    ) -> Result<QuestionState, PipelineError> {
        let q = state.question.clone();
        let persist = |stage: Stage, payload: &dyn erased::Payload| -> Result<(), PipelineError> {
            match store {
                Some(s) => s.append(&q.question_id, stage, &payload.to_json()),
                None => Ok(()),
            }
        };
        if state.presql.is_none() {
            let rec = self.stage_presql(&q)?;
            persist(Stage::Presql, &rec)?;
            state.presql = Some(rec);
        }
        if until == Stage::Presql {
            return Ok(state);
        }
        let presql = state.presql.clone().unwrap();
        if state.link.is_none() {
            let rec = self.stage_link(&q, &presql);
            persist(Stage::Link, &rec)?;
            state.link = Some(rec);
        }
        if until == Stage::Link {
            return Ok(state);
        }
        let link = state.link.clone().unwrap();
        if state.finsql.is_none() {
            let rec = self.stage_finsql(&q, &presql, &link)?;
            persist(Stage::Finsql, &rec)?;
            state.finsql = Some(rec);
        }
        if until == Stage::Finsql {
            return Ok(state);
        }
        let finsql = state.finsql.clone().unwrap();
        if state.vote.is_none() {
            let rec = self.stage_vote(&q, &presql, &link, &finsql);
            persist(Stage::Vote, &rec)?;
            state.vote = Some(rec);
        }
        Ok(state)
    }

    /// All four stages for one question, without persistence.
    pub fn run_question(&self, q: &Question) -> Result<QuestionState, PipelineError> {
        self.advance(QuestionState::new(q.clone()), Stage::Vote, None)
    }

    /// Process `questions` up to `until`, resuming from the run's state file.
    /// When the vote stage is reached, writes predictions and reports.
    pub fn run_questions(
        &self,
        questions: &[Question],
        until: Stage,
    ) -> Result<RunOutcome, PipelineError> {
        let out_dir = self.cfg.output_dir();
        fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
        let store = StateStore::open(&out_dir.join("state.jsonl"), &self.cfg.run_id)?;
        let recorded = store.load()?;

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers.max(1))
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let results: Vec<Result<QuestionState, PipelineError>> = pool.install(|| {
            questions
                .par_iter()
                .map(|q| {
                    let state = restore(q.clone(), recorded.get(&q.question_id));
                    self.advance(state, until, Some(&store))
                })
                .collect()
        });

        let mut states = Vec::with_capacity(results.len());
        let mut incomplete = 0;
        for (q, r) in questions.iter().zip(results) {
            match r {
                Ok(s) => {
                    if !s.completed(until) {
                        incomplete += 1;
                    }
                    states.push(s);
                }
                Err(e) => {
                    tracing::error!(question = %q.question_id, error = %e, "question failed");
                    incomplete += 1;
                    states.push(QuestionState::new(q.clone()));
                }
            }
        }

        if until != Stage::Vote {
            return Ok(RunOutcome {
                states,
                predictions_path: None,
                report: None,
                incomplete,
            });
        }

        let predictions_path = out_dir.join("predictions.sql");
        let mut text = String::new();
        for s in &states {
            let sql = s.final_sql().unwrap_or(PLACEHOLDER_SQL);
            text.push_str(&sql.split_whitespace().collect::<Vec<_>>().join(" "));
            text.push('\n');
        }
        fs::write(&predictions_path, text).map_err(io_err(&predictions_path))?;

        let report = if !states.is_empty() && states.iter().all(|s| s.question.gold.is_some()) {
            let report = self.evaluate(&states)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| PipelineError::Data(e.to_string()))?;
            let report_path = out_dir.join("report.json");
            fs::write(&report_path, json).map_err(io_err(&report_path))?;
            let summary_path = out_dir.join("summary.txt");
            fs::write(&summary_path, render_summary(&report)).map_err(io_err(&summary_path))?;
            Some(report)
        } else {
            None
        };
        Ok(RunOutcome {
            states,
            predictions_path: Some(predictions_path),
            report,
            incomplete,
        })
    }

    /// Load the configured split and run it.
    pub fn run_split(&self, until: Stage) -> Result<RunOutcome, PipelineError> {
        let mut questions = load_questions(&self.cfg.questions_path())?;
        if let Some(limit) = self.cfg.limit {
            questions.truncate(limit);
        }
        self.run_questions(&questions, until)
    }

    fn evaluate(&self, states: &[QuestionState]) -> Result<EvalReport, PipelineError> {
        let golds: Vec<GoldInstance> = states
            .iter()
            .map(|s| GoldInstance {
                question_id: s.question.question_id.clone(),
                db_id: s.question.db_id.clone(),
                sql: s.question.gold.clone().unwrap_or_default(),
            })
            .collect();
        let preds: Vec<&str> = states
            .iter()
            .map(|s| s.final_sql().unwrap_or(PLACEHOLDER_SQL))
            .collect();
        let options = EvalOptions {
            timeout_ms: self.cfg.timeout_ms,
            float_eps: self.cfg.float_eps,
        };
        let mut report = ex_accuracy(&preds, &golds, &self.database_dir, &options)?;

        let ids: Vec<String> = states
            .iter()
            .map(|s| s.question.question_id.clone())
            .collect();
        let linked: Vec<BTreeSet<String>> = states
            .iter()
            .map(|s| {
                s.link
                    .as_ref()
                    .map(|l| l.linked.clone())
                    .unwrap_or_default()
            })
            .collect();
        let gt: Vec<BTreeSet<String>> = states
            .iter()
            .map(|s| {
                let schema = self.catalog.get(&s.question.db_id);
                match (schema, &s.question.gold) {
                    (Some(schema), Some(gold)) => linked_tables(gold, schema)
                        .map(|l| l.tables)
                        .unwrap_or_default(),
                    _ => BTreeSet::new(),
                }
            })
            .collect();
        report.recall = Some(recall_metrics_with_ids(&ids, &linked, &gt)?);

        let mut before = Vec::with_capacity(states.len());
        let mut after = Vec::with_capacity(states.len());
        for s in states {
            let (Some(presql), Some(link)) = (&s.presql, &s.link) else {
                continue;
            };
            before.push(self.presql_prompt(&s.question, &presql.demos)?);
            after.push(self.finsql_prompt(
                &s.question,
                &presql.demos,
                link.pruned.then_some(&link.linked),
            )?);
        }
        report.prompt_stats = Some(table_stats(&before, &after)?);
        Ok(report)
    }
}

/// Object-safe serialization for stage payloads.
mod erased {
    pub trait Payload {
        fn to_json(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Payload for T {
        fn to_json(&self) -> serde_json::Value {
            serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
        }
    }
}

/// Write mock fixtures mapping prompt digests to responses.
pub fn write_mock_fixtures(
    path: &Path,
    entries: &BTreeMap<String, String>,
) -> Result<(), PipelineError> {
    let json =
        serde_json::to_string_pretty(entries).map_err(|e| PipelineError::Data(e.to_string()))?;
    fs::write(path, json).map_err(io_err(path))
}
