//! Question skeletons and similarity retrieval over a demonstration pool.
//!
//! A skeleton is the question with schema mentions and quoted literals
//! replaced by [`MASK`]. Skeletons are embedded by a [`SimilarityProvider`]
//! and ranked by cosine similarity.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{DatabaseCatalog, DbSchema};

pub const MASK: &str = "<mask>";
pub const DEFAULT_TOP_K: usize = 9;
const POOL_FORMAT: &str = "petsql-demo-pool";
const POOL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("unknown database `{0}`")]
    UnknownDatabase(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("pool cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Word(String),
    Quoted(String),
    Mask,
    Other(String),
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn segments(text: &str) -> Vec<Segment> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let push_other = |out: &mut Vec<Segment>, c: char| match out.last_mut() {
        Some(Segment::Other(s)) => s.push(c),
        _ => out.push(Segment::Other(c.to_string())),
    };
    while i < chars.len() {
        let c = chars[i];
        if text_at(&chars, i, MASK) {
            out.push(Segment::Mask);
            i += MASK.chars().count();
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len()
                && (is_word_char(chars[i])
                    || (chars[i] == '\''
                        && i + 1 < chars.len()
                        && is_word_char(chars[i + 1])
                        && i > start))
            {
                i += 1;
            }
            out.push(Segment::Word(chars[start..i].iter().collect()));
        } else if (c == '\'' || c == '"' || c == '`') && (i == 0 || !is_word_char(chars[i - 1])) {
            match chars[i + 1..].iter().position(|&d| d == c) {
                Some(len) if len > 0 => {
                    let end = i + 1 + len;
                    out.push(Segment::Quoted(chars[i..=end].iter().collect()));
                    i = end + 1;
                }
                _ => {
                    push_other(&mut out, c);
                    i += 1;
                }
            }
        } else {
            push_other(&mut out, c);
            i += 1;
        }
    }
    out
}

fn text_at(chars: &[char], i: usize, needle: &str) -> bool {
    needle
        .chars()
        .enumerate()
        .all(|(k, n)| chars.get(i + k) == Some(&n))
}

/// Lower-cased surface form of a word plus its plausible singular forms.
/// Two words match when their form sets intersect, so "houses" meets
/// "house" and "classes" meets "class".
pub fn word_forms(word: &str) -> Vec<String> {
    let mut w = word.to_lowercase();
    if let Some(stem) = w.strip_suffix("'s") {
        w = stem.to_string();
    }
    let n = w.chars().count();
    let mut forms = vec![w.clone()];
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") {
        forms.push(w[..w.len() - 1].to_string());
        if w.ends_with("es") {
            forms.push(w[..w.len() - 2].to_string());
        }
        if n > 4 && w.ends_with("ies") {
            forms.push(format!("{}y", &w[..w.len() - 3]));
        }
    }
    forms
}

fn forms_meet(a: &[String], b: &[String]) -> bool {
    a.iter().any(|x| b.contains(x))
}

/// Split a schema identifier into lower-case words: underscores and
/// camel-case boundaries separate words.
fn identifier_words(name: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut prev: Option<char> = None;
    for c in name.chars() {
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else {
            if c.is_uppercase() && prev.is_some_and(|p| p.is_lowercase()) && !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            current.push(c);
        }
        prev = Some(c);
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.iter().map(|w| w.to_lowercase()).collect()
}

type Phrase = Vec<Vec<String>>;

fn schema_phrases(schema: &DbSchema, values: &[String]) -> Vec<Phrase> {
    let mut phrases: Vec<Phrase> = Vec::new();
    let mut add = |words: Vec<String>| {
        let p: Phrase = words.iter().map(|w| word_forms(w)).collect();
        if !p.is_empty() && !phrases.contains(&p) {
            phrases.push(p);
        }
    };
    for table in &schema.tables {
        add(identifier_words(&table.name));
        for column in &table.columns {
            add(identifier_words(&column.name));
        }
    }
    for value in values {
        let words: Vec<String> = segments(value)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Word(w) => Some(w),
                _ => None,
            })
            .collect();
        add(words);
    }
    phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
    phrases
}

/// Mask table names, column names and quoted literals in a question.
pub fn desemanticize(question: &str, schema: &DbSchema) -> String {
    desemanticize_with_values(question, schema, &[])
}

/// Like [`desemanticize`], additionally masking exact mentions of `values`.
pub fn desemanticize_with_values(question: &str, schema: &DbSchema, values: &[String]) -> String {
    let phrases = schema_phrases(schema, values);
    let segs = segments(question);
    let mut out: Vec<Segment> = Vec::with_capacity(segs.len());
    let mut i = 0;
    while i < segs.len() {
        match &segs[i] {
            Segment::Word(_) => {
                // Words reachable from i across whitespace-only gaps, with their positions.
                let mut run: Vec<(usize, Vec<String>)> = Vec::new();
                let mut j = i;
                while let Some(Segment::Word(w)) = segs.get(j) {
                    run.push((j, word_forms(w)));
                    match segs.get(j + 1) {
                        Some(Segment::Other(s)) if s.chars().all(char::is_whitespace) => j += 2,
                        _ => break,
                    }
                }
                let matched = phrases.iter().find(|p| {
                    p.len() <= run.len() && p.iter().zip(&run).all(|(a, (_, b))| forms_meet(a, b))
                });
                match matched {
                    Some(p) => {
                        out.push(Segment::Mask);
                        i = run[p.len() - 1].0 + 1;
                    }
                    None => {
                        out.push(segs[i].clone());
                        i += 1;
                    }
                }
            }
            Segment::Quoted(_) => {
                out.push(Segment::Mask);
                i += 1;
            }
            other => {
                out.push(other.clone());
                i += 1;
            }
        }
    }
    render_collapsed(&out)
}

fn render_collapsed(segs: &[Segment]) -> String {
    let mut text = String::new();
    let mut i = 0;
    while i < segs.len() {
        match &segs[i] {
            Segment::Mask => {
                text.push_str(MASK);
                // Skip whitespace-separated masks that follow.
                let mut j = i + 1;
                loop {
                    match (segs.get(j), segs.get(j + 1)) {
                        (Some(Segment::Mask), _) => j += 1,
                        (Some(Segment::Other(s)), Some(Segment::Mask))
                            if s.chars().all(char::is_whitespace) =>
                        {
                            j += 2
                        }
                        _ => break,
                    }
                }
                i = j;
            }
            Segment::Word(s) | Segment::Quoted(s) | Segment::Other(s) => {
                text.push_str(s);
                i += 1;
            }
        }
    }
    text
}

/// Sparse vector with sorted, distinct indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseVector {
    pub fn from_dense(dense: &[f32]) -> Self {
        let mut v = SparseVector::default();
        for (i, x) in dense.iter().enumerate() {
            if *x != 0.0 {
                v.indices.push(i as u32);
                v.values.push(*x);
            }
        }
        v
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|x| *x /= n);
        }
        self
    }

    pub fn dot(&self, other: &SparseVector) -> f32 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn cosine(&self, other: &SparseVector) -> f32 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

/// Turns skeletons into vectors. Deterministic for a fixed configuration.
pub trait SimilarityProvider: Send + Sync {
    fn name(&self) -> String;
    fn dimension(&self) -> usize;
    /// Adapt to the pool corpus before the pool is embedded.
    fn fit(&mut self, _corpus: &[String]) {}
    fn embed(&self, texts: &[String]) -> Result<Vec<SparseVector>, RetrievalError>;
    fn config(&self) -> ProviderConfig;
    /// Learned state needed to embed new texts consistently with the pool.
    fn state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    #[default]
    TfidfTrigram,
    Remote {
        url: String,
        model: String,
        #[serde(default)]
        auth_env_var: Option<String>,
    },
}

impl ProviderConfig {
    pub fn build(&self) -> Box<dyn SimilarityProvider> {
        match self {
            ProviderConfig::TfidfTrigram => Box::new(TfidfTrigrams::default()),
            ProviderConfig::Remote {
                url,
                model,
                auth_env_var,
            } => Box::new(RemoteEmbeddings::new(url, model, auth_env_var.clone())),
        }
    }
}

/// TF-IDF over character trigrams of the lower-cased, space-padded text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TfidfTrigrams {
    vocabulary: BTreeMap<String, u32>,
    idf: Vec<f32>,
}

pub fn char_trigrams(text: &str) -> Vec<String> {
    let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

impl TfidfTrigrams {
    pub fn fitted(corpus: &[String]) -> Self {
        let mut p = TfidfTrigrams::default();
        p.fit(corpus);
        p
    }

    fn vector(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<u32, f32> = BTreeMap::new();
        for gram in char_trigrams(text) {
            if let Some(&id) = self.vocabulary.get(&gram) {
                *counts.entry(id).or_default() += 1.0;
            }
        }
        SparseVector {
            indices: counts.keys().copied().collect(),
            values: counts
                .iter()
                .map(|(id, tf)| tf * self.idf[*id as usize])
                .collect(),
        }
        .normalized()
    }
}

impl SimilarityProvider for TfidfTrigrams {
    fn name(&self) -> String {
        "tfidf-char-trigram".to_string()
    }

    fn dimension(&self) -> usize {
        self.vocabulary.len()
    }

    fn fit(&mut self, corpus: &[String]) {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut grams = char_trigrams(doc);
            grams.sort();
            grams.dedup();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let n = corpus.len() as f32;
        self.vocabulary = df
            .keys()
            .enumerate()
            .map(|(i, g)| (g.clone(), i as u32))
            .collect();
        self.idf = df
            .values()
            .map(|&d| ((1.0 + n) / (1.0 + d as f32)).ln() + 1.0)
            .collect();
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<SparseVector>, RetrievalError> {
        Ok(texts.par_iter().map(|t| self.vector(t)).collect())
    }

    fn config(&self) -> ProviderConfig {
        ProviderConfig::TfidfTrigram
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbeddings {
    url: String,
    model: String,
    auth_env_var: Option<String>,
    client: reqwest::blocking::Client,
    dimension: std::sync::OnceLock<usize>,
}

const REMOTE_BATCH: usize = 128;

impl RemoteEmbeddings {
    pub fn new(url: &str, model: &str, auth_env_var: Option<String>) -> Self {
        RemoteEmbeddings {
            url: url.to_string(),
            model: model.to_string(),
            auth_env_var,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("HTTP client"),
            dimension: std::sync::OnceLock::new(),
        }
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, RetrievalError> {
        #[derive(Deserialize)]
        struct Item {
            index: usize,
            embedding: Vec<f32>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Item>,
        }
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "model": self.model, "input": batch }));
        if let Some(var) = &self.auth_env_var {
            let key = std::env::var(var).map_err(|_| {
                RetrievalError::Provider(format!("environment variable {var} not set"))
            })?;
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrievalError::Provider(format!("HTTP {}", resp.status())));
        }
        let mut body: Response = resp
            .json()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        body.data.sort_by_key(|d| d.index);
        if body.data.len() != batch.len() {
            return Err(RetrievalError::Provider(format!(
                "asked for {} embeddings, got {}",
                batch.len(),
                body.data.len()
            )));
        }
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl SimilarityProvider for RemoteEmbeddings {
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dimension(&self) -> usize {
        self.dimension.get().copied().unwrap_or(0)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<SparseVector>, RetrievalError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(REMOTE_BATCH) {
            for dense in self.request(batch)? {
                let dim = *self.dimension.get_or_init(|| dense.len());
                if dense.len() != dim {
                    return Err(RetrievalError::Provider(format!(
                        "embedding dimension changed from {dim} to {}",
                        dense.len()
                    )));
                }
                out.push(SparseVector::from_dense(&dense).normalized());
            }
        }
        Ok(out)
    }

    fn config(&self) -> ProviderConfig {
        ProviderConfig::Remote {
            url: self.url.clone(),
            model: self.model.clone(),
            auth_env_var: self.auth_env_var.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub skeleton: String,
    pub question: String,
    pub sql: String,
    pub db_id: String,
}

#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub db_id: String,
    pub question: String,
    pub sql: String,
}

/// A retrieved demonstration and its similarity to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<'a> {
    pub demo: &'a Demonstration,
    pub position: usize,
    pub similarity: f32,
}

pub struct DemoPool {
    demos: Vec<Demonstration>,
    vectors: Vec<SparseVector>,
    provider: Box<dyn SimilarityProvider>,
}

impl std::fmt::Debug for DemoPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DemoPool")
            .field("demos", &self.demos.len())
            .field("provider", &self.provider.name())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    format: String,
    version: u32,
    provider: ProviderConfig,
    provider_name: String,
    provider_state: serde_json::Value,
    demos: Vec<Demonstration>,
    vectors: Vec<SparseVector>,
}

/// Skeletonize every instance against its own schema and index the result.
pub fn build_pool(
    instances: &[TrainInstance],
    catalog: &DatabaseCatalog,
    mut provider: Box<dyn SimilarityProvider>,
) -> Result<DemoPool, RetrievalError> {
    let demos = instances
        .iter()
        .map(|inst| {
            let schema = catalog
                .get(&inst.db_id)
                .ok_or_else(|| RetrievalError::UnknownDatabase(inst.db_id.clone()))?;
            Ok(Demonstration {
                skeleton: desemanticize(&inst.question, schema),
                question: inst.question.clone(),
                sql: inst.sql.clone(),
                db_id: inst.db_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let skeletons: Vec<String> = demos.iter().map(|d| d.skeleton.clone()).collect();
    provider.fit(&skeletons);
    let vectors = provider.embed(&skeletons)?;
    Ok(DemoPool {
        demos,
        vectors,
        provider,
    })
}

impl DemoPool {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn provider_name(&self) -> String {
        self.provider.name()
    }

    pub fn embed_one(&self, text: &str) -> Result<SparseVector, RetrievalError> {
        Ok(self
            .provider
            .embed(&[text.to_string()])?
            .pop()
            .unwrap_or_default())
    }

    /// The `k` most similar demonstrations, best first; ties keep pool order.
    pub fn top_k(&self, skeleton: &str, k: usize) -> Result<Vec<Scored<'_>>, RetrievalError> {
        self.top_k_filtered(skeleton, k, |_| true)
    }

    /// [`DemoPool::top_k`] restricted to demonstrations accepted by `keep`.
    pub fn top_k_filtered(
        &self,
        skeleton: &str,
        k: usize,
        keep: impl Fn(&Demonstration) -> bool,
    ) -> Result<Vec<Scored<'_>>, RetrievalError> {
        if k == 0 || self.demos.is_empty() {
            return Ok(Vec::new());
        }
        let target = self.embed_one(skeleton)?;
        let mut scored: Vec<Scored<'_>> = self
            .demos
            .iter()
            .zip(&self.vectors)
            .enumerate()
            .filter(|(_, (d, _))| keep(d))
            .map(|(position, (demo, v))| Scored {
                demo,
                position,
                similarity: target.cosine(v),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.position.cmp(&b.position))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = PoolFile {
            format: POOL_FORMAT.to_string(),
            version: POOL_VERSION,
            provider: self.provider.config(),
            provider_name: self.provider.name(),
            provider_state: self.provider.state(),
            demos: self.demos.clone(),
            vectors: self.vectors.clone(),
        };
        let cache_err = |message: String| RetrievalError::Cache {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string(&file).map_err(|e| cache_err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| cache_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<DemoPool, RetrievalError> {
        let cache_err = |message: String| RetrievalError::Cache {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
        let file: PoolFile = serde_json::from_str(&text).map_err(|e| cache_err(e.to_string()))?;
        if file.format != POOL_FORMAT || file.version != POOL_VERSION {
            return Err(cache_err(format!(
                "unsupported header {} v{}",
                file.format, file.version
            )));
        }
        if file.demos.len() != file.vectors.len() {
            return Err(cache_err("demo and vector counts differ".to_string()));
        }
        let provider: Box<dyn SimilarityProvider> = match &file.provider {
            ProviderConfig::TfidfTrigram => {
                let p: TfidfTrigrams = serde_json::from_value(file.provider_state)
                    .map_err(|e| cache_err(format!("provider state: {e}")))?;
                Box::new(p)
            }
            remote => remote.build(),
        };
        Ok(DemoPool {
            demos: file.demos,
            vectors: file.vectors,
            provider,
        })
    }
}

/// Count how many pool entries share each skeleton; handy for pool diagnostics.
pub fn skeleton_histogram(pool: &DemoPool) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for d in &pool.demos {
        *counts.entry(d.skeleton.as_str()).or_default() += 1;
    }
    counts
}
