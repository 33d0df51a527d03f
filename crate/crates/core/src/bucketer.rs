//! Incremental bucketing of one task's ideas: shuffle, embed, retrieve
//! candidates, ask the judge, update the codebook. Runs can be checkpointed
//! and resumed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{BucketId, Codebook};
use crate::corpus::{IdeaKey, TaskCorpus};
use crate::embed::CachedEmbedder;
use crate::error::{Error, Result};
use crate::judge::{Judge, JudgeOutcome, JudgeRequest, PromptStrategy};

/// Maximum number of candidate buckets shown to the judge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LimitRepr", into = "LimitRepr")]
pub enum CandidateLimit {
    Top(usize),
    /// Every existing bucket is a candidate.
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LimitRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<LimitRepr> for CandidateLimit {
    type Error = String;

    fn try_from(r: LimitRepr) -> std::result::Result<Self, String> {
        match r {
            LimitRepr::Count(0) => Err("k_c must be at least 1".into()),
            LimitRepr::Count(n) => Ok(Self::Top(n)),
            LimitRepr::Word(w) if w.eq_ignore_ascii_case("all") => Ok(Self::All),
            LimitRepr::Word(w) => Err(format!("k_c must be a positive integer or \"all\", got `{w}`")),
        }
    }
}

impl From<CandidateLimit> for LimitRepr {
    fn from(l: CandidateLimit) -> Self {
        match l {
            CandidateLimit::Top(n) => LimitRepr::Count(n),
            CandidateLimit::All => LimitRepr::Word("all".into()),
        }
    }
}

impl CandidateLimit {
    pub fn as_option(self) -> Option<usize> {
        match self {
            Self::Top(n) => Some(n),
            Self::All => None,
        }
    }
}

impl std::str::FromStr for CandidateLimit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") || s == "inf" {
            return Ok(Self::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Self::Top(n)),
            _ => Err(Error::Config(format!("invalid K_c `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k_c: CandidateLimit,
    pub strategy: PromptStrategy,
    pub ordering_seed: u64,
    /// Attempts per idea before an unusable reply falls back to a new bucket.
    pub max_attempts: u32,
    /// Object named in the prompt, per task. Defaults to the task id.
    pub object_names: BTreeMap<String, String>,
    pub judge_id: String,
    pub embedding_model: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_c: CandidateLimit::Top(10),
            strategy: PromptStrategy::Cot,
            ordering_seed: 0,
            max_attempts: 3,
            object_names: BTreeMap::new(),
            judge_id: String::new(),
            embedding_model: String::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_c == CandidateLimit::Top(0) {
            return Err(Error::Config("k_c must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn object_name<'a>(&'a self, task_id: &'a str) -> &'a str {
        self.object_names.get(task_id).map_or(task_id, String::as_str)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes to JSON");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignedIdea {
    #[serde(flatten)]
    pub key: IdeaKey,
    pub bucket: BucketId,
}

/// A partition of one task's ideas into buckets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub task_id: String,
    /// One entry per idea, in corpus order.
    pub assignments: Vec<AssignedIdea>,
    /// Distinct participants per bucket (`m`).
    pub bucket_participants: BTreeMap<BucketId, usize>,
    pub bucket_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl BucketAssignment {
    /// Builds an assignment from `(idea, bucket)` pairs. Bucket ids must be
    /// exactly `1..=K`.
    pub fn from_pairs(task_id: impl Into<String>, pairs: Vec<(IdeaKey, BucketId)>) -> Result<Self> {
        let task_id = task_id.into();
        let mut participants: BTreeMap<BucketId, HashSet<&str>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (key, bucket) in &pairs {
            if key.task_id != task_id {
                return Err(Error::Integrity(format!("idea {key} in assignment for task {task_id}")));
            }
            if !seen.insert(key) {
                return Err(Error::Integrity(format!("idea {key} assigned twice")));
            }
            participants.entry(*bucket).or_default().insert(&key.participant_id);
        }
        let bucket_count = participants.len();
        if let Some((last, _)) = participants.last_key_value() {
            if last.get() as usize != bucket_count {
                return Err(Error::Integrity(format!(
                    "bucket ids are not dense: {bucket_count} buckets but max id {last}"
                )));
            }
        }
        let bucket_participants = participants.into_iter().map(|(b, p)| (b, p.len())).collect();
        Ok(Self {
            task_id,
            assignments: pairs
                .into_iter()
                .map(|(key, bucket)| AssignedIdea { key, bucket })
                .collect(),
            bucket_participants,
            bucket_count,
            config_hash: None,
        })
    }

    /// Relabels arbitrary categorical labels to dense ids in order of first
    /// appearance in the corpus.
    pub fn from_labels<'a>(corpus: &TaskCorpus, label_of: impl Fn(&IdeaKey) -> Option<&'a str>) -> Result<Self> {
        let mut ids: HashMap<&str, BucketId> = HashMap::new();
        let mut pairs = Vec::with_capacity(corpus.len());
        let mut missing = Vec::new();
        for idea in &corpus.ideas {
            let key = idea.key();
            match label_of(&key) {
                Some(label) => {
                    let next = BucketId::new(ids.len() as u32 + 1).expect("non-zero");
                    let id = *ids.entry(label).or_insert(next);
                    pairs.push((key, id));
                }
                None => missing.push(key.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Coverage {
                message: format!("task {}: ideas without a label", corpus.task_id),
                keys: missing,
            });
        }
        Self::from_pairs(corpus.task_id.clone(), pairs)
    }

    pub fn from_codebook(codebook: &Codebook, corpus: &TaskCorpus) -> Result<Self> {
        let mut bucket_of: HashMap<&IdeaKey, BucketId> = HashMap::new();
        for b in codebook.buckets() {
            for m in &b.members {
                bucket_of.insert(m, b.id);
            }
        }
        let mut pairs = Vec::with_capacity(corpus.len());
        for idea in &corpus.ideas {
            let key = idea.key();
            let id = *bucket_of
                .get(&key)
                .ok_or_else(|| Error::Integrity(format!("idea {key} was never bucketed")))?;
            pairs.push((key, id));
        }
        if pairs.len() != bucket_of.len() {
            return Err(Error::Integrity("codebook holds ideas absent from the corpus".into()));
        }
        Self::from_pairs(corpus.task_id.clone(), pairs)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn bucket_map(&self) -> HashMap<&IdeaKey, BucketId> {
        self.assignments.iter().map(|a| (&a.key, a.bucket)).collect()
    }

    pub fn participants_in(&self, bucket: BucketId) -> usize {
        self.bucket_participants.get(&bucket).copied().unwrap_or(0)
    }

    /// Ideas per bucket, indexed by bucket id - 1.
    pub fn bucket_sizes(&self) -> Vec<u64> {
        let mut sizes = vec![0u64; self.bucket_count];
        for a in &self.assignments {
            sizes[a.bucket.get() as usize - 1] += 1;
        }
        sizes
    }

    /// Checks that the assignment covers exactly the task's ideas and that
    /// no bucket is shared by more participants than the task has.
    pub fn validate_against(&self, corpus: &TaskCorpus) -> Result<()> {
        if corpus.task_id != self.task_id {
            return Err(Error::Integrity(format!(
                "assignment for task {} checked against task {}",
                self.task_id, corpus.task_id
            )));
        }
        let map = self.bucket_map();
        let missing: Vec<String> = corpus
            .ideas
            .iter()
            .map(|i| i.key())
            .filter(|k| !map.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() || map.len() != corpus.len() {
            return Err(Error::Coverage {
                message: format!("assignment for task {} does not match the corpus", self.task_id),
                keys: missing,
            });
        }
        if let Some((b, m)) = self
            .bucket_participants
            .iter()
            .find(|(_, m)| **m > corpus.participant_count)
        {
            return Err(Error::Integrity(format!(
                "bucket {b} has {m} participants but the task has {}",
                corpus.participant_count
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub bucket_id: BucketId,
    pub similarity: f64,
}

/// One judged idea, as written to the audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task_id: String,
    pub position: usize,
    pub idea: IdeaKey,
    pub idea_text: String,
    pub candidates: Vec<CandidateTrace>,
    pub outcome: JudgeOutcome,
    pub assigned: BucketId,
    pub new_bucket: bool,
}

/// Receives audit records as ideas are bucketed.
pub trait AuditSink {
    fn record(&mut self, record: &AuditRecord) -> Result<()>;
}

impl AuditSink for Vec<AuditRecord> {
    fn record(&mut self, record: &AuditRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends audit records to a JSON-lines file.
pub struct JsonlAudit {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl JsonlAudit {
    pub fn append(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
        })
    }
}

impl AuditSink for JsonlAudit {
    fn record(&mut self, record: &AuditRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable state of a bucketing run.
///
/// Format (JSON, `version` 1): `config_hash` of the [`RunConfig`],
/// `corpus_fingerprint` over the task's idea keys and texts, `permutation`
/// as indices into the corpus idea list, `processed` ideas of that
/// permutation, and the `codebook` built so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub task_id: String,
    pub corpus_fingerprint: String,
    pub permutation: Vec<usize>,
    pub processed: usize,
    pub fallbacks: usize,
    pub codebook: Codebook,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let cp: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, self)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn is_complete(&self) -> bool {
        self.processed == self.permutation.len()
    }
}

pub fn corpus_fingerprint(corpus: &TaskCorpus) -> String {
    let mut h = Sha256::new();
    h.update(corpus.task_id.as_bytes());
    for idea in &corpus.ideas {
        for part in [
            idea.participant_id.as_bytes(),
            &idea.source_order.to_le_bytes(),
            idea.idea_text.as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex::encode(h.finalize())
}

/// Processing order: a seeded shuffle of the corpus positions.
pub fn idea_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointOptions {
    pub path: Option<PathBuf>,
    /// Write a checkpoint after every `every` ideas (0 disables periodic writes).
    pub every: usize,
}

/// Buckets one task from scratch.
pub fn bucket_task(
    corpus: &TaskCorpus,
    config: &RunConfig,
    embedder: &CachedEmbedder,
    judge: &dyn Judge,
    audit: &mut dyn AuditSink,
    checkpoints: &CheckpointOptions,
) -> Result<BucketAssignment> {
    config.validate()?;
    let state = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config.hash(),
        task_id: corpus.task_id.clone(),
        corpus_fingerprint: corpus_fingerprint(corpus),
        permutation: idea_order(corpus.len(), config.ordering_seed),
        processed: 0,
        fallbacks: 0,
        codebook: Codebook::new(corpus.task_id.clone()),
    };
    run(state, corpus, config, embedder, judge, audit, checkpoints)
}

/// Continues a checkpointed run. Refuses checkpoints written under a
/// different configuration or corpus.
pub fn resume_task(
    checkpoint: &Path,
    corpus: &TaskCorpus,
    config: &RunConfig,
    embedder: &CachedEmbedder,
    judge: &dyn Judge,
    audit: &mut dyn AuditSink,
    checkpoints: &CheckpointOptions,
) -> Result<BucketAssignment> {
    config.validate()?;
    let state = Checkpoint::load(checkpoint)?;
    if state.config_hash != config.hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was written with config {} but the current config hashes to {}",
            checkpoint.display(),
            state.config_hash,
            config.hash()
        )));
    }
    if state.task_id != corpus.task_id || state.corpus_fingerprint != corpus_fingerprint(corpus) {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to a different corpus or task",
            checkpoint.display()
        )));
    }
    if state.permutation.len() != corpus.len() || state.processed > corpus.len() {
        return Err(Error::Integrity(
            "checkpoint permutation does not fit the corpus".into(),
        ));
    }
    log::info!(
        "resuming task {} at idea {}/{}",
        corpus.task_id,
        state.processed,
        state.permutation.len()
    );
    run(state, corpus, config, embedder, judge, audit, checkpoints)
}

fn run(
    mut state: Checkpoint,
    corpus: &TaskCorpus,
    config: &RunConfig,
    embedder: &CachedEmbedder,
    judge: &dyn Judge,
    audit: &mut dyn AuditSink,
    checkpoints: &CheckpointOptions,
) -> Result<BucketAssignment> {
    let finish = |state: &Checkpoint| -> Result<BucketAssignment> {
        let mut assignment = BucketAssignment::from_codebook(&state.codebook, corpus)?;
        assignment.config_hash = Some(state.config_hash.clone());
        Ok(assignment)
    };
    if state.is_complete() {
        return finish(&state);
    }

    let pending: Vec<String> = state.permutation[state.processed..]
        .iter()
        .map(|&i| corpus.ideas[i].idea_text.clone())
        .collect();
    let embeddings = embedder.embed_texts(&pending)?;
    let object_name = config.object_name(&corpus.task_id);
    let limit = config.k_c.as_option();

    for embedding in embeddings {
        let position = state.processed;
        let idea = &corpus.ideas[state.permutation[position]];
        let candidates = state.codebook.retrieve_candidates(&embedding.values, limit);
        let request = JudgeRequest {
            object_name,
            idea,
            candidates: &candidates,
        };
        let outcome = match judge.judge(&request) {
            Ok(o) => o,
            Err(e) if e.is_transport() => {
                return Err(match &checkpoints.path {
                    Some(path) => {
                        state.save(path)?;
                        Error::Interrupted {
                            checkpoint: path.clone(),
                            source: Box::new(e),
                        }
                    }
                    None => e,
                });
            }
            Err(e) => return Err(e),
        };
        if matches!(outcome, JudgeOutcome::FallbackNewBucket { .. }) {
            state.fallbacks += 1;
        }
        let before = state.codebook.len();
        let assigned = state.codebook.assign(idea, &embedding.values, &outcome)?;
        audit.record(&AuditRecord {
            task_id: corpus.task_id.clone(),
            position,
            idea: idea.key(),
            idea_text: idea.idea_text.clone(),
            candidates: candidates
                .entries()
                .iter()
                .map(|c| CandidateTrace {
                    bucket_id: c.bucket_id,
                    similarity: c.similarity,
                })
                .collect(),
            outcome,
            assigned,
            new_bucket: state.codebook.len() > before,
        })?;
        state.processed += 1;
        if let Some(path) = &checkpoints.path {
            if checkpoints.every > 0 && state.processed.is_multiple_of(checkpoints.every) {
                state.save(path)?;
            }
        }
    }

    if let Some(path) = &checkpoints.path {
        state.save(path)?;
    }
    if state.fallbacks > 0 {
        log::warn!(
            "task {}: {} ideas fell back to new buckets",
            corpus.task_id,
            state.fallbacks
        );
    }
    finish(&state)
}
