//! Per-task append-only registry of idea buckets and nearest-neighbour
//! retrieval of candidate buckets for an incoming idea.

use std::collections::HashSet;
use std::fmt;
use std::num::NonZeroU32;

use serde::{Deserialize, Serialize};

use crate::corpus::{IdeaKey, IdeaRecord};
use crate::embed::cosine;
use crate::error::{Error, Result};
use crate::judge::{Candidate, CandidateDictionary, JudgeOutcome, NEW_BUCKET};

/// Dense 1-based bucket identifier within one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BucketId(NonZeroU32);

impl BucketId {
    pub fn new(id: u32) -> Option<Self> {
        NonZeroU32::new(id).map(Self)
    }

    pub fn get(self) -> u32 {
        self.0.get()
    }

    fn from_index(index: usize) -> Self {
        Self::new(u32::try_from(index + 1).expect("bucket count overflows u32")).expect("index + 1 is non-zero")
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub id: BucketId,
    /// Text of the founding idea; never revised.
    pub description: String,
    pub founder: IdeaKey,
    pub founding_embedding: Vec<f64>,
    pub members: Vec<IdeaKey>,
}

#[derive(Deserialize)]
struct CodebookRepr {
    task_id: String,
    buckets: Vec<Bucket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRepr")]
pub struct Codebook {
    pub task_id: String,
    buckets: Vec<Bucket>,
    #[serde(skip)]
    assigned: HashSet<IdeaKey>,
}

impl TryFrom<CodebookRepr> for Codebook {
    type Error = Error;

    fn try_from(repr: CodebookRepr) -> Result<Self> {
        let mut assigned = HashSet::new();
        for (i, bucket) in repr.buckets.iter().enumerate() {
            if bucket.id != BucketId::from_index(i) {
                return Err(Error::Integrity(format!(
                    "bucket {} stored at position {}",
                    bucket.id,
                    i + 1
                )));
            }
            if bucket.members.first() != Some(&bucket.founder) {
                return Err(Error::Integrity(format!(
                    "bucket {} does not start with its founder",
                    bucket.id
                )));
            }
            for m in &bucket.members {
                if !assigned.insert(m.clone()) {
                    return Err(Error::Integrity(format!("idea {m} appears in two buckets")));
                }
            }
        }
        Ok(Self {
            task_id: repr.task_id,
            buckets: repr.buckets,
            assigned,
        })
    }
}

impl Codebook {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            buckets: Vec::new(),
            assigned: HashSet::new(),
        }
    }

    /// Current bucket count `K`.
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn bucket(&self, id: BucketId) -> Option<&Bucket> {
        self.buckets.get(id.get() as usize - 1)
    }

    pub fn contains_idea(&self, key: &IdeaKey) -> bool {
        self.assigned.contains(key)
    }

    /// Up to `limit` buckets ordered by cosine similarity of their founding
    /// embedding to `query`, descending; ties go to the lower id. With
    /// `limit = None` or `K <= limit` every bucket is returned.
    pub fn retrieve_candidates(&self, query: &[f64], limit: Option<usize>) -> CandidateDictionary {
        let mut scored: Vec<(f64, usize)> = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, b)| (cosine(query, &b.founding_embedding), i))
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if let Some(k) = limit.filter(|&k| k < scored.len()) {
            if k > 0 {
                scored.select_nth_unstable_by(k - 1, by_rank);
            }
            scored.truncate(k);
        }
        scored.sort_by(by_rank);

        let mut dict = CandidateDictionary::new(limit);
        for (similarity, i) in scored {
            let b = &self.buckets[i];
            dict.push(Candidate {
                bucket_id: b.id,
                description: b.description.clone(),
                founder: b.founder.clone(),
                similarity,
            })
            .expect("retrieval respects capacity and distinct ids");
        }
        dict
    }

    /// Applies a judge outcome: join an existing bucket, or found bucket
    /// `K + 1` with this idea as its description.
    pub fn assign(&mut self, idea: &IdeaRecord, embedding: &[f64], outcome: &JudgeOutcome) -> Result<BucketId> {
        let key = idea.key();
        if key.task_id != self.task_id {
            return Err(Error::Integrity(format!(
                "idea {key} offered to codebook of task {}",
                self.task_id
            )));
        }
        if self.assigned.contains(&key) {
            return Err(Error::Integrity(format!("idea {key} is already bucketed")));
        }
        let target = match outcome {
            JudgeOutcome::Decided(d) if d.annotation_id != NEW_BUCKET => Some(d.annotation_id),
            _ => None,
        };
        let id = match target {
            Some(raw) => {
                let id = u32::try_from(raw)
                    .ok()
                    .and_then(BucketId::new)
                    .filter(|id| self.bucket(*id).is_some())
                    .ok_or_else(|| Error::Integrity(format!("judge chose unknown bucket {raw}")))?;
                self.buckets[id.get() as usize - 1].members.push(key.clone());
                id
            }
            None => {
                let id = BucketId::from_index(self.buckets.len());
                self.buckets.push(Bucket {
                    id,
                    description: idea.idea_text.clone(),
                    founder: key.clone(),
                    founding_embedding: embedding.to_vec(),
                    members: vec![key.clone()],
                });
                id
            }
        };
        self.assigned.insert(key);
        Ok(id)
    }
}
