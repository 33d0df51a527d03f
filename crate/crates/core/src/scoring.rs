//! Frequency-based originality metrics.
//!
//! Every metric is a function of `m`, the number of distinct participants
//! whose ideas share a bucket, and `N`, the task's participant count.
//! Participant scores are sums over their ideas (`R`) and the same sums
//! divided by fluency (`O`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bucketer::BucketAssignment;
use crate::corpus::{IdeaKey, TaskCorpus};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rarity,
    Shapley,
    Uniqueness,
    Threshold,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Threshold, Metric::Shapley, Metric::Rarity, Metric::Uniqueness];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rarity => "rarity",
            Metric::Shapley => "shapley",
            Metric::Uniqueness => "uniqueness",
            Metric::Threshold => "threshold",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub rarity: f64,
    pub shapley: f64,
    pub uniqueness: f64,
    pub threshold: f64,
}

impl MetricValues {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rarity => self.rarity,
            Metric::Shapley => self.shapley,
            Metric::Uniqueness => self.uniqueness,
            Metric::Threshold => self.threshold,
        }
    }

    fn add(&mut self, other: &MetricValues) {
        self.rarity += other.rarity;
        self.shapley += other.shapley;
        self.uniqueness += other.uniqueness;
        self.threshold += other.threshold;
    }

    fn divided_by(&self, d: f64) -> MetricValues {
        MetricValues {
            rarity: self.rarity / d,
            shapley: self.shapley / d,
            uniqueness: self.uniqueness / d,
            threshold: self.threshold / d,
        }
    }
}

fn check_prevalence(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::Integrity(format!(
            "bucket shared by {m} participants in a task with {n}"
        )));
    }
    Ok(())
}

/// `1 - m/N`.
pub fn rarity(m: usize, n: usize) -> Result<f64> {
    check_prevalence(m, n)?;
    Ok(1.0 - m as f64 / n as f64)
}

/// `1/m`.
pub fn shapley(m: usize) -> f64 {
    1.0 / m as f64
}

/// 1 for ideas no other participant shared.
pub fn uniqueness(m: usize) -> u8 {
    u8::from(m == 1)
}

/// Tiered score: 3 for `m/N <= 0.01`, 2 up to 0.03, 1 up to 0.10, else 0.
/// Compared in integer arithmetic so tier edges are exact.
pub fn threshold(m: usize, n: usize) -> u8 {
    let (m, n) = (m as u128, n as u128);
    if 100 * m <= n {
        3
    } else if 100 * m <= 3 * n {
        2
    } else if 10 * m <= n {
        1
    } else {
        0
    }
}

fn prevalence(assignment: &BucketAssignment) -> impl Iterator<Item = (&IdeaKey, usize)> {
    assignment
        .assignments
        .iter()
        .map(|a| (&a.key, assignment.participants_in(a.bucket)))
}

pub fn score_rarity(assignment: &BucketAssignment, n: usize) -> Result<BTreeMap<IdeaKey, f64>> {
    prevalence(assignment)
        .map(|(k, m)| Ok((k.clone(), rarity(m, n)?)))
        .collect()
}

pub fn score_shapley(assignment: &BucketAssignment) -> BTreeMap<IdeaKey, f64> {
    prevalence(assignment).map(|(k, m)| (k.clone(), shapley(m))).collect()
}

pub fn score_uniqueness(assignment: &BucketAssignment) -> BTreeMap<IdeaKey, u8> {
    prevalence(assignment)
        .map(|(k, m)| (k.clone(), uniqueness(m)))
        .collect()
}

pub fn score_threshold(assignment: &BucketAssignment, n: usize) -> BTreeMap<IdeaKey, u8> {
    prevalence(assignment)
        .map(|(k, m)| (k.clone(), threshold(m, n)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdeaScore {
    pub key: IdeaKey,
    pub values: MetricValues,
}

/// All four metrics for every idea of one task, in assignment order.
pub fn score_ideas(assignment: &BucketAssignment, n: usize) -> Result<Vec<IdeaScore>> {
    prevalence(assignment)
        .map(|(key, m)| {
            Ok(IdeaScore {
                key: key.clone(),
                values: MetricValues {
                    rarity: rarity(m, n)?,
                    shapley: shapley(m),
                    uniqueness: f64::from(uniqueness(m)),
                    threshold: f64::from(threshold(m, n)),
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub fluency: usize,
    pub raw: MetricValues,
    pub normalized: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScore {
    pub participant_id: String,
    pub tasks: BTreeMap<String, TaskScore>,
    pub total_raw: MetricValues,
    pub total_normalized: MetricValues,
}

impl ParticipantScore {
    pub fn total(&self, metric: Metric, normalized: bool) -> f64 {
        if normalized {
            self.total_normalized.get(metric)
        } else {
            self.total_raw.get(metric)
        }
    }

    pub fn fluency(&self) -> usize {
        self.tasks.values().map(|t| t.fluency).sum()
    }
}

/// Sums idea scores per participant and task, then normalizes by fluency.
/// Tasks a participant skipped contribute nothing.
pub fn aggregate_scores(idea_scores: &[IdeaScore], corpus: &[TaskCorpus]) -> Result<Vec<ParticipantScore>> {
    let by_key: HashMap<&IdeaKey, &MetricValues> = idea_scores.iter().map(|s| (&s.key, &s.values)).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    let mut raw: HashMap<(&str, &str), (usize, MetricValues)> = HashMap::new();
    let mut unscored = Vec::new();
    for task in corpus {
        for idea in &task.ideas {
            let key = idea.key();
            let Some(values) = by_key.get(&key) else {
                unscored.push(key.to_string());
                continue;
            };
            if seen.insert(idea.participant_id.as_str()) {
                order.push(&idea.participant_id);
            }
            let entry = raw
                .entry((idea.participant_id.as_str(), task.task_id.as_str()))
                .or_default();
            entry.0 += 1;
            entry.1.add(values);
        }
    }
    if !unscored.is_empty() {
        return Err(Error::Coverage {
            message: "ideas without scores".into(),
            keys: unscored,
        });
    }

    let scores = order
        .into_iter()
        .map(|participant| {
            let mut tasks = BTreeMap::new();
            let mut total_raw = MetricValues::default();
            let mut total_normalized = MetricValues::default();
            for task in corpus {
                let Some((fluency, sums)) = raw.get(&(participant, task.task_id.as_str())) else {
                    continue;
                };
                if *fluency == 0 {
                    continue;
                }
                let normalized = sums.divided_by(*fluency as f64);
                total_raw.add(sums);
                total_normalized.add(&normalized);
                tasks.insert(
                    task.task_id.clone(),
                    TaskScore {
                        fluency: *fluency,
                        raw: *sums,
                        normalized,
                    },
                );
            }
            ParticipantScore {
                participant_id: participant.to_string(),
                tasks,
                total_raw,
                total_normalized,
            }
        })
        .collect();
    Ok(scores)
}

/// Scores a whole dataset from one assignment per task.
pub fn score_dataset(corpus: &[TaskCorpus], assignments: &[BucketAssignment]) -> Result<Vec<ParticipantScore>> {
    let by_task: HashMap<&str, &BucketAssignment> = assignments.iter().map(|a| (a.task_id.as_str(), a)).collect();
    let mut idea_scores = Vec::new();
    for task in corpus {
        let assignment = by_task.get(task.task_id.as_str()).ok_or_else(|| Error::Coverage {
            message: "no assignment for task".into(),
            keys: vec![task.task_id.clone()],
        })?;
        assignment.validate_against(task)?;
        idea_scores.extend(score_ideas(assignment, task.participant_count)?);
    }
    aggregate_scores(&idea_scores, corpus)
}

/// Task column value used for per-participant totals in score tables.
pub const TOTAL_ROW: &str = "*";

const SCORE_HEADER: [&str; 11] = [
    "participant",
    "task",
    "fluency",
    "R_rarity",
    "R_shapley",
    "R_uniqueness",
    "R_threshold",
    "O_rarity",
    "O_shapley",
    "O_uniqueness",
    "O_threshold",
];

/// One row per participant and task, plus a totals row per participant
/// whose task column is [`TOTAL_ROW`].
pub fn write_scores_csv<W: Write>(writer: W, scores: &[ParticipantScore]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SCORE_HEADER)?;
    let row = |p: &str, task: &str, fluency: usize, raw: &MetricValues, norm: &MetricValues| -> Vec<String> {
        let mut r = vec![p.to_string(), task.to_string(), fluency.to_string()];
        for v in [raw, norm] {
            for m in [Metric::Rarity, Metric::Shapley, Metric::Uniqueness, Metric::Threshold] {
                r.push(format!("{}", v.get(m)));
            }
        }
        r
    };
    for s in scores {
        for (task, t) in &s.tasks {
            wtr.write_record(row(&s.participant_id, task, t.fluency, &t.raw, &t.normalized))?;
        }
        wtr.write_record(row(
            &s.participant_id,
            TOTAL_ROW,
            s.fluency(),
            &s.total_raw,
            &s.total_normalized,
        ))?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<ParticipantScore>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != SCORE_HEADER {
        return Err(Error::Schema(format!(
            "score table header must be {}",
            SCORE_HEADER.join(",")
        )));
    }
    let mut order = Vec::new();
    let mut out: HashMap<String, ParticipantScore> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let num = |c: usize| -> Result<f64> {
            record[c].trim().parse().map_err(|e| Error::Row {
                row: i + 2,
                message: format!("bad number in {}: {e}", SCORE_HEADER[c]),
            })
        };
        let values = |base: usize| -> Result<MetricValues> {
            Ok(MetricValues {
                rarity: num(base)?,
                shapley: num(base + 1)?,
                uniqueness: num(base + 2)?,
                threshold: num(base + 3)?,
            })
        };
        let participant = record[0].to_string();
        let task = record[1].to_string();
        let fluency = num(2)? as usize;
        let (raw, normalized) = (values(3)?, values(7)?);
        let entry = out.entry(participant.clone()).or_insert_with(|| {
            order.push(participant.clone());
            ParticipantScore {
                participant_id: participant.clone(),
                tasks: BTreeMap::new(),
                total_raw: MetricValues::default(),
                total_normalized: MetricValues::default(),
            }
        });
        if task == TOTAL_ROW {
            entry.total_raw = raw;
            entry.total_normalized = normalized;
        } else {
            entry.tasks.insert(
                task,
                TaskScore {
                    fluency,
                    raw,
                    normalized,
                },
            );
        }
    }
    Ok(order.into_iter().filter_map(|p| out.remove(&p)).collect())
}
