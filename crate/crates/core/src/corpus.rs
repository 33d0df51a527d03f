//! Ideation datasets: per-task idea streams, reference bucket labels and
//! participant-level external measures, all read from flat CSV tables.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of one idea: who wrote it, for which task, and where it sat in the
/// input file.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdeaKey {
    pub participant_id: String,
    pub task_id: String,
    pub source_order: u64,
}

impl fmt::Display for IdeaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.participant_id, self.task_id, self.source_order)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdeaRecord {
    pub participant_id: String,
    pub task_id: String,
    pub idea_text: String,
    pub source_order: u64,
}

impl IdeaRecord {
    pub fn key(&self) -> IdeaKey {
        IdeaKey {
            participant_id: self.participant_id.clone(),
            task_id: self.task_id.clone(),
            source_order: self.source_order,
        }
    }
}

/// All ideas produced for one task, in input order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCorpus {
    pub task_id: String,
    pub ideas: Vec<IdeaRecord>,
    /// Distinct participants with at least one idea in this task.
    pub participant_count: usize,
}

impl TaskCorpus {
    pub fn new(task_id: impl Into<String>, ideas: Vec<IdeaRecord>) -> Result<Self> {
        let task_id = task_id.into();
        let mut seen = HashSet::with_capacity(ideas.len());
        for idea in &ideas {
            if idea.task_id != task_id {
                return Err(Error::Integrity(format!(
                    "idea {} filed under task {task_id}",
                    idea.key()
                )));
            }
            if idea.idea_text.trim().is_empty() {
                return Err(Error::Integrity(format!("idea {} has empty text", idea.key())));
            }
            if !seen.insert((idea.participant_id.as_str(), idea.source_order)) {
                return Err(Error::Integrity(format!("duplicate idea key {}", idea.key())));
            }
        }
        let participant_count = ideas
            .iter()
            .map(|i| i.participant_id.as_str())
            .collect::<HashSet<_>>()
            .len();
        Ok(Self {
            task_id,
            ideas,
            participant_count,
        })
    }

    pub fn len(&self) -> usize {
        self.ideas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ideas.is_empty()
    }

    /// Participants in order of first appearance.
    pub fn participants(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.ideas
            .iter()
            .map(|i| i.participant_id.as_str())
            .filter(|p| seen.insert(*p))
            .collect()
    }

    /// Number of ideas each participant contributed (fluency).
    pub fn fluency(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for idea in &self.ideas {
            *counts.entry(idea.participant_id.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Column mapping for an input table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub participant: String,
    pub task: String,
    pub idea: String,
    /// Explicit ordering column. Without it the data row index is used.
    pub order: Option<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            participant: "participant".into(),
            task: "task".into(),
            idea: "idea".into(),
            order: None,
        }
    }
}

struct HeaderIndex {
    participant: usize,
    task: usize,
    order: Option<usize>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

impl HeaderIndex {
    fn new(headers: &csv::StringRecord, schema: &ColumnSchema) -> Result<Self> {
        Ok(Self {
            participant: column(headers, &schema.participant)?,
            task: column(headers, &schema.task)?,
            order: schema.order.as_deref().map(|c| column(headers, c)).transpose()?,
        })
    }

    fn key(&self, record: &csv::StringRecord, data_row: usize) -> Result<IdeaKey> {
        let line = data_row + 2;
        let participant_id = record[self.participant].trim().to_string();
        let task_id = record[self.task].trim().to_string();
        if participant_id.is_empty() || task_id.is_empty() {
            return Err(Error::Row {
                row: line,
                message: "empty participant or task id".into(),
            });
        }
        let source_order = match self.order {
            Some(col) => record[col].trim().parse::<u64>().map_err(|e| Error::Row {
                row: line,
                message: format!("bad order value `{}`: {e}", &record[col]),
            })?,
            None => data_row as u64,
        };
        Ok(IdeaKey {
            participant_id,
            task_id,
            source_order,
        })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(false).from_reader(reader)
}

pub fn load_corpus(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Vec<TaskCorpus>> {
    read_corpus(open(path.as_ref())?, schema)
}

/// Reads a corpus table. Row numbers in errors are 1-based file lines
/// (the header is line 1).
pub fn read_corpus<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Vec<TaskCorpus>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let index = HeaderIndex::new(&headers, schema)?;
    let idea_col = column(&headers, &schema.idea)?;

    let mut order: Vec<String> = Vec::new();
    let mut by_task: HashMap<String, Vec<IdeaRecord>> = HashMap::new();
    let mut seen: HashSet<IdeaKey> = HashSet::new();
    for (data_row, record) in rdr.records().enumerate() {
        let record = record?;
        let key = index.key(&record, data_row)?;
        let text = record[idea_col].trim();
        if text.is_empty() {
            return Err(Error::Row {
                row: data_row + 2,
                message: "empty idea text".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate (participant, task, order) {key} at row {}",
                data_row + 2
            )));
        }
        let ideas = by_task.entry(key.task_id.clone()).or_insert_with(|| {
            order.push(key.task_id.clone());
            Vec::new()
        });
        ideas.push(IdeaRecord {
            participant_id: key.participant_id,
            task_id: key.task_id,
            idea_text: text.to_string(),
            source_order: key.source_order,
        });
    }

    order
        .into_iter()
        .map(|task| {
            let ideas = by_task.remove(&task).unwrap_or_default();
            TaskCorpus::new(task, ideas)
        })
        .collect()
}

/// Writes tasks as a CSV with an explicit order column, readable by
/// [`read_corpus`] with [`ColumnSchema::with_order`].
pub fn write_corpus<W: Write>(writer: W, tasks: &[TaskCorpus]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["participant", "task", "order", "idea"])?;
    for task in tasks {
        for idea in &task.ideas {
            wtr.write_record([
                idea.participant_id.as_str(),
                idea.task_id.as_str(),
                &idea.source_order.to_string(),
                idea.idea_text.as_str(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

impl ColumnSchema {
    pub fn with_order(mut self, column: impl Into<String>) -> Self {
        self.order = Some(column.into());
        self
    }
}

/// One annotator's bucket labels. Labels are opaque categories kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceLabeling {
    pub annotator_id: String,
    pub labels: HashMap<IdeaKey, String>,
}

impl ReferenceLabeling {
    pub fn new(annotator_id: impl Into<String>, labels: HashMap<IdeaKey, String>) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            labels,
        }
    }

    pub fn get(&self, key: &IdeaKey) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    pub fn task_ids(&self) -> BTreeSet<&str> {
        self.labels.keys().map(|k| k.task_id.as_str()).collect()
    }

    pub fn distinct_labels(&self) -> usize {
        self.labels.values().collect::<HashSet<_>>().len()
    }

    /// Labels for one task, ordered by idea key.
    pub fn for_task(&self, task_id: &str) -> BTreeMap<&IdeaKey, &str> {
        self.labels
            .iter()
            .filter(|(k, _)| k.task_id == task_id)
            .map(|(k, v)| (k, v.as_str()))
            .collect()
    }

    /// Checks that the labeling covers exactly the ideas of every task it
    /// mentions.
    pub fn validate_coverage(&self, tasks: &[TaskCorpus]) -> Result<()> {
        let declared = self.task_ids();
        let mut missing = Vec::new();
        let mut known = HashSet::new();
        for task in tasks.iter().filter(|t| declared.contains(t.task_id.as_str())) {
            for idea in &task.ideas {
                let key = idea.key();
                if !self.labels.contains_key(&key) {
                    missing.push(key.to_string());
                }
                known.insert(key);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Coverage {
                message: format!("{}: ideas without a label", self.annotator_id),
                keys: missing,
            });
        }
        let mut unknown: Vec<String> = self
            .labels
            .keys()
            .filter(|k| !known.contains(*k))
            .map(ToString::to_string)
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::Coverage {
                message: format!("{}: labels for ideas absent from the corpus", self.annotator_id),
                keys: unknown,
            });
        }
        Ok(())
    }
}

pub fn load_reference(
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
    label_column: &str,
    annotator_id: &str,
) -> Result<ReferenceLabeling> {
    read_reference(open(path.as_ref())?, schema, label_column, annotator_id)
}

pub fn read_reference<R: Read>(
    reader: R,
    schema: &ColumnSchema,
    label_column: &str,
    annotator_id: &str,
) -> Result<ReferenceLabeling> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let index = HeaderIndex::new(&headers, schema)?;
    let label_col = column(&headers, label_column)?;
    let mut labels = HashMap::new();
    for (data_row, record) in rdr.records().enumerate() {
        let record = record?;
        let key = index.key(&record, data_row)?;
        let label = record[label_col].trim();
        if label.is_empty() {
            return Err(Error::Row {
                row: data_row + 2,
                message: format!("empty `{label_column}` label"),
            });
        }
        if labels.insert(key.clone(), label.to_string()).is_some() {
            return Err(Error::Integrity(format!("duplicate label row for {key}")));
        }
    }
    Ok(ReferenceLabeling::new(annotator_id, labels))
}

/// A participant-level score column such as a creativity rating or a
/// personality trait.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMeasures {
    pub measure_name: String,
    pub values: BTreeMap<String, f64>,
}

/// Reads one or more measure columns keyed by participant. Blank cells are
/// treated as missing.
pub fn load_measures(
    path: impl AsRef<Path>,
    participant_column: &str,
    measure_columns: &[String],
) -> Result<Vec<ExternalMeasures>> {
    read_measures(open(path.as_ref())?, participant_column, measure_columns)
}

pub fn read_measures<R: Read>(
    reader: R,
    participant_column: &str,
    measure_columns: &[String],
) -> Result<Vec<ExternalMeasures>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let pcol = column(&headers, participant_column)?;
    let columns: Vec<(usize, &str)> = if measure_columns.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != pcol)
            .map(|(i, h)| (i, h.trim()))
            .collect()
    } else {
        measure_columns
            .iter()
            .map(|c| Ok((column(&headers, c)?, c.as_str())))
            .collect::<Result<_>>()?
    };
    let mut measures: Vec<ExternalMeasures> = columns
        .iter()
        .map(|(_, name)| ExternalMeasures {
            measure_name: name.to_string(),
            values: BTreeMap::new(),
        })
        .collect();
    for (data_row, record) in rdr.records().enumerate() {
        let record = record?;
        let participant = record[pcol].trim();
        for ((col, _), measure) in columns.iter().zip(measures.iter_mut()) {
            let cell = record[*col].trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let value: f64 = cell.parse().map_err(|e| Error::Row {
                row: data_row + 2,
                message: format!("bad `{}` value `{cell}`: {e}", measure.measure_name),
            })?;
            if measure.values.insert(participant.to_string(), value).is_some() {
                return Err(Error::Integrity(format!(
                    "participant {participant} appears twice in measure {}",
                    measure.measure_name
                )));
            }
        }
    }
    Ok(measures)
}
