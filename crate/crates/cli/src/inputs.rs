//! Loading labelings, score tables and size lists from files.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use originality::bucketer::BucketAssignment;
use originality::corpus::{load_reference, ReferenceLabeling, TaskCorpus};
use originality::scoring::{read_scores_csv, ParticipantScore};
use originality::{Error, Result};

use crate::config::SchemaConfig;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Bucket assignments from a JSON file holding one assignment or an array.
pub fn read_assignments(path: &Path) -> Result<Vec<BucketAssignment>> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

/// The label column of a reference table: a column named after the
/// labeling if there is one, else the configured label column.
fn label_column(path: &Path, name: &str, schema: &SchemaConfig) -> Result<String> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let has_named = rdr.headers()?.iter().any(|h| h.trim() == name);
    Ok(if has_named {
        name.to_string()
    } else {
        schema.label.clone()
    })
}

pub fn read_reference(path: &Path, name: &str, schema: &SchemaConfig) -> Result<ReferenceLabeling> {
    let column = label_column(path, name, schema)?;
    load_reference(path, &schema.columns(), &column, name)
}

/// A labeling of the corpus from either an assignment JSON file or a
/// reference CSV table. Tasks the file does not mention are left out.
pub fn read_labeling(
    path: &Path,
    name: &str,
    corpus: &[TaskCorpus],
    schema: &SchemaConfig,
) -> Result<Vec<BucketAssignment>> {
    if is_json(path) {
        return read_assignments(path);
    }
    let reference = read_reference(path, name, schema)?;
    let tasks = reference.task_ids();
    corpus
        .iter()
        .filter(|t| tasks.contains(t.task_id.as_str()))
        .map(|t| BucketAssignment::from_labels(t, |k| reference.get(k)))
        .collect()
}

pub fn read_scores(path: &Path) -> Result<Vec<ParticipantScore>> {
    read_scores_csv(open(path)?)
}

/// Parses `NAME=PATH`; a bare path is named after its file stem.
pub fn named_path(arg: &str) -> std::result::Result<(String, PathBuf), String> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => Err(format!("expected NAME=PATH, got {arg:?}")),
        None => {
            let path = PathBuf::from(arg);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| format!("cannot name {arg:?}"))?;
            Ok((name, path))
        }
    }
}

/// Positive integers separated by whitespace, commas or newlines. A
/// non-numeric first token is taken as a header.
pub fn read_sizes(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, token) in text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
    {
        match token.parse::<u64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Schema(format!(
                    "{}: {token:?} is not a positive integer",
                    path.display()
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_paths() {
        assert_eq!(
            named_path("H1=a/b.csv").unwrap(),
            ("H1".into(), PathBuf::from("a/b.csv"))
        );
        assert_eq!(
            named_path("dir/machine.json").unwrap(),
            ("machine".into(), PathBuf::from("dir/machine.json"))
        );
        assert!(named_path("=x").is_err());
    }

    #[test]
    fn sizes_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        std::fs::write(&p, "size\n3\n1, 4\n").unwrap();
        assert_eq!(read_sizes(&p).unwrap(), vec![3, 1, 4]);
        std::fs::write(&p, "3\nx\n").unwrap();
        assert!(read_sizes(&p).is_err());
    }
}
