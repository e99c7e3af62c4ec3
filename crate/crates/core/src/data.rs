//! Visualizations, preference records and their on-disk formats.
//!
//! A visualization file is a single JSON object:
//!
//! ```text
//! {"id": "v1", "points": [[x, y], ...], "labels": [0, 1, ...],
//!  "highdim": [[...], ...], "highdim_ref": "rows.csv", "label_names": {"0": "zero"}}
//! ```
//!
//! `highdim` and `highdim_ref` are optional; a reference names a header-less CSV
//! file (one row per point) resolved relative to the JSON file. Preference logs
//! are JSON lines, one [`PreferenceRecord`] per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw serialized form of a visualization, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizationFile {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highdim: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highdim_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<BTreeMap<String, String>>,
}

/// A labeled 2D scatterplot, optionally paired with its high-dimensional source.
#[derive(Debug, Clone, PartialEq)]
pub struct Visualization {
    id: String,
    points: Vec<[f64; 2]>,
    labels: Vec<u32>,
    highdim: Option<Vec<Vec<f64>>>,
    highdim_ref: Option<String>,
    label_names: Option<BTreeMap<String, String>>,
}

impl Visualization {
    pub fn new(
        id: impl Into<String>,
        points: Vec<[f64; 2]>,
        labels: Vec<u32>,
        highdim: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let vis = Visualization {
            id: id.into(),
            points,
            labels,
            highdim,
            highdim_ref: None,
            label_names: None,
        };
        vis.validate()?;
        Ok(vis)
    }

    fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n < 2 {
            return Err(Error::invariant("points", format!("needs ≥2 points, found {n}")));
        }
        if self.labels.len() != n {
            return Err(Error::invariant(
                "labels",
                format!("labels length {} does not match {n} points", self.labels.len()),
            ));
        }
        if self.n_classes() < 2 {
            return Err(Error::invariant("labels", "needs ≥2 classes"));
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invariant("points", format!("non-finite coordinate at point {i}")));
        }
        if let Some(rows) = &self.highdim {
            if rows.len() != n {
                return Err(Error::invariant(
                    "highdim",
                    format!("highdim length {} does not match {n} points", rows.len()),
                ));
            }
            let dim = rows[0].len();
            if dim < 2 {
                return Err(Error::invariant("highdim", format!("dimension {dim} is below 2")));
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::invariant(
                        "highdim",
                        format!("row {i} has dimension {}, expected {dim}", row.len()),
                    ));
                }
                if !row.iter().all(|v| v.is_finite()) {
                    return Err(Error::invariant("highdim", format!("non-finite value in row {i}")));
                }
            }
        }
        Ok(())
    }

    /// Builds a visualization from its raw file form. `base_dir` resolves `highdim_ref`.
    pub fn from_file(file: VisualizationFile, base_dir: Option<&Path>) -> Result<Self> {
        let highdim = match (file.highdim, &file.highdim_ref) {
            (Some(rows), _) => Some(rows),
            (None, Some(reference)) => {
                let path = match base_dir {
                    Some(dir) => dir.join(reference),
                    None => PathBuf::from(reference),
                };
                Some(read_highdim_csv(&path)?)
            }
            (None, None) => None,
        };
        let vis = Visualization {
            id: file.id,
            points: file.points,
            labels: file.labels,
            highdim,
            highdim_ref: file.highdim_ref,
            label_names: file.label_names,
        };
        vis.validate()?;
        Ok(vis)
    }

    /// Serialized form. Rows loaded through `highdim_ref` are written back as the reference.
    pub fn to_file(&self) -> VisualizationFile {
        VisualizationFile {
            id: self.id.clone(),
            points: self.points.clone(),
            labels: self.labels.clone(),
            highdim: match self.highdim_ref {
                Some(_) => None,
                None => self.highdim.clone(),
            },
            highdim_ref: self.highdim_ref.clone(),
            label_names: self.label_names.clone(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn highdim(&self) -> Option<&[Vec<f64>]> {
        self.highdim.as_deref()
    }

    pub fn label_names(&self) -> Option<&BTreeMap<String, String>> {
        self.label_names.as_ref()
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }
}

fn read_highdim_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| {
                    Error::invariant("highdim_ref", format!("row {i}: {field:?} is not a number ({e})"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_visualization(path: impl AsRef<Path>) -> Result<Visualization> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let file: VisualizationFile = serde_json::from_str(&text).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Visualization::from_file(file, path.parent())
}

pub fn save_visualization(vis: &Visualization, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &vis.to_file())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Loads every `*.json` file of `dir`, keyed by visualization id.
pub fn load_visualization_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Visualization>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        let vis = load_visualization(&path)?;
        if out.contains_key(vis.id()) {
            return Err(Error::invariant(
                "id",
                format!("duplicate visualization id {:?} in {}", vis.id(), path.display()),
            ));
        }
        out.insert(vis.id().to_string(), vis);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    None,
}

/// One user-attributed pairwise comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user: String,
    pub left: String,
    pub right: String,
    pub choice: Choice,
    pub timestamp: DateTime<Utc>,
}

impl PreferenceRecord {
    pub fn is_trainable(&self) -> bool {
        self.choice != Choice::None
    }

    /// `(preferred, other)` ids, or `None` for a "no preference" answer.
    pub fn winner_loser(&self) -> Option<(&str, &str)> {
        match self.choice {
            Choice::Left => Some((&self.left, &self.right)),
            Choice::Right => Some((&self.right, &self.left)),
            Choice::None => None,
        }
    }

    /// The same comparison with the opposite answer.
    pub fn flipped(&self) -> Self {
        let choice = match self.choice {
            Choice::Left => Choice::Right,
            Choice::Right => Choice::Left,
            Choice::None => Choice::None,
        };
        PreferenceRecord { choice, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.left == self.right {
            return Err(Error::invariant("right", format!("left and right are both {:?}", self.left)));
        }
        Ok(())
    }
}

/// Preference records together with every visualization they reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceDataset {
    records: Vec<PreferenceRecord>,
    visualizations: BTreeMap<String, Visualization>,
}

impl PreferenceDataset {
    pub fn new(
        records: Vec<PreferenceRecord>,
        visualizations: BTreeMap<String, Visualization>,
    ) -> Result<Self> {
        for record in &records {
            record.validate()?;
            for id in [&record.left, &record.right] {
                if !visualizations.contains_key(id) {
                    return Err(Error::DanglingReference(id.clone()));
                }
            }
        }
        Ok(PreferenceDataset { records, visualizations })
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn visualizations(&self) -> &BTreeMap<String, Visualization> {
        &self.visualizations
    }

    pub fn trainable_records(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter().filter(|r| r.is_trainable())
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_records().count()
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user.as_str()).collect()
    }

    /// Number of records per user, "no preference" answers included.
    pub fn per_user_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.user.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn per_user_trainable_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for r in self.trainable_records() {
            *counts.entry(r.user.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// A dataset over the same visualizations holding only `records`.
    pub fn with_records(&self, records: Vec<PreferenceRecord>) -> Result<Self> {
        PreferenceDataset::new(records, self.visualizations.clone())
    }
}

/// Parses one line of a preference log. `line` is 1-based and only used for errors.
pub fn parse_preference_line(text: &str, line: usize) -> Result<PreferenceRecord> {
    let record: PreferenceRecord = serde_json::from_str(text).map_err(|e| Error::MalformedLine {
        line,
        message: e.to_string(),
    })?;
    record.validate().map_err(|e| Error::MalformedLine {
        line,
        message: e.to_string(),
    })?;
    Ok(record)
}

pub fn read_preference_records(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_preference_line(&line, i + 1)?);
    }
    Ok(records)
}

pub fn load_preference_log(
    path: impl AsRef<Path>,
    vis_dir: impl AsRef<Path>,
) -> Result<PreferenceDataset> {
    let records = read_preference_records(path)?;
    let visualizations = load_visualization_dir(vis_dir)?;
    PreferenceDataset::new(records, visualizations)
}

pub fn write_preference_log(records: &[PreferenceRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Appends one record and syncs it to disk before returning.
pub fn append_preference(file: &mut File, record: &PreferenceRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

pub fn open_log_for_append(path: impl AsRef<Path>) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}
