//! Dataset loading, report tokenization, and metadata textualization.
//!
//! A dataset is described by a JSON manifest pointing at an ids+labels CSV,
//! one embedding CSV per modality, and optional reports / metadata / group
//! CSVs. All paths in the manifest are resolved relative to the manifest's
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// One observation: per-modality embedding views, binary label and
/// prediction, and optional text/metadata/group annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub views: BTreeMap<String, Vec<f64>>,
    pub label: u8,
    pub prediction: u8,
    pub report_text: Option<String>,
    pub metadata: Option<BTreeMap<String, String>>,
    /// Ground-truth audit attributes (0/1), used only for evaluation and
    /// bias simulation. Never consumed by slice discovery itself.
    pub group_tags: Option<BTreeMap<String, u8>>,
}

impl Sample {
    pub fn is_error(&self) -> bool {
        self.label != self.prediction
    }

    pub fn group_tag(&self, attr: &str) -> Option<u8> {
        self.group_tags.as_ref().and_then(|t| t.get(attr).copied())
    }
}

/// An ordered, immutable collection of samples sharing a modality layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub modality_dims: BTreeMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset from samples, deriving `modality_dims` from the first
    /// sample and checking every type invariant.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(AuditError::InvalidArgument(
                "dataset must contain at least one sample".into(),
            ));
        }
        let modality_dims: BTreeMap<String, usize> = samples[0]
            .views
            .iter()
            .map(|(m, v)| (m.clone(), v.len()))
            .collect();
        let ds = Dataset {
            samples,
            modality_dims,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn predictions(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.prediction).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Checks id uniqueness, binary labels/predictions, and that every
    /// sample exposes exactly the declared modalities and dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(AuditError::InvalidArgument("empty dataset".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(AuditError::InvalidArgument(format!(
                    "duplicate sample id '{}'",
                    s.id
                )));
            }
            if s.label > 1 || s.prediction > 1 {
                return Err(AuditError::InvalidArgument(format!(
                    "sample '{}' has non-binary label or prediction",
                    s.id
                )));
            }
            if s.views.len() != self.modality_dims.len() {
                return Err(AuditError::DimensionMismatch(format!(
                    "sample '{}' exposes {} modalities, expected {}",
                    s.id,
                    s.views.len(),
                    self.modality_dims.len()
                )));
            }
            for (m, dim) in &self.modality_dims {
                match s.views.get(m) {
                    Some(v) if v.len() == *dim => {}
                    Some(v) => {
                        return Err(AuditError::DimensionMismatch(format!(
                            "sample '{}' modality '{}' has dim {}, expected {}",
                            s.id,
                            m,
                            v.len(),
                            dim
                        )))
                    }
                    None => return Err(AuditError::UnknownModality(m.clone())),
                }
            }
        }
        Ok(())
    }
}

/// Tokenized text of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDoc {
    pub sample_id: String,
    pub tokens: Vec<String>,
}

/// Which text fields feed the explanation documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocSource {
    Report,
    Metadata,
    Both,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    samples: String,
    embeddings: BTreeMap<String, String>,
    #[serde(default)]
    reports: Option<String>,
    #[serde(default)]
    metadata: Option<String>,
    #[serde(default)]
    groups: Option<String>,
}

/// Lowercases, keeps only `[a-z0-9-]` runs, drops stopwords and tokens
/// shorter than two characters. Order and duplicates are preserved.
pub fn tokenize(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-'))
        .filter(|t| t.len() >= 2 && !stopwords.contains(*t))
        .map(str::to_string)
        .collect()
}

/// Renders a metadata record as "key is value" phrases joined by "; ",
/// keys in sorted order, de-camel-cased and lowercased.
pub fn metadata_to_text(record: &BTreeMap<String, String>) -> String {
    record
        .iter()
        .map(|(k, v)| format!("{} is {}", decamel(k), v.to_lowercase()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// "ViewPosition" -> "view position", "StudyID" -> "study id",
/// "body_part" -> "body part".
fn decamel(key: &str) -> String {
    let chars: Vec<char> = key.chars().collect();
    let mut out = String::with_capacity(key.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == ' ' {
            out.push(' ');
            continue;
        }
        if c.is_uppercase() && i > 0 {
            let prev = chars[i - 1];
            let boundary = prev.is_lowercase()
                || prev.is_ascii_digit()
                || (prev.is_uppercase() && chars.get(i + 1).is_some_and(|n| n.is_lowercase()));
            if boundary && !out.ends_with(' ') {
                out.push(' ');
            }
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// Builds one explanation document per sample from report text and/or a
/// textualized metadata record. Samples missing both yield empty docs.
pub fn build_docs(dataset: &Dataset, source: DocSource, stopwords: &BTreeSet<String>) -> Vec<TokenDoc> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let mut tokens = Vec::new();
            if matches!(source, DocSource::Report | DocSource::Both) {
                if let Some(text) = &s.report_text {
                    tokens.extend(tokenize(text, stopwords));
                }
            }
            if matches!(source, DocSource::Metadata | DocSource::Both) {
                if let Some(record) = &s.metadata {
                    tokens.extend(tokenize(&metadata_to_text(record), stopwords));
                }
            }
            TokenDoc {
                sample_id: s.id.clone(),
                tokens,
            }
        })
        .collect()
}

/// Built-in English stopword list. Callers merge config additions on top.
pub fn default_stopwords() -> BTreeSet<String> {
    const WORDS: &[&str] = &[
        "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any",
        "are", "as", "at", "be", "because", "been", "before", "being", "below", "between",
        "both", "but", "by", "can", "did", "do", "does", "doing", "down", "during", "each",
        "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here",
        "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it",
        "its", "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not",
        "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves",
        "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that",
        "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they",
        "this", "those", "through", "to", "too", "under", "until", "up", "very", "was", "we",
        "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will",
        "with", "you", "your", "yours", "yourself", "yourselves",
    ];
    WORDS.iter().map(|w| w.to_string()).collect()
}

/// Loads a dataset from a JSON manifest. Row order follows the ids+labels
/// CSV; embedding rows are joined by id and may appear in any order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let raw = fs::read_to_string(manifest_path).map_err(|e| AuditError::Io {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| AuditError::Manifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let (ids, labels, predictions) = read_samples_csv(&base.join(&manifest.samples))?;
    let mut seen = BTreeSet::new();
    for (row, id) in ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(AuditError::BadRecord {
                file: manifest.samples.clone(),
                row: row + 2,
                reason: format!("duplicate sample id '{id}'"),
            });
        }
    }

    let mut views_by_modality: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (modality, rel) in &manifest.embeddings {
        let path = base.join(rel);
        let table = read_embedding_csv(&path)?;
        if table.len() != ids.len() {
            return Err(AuditError::DimensionMismatch(format!(
                "modality '{}' has {} embedding rows but the manifest lists {} ids",
                modality,
                table.len(),
                ids.len()
            )));
        }
        for id in &ids {
            if !table.contains_key(id) {
                return Err(AuditError::DimensionMismatch(format!(
                    "modality '{}' is missing an embedding row for id '{}'",
                    modality, id
                )));
            }
        }
        views_by_modality.insert(modality.clone(), table);
    }

    let reports = match &manifest.reports {
        Some(rel) => read_reports_csv(&base.join(rel))?,
        None => BTreeMap::new(),
    };
    let metadata = match &manifest.metadata {
        Some(rel) => read_record_csv(&base.join(rel))?,
        None => BTreeMap::new(),
    };
    let groups = match &manifest.groups {
        Some(rel) => read_groups_csv(&base.join(rel))?,
        None => BTreeMap::new(),
    };

    let samples = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Sample {
            id: id.clone(),
            views: views_by_modality
                .iter()
                .map(|(m, table)| (m.clone(), table[id].clone()))
                .collect(),
            label: labels[i],
            prediction: predictions[i],
            report_text: reports.get(id).cloned(),
            metadata: metadata.get(id).cloned(),
            group_tags: groups.get(id).cloned(),
        })
        .collect();

    Dataset::new(samples)
}

/// Writes a dataset back to `dir` in manifest form and returns the manifest
/// path. `load_dataset` on the result reconstructs the dataset exactly.
pub fn emit_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| AuditError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;

    write_file(&dir.join("samples.csv"), &{
        let mut out = String::from("id,label,prediction\n");
        for s in &dataset.samples {
            out.push_str(&format!("{},{},{}\n", s.id, s.label, s.prediction));
        }
        out
    })?;

    let mut embeddings = BTreeMap::new();
    for (modality, dim) in &dataset.modality_dims {
        let file = format!("emb_{modality}.csv");
        let mut out = String::from("id");
        for j in 0..*dim {
            out.push_str(&format!(",v{j}"));
        }
        out.push('\n');
        for s in &dataset.samples {
            out.push_str(&s.id);
            for v in &s.views[modality] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        write_file(&dir.join(&file), &out)?;
        embeddings.insert(modality.clone(), file);
    }

    let reports = if dataset.samples.iter().any(|s| s.report_text.is_some()) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "text"]).ok();
        for s in &dataset.samples {
            if let Some(text) = &s.report_text {
                w.write_record([s.id.as_str(), text.as_str()]).ok();
            }
        }
        let bytes = w.into_inner().map_err(|e| AuditError::InvalidArgument(e.to_string()))?;
        write_bytes(&dir.join("reports.csv"), &bytes)?;
        Some("reports.csv".to_string())
    } else {
        None
    };

    let metadata = emit_record_csv(
        dataset,
        &dir.join("metadata.csv"),
        |s| s.metadata.as_ref().map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
    )?
    .then(|| "metadata.csv".to_string());

    let groups = emit_record_csv(
        dataset,
        &dir.join("groups.csv"),
        |s| {
            s.group_tags
                .as_ref()
                .map(|t| t.iter().map(|(k, v)| (k.clone(), v.to_string())).collect())
        },
    )?
    .then(|| "groups.csv".to_string());

    let manifest = Manifest {
        samples: "samples.csv".into(),
        embeddings,
        reports,
        metadata,
        groups,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AuditError::InvalidArgument(e.to_string()))?;
    write_file(&manifest_path, &(json + "\n"))?;
    Ok(manifest_path)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_bytes(path, contents.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AuditError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| AuditError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_samples_csv(path: &Path) -> Result<(Vec<String>, Vec<u8>, Vec<u8>)> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?
        .clone();
    if headers.iter().take(3).collect::<Vec<_>>() != ["id", "label", "prediction"] {
        return Err(AuditError::BadRecord {
            file: file_name(path),
            row: 1,
            reason: "expected header 'id,label,prediction'".into(),
        });
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?;
        let parse_bit = |field: usize, name: &str| -> Result<u8> {
            match record.get(field).map(str::trim) {
                Some("0") => Ok(0),
                Some("1") => Ok(1),
                other => Err(AuditError::BadRecord {
                    file: file_name(path),
                    row: row + 2,
                    reason: format!("non-binary {name} '{}'", other.unwrap_or("")),
                }),
            }
        };
        ids.push(record.get(0).unwrap_or("").to_string());
        labels.push(parse_bit(1, "label")?);
        predictions.push(parse_bit(2, "prediction")?);
    }
    if ids.is_empty() {
        return Err(AuditError::BadRecord {
            file: file_name(path),
            row: 1,
            reason: "no sample rows".into(),
        });
    }
    Ok((ids, labels, predictions))
}

fn read_embedding_csv(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut reader = open_csv(path)?;
    let mut table = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?;
        let id = record.get(0).unwrap_or("").to_string();
        let mut vec = Vec::with_capacity(record.len().saturating_sub(1));
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| AuditError::BadRecord {
                file: file_name(path),
                row: row + 2,
                reason: format!("invalid float '{field}'"),
            })?;
            vec.push(v);
        }
        if table.insert(id.clone(), vec).is_some() {
            return Err(AuditError::BadRecord {
                file: file_name(path),
                row: row + 2,
                reason: format!("duplicate embedding row for id '{id}'"),
            });
        }
    }
    Ok(table)
}

fn read_reports_csv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = open_csv(path)?;
    let mut table = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?;
        let id = record.get(0).unwrap_or("").to_string();
        let text = record.get(1).unwrap_or("").to_string();
        table.insert(id, text);
    }
    Ok(table)
}

/// Reads `id,<field1>,<field2>,...` into per-id records; empty cells mean
/// the field is absent for that row.
fn read_record_csv(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut reader = open_csv(path)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut table = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| AuditError::Csv { path: path.to_path_buf(), source: e })?;
        let id = record.get(0).unwrap_or("").to_string();
        let mut fields = BTreeMap::new();
        for (j, header) in headers.iter().enumerate().skip(1) {
            if let Some(value) = record.get(j) {
                if !value.is_empty() {
                    fields.insert(header.clone(), value.to_string());
                }
            }
        }
        table.insert(id, fields);
    }
    Ok(table)
}

fn read_groups_csv(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, u8>>> {
    let records = read_record_csv(path)?;
    let mut table = BTreeMap::new();
    for (id, fields) in records {
        let mut tags = BTreeMap::new();
        for (attr, value) in fields {
            let bit = match value.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(AuditError::BadRecord {
                        file: file_name(path),
                        row: 0,
                        reason: format!("group value for '{attr}' must be 0 or 1, got '{other}'"),
                    })
                }
            };
            tags.insert(attr, bit);
        }
        table.insert(id, tags);
    }
    Ok(table)
}

/// Writes an `id,<field>,...` CSV for samples where `extract` returns a
/// record. Returns false (and writes nothing) when no sample has one.
fn emit_record_csv(
    dataset: &Dataset,
    path: &Path,
    extract: impl Fn(&Sample) -> Option<BTreeMap<String, String>>,
) -> Result<bool> {
    let records: Vec<(usize, BTreeMap<String, String>)> = dataset
        .samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| extract(s).map(|r| (i, r)))
        .collect();
    if records.is_empty() {
        return Ok(false);
    }
    let mut fields = BTreeSet::new();
    for (_, r) in &records {
        fields.extend(r.keys().cloned());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(fields.iter().cloned());
    w.write_record(&header).ok();
    for (i, r) in &records {
        let mut row = vec![dataset.samples[*i].id.clone()];
        for f in &fields {
            row.push(r.get(f).cloned().unwrap_or_default());
        }
        w.write_record(&row).ok();
    }
    let bytes = w.into_inner().map_err(|e| AuditError::InvalidArgument(e.to_string()))?;
    write_bytes(path, &bytes)?;
    Ok(true)
}
