//! Token-level slice explanations.
//!
//! Scores every vocabulary token by its distinctiveness: the mean TF-IDF
//! weight over the error slice minus the mean over a reference slice of
//! correctly predicted same-class samples. An optional embedding check
//! compares the token's text vector against the image vectors of both
//! slices (cosine), yielding `r_attr`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::ingest::{Dataset, TokenDoc};

/// TF-IDF statistics over one document corpus.
///
/// `tf(t,d) = count(t,d) / |d|`, `idf(t) = ln((1+N)/(1+df(t))) + 1`,
/// weight is their product. Empty documents yield zero vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    /// Sorted token list.
    pub vocabulary: Vec<String>,
    /// Per-token inverse document frequency, aligned with `vocabulary`.
    pub idf: Vec<f64>,
    /// Sparse rows of (token index, weight), one per document.
    pub doc_vectors: Vec<Vec<(usize, f64)>>,
    /// Document sample ids, aligned with `doc_vectors`.
    pub doc_ids: Vec<String>,
    doc_index: BTreeMap<String, usize>,
}

impl TfidfModel {
    pub fn doc_row(&self, sample_id: &str) -> Option<usize> {
        self.doc_index.get(sample_id).copied()
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocabulary.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }

    /// Dense mean TF-IDF vector over the given document rows.
    fn mean_vector(&self, rows: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.vocabulary.len()];
        for &r in rows {
            for &(t, w) in &self.doc_vectors[r] {
                acc[t] += w;
            }
        }
        let n = rows.len() as f64;
        for v in &mut acc {
            *v /= n;
        }
        acc
    }
}

/// One scored token. `r_attr` carries the embedding-similarity validation
/// when a token-vector table is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub ds: f64,
    pub r_attr: Option<f64>,
}

/// Ranked token explanation for one slice. Serializes as
/// `{slice_id, tokens, reference_size}`; `slice_id` is -1 for the global
/// baseline report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    #[serde(rename = "slice_id")]
    pub error_slice_id: i64,
    #[serde(rename = "tokens")]
    pub entries: Vec<TokenEntry>,
    pub reference_size: usize,
}

/// Fits TF-IDF over the corpus. Needs at least one document.
pub fn fit_tfidf(docs: &[TokenDoc]) -> Result<TfidfModel> {
    if docs.is_empty() {
        return Err(AuditError::InvalidArgument("tf-idf needs at least one document".into()));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let distinct: BTreeSet<&str> = doc.tokens.iter().map(String::as_str).collect();
        for t in distinct {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let vocabulary: Vec<String> = df.keys().map(|t| t.to_string()).collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocabulary
        .iter()
        .map(|t| ((1.0 + n) / (1.0 + df[t.as_str()] as f64)).ln() + 1.0)
        .collect();

    let token_pos: BTreeMap<&str, usize> =
        vocabulary.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let mut doc_vectors = Vec::with_capacity(docs.len());
    let mut doc_ids = Vec::with_capacity(docs.len());
    let mut doc_index = BTreeMap::new();
    for (row, doc) in docs.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &doc.tokens {
            *counts.entry(token_pos[t.as_str()]).or_insert(0) += 1;
        }
        let len = doc.tokens.len() as f64;
        let vector: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(t, c)| (t, c as f64 / len * idf[t]))
            .collect();
        doc_vectors.push(vector);
        doc_ids.push(doc.sample_id.clone());
        if doc_index.insert(doc.sample_id.clone(), row).is_some() {
            return Err(AuditError::InvalidArgument(format!(
                "duplicate document for sample '{}'",
                doc.sample_id
            )));
        }
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        doc_vectors,
        doc_ids,
        doc_index,
    })
}

/// Correctly predicted samples sharing the error slice's majority label
/// (ties toward 1), minus the error slice itself.
pub fn build_reference_slice(
    dataset: &Dataset,
    error_slice: &BTreeSet<String>,
) -> Result<BTreeSet<String>> {
    if error_slice.is_empty() {
        return Err(AuditError::EmptySlice("error slice has no members".into()));
    }
    let mut ones = 0usize;
    let mut total = 0usize;
    for s in &dataset.samples {
        if error_slice.contains(&s.id) {
            total += 1;
            ones += s.label as usize;
        }
    }
    if total != error_slice.len() {
        return Err(AuditError::InvalidArgument(
            "error slice contains ids absent from the dataset".into(),
        ));
    }
    let majority: u8 = u8::from(2 * ones >= total);
    let reference: BTreeSet<String> = dataset
        .samples
        .iter()
        .filter(|s| s.label == majority && s.prediction == s.label && !error_slice.contains(&s.id))
        .map(|s| s.id.clone())
        .collect();
    if reference.is_empty() {
        return Err(AuditError::NoReferenceSamples(format!(
            "no correctly predicted samples of class {majority} outside the slice"
        )));
    }
    Ok(reference)
}

/// Scores every vocabulary token by mean TF-IDF over the error docs minus
/// mean over the reference docs, returning the top `top_n` (ties broken
/// alphabetically).
pub fn distinctiveness(
    model: &TfidfModel,
    err_ids: &BTreeSet<String>,
    ref_ids: &BTreeSet<String>,
    top_n: usize,
) -> Result<TokenReport> {
    let rows = |ids: &BTreeSet<String>, side: &str| -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(AuditError::EmptySlice(format!("{side} side has no members")));
        }
        ids.iter()
            .map(|id| {
                model
                    .doc_row(id)
                    .ok_or_else(|| AuditError::InvalidArgument(format!("no document for id '{id}'")))
            })
            .collect()
    };
    let err_rows = rows(err_ids, "error")?;
    let ref_rows = rows(ref_ids, "reference")?;

    let mu_err = model.mean_vector(&err_rows);
    let mu_ref = model.mean_vector(&ref_rows);

    let mut scored: Vec<(usize, f64)> = (0..model.vocabulary.len())
        .map(|t| (t, mu_err[t] - mu_ref[t]))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| model.vocabulary[a.0].cmp(&model.vocabulary[b.0]))
    });
    let entries = scored
        .into_iter()
        .take(top_n)
        .map(|(t, ds)| TokenEntry {
            token: model.vocabulary[t].clone(),
            ds,
            r_attr: None,
        })
        .collect();
    Ok(TokenReport {
        error_slice_id: -1,
        entries,
        reference_size: ref_ids.len(),
    })
}

/// Difference of mean cosine similarity between a token vector and the
/// image vectors of the error vs reference slices.
pub fn validate_attribute(
    token: &str,
    token_vec: &[f64],
    img_vecs: &BTreeMap<String, Vec<f64>>,
    err_ids: &BTreeSet<String>,
    ref_ids: &BTreeSet<String>,
) -> Result<f64> {
    if err_ids.is_empty() || ref_ids.is_empty() {
        return Err(AuditError::EmptySlice(format!(
            "attribute validation for '{token}' needs non-empty slices"
        )));
    }
    let token_unit = normalize(token_vec)
        .ok_or_else(|| AuditError::ZeroNorm(format!("token vector for '{token}'")))?;
    let mean_sim = |ids: &BTreeSet<String>| -> Result<f64> {
        let mut total = 0.0;
        for id in ids {
            let vec = img_vecs.get(id).ok_or_else(|| AuditError::MissingVector(id.clone()))?;
            if vec.len() != token_unit.len() {
                return Err(AuditError::DimensionMismatch(format!(
                    "image vector for '{id}' has dim {}, token dim {}",
                    vec.len(),
                    token_unit.len()
                )));
            }
            let unit =
                normalize(vec).ok_or_else(|| AuditError::ZeroNorm(format!("image vector '{id}'")))?;
            total += dot(&token_unit, &unit);
        }
        Ok(total / ids.len() as f64)
    };
    Ok(mean_sim(err_ids)? - mean_sim(ref_ids)?)
}

/// Distinctiveness with no slice discovery: error side is every
/// misclassified sample, reference side every correct one.
pub fn global_baseline(dataset: &Dataset, docs: &[TokenDoc], top_n: usize) -> Result<TokenReport> {
    let err_ids: BTreeSet<String> = dataset
        .samples
        .iter()
        .filter(|s| s.is_error())
        .map(|s| s.id.clone())
        .collect();
    let ref_ids: BTreeSet<String> = dataset
        .samples
        .iter()
        .filter(|s| !s.is_error())
        .map(|s| s.id.clone())
        .collect();
    if err_ids.is_empty() {
        return Err(AuditError::EmptySlice("dataset has no misclassified samples".into()));
    }
    if ref_ids.is_empty() {
        return Err(AuditError::EmptySlice("dataset has no correct samples".into()));
    }
    let model = fit_tfidf(docs)?;
    distinctiveness(&model, &err_ids, &ref_ids, top_n)
}

/// Share of misclassified samples carrying the attribute: the
/// clustering-free precision analogue.
pub fn global_attr_precision(dataset: &Dataset, attr: &str) -> Result<f64> {
    let mut wrong = 0usize;
    let mut wrong_with_attr = 0usize;
    for s in &dataset.samples {
        let tag = s.group_tag(attr).ok_or_else(|| AuditError::MissingAttribute {
            attr: attr.to_string(),
            reason: format!("sample '{}' has no tag", s.id),
        })?;
        if s.is_error() {
            wrong += 1;
            wrong_with_attr += tag as usize;
        }
    }
    if wrong == 0 {
        return Err(AuditError::EmptySlice("no misclassified samples".into()));
    }
    Ok(wrong_with_attr as f64 / wrong as f64)
}

/// Reads a `token,v0,...,v{d-1}` CSV into a token-vector table.
pub fn load_token_table(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| AuditError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut table = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AuditError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let token = record.get(0).unwrap_or("").to_string();
        let vec: std::result::Result<Vec<f64>, _> =
            record.iter().skip(1).map(|f| f.trim().parse::<f64>()).collect();
        let vec = vec.map_err(|_| AuditError::BadRecord {
            file: path.display().to_string(),
            row: row + 2,
            reason: "invalid float".into(),
        })?;
        table.insert(token, vec);
    }
    Ok(table)
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
