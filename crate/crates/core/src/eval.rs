//! Precision@k scoring, the bootstrap bench protocol, and report
//! emission. Orchestrates fusion -> discovery -> explanation per
//! iteration; iterations run in parallel and aggregate in seed order, so
//! reports are byte-identical across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biaslab::{synth_world, token_embeddings, validity_check};
use crate::config::AuditConfig;
use crate::discovery::{
    assign_slices, fit_error_only, fit_slice_model, rank_slices, slice_error_rates,
    DiscoveryMode, SliceAssignment, SliceModel,
};
use crate::error::{AuditError, Result};
use crate::explain::{
    build_reference_slice, distinctiveness, fit_tfidf, global_attr_precision, validate_attribute,
    TokenReport,
};
use crate::fusion::{fit_pca, fuse, transform_pca};
use crate::ingest::{build_docs, Dataset};

type TokenTable = BTreeMap<String, Vec<f64>>;

/// One bootstrap iteration. Iterations that fail the validity gap (or
/// cannot fit, e.g. too few errors for error-only mode) carry
/// `valid: false` and empty metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub seed: u64,
    pub valid: bool,
    pub best_slice_precision_at_k: Option<f64>,
    /// Clustering-free share of misclassified samples carrying the
    /// planted attribute, the global baseline.
    pub baseline_precision: Option<f64>,
    pub token_report: Option<TokenReport>,
}

/// Aggregate statistics for one reported token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub frequency: usize,
    pub mean_ds: f64,
    pub mean_r_attr: Option<f64>,
}

/// Full bootstrap outcome; means cover valid iterations only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub per_iteration: Vec<IterationRecord>,
    pub mean_precision_at_k: f64,
    pub mean_baseline_precision: f64,
    pub invalid_iterations: usize,
    /// How often each token entered a valid iteration's top list.
    pub token_frequency: BTreeMap<String, usize>,
    pub token_stats: BTreeMap<String, TokenStat>,
    pub config_echo: AuditConfig,
}

/// Slice-level summary for a real-data (`run`) audit, ranked by error
/// rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub slice_id: usize,
    pub size: usize,
    pub error_rate: f64,
    pub member_ids: Vec<String>,
    pub token_report: Option<TokenReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub slices: Vec<SliceSummary>,
    pub config_echo: AuditConfig,
}

/// Fraction of the k highest-membership samples (ties broken by lower
/// index) that belong to the planted group.
pub fn precision_at_k(memberships: &[f64], truth: &[u8], k: usize) -> Result<f64> {
    let n = memberships.len();
    if k == 0 || k > n {
        return Err(AuditError::InvalidArgument(format!("k={k} out of range 1..={n}")));
    }
    if truth.len() != n {
        return Err(AuditError::DimensionMismatch(format!(
            "truth has {} entries for {} memberships",
            truth.len(),
            n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| memberships[b].total_cmp(&memberships[a]).then(a.cmp(&b)));
    let hits = order[..k].iter().filter(|&&i| truth[i] == 1).count();
    Ok(hits as f64 / k as f64)
}

/// Precision@k of every slice column; returns the argmax (ties keep the
/// lower index).
pub fn best_slice(assignment: &SliceAssignment, truth: &[u8], k: usize) -> Result<(usize, f64)> {
    let n = assignment.memberships.nrows();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..assignment.memberships.ncols() {
        let column: Vec<f64> = (0..n).map(|i| assignment.memberships[[i, j]]).collect();
        let p = precision_at_k(&column, truth, k)?;
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((j, p));
        }
    }
    best.ok_or_else(|| AuditError::InvalidArgument("assignment has no slices".into()))
}

/// Fitted pipeline state for one dataset: the reduced embedding, the
/// slice model, and the assignment.
pub struct Discovery {
    pub reduced: ndarray::Array2<f64>,
    pub model: SliceModel,
    pub assignment: SliceAssignment,
}

/// fuse -> PCA -> fit -> assign, per the configured mode.
pub fn discover(dataset: &Dataset, config: &AuditConfig, seed: u64) -> Result<Discovery> {
    let y = dataset.labels();
    let yhat = dataset.predictions();
    let fused = fuse(dataset, &config.modalities, config.standardize)?;
    let k = config
        .pca_components
        .min(fused.rows.nrows())
        .min(fused.rows.ncols());
    let pca = fit_pca(&fused.rows, k)?;
    let reduced = transform_pca(&pca, &fused.rows)?;
    let opts = config.fit_options();
    let model = match config.mode {
        DiscoveryMode::Domino => {
            fit_slice_model(&reduced, &y, &yhat, config.k_slices, config.gamma, seed, &opts)?
        }
        DiscoveryMode::ErrorOnly => {
            fit_error_only(&reduced, &y, &yhat, config.k_slices, seed, &opts)?
        }
    };
    let assignment = assign_slices(&model, &reduced, &y, &yhat, config.beta)?;
    Ok(Discovery {
        reduced,
        model,
        assignment,
    })
}

/// Token report for an explicit member set. Degenerates to an empty
/// report when the slice is empty or has no reference samples.
pub fn explain_slice(
    dataset: &Dataset,
    err_ids: &BTreeSet<String>,
    slice_id: i64,
    config: &AuditConfig,
    stopwords: &BTreeSet<String>,
    token_table: Option<&TokenTable>,
) -> Result<TokenReport> {
    let empty = TokenReport {
        error_slice_id: slice_id,
        entries: Vec::new(),
        reference_size: 0,
    };
    if err_ids.is_empty() {
        return Ok(empty);
    }
    let ref_ids = match build_reference_slice(dataset, err_ids) {
        Ok(ids) => ids,
        Err(AuditError::NoReferenceSamples(_)) => return Ok(empty),
        Err(e) => return Err(e),
    };
    let docs = build_docs(dataset, config.doc_source, stopwords);
    let tfidf = fit_tfidf(&docs)?;
    let mut report = distinctiveness(&tfidf, err_ids, &ref_ids, config.top_n)?;
    report.error_slice_id = slice_id;

    if let Some(table) = token_table {
        if dataset.modality_dims.contains_key(&config.image_modality) {
            let img_vecs: TokenTable = dataset
                .samples
                .iter()
                .map(|s| (s.id.clone(), s.views[&config.image_modality].clone()))
                .collect();
            for entry in &mut report.entries {
                if let Some(vec) = table.get(&entry.token) {
                    entry.r_attr = Some(validate_attribute(
                        &entry.token,
                        vec,
                        &img_vecs,
                        err_ids,
                        &ref_ids,
                    )?);
                }
            }
        }
    }
    Ok(report)
}

/// The synthetic bootstrap protocol: per iteration, generate a world,
/// gate on the validity check, discover slices, score the best one
/// against the planted group, and explain it.
pub fn bootstrap_audit(config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let stopwords = config.stopwords();
    let token_table = config
        .world
        .dims
        .get(&config.image_modality)
        .map(|&dim| token_embeddings(&config.world, dim))
        .transpose()?;

    let records: Vec<IterationRecord> = (0..config.iterations as u64)
        .into_par_iter()
        .map(|t| {
            run_bench_iteration(
                config,
                &stopwords,
                token_table.as_ref(),
                config.base_seed.wrapping_add(t),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    aggregate(records, config)
}

fn run_bench_iteration(
    config: &AuditConfig,
    stopwords: &BTreeSet<String>,
    token_table: Option<&TokenTable>,
    seed: u64,
) -> Result<IterationRecord> {
    let invalid = IterationRecord {
        seed,
        valid: false,
        best_slice_precision_at_k: None,
        baseline_precision: None,
        token_report: None,
    };
    let (_train, test) = synth_world(&config.world, &config.bias, seed)?;
    if !validity_check(&test, &config.bias.attr)? {
        return Ok(invalid);
    }

    let discovery = match discover(&test, config, seed) {
        Ok(d) => d,
        // data-shape failures (e.g. too few errors for error-only mode)
        // count as invalid iterations rather than aborting the audit
        Err(AuditError::InsufficientErrors(_)) | Err(AuditError::InsufficientDiversity(_)) => {
            return Ok(invalid)
        }
        Err(e) => return Err(e),
    };

    let truth: Vec<u8> = test
        .samples
        .iter()
        .map(|s| {
            u8::from(s.label == config.bias.target_class && s.group_tag(&config.bias.attr) == Some(1))
        })
        .collect();
    let (best_j, precision) = best_slice(&discovery.assignment, &truth, config.precision_k)?;
    let baseline = global_attr_precision(&test, &config.bias.attr)?;

    let err_ids: BTreeSet<String> = discovery.assignment.slices[best_j]
        .iter()
        .map(|&i| test.samples[i].id.clone())
        .collect();
    let token_report = explain_slice(
        &test,
        &err_ids,
        best_j as i64,
        config,
        stopwords,
        token_table,
    )?;

    Ok(IterationRecord {
        seed,
        valid: true,
        best_slice_precision_at_k: Some(precision),
        baseline_precision: Some(baseline),
        token_report: Some(token_report),
    })
}

fn aggregate(records: Vec<IterationRecord>, config: &AuditConfig) -> Result<AuditReport> {
    let valid: Vec<&IterationRecord> = records.iter().filter(|r| r.valid).collect();
    if valid.is_empty() {
        return Err(AuditError::NoValidIterations(format!(
            "all {} iterations failed the validity gap (seeds {}..{}); the simulated \
             classifier shows no reliable {}% accuracy gap under this configuration",
            records.len(),
            config.base_seed,
            config.base_seed.wrapping_add(records.len() as u64 - 1),
            (crate::biaslab::VALIDITY_GAP * 100.0) as u32
        )));
    }
    let n = valid.len() as f64;
    let mean_precision_at_k = valid
        .iter()
        .filter_map(|r| r.best_slice_precision_at_k)
        .sum::<f64>()
        / n;
    let mean_baseline_precision =
        valid.iter().filter_map(|r| r.baseline_precision).sum::<f64>() / n;

    let mut token_frequency: BTreeMap<String, usize> = BTreeMap::new();
    let mut ds_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut r_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for record in &valid {
        if let Some(report) = &record.token_report {
            for entry in &report.entries {
                *token_frequency.entry(entry.token.clone()).or_insert(0) += 1;
                *ds_sums.entry(entry.token.clone()).or_insert(0.0) += entry.ds;
                if let Some(r) = entry.r_attr {
                    let slot = r_sums.entry(entry.token.clone()).or_insert((0.0, 0));
                    slot.0 += r;
                    slot.1 += 1;
                }
            }
        }
    }
    let token_stats: BTreeMap<String, TokenStat> = token_frequency
        .iter()
        .map(|(token, &frequency)| {
            let mean_ds = ds_sums[token] / frequency as f64;
            let mean_r_attr = r_sums.get(token).map(|(sum, count)| sum / *count as f64);
            (
                token.clone(),
                TokenStat {
                    frequency,
                    mean_ds,
                    mean_r_attr,
                },
            )
        })
        .collect();

    Ok(AuditReport {
        invalid_iterations: records.len() - valid.len(),
        per_iteration: records,
        mean_precision_at_k,
        mean_baseline_precision,
        token_frequency,
        token_stats,
        config_echo: config.clone(),
    })
}

/// Real-data audit: discover slices in a loaded dataset, rank them by
/// error rate (no ground truth required), and explain each non-empty one.
pub fn run_manifest_audit(
    dataset: &Dataset,
    config: &AuditConfig,
    token_table: Option<&TokenTable>,
) -> Result<RunReport> {
    let stopwords = config.stopwords();
    let y = dataset.labels();
    let yhat = dataset.predictions();
    let discovery = discover(dataset, config, config.base_seed)?;
    let order = rank_slices(&discovery.assignment, &y, &yhat);
    let rates = slice_error_rates(&discovery.assignment, &y, &yhat);

    let mut slices = Vec::with_capacity(order.len());
    for j in order {
        let member_ids: Vec<String> = discovery.assignment.slices[j]
            .iter()
            .map(|&i| dataset.samples[i].id.clone())
            .collect();
        let token_report = if member_ids.is_empty() {
            None
        } else {
            let err_ids: BTreeSet<String> = member_ids.iter().cloned().collect();
            Some(explain_slice(
                dataset,
                &err_ids,
                j as i64,
                config,
                &stopwords,
                token_table,
            )?)
        };
        slices.push(SliceSummary {
            slice_id: j,
            size: member_ids.len(),
            error_rate: rates[j],
            member_ids,
            token_report,
        });
    }
    Ok(RunReport {
        slices,
        config_echo: config.clone(),
    })
}

/// Writes report.json, summary.csv and tokens.csv under `out_dir`.
pub fn emit_report(report: &AuditReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| AuditError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| AuditError::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    };

    let mut json = serde_json::to_vec_pretty(report)
        .map_err(|e| AuditError::InvalidArgument(format!("report serialization: {e}")))?;
    json.push(b'\n');
    let report_path = write("report.json", &json)?;

    let mut summary = String::from("seed,valid,precision\n");
    for record in &report.per_iteration {
        let precision = record
            .best_slice_precision_at_k
            .map(|p| p.to_string())
            .unwrap_or_default();
        summary.push_str(&format!("{},{},{}\n", record.seed, record.valid, precision));
    }
    let summary_path = write("summary.csv", summary.as_bytes())?;

    let mut tokens = String::from("token,frequency,mean_ds,mean_r_attr\n");
    let mut ordered: Vec<(&String, &TokenStat)> = report.token_stats.iter().collect();
    ordered.sort_by(|a, b| b.1.frequency.cmp(&a.1.frequency).then(a.0.cmp(b.0)));
    for (token, stat) in ordered {
        let r = stat.mean_r_attr.map(|v| v.to_string()).unwrap_or_default();
        tokens.push_str(&format!("{},{},{},{}\n", token, stat.frequency, stat.mean_ds, r));
    }
    let tokens_path = write("tokens.csv", tokens.as_bytes())?;

    Ok(vec![report_path, summary_path, tokens_path])
}
