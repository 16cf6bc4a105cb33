//! Resolved run configuration: one JSON file covering fusion, discovery,
//! explanation, and the bias lab. Every key has a default, so a config of
//! `{}` is valid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biaslab::{BiasSpec, SynthWorldSpec};
use crate::discovery::{DiscoveryMode, FitOptions};
use crate::error::{AuditError, Result};
use crate::ingest::DocSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Modalities fused, in order.
    pub modalities: Vec<String>,
    /// PCA target dimension, clipped to min(N, D) at fit time.
    pub pca_components: usize,
    /// Standardize each modality block before concatenation.
    pub standardize: bool,
    /// Slice count K.
    pub k_slices: usize,
    /// Error-coherence exponent.
    pub gamma: f64,
    /// Membership threshold for slice assignment.
    pub beta: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    pub mode: DiscoveryMode,
    /// Tokens reported per slice.
    pub top_n: usize,
    pub doc_source: DocSource,
    /// Stopwords added on top of the built-in list.
    pub extra_stopwords: Vec<String>,
    /// Modality whose raw vectors feed attribute-similarity validation.
    pub image_modality: String,
    /// Bootstrap iterations for `bench`.
    pub iterations: usize,
    pub base_seed: u64,
    /// The k in Precision@k.
    pub precision_k: usize,
    pub world: SynthWorldSpec,
    pub bias: BiasSpec,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            modalities: vec!["img".to_string(), "txt".to_string()],
            pca_components: 128,
            standardize: true,
            k_slices: 5,
            gamma: 10.0,
            beta: 0.5,
            max_iters: 200,
            tol: 1e-5,
            n_init: 3,
            mode: DiscoveryMode::Domino,
            top_n: 5,
            doc_source: DocSource::Both,
            extra_stopwords: Vec::new(),
            image_modality: "img".to_string(),
            iterations: 100,
            base_seed: 0,
            precision_k: 10,
            world: SynthWorldSpec::default(),
            bias: BiasSpec::default(),
        }
    }
}

impl AuditConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| AuditError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let config: AuditConfig = serde_json::from_str(&raw).map_err(|e| AuditError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(AuditError::InvalidArgument("modalities must be non-empty".into()));
        }
        if self.k_slices == 0 {
            return Err(AuditError::InvalidArgument("k_slices must be >= 1".into()));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(AuditError::InvalidArgument("gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(AuditError::InvalidArgument("beta must lie in [0,1)".into()));
        }
        if self.pca_components == 0 || self.precision_k == 0 || self.iterations == 0 {
            return Err(AuditError::InvalidArgument(
                "pca_components, precision_k and iterations must be >= 1".into(),
            ));
        }
        self.world.validate()?;
        self.bias.validate()?;
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            n_init: self.n_init,
            ..FitOptions::default()
        }
    }

    /// Built-in stopwords merged with the configured additions.
    pub fn stopwords(&self) -> std::collections::BTreeSet<String> {
        let mut set = crate::ingest::default_stopwords();
        set.extend(self.extra_stopwords.iter().cloned());
        set
    }
}
