//! Controlled bias laboratory: synthetic multimodal worlds, the three
//! bias injectors with their realized-strength metrics, a simulated
//! biased classifier, and the validity gap check.
//!
//! Worlds place each (class, attribute) cell on its own Gaussian cluster:
//! embedding axis 0 carries the class, axis 1+j carries attribute j, both
//! scaled by `cluster_separation`, with unit noise on every dimension.
//! The simulated classifier errs with probability `group_error` inside
//! the planted (target class, attr=1) group and `base_error` elsewhere.
//! Reports mix filler words with one marker token per active attribute.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::ingest::{Dataset, Sample};

/// Required accuracy gap between attr=0 and attr=1 groups for a simulated
/// failure model to count as valid.
pub const VALIDITY_GAP: f64 = 0.10;

const FILLER_WORDS: &[&str] = &[
    "heart", "lungs", "clear", "chest", "silhouette", "stable", "acute", "process", "effusion",
    "pleural", "focal", "consolidation", "pneumonia", "cardiac", "mediastinal", "contour",
    "osseous", "structures", "interval", "change", "evidence", "disease", "opacity", "aeration",
];
const FILLERS_PER_DOC: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    SpuriousCorrelation,
    RareSlice,
    NoisyLabel,
}

/// Declarative bias-injection parameters. `strength` is the correlation
/// rho, the noise rate, or the rarity ratio R depending on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub target_class: u8,
    pub attr: String,
    pub strength: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub test_underperforming_fraction: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            kind: BiasKind::SpuriousCorrelation,
            target_class: 1,
            attr: "attr0".into(),
            strength: 0.7,
            train_size: 1000,
            test_size: 300,
            test_underperforming_fraction: 0.2,
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_class > 1 {
            return Err(AuditError::InvalidArgument("target_class must be 0 or 1".into()));
        }
        let ok = match self.kind {
            BiasKind::SpuriousCorrelation => self.strength > -1.0 && self.strength < 1.0,
            BiasKind::NoisyLabel => (0.0..=1.0).contains(&self.strength),
            BiasKind::RareSlice => self.strength > 0.0 && self.strength <= 1.0,
        };
        if !ok {
            return Err(AuditError::InvalidArgument(format!(
                "strength {} out of range for {:?}",
                self.strength, self.kind
            )));
        }
        if self.test_underperforming_fraction <= 0.0 || self.test_underperforming_fraction >= 1.0 {
            return Err(AuditError::InvalidArgument(
                "test_underperforming_fraction must lie in (0,1)".into(),
            ));
        }
        if self.train_size < 4 || self.test_size < 4 {
            return Err(AuditError::InvalidArgument("train and test sizes must be >= 4".into()));
        }
        Ok(())
    }
}

/// Synthetic world shape: modalities, cluster geometry, marker tokens,
/// and the simulated classifier's error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldSpec {
    pub n_attrs: usize,
    pub dims: BTreeMap<String, usize>,
    pub cluster_separation: f64,
    pub marker_tokens: BTreeMap<String, String>,
    pub base_error: f64,
    pub group_error: f64,
}

impl Default for SynthWorldSpec {
    fn default() -> Self {
        SynthWorldSpec {
            n_attrs: 2,
            dims: BTreeMap::from([("img".to_string(), 16), ("txt".to_string(), 12)]),
            cluster_separation: 3.0,
            marker_tokens: BTreeMap::from([
                ("attr0".to_string(), "portable".to_string()),
                ("attr1".to_string(), "bedside".to_string()),
            ]),
            base_error: 0.05,
            group_error: 0.6,
        }
    }
}

impl SynthWorldSpec {
    pub fn attr_names(&self) -> Vec<String> {
        (0..self.n_attrs).map(|j| format!("attr{j}")).collect()
    }

    /// Structural checks plus the planted-gap invariant
    /// (`group_error > base_error`).
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.group_error <= self.base_error {
            return Err(AuditError::InvalidArgument(format!(
                "group_error ({}) must exceed base_error ({}) to plant a gap",
                self.group_error, self.base_error
            )));
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        if self.n_attrs == 0 {
            return Err(AuditError::InvalidArgument("n_attrs must be >= 1".into()));
        }
        if self.dims.is_empty() {
            return Err(AuditError::InvalidArgument("world needs at least one modality".into()));
        }
        for (m, d) in &self.dims {
            if *d < 1 + self.n_attrs {
                return Err(AuditError::InvalidArgument(format!(
                    "modality '{m}' dim {d} cannot host class + {} attribute axes",
                    self.n_attrs
                )));
            }
        }
        for attr in self.attr_names() {
            match self.marker_tokens.get(&attr) {
                None => {
                    return Err(AuditError::InvalidArgument(format!(
                        "missing marker token for '{attr}'"
                    )))
                }
                Some(token)
                    if token.len() < 2
                        || !token
                            .chars()
                            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-') =>
                {
                    return Err(AuditError::InvalidArgument(format!(
                        "marker token '{token}' would not survive tokenization"
                    )))
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.base_error) || !(0.0..=1.0).contains(&self.group_error) {
            return Err(AuditError::InvalidArgument("error rates must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Pearson correlation of two binary vectors (the phi coefficient).
pub fn phi_correlation(y: &[u8], attr: &[u8]) -> Result<f64> {
    if y.len() != attr.len() || y.is_empty() {
        return Err(AuditError::InvalidArgument(
            "phi needs two equal-length non-empty vectors".into(),
        ));
    }
    let mut counts = [[0i64; 2]; 2];
    for (&a, &b) in y.iter().zip(attr) {
        counts[a as usize & 1][b as usize & 1] += 1;
    }
    let (n11, n10, n01, n00) = (counts[1][1], counts[1][0], counts[0][1], counts[0][0]);
    let (n1p, n0p, np1, np0) = (n11 + n10, n01 + n00, n11 + n01, n10 + n00);
    if n1p == 0 || n0p == 0 {
        return Err(AuditError::ZeroVariance("first vector is constant".into()));
    }
    if np1 == 0 || np0 == 0 {
        return Err(AuditError::ZeroVariance("second vector is constant".into()));
    }
    let numerator = (n11 * n00 - n10 * n01) as f64;
    Ok(numerator / ((n1p as f64) * (n0p as f64) * (np1 as f64) * (np0 as f64)).sqrt())
}

/// Subsamples `train_size` rows realizing the target correlation between
/// "not the target class" and the attribute, under balanced marginals.
///
/// The symmetric integer table (a, h-a, h-a, a) with h = n/2 realizes
/// phi = 4a/n - 1, so a = round(h(1+rho)/2), adjusted to the nearest value
/// the pool can supply.
pub fn inject_spurious_correlation(pool: &Dataset, spec: &BiasSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != BiasKind::SpuriousCorrelation {
        return Err(AuditError::InvalidArgument("spec.kind must be spurious_correlation".into()));
    }
    let n = spec.train_size;
    let half = n / 2;
    let rem = n - 2 * half;

    let cells = partition_cells(pool, spec)?;
    let ideal = (half as f64 * (1.0 + spec.strength) / 2.0).round() as i64;
    // c11 = a, c10 = half - a, c01 = half - a, c00 = a + rem
    let a_min = (half as i64 - cells[1][0].len() as i64)
        .max(half as i64 - cells[0][1].len() as i64)
        .max(0);
    let a_max = (cells[1][1].len() as i64)
        .min(cells[0][0].len() as i64 - rem as i64)
        .min(half as i64);
    if a_min > a_max {
        return Err(AuditError::Infeasible(format!(
            "pool cells cannot realize phi={} at train_size={n}",
            spec.strength
        )));
    }
    let a = ideal.clamp(a_min, a_max) as usize;
    let want = [[a + rem, half - a], [half - a, a]]; // [yprime][attr]

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for yp in 0..2 {
        for at in 0..2 {
            chosen.extend(pick(&cells[yp][at], want[yp][at], &mut rng));
        }
    }
    subsample(pool, chosen)
}

/// Subsamples so the (target class, attr=1) cell holds share
/// round(R * |class|) / |class| of its class; the other class keeps the
/// pool's attribute proportion.
pub fn inject_rare_slice(pool: &Dataset, spec: &BiasSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != BiasKind::RareSlice {
        return Err(AuditError::InvalidArgument("spec.kind must be rare_slice".into()));
    }
    let n = spec.train_size;
    let n_target = n / 2;
    let n_other = n - n_target;

    // cells indexed by (is target class, attr)
    let cells = partition_cells_by_class(pool, spec)?;
    let rare = (spec.strength * n_target as f64).round() as usize;
    let pool_other_total = cells[0][0].len() + cells[0][1].len();
    if pool_other_total == 0 {
        return Err(AuditError::Infeasible("pool has no samples outside the target class".into()));
    }
    let other_share = cells[0][1].len() as f64 / pool_other_total as f64;
    let other_attr1 = (other_share * n_other as f64).round() as usize;

    let want = [
        [n_other - other_attr1, other_attr1],
        [n_target - rare, rare],
    ];
    for c in 0..2 {
        for at in 0..2 {
            if want[c][at] > cells[c][at].len() {
                return Err(AuditError::Infeasible(format!(
                    "pool cell (class={}, attr={at}) holds {} samples, need {}",
                    if c == 1 { spec.target_class } else { 1 - spec.target_class },
                    cells[c][at].len(),
                    want[c][at]
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for c in 0..2 {
        for at in 0..2 {
            chosen.extend(pick(&cells[c][at], want[c][at], &mut rng));
        }
    }
    subsample(pool, chosen)
}

/// Flips the labels of exactly round(rate * |group|) uniformly chosen
/// members of the (target class, attr=1) group. Every sample gains a
/// 0/1 "flipped" tag recording the flip set.
pub fn inject_label_noise(dataset: &Dataset, spec: &BiasSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind != BiasKind::NoisyLabel {
        return Err(AuditError::InvalidArgument("spec.kind must be noisy_label".into()));
    }
    let group: Vec<usize> = (0..dataset.len())
        .map(|i| -> Result<(usize, bool)> {
            let s = &dataset.samples[i];
            let tag = require_tag(s, &spec.attr)?;
            Ok((i, s.label == spec.target_class && tag == 1))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter_map(|(i, in_group)| in_group.then_some(i))
        .collect();

    let flips = (spec.strength * group.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip_set: std::collections::BTreeSet<usize> =
        pick(&group, flips, &mut rng).into_iter().collect();

    let mut out = dataset.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        let flipped = flip_set.contains(&i);
        if flipped {
            s.label = 1 - s.label;
        }
        s.group_tags
            .get_or_insert_with(BTreeMap::new)
            .insert("flipped".to_string(), u8::from(flipped));
    }
    Ok(out)
}

/// Generates a (train, test) pair: train realizes the requested bias via
/// the matching injector over a generated pool; test holds exactly
/// round(fraction * test_size) planted-group samples with simulated
/// predictions. Train and test ids are disjoint.
pub fn synth_world(
    world: &SynthWorldSpec,
    bias: &BiasSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    world.validate_structure()?;
    bias.validate()?;
    if !world.marker_tokens.contains_key(&bias.attr) {
        return Err(AuditError::MissingAttribute {
            attr: bias.attr.clone(),
            reason: "bias attribute is not a world attribute".into(),
        });
    }
    let planted = (bias.test_underperforming_fraction * bias.test_size as f64).round() as usize;
    let n_target = bias.test_size / 2;
    let n_other = bias.test_size - n_target;
    if planted == 0 || planted > n_target || planted > n_other {
        return Err(AuditError::Infeasible(format!(
            "cannot place {planted} planted samples in a test set of {} per class",
            n_target.min(n_other)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // pool large enough for any feasible injector cell table
    let pool_size = 3 * bias.train_size;
    let mut pool_samples = Vec::with_capacity(pool_size);
    for i in 0..pool_size {
        let y = (i % 2) as u8;
        pool_samples.push(gen_sample(
            format!("tr-{i:05}"),
            y,
            None,
            world,
            bias,
            &mut rng,
        ));
    }
    let pool = Dataset::new(pool_samples)?;

    let train = match bias.kind {
        BiasKind::SpuriousCorrelation => inject_spurious_correlation(&pool, bias, seed ^ 1)?,
        BiasKind::RareSlice => inject_rare_slice(&pool, bias, seed ^ 1)?,
        BiasKind::NoisyLabel => {
            let base = subsample(&pool, (0..bias.train_size).collect())?;
            inject_label_noise(&base, bias, seed ^ 1)?
        }
    };

    // test cells: planted (target, attr=1), then the same attribute
    // prevalence mirrored into the other class
    let mut cell_specs = Vec::with_capacity(bias.test_size);
    for c in 0..2u8 {
        let (size, attr1) = if c == 1 {
            (n_target, planted)
        } else {
            (n_other, planted)
        };
        let y = if c == 1 { bias.target_class } else { 1 - bias.target_class };
        for k in 0..size {
            cell_specs.push((y, u8::from(k < attr1)));
        }
    }
    cell_specs.shuffle(&mut rng);

    let test_samples = cell_specs
        .into_iter()
        .enumerate()
        .map(|(i, (y, attr_bit))| {
            gen_sample(format!("te-{i:04}"), y, Some(attr_bit), world, bias, &mut rng)
        })
        .collect();
    let test = Dataset::new(test_samples)?;
    Ok((train, test))
}

/// True iff accuracy(attr=0) - accuracy(attr=1) >= the 10% validity gap.
/// Computed in integer arithmetic so the boundary is exact.
pub fn validity_check(dataset: &Dataset, attr: &str) -> Result<bool> {
    let mut n = [0i64; 2];
    let mut correct = [0i64; 2];
    for s in &dataset.samples {
        let tag = require_tag(s, attr)? as usize;
        n[tag] += 1;
        correct[tag] += i64::from(!s.is_error());
    }
    if n[0] == 0 || n[1] == 0 {
        return Ok(false);
    }
    // c0/n0 - c1/n1 >= 1/10  <=>  10*(c0*n1 - c1*n0) >= n0*n1
    Ok(10 * (correct[0] * n[1] - correct[1] * n[0]) >= n[0] * n[1])
}

/// Deterministic token-vector table for a world's marker and filler
/// tokens: marker j lies on embedding axis 1+j (the axis its attribute
/// shifts), fillers get hashed pseudo-random unit directions.
pub fn token_embeddings(world: &SynthWorldSpec, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    if dim < 1 + world.n_attrs {
        return Err(AuditError::InvalidArgument(format!(
            "dim {dim} cannot host class + {} attribute axes",
            world.n_attrs
        )));
    }
    let mut table = BTreeMap::new();
    for (j, attr) in world.attr_names().iter().enumerate() {
        if let Some(token) = world.marker_tokens.get(attr) {
            let mut v = vec![0.0; dim];
            v[1 + j] = 1.0;
            table.insert(token.clone(), v);
        }
    }
    for filler in FILLER_WORDS {
        table.entry(filler.to_string()).or_insert_with(|| hashed_unit_vector(filler, dim));
    }
    Ok(table)
}

fn hashed_unit_vector(token: &str, dim: usize) -> Vec<f64> {
    // FNV-1a over the token bytes seeds a private stream
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// One synthetic sample. Draw order per sample is fixed: attribute bits,
/// then per-modality noise, then the prediction coin, then report words.
fn gen_sample(
    id: String,
    y: u8,
    forced_bias_attr: Option<u8>,
    world: &SynthWorldSpec,
    bias: &BiasSpec,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let attr_names = world.attr_names();
    let mut bits = Vec::with_capacity(world.n_attrs);
    for name in &attr_names {
        let bit = if *name == bias.attr {
            match forced_bias_attr {
                Some(b) => b,
                None => u8::from(rng.random::<f64>() < 0.5),
            }
        } else {
            u8::from(rng.random::<f64>() < 0.5)
        };
        bits.push(bit);
    }

    let sep = world.cluster_separation;
    let mut views = BTreeMap::new();
    for (modality, &dim) in &world.dims {
        let mut v = vec![0.0; dim];
        v[0] = sep * y as f64;
        for (j, &bit) in bits.iter().enumerate() {
            v[1 + j] = sep * bit as f64;
        }
        for x in v.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *x += noise;
        }
        views.insert(modality.clone(), v);
    }

    let bias_idx = attr_names.iter().position(|n| *n == bias.attr).expect("validated");
    let in_group = y == bias.target_class && bits[bias_idx] == 1;
    let err_prob = if in_group { world.group_error } else { world.base_error };
    let wrong = rng.random::<f64>() < err_prob;
    let prediction = if wrong { 1 - y } else { y };

    // distinct fillers via partial Fisher-Yates, then a marker per active
    // attribute at a random position
    let mut filler_idx: Vec<usize> = (0..FILLER_WORDS.len()).collect();
    for k in 0..FILLERS_PER_DOC {
        let swap = rng.random_range(k..filler_idx.len());
        filler_idx.swap(k, swap);
    }
    let mut words: Vec<String> = filler_idx[..FILLERS_PER_DOC]
        .iter()
        .map(|&f| FILLER_WORDS[f].to_string())
        .collect();
    for (j, name) in attr_names.iter().enumerate() {
        if bits[j] == 1 {
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, world.marker_tokens[name].clone());
        }
    }

    let group_tags: BTreeMap<String, u8> = attr_names
        .iter()
        .cloned()
        .zip(bits.iter().copied())
        .collect();

    Sample {
        id,
        views,
        label: y,
        prediction,
        report_text: Some(words.join(" ")),
        metadata: None,
        group_tags: Some(group_tags),
    }
}

/// Pool indices split by (Y', attr) where Y' = 1 iff the sample is NOT in
/// the target class.
fn partition_cells(pool: &Dataset, spec: &BiasSpec) -> Result<[[Vec<usize>; 2]; 2]> {
    let mut cells: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, s) in pool.samples.iter().enumerate() {
        let tag = require_tag(s, &spec.attr)?;
        let yprime = u8::from(s.label != spec.target_class);
        cells[yprime as usize][tag as usize].push(i);
    }
    Ok(cells)
}

/// Pool indices split by (is target class, attr).
fn partition_cells_by_class(pool: &Dataset, spec: &BiasSpec) -> Result<[[Vec<usize>; 2]; 2]> {
    let mut cells: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, s) in pool.samples.iter().enumerate() {
        let tag = require_tag(s, &spec.attr)?;
        let is_target = u8::from(s.label == spec.target_class);
        cells[is_target as usize][tag as usize].push(i);
    }
    Ok(cells)
}

fn require_tag(sample: &Sample, attr: &str) -> Result<u8> {
    sample.group_tag(attr).ok_or_else(|| AuditError::MissingAttribute {
        attr: attr.to_string(),
        reason: format!("sample '{}' has no tag", sample.id),
    })
}

/// Seeded choice of `count` members without replacement.
fn pick(cell: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(count <= cell.len());
    let mut indices: Vec<usize> = cell.to_vec();
    for k in 0..count {
        let swap = rng.random_range(k..indices.len());
        indices.swap(k, swap);
    }
    indices.truncate(count);
    indices
}

/// Clones the selected rows in pool order.
fn subsample(pool: &Dataset, mut chosen: Vec<usize>) -> Result<Dataset> {
    chosen.sort_unstable();
    let samples = chosen.into_iter().map(|i| pool.samples[i].clone()).collect();
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn phi_of_identical_vectors_is_one() {
        let v = vec![0, 1, 0, 1];
        assert_abs_diff_eq!(phi_correlation(&v, &v).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_of_balanced_independent_vectors_is_zero() {
        let y = vec![0, 0, 1, 1];
        let attr = vec![0, 1, 0, 1];
        assert_abs_diff_eq!(phi_correlation(&y, &attr).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_hand_evaluated_table() {
        // n11=35, n10=15, n01=15, n00=35
        let mut y = Vec::new();
        let mut attr = Vec::new();
        for (count, (a, b)) in [(35, (1, 1)), (15, (1, 0)), (15, (0, 1)), (35, (0, 0))] {
            for _ in 0..count {
                y.push(a);
                attr.push(b);
            }
        }
        assert_abs_diff_eq!(phi_correlation(&y, &attr).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn phi_rejects_constant_vectors() {
        let err = phi_correlation(&[1, 1, 1], &[0, 1, 0]).unwrap_err();
        assert!(err.to_string().contains("zero variance"), "{err}");
    }

    fn default_pool(seed: u64, kind: BiasKind) -> (Dataset, BiasSpec) {
        let world = SynthWorldSpec::default();
        let bias = BiasSpec {
            kind,
            train_size: 200,
            test_size: 40,
            strength: match kind {
                BiasKind::SpuriousCorrelation => 0.4,
                BiasKind::RareSlice => 0.1,
                BiasKind::NoisyLabel => 0.3,
            },
            ..BiasSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..800)
            .map(|i| gen_sample(format!("p-{i:04}"), (i % 2) as u8, None, &world, &bias, &mut rng))
            .collect();
        (Dataset::new(samples).unwrap(), bias)
    }

    /// Realized correlation between "not target class" and the attribute.
    fn realized_phi(ds: &Dataset, spec: &BiasSpec) -> f64 {
        let yprime: Vec<u8> = ds
            .samples
            .iter()
            .map(|s| u8::from(s.label != spec.target_class))
            .collect();
        let attr: Vec<u8> = ds
            .samples
            .iter()
            .map(|s| s.group_tag(&spec.attr).unwrap())
            .collect();
        phi_correlation(&yprime, &attr).unwrap()
    }

    #[test]
    fn spurious_injection_exact_table_at_0_4() {
        let (pool, bias) = default_pool(1, BiasKind::SpuriousCorrelation);
        let train = inject_spurious_correlation(&pool, &bias, 9).unwrap();
        assert_eq!(train.len(), 200);
        let mut counts = [[0usize; 2]; 2];
        for s in &train.samples {
            let yprime = u8::from(s.label != bias.target_class);
            counts[yprime as usize][s.group_tag(&bias.attr).unwrap() as usize] += 1;
        }
        assert_eq!(
            [counts[1][1], counts[1][0], counts[0][1], counts[0][0]],
            [70, 30, 30, 70]
        );
        assert_abs_diff_eq!(realized_phi(&train, &bias), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn spurious_injection_zero_strength_is_independent() {
        let (pool, mut bias) = default_pool(2, BiasKind::SpuriousCorrelation);
        bias.strength = 0.0;
        let train = inject_spurious_correlation(&pool, &bias, 5).unwrap();
        assert!(realized_phi(&train, &bias).abs() <= 0.05);
    }

    #[test]
    fn spurious_injection_infeasible_pool() {
        let (pool, mut bias) = default_pool(3, BiasKind::SpuriousCorrelation);
        bias.train_size = 4000; // pool holds only 800 samples
        assert!(matches!(
            inject_spurious_correlation(&pool, &bias, 0).unwrap_err(),
            AuditError::Infeasible(_)
        ));
    }

    #[test]
    fn rare_injection_counts_are_exact() {
        let (pool, mut bias) = default_pool(4, BiasKind::RareSlice);
        bias.strength = 0.02;
        bias.train_size = 200; // 100 per class -> 2 rare samples
        let train = inject_rare_slice(&pool, &bias, 7).unwrap();
        let rare = train
            .samples
            .iter()
            .filter(|s| s.label == bias.target_class && s.group_tag(&bias.attr) == Some(1))
            .count();
        assert_eq!(rare, 2);
        let class = train.samples.iter().filter(|s| s.label == bias.target_class).count();
        assert_eq!(class, 100);
    }

    #[test]
    fn rare_injection_saturates_at_one() {
        let (pool, mut bias) = default_pool(5, BiasKind::RareSlice);
        bias.strength = 1.0;
        bias.train_size = 120;
        let train = inject_rare_slice(&pool, &bias, 3).unwrap();
        assert!(train
            .samples
            .iter()
            .filter(|s| s.label == bias.target_class)
            .all(|s| s.group_tag(&bias.attr) == Some(1)));
    }

    #[test]
    fn rare_injection_midpoint_share() {
        let (pool, mut bias) = default_pool(6, BiasKind::RareSlice);
        bias.strength = 0.5;
        bias.train_size = 200;
        let train = inject_rare_slice(&pool, &bias, 11).unwrap();
        let class: Vec<_> =
            train.samples.iter().filter(|s| s.label == bias.target_class).collect();
        let attr1 = class.iter().filter(|s| s.group_tag(&bias.attr) == Some(1)).count();
        assert_eq!(attr1 * 2, class.len());
    }

    #[test]
    fn noise_injection_flips_exact_count() {
        let (pool, bias) = default_pool(7, BiasKind::NoisyLabel);
        let group: Vec<String> = pool
            .samples
            .iter()
            .filter(|s| s.label == bias.target_class && s.group_tag(&bias.attr) == Some(1))
            .map(|s| s.id.clone())
            .collect();
        let noisy = inject_label_noise(&pool, &bias, 13).unwrap();
        let expected = (0.3 * group.len() as f64).round() as usize;
        let flipped: Vec<&Sample> = noisy
            .samples
            .iter()
            .filter(|s| s.group_tag("flipped") == Some(1))
            .collect();
        assert_eq!(flipped.len(), expected);
        for s in &flipped {
            assert!(group.contains(&s.id));
            assert_eq!(s.label, 1 - bias.target_class);
        }
        // untouched samples keep everything
        for (a, b) in pool.samples.iter().zip(noisy.samples.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.views, b.views);
            if b.group_tag("flipped") == Some(0) {
                assert_eq!(a.label, b.label);
            }
        }
    }

    #[test]
    fn noise_injection_rate_zero_changes_nothing() {
        let (pool, mut bias) = default_pool(8, BiasKind::NoisyLabel);
        bias.strength = 0.0;
        let noisy = inject_label_noise(&pool, &bias, 1).unwrap();
        for (a, b) in pool.samples.iter().zip(noisy.samples.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!(b.group_tag("flipped"), Some(0));
        }
    }

    #[test]
    fn noise_injection_rate_one_flips_whole_group() {
        let (pool, mut bias) = default_pool(9, BiasKind::NoisyLabel);
        bias.strength = 1.0;
        let noisy = inject_label_noise(&pool, &bias, 2).unwrap();
        let group_size = pool
            .samples
            .iter()
            .filter(|s| s.label == bias.target_class && s.group_tag(&bias.attr) == Some(1))
            .count();
        let flipped =
            noisy.samples.iter().filter(|s| s.group_tag("flipped") == Some(1)).count();
        assert_eq!(flipped, group_size);
    }

    #[test]
    fn injectors_are_deterministic() {
        let (pool, bias) = default_pool(10, BiasKind::SpuriousCorrelation);
        let a = inject_spurious_correlation(&pool, &bias, 42).unwrap();
        let b = inject_spurious_correlation(&pool, &bias, 42).unwrap();
        assert_eq!(a, b);
        let c = inject_spurious_correlation(&pool, &bias, 43).unwrap();
        assert_ne!(a.ids(), c.ids());
    }

    #[test]
    fn injectors_never_touch_embeddings() {
        let (pool, bias) = default_pool(11, BiasKind::RareSlice);
        let train = inject_rare_slice(&pool, &bias, 21).unwrap();
        let by_id: BTreeMap<&str, &Sample> =
            pool.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        for s in &train.samples {
            assert_eq!(s.views, by_id[s.id.as_str()].views);
        }
    }

    #[test]
    fn world_generates_disjoint_train_test() {
        let world = SynthWorldSpec::default();
        let bias = BiasSpec {
            train_size: 100,
            test_size: 60,
            ..BiasSpec::default()
        };
        let (train, test) = synth_world(&world, &bias, 3).unwrap();
        assert_eq!(test.len(), 60);
        let train_ids: std::collections::BTreeSet<_> = train.ids().into_iter().collect();
        assert!(test.ids().iter().all(|id| !train_ids.contains(id)));

        let planted = test
            .samples
            .iter()
            .filter(|s| s.label == bias.target_class && s.group_tag(&bias.attr) == Some(1))
            .count();
        assert_eq!(planted, 12); // round(0.2 * 60)
    }

    #[test]
    fn world_is_deterministic() {
        let world = SynthWorldSpec::default();
        let bias = BiasSpec {
            train_size: 80,
            test_size: 40,
            ..BiasSpec::default()
        };
        let a = synth_world(&world, &bias, 17).unwrap();
        let b = synth_world(&world, &bias, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn world_reports_carry_markers() {
        let world = SynthWorldSpec::default();
        let bias = BiasSpec {
            train_size: 80,
            test_size: 40,
            ..BiasSpec::default()
        };
        let (_, test) = synth_world(&world, &bias, 5).unwrap();
        for s in &test.samples {
            let text = s.report_text.as_ref().unwrap();
            let has_marker = text.split(' ').any(|w| w == "portable");
            assert_eq!(has_marker, s.group_tag("attr0") == Some(1), "sample {}", s.id);
        }
    }

    #[test]
    fn validity_boundary_is_exact() {
        // attr=0 group: 10 samples all correct; attr=1 group: 10 samples,
        // 9 correct -> gap exactly 0.10
        let mk = |id: usize, tag: u8, correct: bool| Sample {
            id: format!("s{id}"),
            views: BTreeMap::from([("img".to_string(), vec![0.0])]),
            label: 1,
            prediction: if correct { 1 } else { 0 },
            report_text: None,
            metadata: None,
            group_tags: Some(BTreeMap::from([("device".to_string(), tag)])),
        };
        let mut samples = Vec::new();
        for i in 0..10 {
            samples.push(mk(i, 0, true));
        }
        for i in 10..20 {
            samples.push(mk(i, 1, i != 10));
        }
        let ds = Dataset::new(samples).unwrap();
        assert!(validity_check(&ds, "device").unwrap(), "gap 0.10 counts");

        // 100-sample groups, 9 errors in attr=1 -> gap 0.09
        let mut samples = Vec::new();
        for i in 0..100 {
            samples.push(mk(i, 0, true));
        }
        for i in 100..200 {
            samples.push(mk(i, 1, i >= 109));
        }
        let ds = Dataset::new(samples).unwrap();
        assert!(!validity_check(&ds, "device").unwrap(), "gap 0.09 fails");
    }

    #[test]
    fn perfect_classifier_is_invalid() {
        let world = SynthWorldSpec {
            base_error: 0.0,
            group_error: 0.0,
            ..SynthWorldSpec::default()
        };
        let bias = BiasSpec {
            train_size: 80,
            test_size: 40,
            ..BiasSpec::default()
        };
        let (_, test) = synth_world(&world, &bias, 1).unwrap();
        assert!(!validity_check(&test, &bias.attr).unwrap());
    }

    #[test]
    fn equal_error_rates_fail_validity() {
        // group_error == base_error: constructible directly, but the
        // planted gap vanishes and the world fails validity almost surely
        let world = SynthWorldSpec {
            base_error: 0.1,
            group_error: 0.1,
            ..SynthWorldSpec::default()
        };
        assert!(world.validate().is_err(), "config-level validation rejects it");
        let bias = BiasSpec {
            train_size: 100,
            test_size: 100,
            ..BiasSpec::default()
        };
        let mut valid = 0;
        for seed in 0..10 {
            let (_, test) = synth_world(&world, &bias, seed).unwrap();
            valid += i32::from(validity_check(&test, &bias.attr).unwrap());
        }
        assert!(valid <= 2, "no planted gap should rarely pass validity, got {valid}/10");
    }

    #[test]
    fn default_fixture_gap_holds_across_seeds() {
        let world = SynthWorldSpec::default();
        let bias = BiasSpec::default();
        let mut valid = 0;
        for seed in 0..20 {
            let (_, test) = synth_world(&world, &bias, seed).unwrap();
            valid += i32::from(validity_check(&test, &bias.attr).unwrap());
        }
        assert!(valid >= 19, "validity in >= 95% of seeds, got {valid}/20");
    }

    #[test]
    fn marker_token_table_aligns_with_attr_axes() {
        let world = SynthWorldSpec::default();
        let table = token_embeddings(&world, 16).unwrap();
        assert_eq!(table["portable"][1], 1.0);
        assert_eq!(table["bedside"][2], 1.0);
        for filler in FILLER_WORDS {
            let v = &table[*filler];
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
        // stable across calls
        assert_eq!(table, token_embeddings(&world, 16).unwrap());
    }
}
